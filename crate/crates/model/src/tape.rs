//! Dense row-major matrices and a reverse-mode autodiff tape.
//!
//! Every forward pass records its operations on a fresh [`Tape`]; calling
//! [`Tape::backward`] on a scalar node returns gradients for every parameter
//! that took part. All arithmetic is `f64` and strictly sequential, so the
//! same inputs always produce bit-identical outputs.

use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix shape does not match data");
        Mat { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Mat {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `a · b`
pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows, "matmul shape mismatch {:?} x {:?}", a.shape(), b.shape());
    let mut out = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    out
}

/// `a · bᵀ`
fn matmul_bt(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.cols);
    let mut out = Mat::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = arow.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ · b`
fn matmul_at(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.rows, b.rows);
    let mut out = Mat::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let brow = b.row(k);
        for i in 0..a.cols {
            let aki = a.data[k * a.cols + i];
            if aki == 0.0 {
                continue;
            }
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aki * bv;
            }
        }
    }
    out
}

pub fn transpose(a: &Mat) -> Mat {
    let mut out = Mat::zeros(a.cols, a.rows);
    for r in 0..a.rows {
        for c in 0..a.cols {
            out.data[c * a.rows + r] = a.data[r * a.cols + c];
        }
    }
    out
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    /// Adds a `1 × c` row to every row.
    AddRow(Var, Var),
    /// Multiplies every row elementwise by a `1 × c` row.
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Transpose(Var),
    SoftmaxRows(Var),
    /// Per-row standardization; stores each row's inverse std.
    LayerNormRows(Var, Vec<f64>),
    /// Output row `p` is the concatenation of `blocks` source rows
    /// `idx[p*blocks + k]`, with `None` meaning a zero row.
    Gather {
        src: Var,
        idx: Vec<Option<usize>>,
        blocks: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    /// Mean cross-entropy of each row against its target; stores softmax.
    CrossEntropy(Var, Vec<usize>, Mat),
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        debug_assert!(value.data.iter().all(|v| !v.is_nan()), "NaN produced by {op:?}");
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Constant)
    }

    /// The tape node holding parameter `id` (created once per tape).
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(Some(v)) = self.param_vars.get(id.0) {
            return *v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id));
        if self.param_vars.len() <= id.0 {
            self.param_vars.resize(id.0 + 1, None);
        }
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = matmul(self.value(a), self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "add shape mismatch");
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p + q).collect();
        let v = Mat::from_vec(x.rows, x.cols, data);
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!((r.rows, r.cols), (1, x.cols), "add_row shape mismatch");
        let mut v = x.clone();
        for i in 0..v.rows {
            for (o, b) in v.row_mut(i).iter_mut().zip(&r.data) {
                *o += b;
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!((r.rows, r.cols), (1, x.cols), "mul_row shape mismatch");
        let mut v = x.clone();
        for i in 0..v.rows {
            for (o, g) in v.row_mut(i).iter_mut().zip(&r.data) {
                *o *= g;
            }
        }
        self.push(v, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let x = self.value(a);
        let v = Mat::from_vec(x.rows, x.cols, x.data.iter().map(|p| p * s).collect());
        self.push(v, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Mat::from_vec(x.rows, x.cols, x.data.iter().map(|p| p.max(0.0)).collect());
        self.push(v, Op::Relu(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = transpose(self.value(a));
        self.push(v, Op::Transpose(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = Mat::zeros(x.rows, x.cols);
        for r in 0..x.rows {
            v.row_mut(r).copy_from_slice(&softmax(x.row(r)));
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.cols as f64;
        let mut v = Mat::zeros(x.rows, x.cols);
        let mut inv_std = Vec::with_capacity(x.rows);
        for r in 0..x.rows {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, p) in v.row_mut(r).iter_mut().zip(row) {
                *o = (p - mean) * inv;
            }
            inv_std.push(inv);
        }
        self.push(v, Op::LayerNormRows(a, inv_std))
    }

    pub fn gather(&mut self, src: Var, idx: Vec<Option<usize>>, blocks: usize) -> Var {
        assert!(blocks > 0 && idx.len().is_multiple_of(blocks), "gather index length");
        let x = self.value(src);
        let rows = idx.len() / blocks;
        let mut v = Mat::zeros(rows, blocks * x.cols);
        for (k, i) in idx.iter().enumerate() {
            if let Some(i) = *i {
                let (p, b) = (k / blocks, k % blocks);
                let start = p * v.cols + b * x.cols;
                v.data[start..start + x.cols].copy_from_slice(x.row(i));
            }
        }
        self.push(v, Op::Gather { src, idx, blocks })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols, cols, "concat_rows width mismatch");
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut v = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows, rows, "concat_cols height mismatch");
            for r in 0..rows {
                v.data[r * cols + off..r * cols + off + m.cols].copy_from_slice(m.row(r));
            }
            off += m.cols;
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols, "slice out of range");
        let mut v = Mat::zeros(x.rows, len);
        for r in 0..x.rows {
            v.row_mut(r).copy_from_slice(&x.row(r)[start..start + len]);
        }
        self.push(v, Op::SliceCols(a, start))
    }

    /// Mean over rows of `-log softmax(logits_row)[target_row]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let x = self.value(logits);
        assert_eq!(x.rows, targets.len(), "one target per row");
        let mut probs = Mat::zeros(x.rows, x.cols);
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = x.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|p| (p - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            for (o, p) in probs.row_mut(r).iter_mut().zip(row) {
                *o = (p - lse).exp();
            }
        }
        let v = Mat::from_vec(1, 1, vec![loss / x.rows as f64]);
        self.push(v, Op::CrossEntropy(logits, targets.to_vec(), probs))
    }

    /// Back-propagates from the `1 × 1` node `loss`; returns one gradient
    /// per parameter of `store` (zeros for parameters not on the tape).
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Vec<Mat> {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::from_vec(1, 1, vec![1.0]));
        let mut out: Vec<Mat> = store.iter().map(|(_, m)| Mat::zeros(m.rows, m.cols)).collect();

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => out[id.0].add_assign(&g),
                Op::MatMul(a, b) => {
                    let ga = matmul_bt(&g, self.value(*b));
                    let gb = matmul_at(self.value(*a), &g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::AddRow(a, row) => {
                    let mut gr = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (o, p) in gr.data.iter_mut().zip(g.row(r)) {
                            *o += p;
                        }
                    }
                    acc(&mut grads, *a, g);
                    acc(&mut grads, *row, gr);
                }
                Op::MulRow(a, row) => {
                    let x = self.value(*a);
                    let w = self.value(*row);
                    let mut ga = g.clone();
                    let mut gw = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            ga.data[r * g.cols + c] *= w.data[c];
                            gw.data[c] += g.data[r * g.cols + c] * x.data[r * g.cols + c];
                        }
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *row, gw);
                }
                Op::Scale(a, s) => {
                    let ga = Mat::from_vec(g.rows, g.cols, g.data.iter().map(|p| p * s).collect());
                    acc(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let data = g.data.iter().zip(&x.data).map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 }).collect();
                    acc(&mut grads, *a, Mat::from_vec(g.rows, g.cols, data));
                }
                Op::Transpose(a) => acc(&mut grads, *a, transpose(&g)),
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Mat::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for (o, (yv, gv)) in ga.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = yv * (gv - dot);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNormRows(a, inv_std) => {
                    let y = &node.value;
                    let n = g.cols as f64;
                    let mut ga = Mat::zeros(g.rows, g.cols);
                    #[allow(clippy::needless_range_loop)] // r indexes four row-aligned buffers
                    for r in 0..g.rows {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let mean_g = gr.iter().sum::<f64>() / n;
                        let mean_gy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / n;
                        for (o, (gv, yv)) in ga.row_mut(r).iter_mut().zip(gr.iter().zip(yr)) {
                            *o = inv_std[r] * (gv - mean_g - yv * mean_gy);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Gather { src, idx, blocks } => {
                    let x = self.value(*src);
                    let mut gs = Mat::zeros(x.rows, x.cols);
                    for (k, i) in idx.iter().enumerate() {
                        if let Some(i) = *i {
                            let (p, b) = (k / blocks, k % blocks);
                            let start = p * g.cols + b * x.cols;
                            for (o, q) in gs.row_mut(i).iter_mut().zip(&g.data[start..start + x.cols]) {
                                *o += q;
                            }
                        }
                    }
                    acc(&mut grads, *src, gs);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (rows, cols) = self.shape(p);
                        let part = Mat::from_vec(rows, cols, g.data[off * cols..(off + rows) * cols].to_vec());
                        acc(&mut grads, p, part);
                        off += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (rows, cols) = self.shape(p);
                        let mut part = Mat::zeros(rows, cols);
                        for r in 0..rows {
                            part.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                        }
                        acc(&mut grads, p, part);
                        off += cols;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (rows, cols) = self.shape(*a);
                    let mut ga = Mat::zeros(rows, cols);
                    for r in 0..rows {
                        ga.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::CrossEntropy(a, targets, probs) => {
                    let scale = g.data[0] / targets.len() as f64;
                    let mut ga = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        ga.data[r * ga.cols + t] -= 1.0;
                    }
                    for p in &mut ga.data {
                        *p *= scale;
                    }
                    acc(&mut grads, *a, ga);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    /// Finite-difference check of `f` w.r.t. every entry of every parameter.
    fn check(store: &mut ParamStore, f: &dyn Fn(&mut Tape, &ParamStore) -> Var) {
        let mut tape = Tape::new();
        let loss = f(&mut tape, store);
        let grads = tape.backward(loss, store);
        let h = 1e-6;
        for (pi, g) in grads.iter().enumerate() {
            for k in 0..g.data.len() {
                let id = ParamId(pi);
                let orig = store.get(id).data[k];
                store.get_mut(id).data[k] = orig + h;
                let mut t = Tape::new();
                let v = f(&mut t, store);
                let up = t.value(v).data[0];
                store.get_mut(id).data[k] = orig - h;
                let mut t = Tape::new();
                let v = f(&mut t, store);
                let down = t.value(v).data[0];
                store.get_mut(id).data[k] = orig;
                let numeric = (up - down) / (2.0 * h);
                let rel = (numeric - g.data[k]).abs() / (numeric.abs() + g.data[k].abs()).max(1e-6);
                assert!(rel < 1e-5, "param {pi}[{k}]: analytic {} numeric {numeric}", g.data[k]);
            }
        }
    }

    fn store_with(shapes: &[(usize, usize)]) -> ParamStore {
        let mut s = ParamStore::default();
        for (i, &(r, c)) in shapes.iter().enumerate() {
            let data = (0..r * c).map(|k| ((k * 7 + i * 3) % 11) as f64 / 5.0 - 1.0).collect();
            s.insert(&format!("p{i}"), Mat::from_vec(r, c, data));
        }
        s
    }

    #[test]
    fn matmul_matches_hand_example() {
        let a = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Mat::from_rows(&[vec![5.0], vec![6.0]]);
        assert_eq!(matmul(&a, &b).data, vec![17.0, 39.0]);
        assert_eq!(matmul_bt(&a, &a).data, vec![5.0, 11.0, 11.0, 25.0]);
        assert_eq!(matmul_at(&a, &a).data, vec![10.0, 14.0, 14.0, 20.0]);
    }

    #[test]
    fn gradients_of_every_op() {
        let mut store = store_with(&[(3, 4), (4, 2), (1, 2), (1, 4), (3, 4)]);
        check(&mut store, &|t, s| {
            let x = t.param(s, ParamId(0));
            let w = t.param(s, ParamId(1));
            let b = t.param(s, ParamId(2));
            let g = t.param(s, ParamId(3));
            let y = t.param(s, ParamId(4));
            let xy = t.add(x, y);
            let ln = t.layer_norm_rows(xy);
            let ln = t.mul_row(ln, g);
            let h = t.matmul(ln, w);
            let h = t.add_row(h, b);
            let h = t.relu(h);
            let sm = t.softmax_rows(h);
            let tr = t.transpose(sm);
            let sc = t.scale(tr, 0.7);
            let gathered = t.gather(x, vec![Some(2), None, Some(0), Some(2)], 2);
            let left = t.slice_cols(gathered, 1, 5);
            let cc = t.concat_cols(&[sc, left]);
            let cr = t.concat_rows(&[cc, cc]);
            let logits = t.slice_cols(cr, 0, 3);
            t.cross_entropy(logits, &[0, 2, 1, 1])
        });
    }

    #[test]
    fn softmax_is_normalized_and_stable() {
        let p = softmax(&[1000.0, 1000.0, -1000.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(p[0], p[1]);
    }
}
