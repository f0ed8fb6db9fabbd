//! The trimodal network (Fig. 3): per-modality encoders, positional
//! temporal self-attention encoders, prediction heads and linear fusion,
//! expressed as operations on a [`Tape`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{FusionMode, ModelConfig};
use crate::params::{ParamBuilder, ParamId, ParamStore};
use crate::tape::{Mat, Tape, Var};

/// Additive attention bias for disallowed query/key pairs. Large enough
/// that `exp` underflows to exactly zero.
const MASKED: f64 = -1e9;

pub const CROP_SIDE: usize = 48;

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    fn new(pb: &mut ParamBuilder, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: pb.weight(&format!("{name}.w"), fan_in, fan_out),
            b: pb.filled(&format!("{name}.b"), 1, fan_out, 0.0),
        }
    }

    pub fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var) -> Var {
        let w = t.param(s, self.w);
        let b = t.param(s, self.b);
        let y = t.matmul(x, w);
        t.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    fn new(pb: &mut ParamBuilder, name: &str, d: usize) -> Self {
        LayerNorm {
            gain: pb.filled(&format!("{name}.gain"), 1, d, 1.0),
            bias: pb.filled(&format!("{name}.bias"), 1, d, 0.0),
        }
    }

    fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var) -> Var {
        let g = t.param(s, self.gain);
        let b = t.param(s, self.bias);
        let n = t.layer_norm_rows(x);
        let n = t.mul_row(n, g);
        t.add_row(n, b)
    }
}

/// Post-LN transformer block: `x = LN(x + MHA(x)); x = LN(x + FFN(x))`.
#[derive(Debug, Clone)]
struct EncoderLayer {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    ln2: LayerNorm,
    heads: usize,
}

impl EncoderLayer {
    fn new(pb: &mut ParamBuilder, name: &str, d: usize, heads: usize) -> Self {
        EncoderLayer {
            q: Linear::new(pb, &format!("{name}.q"), d, d),
            k: Linear::new(pb, &format!("{name}.k"), d, d),
            v: Linear::new(pb, &format!("{name}.v"), d, d),
            o: Linear::new(pb, &format!("{name}.o"), d, d),
            ln1: LayerNorm::new(pb, &format!("{name}.ln1"), d),
            ff1: Linear::new(pb, &format!("{name}.ff1"), d, 2 * d),
            ff2: Linear::new(pb, &format!("{name}.ff2"), 2 * d, d),
            ln2: LayerNorm::new(pb, &format!("{name}.ln2"), d),
            heads,
        }
    }

    /// `bias` is the `n × n` additive attention mask.
    fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var, bias: Var) -> Var {
        let d = t.shape(x).1;
        let dh = d / self.heads;
        let q = self.q.forward(t, s, x);
        let k = self.k.forward(t, s, x);
        let v = self.v.forward(t, s, x);
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = t.slice_cols(q, h * dh, dh);
            let kh = t.slice_cols(k, h * dh, dh);
            let vh = t.slice_cols(v, h * dh, dh);
            let kt = t.transpose(kh);
            let scores = t.matmul(qh, kt);
            let scores = t.scale(scores, 1.0 / (dh as f64).sqrt());
            let scores = t.add(scores, bias);
            let attn = t.softmax_rows(scores);
            heads.push(t.matmul(attn, vh));
        }
        let merged = if heads.len() == 1 { heads[0] } else { t.concat_cols(&heads) };
        let attended = self.o.forward(t, s, merged);
        let x = t.add(x, attended);
        let x = self.ln1.forward(t, s, x);
        let h = self.ff1.forward(t, s, x);
        let h = t.relu(h);
        let h = self.ff2.forward(t, s, h);
        let x = t.add(x, h);
        self.ln2.forward(t, s, x)
    }
}

/// Additive mask: key `k` is visible to query `q` when `k` is valid and
/// `allowed(q, k)`. A query with no visible key sees every key.
pub fn attention_bias(mask: &[bool], allowed: impl Fn(usize, usize) -> bool) -> Mat {
    let n = mask.len();
    let mut m = Mat::zeros(n, n);
    for q in 0..n {
        let visible: Vec<bool> = (0..n).map(|k| mask[k] && allowed(q, k)).collect();
        if visible.iter().any(|&v| v) {
            for (k, vis) in visible.into_iter().enumerate() {
                if !vis {
                    m.data[q * n + k] = MASKED;
                }
            }
        }
    }
    m
}

/// Learned positional embedding plus a stack of encoder layers, with a
/// learned null token for empty inputs.
#[derive(Debug, Clone)]
struct TemporalEncoder {
    pos: ParamId,
    null: ParamId,
    layers: Vec<EncoderLayer>,
}

impl TemporalEncoder {
    fn new(pb: &mut ParamBuilder, name: &str, d: usize, cfg: &ModelConfig) -> Self {
        TemporalEncoder {
            pos: pb.normal(&format!("{name}.pos"), cfg.max_positions, d, 0.02),
            null: pb.normal(&format!("{name}.null"), 1, d, 0.02),
            layers: (0..cfg.encoder_layers)
                .map(|i| EncoderLayer::new(pb, &format!("{name}.layer{i}"), d, cfg.encoder_heads))
                .collect(),
        }
    }

    /// Null-token input for a modality with no data.
    fn null_input(&self, t: &mut Tape, s: &ParamStore) -> (Var, Vec<bool>) {
        (t.param(s, self.null), vec![false])
    }

    fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var, mask: &[bool]) -> Var {
        let n = t.shape(x).0;
        let pos = t.param(s, self.pos);
        let rows = t.gather(pos, (0..n).map(Some).collect(), 1);
        let mut h = t.add(x, rows);
        let bias = t.constant(attention_bias(mask, |_, _| true));
        for layer in &self.layers {
            h = layer.forward(t, s, h, bias);
        }
        h
    }
}

/// RepVGG-style training-time block: `relu(conv3x3(x) + conv1x1(x) + b)`,
/// both branches with stride 2.
#[derive(Debug, Clone)]
struct ConvBlock {
    w3: ParamId,
    w1: ParamId,
    b: ParamId,
}

impl ConvBlock {
    fn new(pb: &mut ParamBuilder, name: &str, cin: usize, cout: usize) -> Self {
        ConvBlock {
            w3: pb.weight(&format!("{name}.w3"), 9 * cin, cout),
            w1: pb.weight(&format!("{name}.w1"), cin, cout),
            b: pb.filled(&format!("{name}.b"), 1, cout, 0.0),
        }
    }

    /// `x` holds `batch` images of `side × side` pixels as rows
    /// (`batch·side² × cin`). Returns the `batch·(side/2)² × cout` output
    /// and the new side.
    fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var, batch: usize, side: usize) -> (Var, usize) {
        let out_side = (side - 1) / 2 + 1;
        let mut idx3 = Vec::with_capacity(batch * out_side * out_side * 9);
        let mut idx1 = Vec::with_capacity(batch * out_side * out_side);
        for img in 0..batch {
            let base = img * side * side;
            for oy in 0..out_side {
                for ox in 0..out_side {
                    let (cy, cx) = (2 * oy as isize, 2 * ox as isize);
                    for dy in -1..=1isize {
                        for dx in -1..=1isize {
                            let (y, x) = (cy + dy, cx + dx);
                            let inside = y >= 0 && x >= 0 && (y as usize) < side && (x as usize) < side;
                            idx3.push(inside.then(|| base + y as usize * side + x as usize));
                        }
                    }
                    idx1.push(Some(base + cy as usize * side + cx as usize));
                }
            }
        }
        let cols3 = t.gather(x, idx3, 9);
        let cols1 = t.gather(x, idx1, 1);
        let w3 = t.param(s, self.w3);
        let w1 = t.param(s, self.w1);
        let b = t.param(s, self.b);
        let y3 = t.matmul(cols3, w3);
        let y1 = t.matmul(cols1, w1);
        let y = t.add(y3, y1);
        let y = t.add_row(y, b);
        (t.relu(y), out_side)
    }
}

#[derive(Debug, Clone)]
struct VisualNet {
    blocks: Vec<ConvBlock>,
    proj: Linear,
}

impl VisualNet {
    fn new(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Self {
        let [c1, c2, c3] = cfg.visual_channels;
        VisualNet {
            blocks: vec![
                ConvBlock::new(pb, "visual.block0", 3, c1),
                ConvBlock::new(pb, "visual.block1", c1, c2),
                ConvBlock::new(pb, "visual.block2", c2, c3),
            ],
            proj: Linear::new(pb, "visual.proj", c3, cfg.visual_feature_dim),
        }
    }

    /// `pixels`: `batch·48² × 3`. Returns one feature row per crop.
    fn forward(&self, t: &mut Tape, s: &ParamStore, pixels: Var, batch: usize) -> Var {
        let mut h = pixels;
        let mut side = CROP_SIDE;
        for block in &self.blocks {
            (h, side) = block.forward(t, s, h, batch, side);
        }
        // Global average pooling per crop.
        let area = side * side;
        let mut pool = Mat::zeros(batch, batch * area);
        for img in 0..batch {
            for k in 0..area {
                pool.data[img * batch * area + img * area + k] = 1.0 / area as f64;
            }
        }
        let pool = t.constant(pool);
        let pooled = t.matmul(pool, h);
        self.proj.forward(t, s, pooled)
    }
}

#[derive(Debug, Clone)]
struct AcousticNet {
    embed: Linear,
    /// NesT-style block-local attention over 2×2 neighbourhoods of patches.
    local: EncoderLayer,
}

#[derive(Debug, Clone)]
struct Head {
    l1: Linear,
    l2: Linear,
}

impl Head {
    fn new(pb: &mut ParamBuilder, name: &str, d: usize, cfg: &ModelConfig) -> Self {
        Head {
            l1: Linear::new(pb, &format!("{name}.l1"), d, cfg.head_hidden),
            l2: Linear::new(pb, &format!("{name}.l2"), cfg.head_hidden, cfg.num_classes),
        }
    }

    fn forward(&self, t: &mut Tape, s: &ParamStore, pooled: Var) -> Var {
        let h = self.l1.forward(t, s, pooled);
        let h = t.relu(h);
        self.l2.forward(t, s, h)
    }
}

/// Network inputs for one segment, already converted to matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSegment {
    /// `crops·48² × 3` pixels in `[-0.5, 0.5]`, or `None` without faces.
    pub pixels: Option<Mat>,
    pub crops: usize,
    /// `audio_patches × patch_pool²` pooled spectrogram patches, or `None`
    /// when the clip is shorter than one mel window.
    pub patches: Option<Mat>,
    /// Patch grid shape, for the block-local attention.
    pub grid: (usize, usize),
    /// `tokens × text_embed_dim`, or `None` for empty text.
    pub tokens: Option<Mat>,
}

/// Per-modality encoder outputs on the tape.
pub struct Encoded {
    pub sequence: Var,
    pub mask: Vec<bool>,
}

pub struct ForwardOut {
    pub encoded: [Encoded; 3],
    pub logits: [Var; 3],
    pub weights: Var,
    pub fused: Var,
}

#[derive(Debug, Clone)]
pub struct Network {
    visual: VisualNet,
    acoustic: AcousticNet,
    text_proj: Linear,
    encoders: [TemporalEncoder; 3],
    heads: [Head; 3],
    fusion: ParamId,
    fusion_mode: FusionMode,
    fixed_weights: [f64; 3],
}

impl Network {
    /// Registers all parameters in a fixed order, drawing from `cfg.seed`.
    pub fn build(cfg: &ModelConfig) -> (Network, ParamStore) {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut pb = ParamBuilder {
            store: &mut store,
            rng: &mut rng,
        };
        let (dv, da, dt) = (cfg.visual_feature_dim, cfg.acoustic_feature_dim, cfg.text_feature_dim);
        let visual = VisualNet::new(&mut pb, cfg);
        let acoustic = AcousticNet {
            embed: Linear::new(&mut pb, "acoustic.embed", cfg.patch_pool * cfg.patch_pool, da),
            local: EncoderLayer::new(&mut pb, "acoustic.local", da, cfg.encoder_heads),
        };
        let text_proj = Linear::new(&mut pb, "text.proj", cfg.text_embed_dim, dt);
        let encoders = [
            TemporalEncoder::new(&mut pb, "visual.temporal", dv, cfg),
            TemporalEncoder::new(&mut pb, "acoustic.temporal", da, cfg),
            TemporalEncoder::new(&mut pb, "text.temporal", dt, cfg),
        ];
        let heads = [
            Head::new(&mut pb, "visual.head", dv, cfg),
            Head::new(&mut pb, "acoustic.head", da, cfg),
            Head::new(&mut pb, "text.head", dt, cfg),
        ];
        // Softmax of these logits reproduces the configured weights.
        let init: Vec<f64> = cfg.fusion_weights.iter().map(|w| w.max(1e-6).ln()).collect();
        let fusion = pb.store.insert("fusion.logits", Mat::from_vec(1, 3, init));
        let net = Network {
            visual,
            acoustic,
            text_proj,
            encoders,
            heads,
            fusion,
            fusion_mode: cfg.fusion_mode,
            fixed_weights: cfg.fusion_weights,
        };
        (net, store)
    }

    pub fn encode_visual(&self, t: &mut Tape, s: &ParamStore, x: &PreparedSegment) -> Encoded {
        let enc = &self.encoders[0];
        let (seq, mask) = match &x.pixels {
            Some(p) if x.crops > 0 => {
                let pixels = t.constant(p.clone());
                (self.visual.forward(t, s, pixels, x.crops), vec![true; x.crops])
            }
            _ => enc.null_input(t, s),
        };
        Encoded {
            sequence: enc.forward(t, s, seq, &mask),
            mask,
        }
    }

    pub fn encode_acoustic(&self, t: &mut Tape, s: &ParamStore, x: &PreparedSegment) -> Encoded {
        let enc = &self.encoders[1];
        let (seq, mask) = match &x.patches {
            Some(p) => {
                let patches = t.constant(p.clone());
                let emb = self.acoustic.embed.forward(t, s, patches);
                let (rows, cols) = x.grid;
                debug_assert_eq!(rows * cols, p.rows);
                let mask = vec![true; p.rows];
                let block = |i: usize| (i / cols / 2, i % cols / 2);
                let bias = t.constant(attention_bias(&mask, |q, k| block(q) == block(k)));
                (self.acoustic.local.forward(t, s, emb, bias), mask)
            }
            None => enc.null_input(t, s),
        };
        Encoded {
            sequence: enc.forward(t, s, seq, &mask),
            mask,
        }
    }

    pub fn encode_text(&self, t: &mut Tape, s: &ParamStore, x: &PreparedSegment) -> Encoded {
        let enc = &self.encoders[2];
        let (seq, mask) = match &x.tokens {
            Some(tok) if tok.rows > 0 => {
                let tok = t.constant(tok.clone());
                (self.text_proj.forward(t, s, tok), vec![true; x.tokens.as_ref().map_or(0, |m| m.rows)])
            }
            _ => enc.null_input(t, s),
        };
        Encoded {
            sequence: enc.forward(t, s, seq, &mask),
            mask,
        }
    }

    /// Masked mean pooling then the feed-forward head. With no valid
    /// position every position is pooled.
    pub fn head(&self, t: &mut Tape, s: &ParamStore, modality: usize, e: &Encoded) -> Var {
        let n = e.mask.len();
        let valid = e.mask.iter().filter(|&&m| m).count();
        let weights: Vec<f64> = if valid == 0 {
            vec![1.0 / n as f64; n]
        } else {
            e.mask.iter().map(|&m| if m { 1.0 / valid as f64 } else { 0.0 }).collect()
        };
        let w = t.constant(Mat::from_vec(1, n, weights));
        let pooled = t.matmul(w, e.sequence);
        self.heads[modality].forward(t, s, pooled)
    }

    /// The effective `(w_v, w_a, w_t)` as a `1 × 3` node.
    pub fn fusion_weights(&self, t: &mut Tape, s: &ParamStore) -> Var {
        match self.fusion_mode {
            FusionMode::Learned => {
                let logits = t.param(s, self.fusion);
                t.softmax_rows(logits)
            }
            FusionMode::Fixed => t.constant(Mat::from_vec(1, 3, self.fixed_weights.to_vec())),
        }
    }

    pub fn forward(&self, t: &mut Tape, s: &ParamStore, x: &PreparedSegment) -> ForwardOut {
        let encoded = [
            self.encode_visual(t, s, x),
            self.encode_acoustic(t, s, x),
            self.encode_text(t, s, x),
        ];
        let logits = [
            self.head(t, s, 0, &encoded[0]),
            self.head(t, s, 1, &encoded[1]),
            self.head(t, s, 2, &encoded[2]),
        ];
        let weights = self.fusion_weights(t, s);
        let stacked = t.concat_rows(&logits);
        let fused = t.matmul(weights, stacked);
        ForwardOut {
            encoded,
            logits,
            weights,
            fused,
        }
    }

    /// Cross-entropy on the fused logits plus one auxiliary cross-entropy
    /// per modality head (weight 1 each).
    pub fn loss(&self, t: &mut Tape, s: &ParamStore, x: &PreparedSegment, label: usize) -> (Var, ForwardOut) {
        let out = self.forward(t, s, x);
        let mut total = t.cross_entropy(out.fused, &[label]);
        for l in out.logits {
            let aux = t.cross_entropy(l, &[label]);
            total = t.add(total, aux);
        }
        (total, out)
    }
}
