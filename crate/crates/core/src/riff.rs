//! Minimal RIFF chunk reading and writing shared by the WAV and AVI codecs.

use std::io::{self, Write};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Chunk<'a> {
    pub id: [u8; 4],
    pub data: &'a [u8],
    /// Absolute offset of `data` inside the buffer the chunk was read from.
    pub offset: usize,
}

impl<'a> Chunk<'a> {
    /// For `RIFF` and `LIST` chunks: the four-byte form type.
    pub fn form(&self) -> Option<[u8; 4]> {
        if self.data.len() < 4 {
            return None;
        }
        Some([self.data[0], self.data[1], self.data[2], self.data[3]])
    }

    pub fn is_list(&self, form: &[u8; 4]) -> bool {
        (&self.id == b"LIST" || &self.id == b"RIFF") && self.form().as_ref() == Some(form)
    }

    /// Children of a `RIFF`/`LIST` chunk (skipping the form type).
    pub fn children(&self) -> ChunkIter<'a> {
        ChunkIter {
            buf: self.data,
            pos: 4.min(self.data.len()),
            base: self.offset,
        }
    }
}

pub struct ChunkIter<'a> {
    buf: &'a [u8],
    pos: usize,
    base: usize,
}

impl<'a> ChunkIter<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        ChunkIter { buf, pos: 0, base: 0 }
    }
}

impl<'a> Iterator for ChunkIter<'a> {
    type Item = Result<Chunk<'a>, String>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos + 8 > self.buf.len() {
            return None;
        }
        let id = [
            self.buf[self.pos],
            self.buf[self.pos + 1],
            self.buf[self.pos + 2],
            self.buf[self.pos + 3],
        ];
        let size = le_u32(&self.buf[self.pos + 4..]) as usize;
        let start = self.pos + 8;
        let end = match start.checked_add(size) {
            Some(e) if e <= self.buf.len() => e,
            _ => {
                self.pos = self.buf.len();
                return Some(Err(format!(
                    "chunk {} declares {} bytes past end of data",
                    String::from_utf8_lossy(&id),
                    size
                )));
            }
        };
        self.pos = end + (size & 1);
        Some(Ok(Chunk {
            id,
            data: &self.buf[start..end],
            offset: self.base + start,
        }))
    }
}

pub fn le_u16(b: &[u8]) -> u16 {
    u16::from_le_bytes([b[0], b[1]])
}

pub fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

pub fn le_i32(b: &[u8]) -> i32 {
    i32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

/// Writes a chunk header followed by `data` and a pad byte when the length is odd.
pub fn write_chunk<W: Write>(w: &mut W, id: &[u8; 4], data: &[u8]) -> io::Result<()> {
    w.write_all(id)?;
    w.write_all(&(data.len() as u32).to_le_bytes())?;
    w.write_all(data)?;
    if data.len() % 2 == 1 {
        w.write_all(&[0])?;
    }
    Ok(())
}

/// Serializes a `LIST`/`RIFF` chunk whose body is `form` followed by `body`.
pub fn list_bytes(id: &[u8; 4], form: &[u8; 4], body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(body.len() + 12);
    out.extend_from_slice(id);
    out.extend_from_slice(&((body.len() + 4) as u32).to_le_bytes());
    out.extend_from_slice(form);
    out.extend_from_slice(body);
    if body.len() % 2 == 1 {
        out.push(0);
    }
    out
}

pub fn chunk_bytes(id: &[u8; 4], data: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() + 9);
    write_chunk(&mut out, id, data).expect("writing to a Vec cannot fail");
    out
}
