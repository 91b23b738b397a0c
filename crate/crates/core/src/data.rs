//! Labeled image datasets and their binary file format.
//!
//! File layout (little-endian): magic `CGDS`, u32 version, u32 n, u32 c,
//! u32 h, u32 w, `n·c·h·w` f32 pixels, `n` u16 labels, u64 seed.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"CGDS";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub id: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// `[n, c, h, w]` pixels.
    pub pixels: Vec<f32>,
    pub labels: Vec<u16>,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let s = self.sample_len();
        &self.pixels[i * s..(i + 1) * s]
    }

    pub fn image_f64(&self, i: usize) -> Vec<f64> {
        self.image(i).iter().map(|&v| v as f64).collect()
    }

    /// Images as a `[n, c, h, w]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.pixels.iter().map(|&v| v as f64).collect();
        Tensor::new(vec![self.len(), self.channels, self.height, self.width], data)
            .expect("dataset pixel count matches its shape")
    }

    /// The samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize], id: impl Into<String>) -> Dataset {
        let mut pixels = Vec::with_capacity(indices.len() * self.sample_len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            id: id.into(),
            channels: self.channels,
            height: self.height,
            width: self.width,
            pixels,
            labels,
            seed: self.seed,
        }
    }

    /// First `n` samples (or all of them).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx, self.id.clone())
    }

    pub fn concat(parts: &[&Dataset], id: impl Into<String>) -> Result<Dataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::arg("cannot concatenate zero datasets"))?;
        let mut out = Dataset {
            id: id.into(),
            channels: first.channels,
            height: first.height,
            width: first.width,
            pixels: Vec::new(),
            labels: Vec::new(),
            seed: first.seed,
        };
        for p in parts {
            if (p.channels, p.height, p.width) != (first.channels, first.height, first.width) {
                return Err(Error::arg("datasets have different image shapes"));
            }
            out.pixels.extend_from_slice(&p.pixels);
            out.labels.extend_from_slice(&p.labels);
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(32 + self.pixels.len() * 4 + self.labels.len() * 2);
        buf.extend_from_slice(MAGIC);
        for v in [
            VERSION,
            self.len() as u32,
            self.channels as u32,
            self.height as u32,
            self.width as u32,
        ] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for p in &self.pixels {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        for l in &self.labels {
            buf.extend_from_slice(&l.to_le_bytes());
        }
        buf.extend_from_slice(&self.seed.to_le_bytes());
        buf
    }

    pub fn from_bytes(bytes: &[u8], id: impl Into<String>) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("dataset file truncated".into()))?;
        if &magic != MAGIC {
            return Err(Error::Format("bad dataset magic".into()));
        }
        let mut header = [0u32; 5];
        for h in header.iter_mut() {
            *h = read_u32(&mut r)?;
        }
        let [version, n, c, h, w] = header;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let (n, c, h, w) = (n as usize, c as usize, h as usize, w as usize);
        let count = n * c * h * w;
        let need = count * 4 + n * 2 + 8;
        if r.len() != need {
            return Err(Error::Format(format!(
                "dataset payload is {} bytes, expected {need}",
                r.len()
            )));
        }
        let (px, rest) = r.split_at(count * 4);
        let pixels = px
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let (lb, seed_bytes) = rest.split_at(n * 2);
        let labels = lb
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]))
            .collect();
        let seed = u64::from_le_bytes(seed_bytes.try_into().expect("8 bytes"));
        Ok(Self {
            id: id.into(),
            channels: c,
            height: h,
            width: w,
            pixels,
            labels,
            seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    /// Loads a dataset; its id is the file stem.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::from_bytes(&bytes, id)
    }
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Format("dataset header truncated".into()))?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny(n: usize) -> Dataset {
        Dataset {
            id: "t".into(),
            channels: 1,
            height: 2,
            width: 2,
            pixels: (0..n * 4).map(|i| i as f32 * 0.25).collect(),
            labels: (0..n).map(|i| (i % 3) as u16).collect(),
            seed: 99,
        }
    }

    #[test]
    fn header_layout_is_fixed() {
        let bytes = tiny(2).to_bytes();
        assert_eq!(&bytes[..4], b"CGDS");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), 4 + 20 + 2 * 4 * 4 + 2 * 2 + 8);
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let bytes = tiny(3).to_bytes();
        assert!(Dataset::from_bytes(&bytes[..bytes.len() - 1], "x").is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Dataset::from_bytes(&bad, "x").is_err());
    }

    proptest! {
        #[test]
        fn bytes_round_trip(px in proptest::collection::vec(-10.0f32..10.0, 8), seed in any::<u64>()) {
            let d = Dataset { id: "p".into(), channels: 1, height: 2, width: 2, pixels: px, labels: vec![0, 7], seed };
            let back = Dataset::from_bytes(&d.to_bytes(), "p").unwrap();
            prop_assert_eq!(back, d);
        }
    }
}
