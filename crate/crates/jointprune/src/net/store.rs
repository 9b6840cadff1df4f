use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::DetRng;
use crate::space::{ArchitectureSpace, LayerKind};

/// Dense batch tensor in (batch, channel, row, col) order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub data: Vec<f64>,
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Tensor {
    pub fn zeros(b: usize, c: usize, h: usize, w: usize) -> Tensor {
        Tensor {
            data: vec![0.0; b * c * h * w],
            b,
            c,
            h,
            w,
        }
    }

    #[inline]
    pub fn idx(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.c + c) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn get(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(b, c, y, x)]
    }
}

/// One layer's maximal-shape parameters and momentum buffers.
///
/// Weight layouts: conv `[out][in][k][k]`, depthwise `[out][1][k][k]`,
/// dense `[out][in]`. Biases are `[out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub kind: LayerKind,
    pub out_dim: usize,
    pub in_dim: usize,
    pub kernel: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub mw: Vec<f64>,
    pub mb: Vec<f64>,
}

impl LayerWeights {
    fn weight_len(kind: LayerKind, out_dim: usize, in_dim: usize, kernel: usize) -> usize {
        match kind {
            LayerKind::Conv => out_dim * in_dim * kernel * kernel,
            LayerKind::DepthwiseConv => out_dim * kernel * kernel,
            LayerKind::Dense => out_dim * in_dim,
        }
    }

    /// Flat index of a conv weight; depthwise layers use `i = 0`.
    #[inline]
    pub fn w_idx(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        match self.kind {
            LayerKind::Conv => ((o * self.in_dim + i) * self.kernel + ky) * self.kernel + kx,
            LayerKind::DepthwiseConv => (o * self.kernel + ky) * self.kernel + kx,
            LayerKind::Dense => o * self.in_dim + i,
        }
    }
}

/// Per-layer maximal weight tensors shared across every candidate architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedWeightStore {
    pub layers: Vec<LayerWeights>,
}

const CKPT_MAGIC: &[u8; 4] = b"JPWS";
const CKPT_VERSION: u32 = 1;

impl SharedWeightStore {
    /// Fan-in-scaled uniform init (bound `sqrt(1/fan_in)`), zero biases.
    pub fn init(space: &ArchitectureSpace, rng: &mut DetRng) -> Result<SharedWeightStore> {
        space.validate()?;
        let mut layers = Vec::with_capacity(space.layers.len());
        for spec in &space.layers {
            let in_dim = match spec.kind {
                LayerKind::DepthwiseConv => 1,
                _ => spec.max_in_channels,
            };
            let fan_in = match spec.kind {
                LayerKind::Conv => spec.max_in_channels * spec.kernel * spec.kernel,
                LayerKind::DepthwiseConv => spec.kernel * spec.kernel,
                LayerKind::Dense => spec.max_in_channels,
            };
            let bound = (1.0 / fan_in as f64).sqrt();
            let len = LayerWeights::weight_len(spec.kind, spec.max_out_channels, in_dim, spec.kernel);
            let w: Vec<f64> = (0..len).map(|_| (2.0 * rng.next_f64() - 1.0) * bound).collect();
            layers.push(LayerWeights {
                kind: spec.kind,
                out_dim: spec.max_out_channels,
                in_dim,
                kernel: spec.kernel,
                w,
                b: vec![0.0; spec.max_out_channels],
                mw: vec![0.0; len],
                mb: vec![0.0; spec.max_out_channels],
            });
        }
        Ok(SharedWeightStore { layers })
    }

    pub fn matches_space(&self, space: &ArchitectureSpace) -> Result<()> {
        if self.layers.len() != space.layers.len() {
            return Err(Error::DimensionMismatch {
                expected: space.layers.len(),
                got: self.layers.len(),
            });
        }
        for (i, (lw, spec)) in self.layers.iter().zip(&space.layers).enumerate() {
            let in_dim = match spec.kind {
                LayerKind::DepthwiseConv => 1,
                _ => spec.max_in_channels,
            };
            if lw.kind != spec.kind
                || lw.out_dim != spec.max_out_channels
                || lw.in_dim != in_dim
                || lw.kernel != spec.kernel
            {
                return Err(Error::Checkpoint(format!("layer {i} shape mismatch with space")));
            }
        }
        Ok(())
    }

    /// Versioned binary checkpoint: magic, version, layer count, then per
    /// layer a shape descriptor and row-major little-endian f64 payloads
    /// (weights, biases, weight momentum, bias momentum).
    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&CKPT_VERSION.to_le_bytes())?;
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for layer in &self.layers {
            let kind: u8 = match layer.kind {
                LayerKind::Conv => 0,
                LayerKind::DepthwiseConv => 1,
                LayerKind::Dense => 2,
            };
            w.write_all(&[kind])?;
            for dim in [layer.out_dim, layer.in_dim, layer.kernel] {
                w.write_all(&(dim as u32).to_le_bytes())?;
            }
            for payload in [&layer.w, &layer.b, &layer.mw, &layer.mb] {
                for &v in payload.iter() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn load<R: Read>(mut r: R) -> Result<SharedWeightStore> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        let version = u32::from_le_bytes(u32buf);
        if version != CKPT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        r.read_exact(&mut u32buf)?;
        let count = u32::from_le_bytes(u32buf) as usize;
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let mut kind_buf = [0u8; 1];
            r.read_exact(&mut kind_buf)?;
            let kind = match kind_buf[0] {
                0 => LayerKind::Conv,
                1 => LayerKind::DepthwiseConv,
                2 => LayerKind::Dense,
                k => return Err(Error::Checkpoint(format!("unknown layer kind {k}"))),
            };
            let mut dims = [0usize; 3];
            for d in dims.iter_mut() {
                r.read_exact(&mut u32buf)?;
                *d = u32::from_le_bytes(u32buf) as usize;
            }
            let [out_dim, in_dim, kernel] = dims;
            let wlen = LayerWeights::weight_len(kind, out_dim, in_dim, kernel);
            let mut read_f64s = |len: usize| -> Result<Vec<f64>> {
                let mut out = Vec::with_capacity(len);
                let mut buf = [0u8; 8];
                for _ in 0..len {
                    r.read_exact(&mut buf)?;
                    let v = f64::from_le_bytes(buf);
                    if !v.is_finite() {
                        return Err(Error::Checkpoint("non-finite entry".into()));
                    }
                    out.push(v);
                }
                Ok(out)
            };
            let w = read_f64s(wlen)?;
            let b = read_f64s(out_dim)?;
            let mw = read_f64s(wlen)?;
            let mb = read_f64s(out_dim)?;
            layers.push(LayerWeights {
                kind,
                out_dim,
                in_dim,
                kernel,
                w,
                b,
                mw,
                mb,
            });
        }
        Ok(SharedWeightStore { layers })
    }

    pub fn save_to(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.save(&mut f)
    }

    pub fn load_from(path: &Path) -> Result<SharedWeightStore> {
        SharedWeightStore::load(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets::desk_space;

    #[test]
    fn init_shapes_match_space() {
        let space = desk_space();
        let store = SharedWeightStore::init(&space, &mut DetRng::new(1, 0)).unwrap();
        store.matches_space(&space).unwrap();
        assert_eq!(store.layers[0].w.len(), 24 * 1 * 9);
        assert_eq!(store.layers[1].w.len(), 24 * 24 * 9);
        assert_eq!(store.layers[4].w.len(), 4 * 24);
        assert!(store.layers.iter().all(|l| l.b.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn checkpoint_round_trip_bitwise() {
        let space = desk_space();
        let store = SharedWeightStore::init(&space, &mut DetRng::new(2, 0)).unwrap();
        let mut buf = Vec::new();
        store.save(&mut buf).unwrap();
        let back = SharedWeightStore::load(&buf[..]).unwrap();
        assert_eq!(store, back);
    }

    #[test]
    fn load_rejects_bad_magic() {
        assert!(matches!(
            SharedWeightStore::load(&b"XXXX\x01\x00\x00\x00\x00\x00\x00\x00"[..]),
            Err(Error::Checkpoint(_))
        ));
    }
}
