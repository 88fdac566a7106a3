//! Dense real tensors.
//!
//! Row-major `f64` storage with an optional gradient buffer. Complex network
//! quantities are carried as a leading size-2 real/imaginary channel axis;
//! nothing here knows about complex numbers.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

/// Dense multi-dimensional array of `f64`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    /// Whether gradients should flow to this tensor when used as a tape leaf.
    pub requires_grad: bool,
    /// Populated by [`crate::tape::Tape::backward`] via `grad` extraction;
    /// same length as `data` when present.
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::dim(
                "Tensor::new",
                format!("shape {shape:?} implies {numel} elements, data has {}", data.len()),
            ));
        }
        Ok(Self { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; numel], requires_grad: false, grad: None }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value], requires_grad: false, grad: None }
    }

    /// i.i.d. uniform entries on `(-bound, bound)`.
    pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.random_range(-bound..bound)).collect();
        Self { shape: shape.to_vec(), data, requires_grad: false, grad: None }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    // ── binary format ────────────────────────────────────────────────────
    //
    // "TNSR", u32 rank, u64 per dimension, f64 payload row-major.
    // Little-endian throughout.

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(b"TNSR")?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in &self.data {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> std::io::Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"TNSR" {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                "bad tensor magic",
            ));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let rank = u32::from_le_bytes(b4) as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut b8 = [0u8; 8];
        for _ in 0..rank {
            r.read_exact(&mut b8)?;
            shape.push(u64::from_le_bytes(b8) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            r.read_exact(&mut b8)?;
            data.push(f64::from_le_bytes(b8));
        }
        Ok(Self { shape, data, requires_grad: false, grad: None })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(&mut f).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut f).map_err(|e| Error::io(path, e))
    }
}

/// Inverse of pixel shuffling: `[C, H·r, W·r] -> [C·r², H, W]` with the same
/// channel-to-spatial order, so `space_to_depth(pixel_shuffle(x, r), r) == x`.
pub fn space_to_depth(x: &Tensor, r: usize) -> Result<Tensor> {
    let [c, hr, wr] = *x.shape() else {
        return Err(Error::dim("space_to_depth", format!("expected rank 3, got {:?}", x.shape())));
    };
    if r == 0 || hr % r != 0 || wr % r != 0 {
        return Err(Error::arg(
            "space_to_depth",
            format!("spatial dims ({hr},{wr}) not divisible by r={r}"),
        ));
    }
    let (h, w) = (hr / r, wr / r);
    let mut out = Tensor::zeros(&[c * r * r, h, w]);
    for ci in 0..c {
        for dy in 0..r {
            for dx in 0..r {
                let co = ci * r * r + dy * r + dx;
                for oh in 0..h {
                    for ow in 0..w {
                        out.data[(co * h + oh) * w + ow] =
                            x.data[(ci * hr + oh * r + dy) * wr + ow * r + dx];
                    }
                }
            }
        }
    }
    Ok(out)
}
