//! Dense row-major tensor with f32 storage.
//!
//! Scalars are rank-1 tensors of extent 1; rank 0 is rejected everywhere.
//! Dot products and reductions accumulate in f64 before rounding back to f32.
//! Every constructor and operation either returns finite values or an error.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn checked_numel(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::shape("rank-0 tensors are not supported"));
    }
    let mut n: usize = 1;
    for &e in shape {
        if e == 0 {
            return Err(Error::shape(format!("zero extent in shape {shape:?}")));
        }
        n = n
            .checked_mul(e)
            .ok_or_else(|| Error::shape(format!("element count overflow for shape {shape:?}")))?;
    }
    Ok(n)
}

fn ensure_finite(data: &[f32], op: &str) -> Result<()> {
    for (i, v) in data.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{op} produced {v} at index {i}")));
        }
    }
    Ok(())
}

impl Tensor {
    /// Builds a tensor from explicit contents. The element count must match
    /// the shape product and every value must be finite.
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        let n = checked_numel(shape)?;
        if data.len() != n {
            return Err(Error::shape(format!(
                "shape {shape:?} wants {n} values, got {}",
                data.len()
            )));
        }
        ensure_finite(&data, "construct")?;
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Tensor> {
        Tensor::constant(shape, 0.0)
    }

    pub fn constant(shape: &[usize], value: f32) -> Result<Tensor> {
        let n = checked_numel(shape)?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("constant fill with {value}")));
        }
        Ok(Tensor { shape: shape.to_vec(), data: vec![value; n] })
    }

    /// Uniform fill in `[lo, hi)` drawn from the given stream. Callers that
    /// need one stream per command pass the same generator to every fill.
    pub fn uniform<R: Rng>(shape: &[usize], lo: f32, hi: f32, rng: &mut R) -> Result<Tensor> {
        let n = checked_numel(shape)?;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::domain(format!("bad uniform range [{lo}, {hi})")));
        }
        let data: Vec<f32> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    /// Uniform fill with a fresh ChaCha8 stream seeded from `seed`. The same
    /// seed and shape always reproduce the same bits.
    pub fn seeded_uniform(shape: &[usize], seed: u64, lo: f32, hi: f32) -> Result<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(shape, lo, hi, &mut rng)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Value at a multi-index, row-major.
    pub fn get(&self, index: &[usize]) -> Result<f32> {
        if index.len() != self.shape.len() {
            return Err(Error::shape(format!(
                "index rank {} does not match tensor rank {}",
                index.len(),
                self.shape.len()
            )));
        }
        let mut flat = 0usize;
        for (i, (&ix, &ex)) in index.iter().zip(&self.shape).enumerate() {
            if ix >= ex {
                return Err(Error::shape(format!("index {ix} out of range at axis {i}")));
            }
            flat = flat * ex + ix;
        }
        Ok(self.data[flat])
    }

    /// Same data, new shape; the element counts must agree.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n = checked_numel(shape)?;
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} values) to {shape:?} ({n} values)",
                self.shape,
                self.data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    /// Swaps the last two axes of a rank-3 tensor: C x H x W becomes C x W x H.
    pub fn transpose_hw(&self) -> Result<Tensor> {
        let [c, h, w] = self.dims3("transpose_hw")?;
        let mut out = vec![0.0f32; self.data.len()];
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    out[ci * w * h + wi * h + hi] = self.data[ci * h * w + hi * w + wi];
                }
            }
        }
        Ok(Tensor { shape: vec![c, w, h], data: out })
    }

    fn dims2(&self, op: &str) -> Result<[usize; 2]> {
        match self.shape.as_slice() {
            &[r, c] => Ok([r, c]),
            s => Err(Error::shape(format!("{op} wants rank 2, got {s:?}"))),
        }
    }

    fn dims3(&self, op: &str) -> Result<[usize; 3]> {
        match self.shape.as_slice() {
            &[c, h, w] => Ok([c, h, w]),
            s => Err(Error::shape(format!("{op} wants rank 3, got {s:?}"))),
        }
    }

    fn zip_with(&self, other: &Tensor, op: &str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{op} shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data: Vec<f32> =
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        ensure_finite(&data, op)?;
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    fn map(&self, op: &str, f: impl Fn(f32) -> f32) -> Result<Tensor> {
        let data: Vec<f32> = self.data.iter().map(|&a| f(a)).collect();
        ensure_finite(&data, op)?;
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn add_scalar(&self, s: f32) -> Result<Tensor> {
        self.map("add_scalar", |a| a + s)
    }

    pub fn mul_scalar(&self, s: f32) -> Result<Tensor> {
        self.map("mul_scalar", |a| a * s)
    }

    pub fn abs(&self) -> Result<Tensor> {
        self.map("abs", f32::abs)
    }

    pub fn sin(&self) -> Result<Tensor> {
        self.map("sin", f32::sin)
    }

    pub fn cos(&self) -> Result<Tensor> {
        self.map("cos", f32::cos)
    }

    /// Elementwise square root; any negative input is a domain error rather
    /// than a silent NaN.
    pub fn sqrt(&self) -> Result<Tensor> {
        if let Some(v) = self.data.iter().find(|v| **v < 0.0) {
            return Err(Error::domain(format!("sqrt of negative value {v}")));
        }
        self.map("sqrt", f32::sqrt)
    }

    pub fn relu(&self) -> Result<Tensor> {
        self.map("relu", |a| a.max(0.0))
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        self.map("sigmoid", sigmoid_f32)
    }

    /// Matrix product of two rank-2 tensors with f64 accumulation; the result
    /// is rounded to f32 once per output element.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let [m, k] = self.dims2("matmul")?;
        let [k2, n] = other.dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dims differ: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            let lhs = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let mut acc = 0.0f64;
                for (kk, &l) in lhs.iter().enumerate() {
                    acc += f64::from(l) * f64::from(other.data[kk * n + j]);
                }
                out[i * n + j] = acc as f32;
            }
        }
        ensure_finite(&out, "matmul")?;
        Ok(Tensor { shape: vec![m, n], data: out })
    }

    /// Pointwise (1x1) convolution over a C_in x H x W tensor with a
    /// C_out x C_in kernel and optional per-output-channel bias.
    pub fn conv1x1(&self, kernel: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let [c_in, h, w] = self.dims3("conv1x1")?;
        let [c_out, kc] = kernel.dims2("conv1x1 kernel")?;
        if kc != c_in {
            return Err(Error::shape(format!(
                "conv1x1 kernel {:?} does not match input channels {c_in}",
                kernel.shape
            )));
        }
        if let Some(b) = bias {
            if b.shape != [c_out] {
                return Err(Error::shape(format!(
                    "conv1x1 bias {:?} does not match output channels {c_out}",
                    b.shape
                )));
            }
        }
        let hw = h * w;
        let mut out = vec![0.0f32; c_out * hw];
        for o in 0..c_out {
            let krow = &kernel.data[o * c_in..(o + 1) * c_in];
            let b = bias.map_or(0.0f64, |b| f64::from(b.data[o]));
            for p in 0..hw {
                let mut acc = b;
                for (i, &kv) in krow.iter().enumerate() {
                    acc += f64::from(kv) * f64::from(self.data[i * hw + p]);
                }
                out[o * hw + p] = acc as f32;
            }
        }
        ensure_finite(&out, "conv1x1")?;
        Ok(Tensor { shape: vec![c_out, h, w], data: out })
    }
}

/// Numerically stable logistic function used by every gating op.
pub(crate) fn sigmoid_f32(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
