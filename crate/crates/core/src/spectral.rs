//! Fine-grained spectral channel attention.
//!
//! Channels are split into contiguous groups; each group is projected onto a
//! cosine basis at one assigned frequency, giving a per-channel response
//! vector that a two-layer excitation turns into channel gates:
//!
//!   kappa[c]  = sum_{h,w} X[c,h,w] . B^{u_i,v_i}[h,w]   (group i owns c)
//!   kappa'    = sigmoid(E2 . relu(E1 . kappa + b1) + b2)
//!   X_sp[c,h,w] = X[c,h,w] . kappa'[c]
//!
//! Two basis conventions are provided. The default places the half-sample
//! shift on the frequency index; `dct2-standard` is the orthogonal DCT-II
//! convention and is the one the orthogonality tests apply to.

use std::collections::HashMap;
use std::rc::Rc;
use std::sync::{Arc, OnceLock, RwLock};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Arr, Parameter, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Cosine bases
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BasisVariant {
    /// B[h,w] = cos(pi.h/H.(u+1/2)) . cos(pi.w/W.(v+1/2)); not orthogonal.
    #[default]
    PaperLiteral,
    /// B[h,w] = cos(pi.(h+1/2).u/H) . cos(pi.(w+1/2).v/W); orthogonal rows.
    Dct2Standard,
}

impl std::str::FromStr for BasisVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<BasisVariant> {
        match s {
            "paper-literal" => Ok(BasisVariant::PaperLiteral),
            "dct2-standard" => Ok(BasisVariant::Dct2Standard),
            other => Err(Error::config(format!(
                "unknown basis variant {other:?} (expected paper-literal or dct2-standard)"
            ))),
        }
    }
}

impl std::fmt::Display for BasisVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BasisVariant::PaperLiteral => "paper-literal",
            BasisVariant::Dct2Standard => "dct2-standard",
        })
    }
}

type BasisKey = (usize, usize, usize, usize, BasisVariant);

fn basis_cache() -> &'static RwLock<HashMap<BasisKey, Arc<Vec<f64>>>> {
    static CACHE: OnceLock<RwLock<HashMap<BasisKey, Arc<Vec<f64>>>>> = OnceLock::new();
    CACHE.get_or_init(|| RwLock::new(HashMap::new()))
}

/// The H x W basis at frequency (u, v) in 64-bit, row-major, cached per key.
/// Concurrent readers share one allocation; a racing miss inserts once.
pub fn dct_basis_f64(
    h: usize,
    w: usize,
    u: usize,
    v: usize,
    variant: BasisVariant,
) -> Result<Arc<Vec<f64>>> {
    if h == 0 || w == 0 || u >= h || v >= w {
        return Err(Error::domain(format!(
            "frequency ({u}, {v}) out of range for a {h}x{w} basis"
        )));
    }
    let key = (h, w, u, v, variant);
    if let Some(hit) = basis_cache().read().expect("basis cache poisoned").get(&key) {
        return Ok(Arc::clone(hit));
    }
    let mut vals = Vec::with_capacity(h * w);
    for hi in 0..h {
        for wi in 0..w {
            let b = match variant {
                BasisVariant::PaperLiteral => {
                    (std::f64::consts::PI * hi as f64 / h as f64 * (u as f64 + 0.5)).cos()
                        * (std::f64::consts::PI * wi as f64 / w as f64 * (v as f64 + 0.5)).cos()
                }
                BasisVariant::Dct2Standard => {
                    (std::f64::consts::PI * (hi as f64 + 0.5) * u as f64 / h as f64).cos()
                        * (std::f64::consts::PI * (wi as f64 + 0.5) * v as f64 / w as f64).cos()
                }
            };
            vals.push(b);
        }
    }
    let mut cache = basis_cache().write().expect("basis cache poisoned");
    Ok(Arc::clone(cache.entry(key).or_insert_with(|| Arc::new(vals))))
}

/// The basis as a 32-bit H x W tensor.
pub fn dct_basis(h: usize, w: usize, u: usize, v: usize, variant: BasisVariant) -> Result<Tensor> {
    let vals = dct_basis_f64(h, w, u, v, variant)?;
    Tensor::new(&[h, w], vals.iter().map(|&b| b as f32).collect())
}

/// First `n` frequency pairs in zigzag order over an 8x8 grid, rescaled to an
/// H x W grid. Zigzag walks anti-diagonals, alternating direction, so low
/// frequencies come first and the list is deterministic.
pub fn zigzag_freqs(n: usize, h: usize, w: usize) -> Result<Vec<(usize, usize)>> {
    if n == 0 || n > 64 {
        return Err(Error::config(format!("zigzag order enumerates 64 pairs, asked for {n}")));
    }
    if h == 0 || w == 0 {
        return Err(Error::config(format!("cannot place frequencies on a {h}x{w} grid")));
    }
    let mut order = Vec::with_capacity(64);
    for d in 0..15usize {
        let lo = d.saturating_sub(7);
        let hi = d.min(7);
        if d % 2 == 0 {
            for v in lo..=hi {
                order.push((d - v, v));
            }
        } else {
            for u in lo..=hi {
                order.push((u, d - u));
            }
        }
    }
    Ok(order
        .into_iter()
        .take(n)
        .map(|(u, v)| ((u * h / 8).min(h - 1), (v * w / 8).min(w - 1)))
        .collect())
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Frequency assignment plus the two excitation layers.
#[derive(Clone, Debug)]
pub struct SpectralParams {
    pub freqs: Vec<(usize, usize)>,
    pub variant: BasisVariant,
    pub r_e: usize,
    pub e1: Parameter, // (C/r_e) x C
    pub b1: Parameter, // C/r_e
    pub e2: Parameter, // C x (C/r_e)
    pub b2: Parameter, // C
}

fn check_spectral_dims(c: usize, n: usize, r_e: usize) -> Result<usize> {
    if n == 0 || c % n != 0 {
        return Err(Error::config(format!("{c} channels cannot split into {n} groups")));
    }
    if r_e == 0 || c % r_e != 0 {
        return Err(Error::config(format!(
            "{c} channels are not divisible by excitation reduction {r_e}"
        )));
    }
    Ok(c / r_e)
}

impl SpectralParams {
    /// All excitation weights and biases zero; the gate evaluates to 1/2.
    pub fn zeros(
        c: usize,
        freqs: Vec<(usize, usize)>,
        variant: BasisVariant,
        r_e: usize,
    ) -> Result<SpectralParams> {
        let ce = check_spectral_dims(c, freqs.len(), r_e)?;
        Ok(SpectralParams {
            freqs,
            variant,
            r_e,
            e1: Parameter::new("spectral.e1", Tensor::zeros(&[ce, c])?),
            b1: Parameter::new("spectral.b1", Tensor::zeros(&[ce])?),
            e2: Parameter::new("spectral.e2", Tensor::zeros(&[c, ce])?),
            b2: Parameter::new("spectral.b2", Tensor::zeros(&[c])?),
        })
    }

    /// Weights uniform in +-1/sqrt(fan_in), biases zero, fixed draw order.
    pub fn seeded(
        c: usize,
        freqs: Vec<(usize, usize)>,
        variant: BasisVariant,
        r_e: usize,
        seed: u64,
    ) -> Result<SpectralParams> {
        let ce = check_spectral_dims(c, freqs.len(), r_e)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g1 = 1.0 / (c as f32).sqrt();
        let g2 = 1.0 / (ce as f32).sqrt();
        Ok(SpectralParams {
            freqs,
            variant,
            r_e,
            e1: Parameter::new("spectral.e1", Tensor::uniform(&[ce, c], -g1, g1, &mut rng)?),
            b1: Parameter::new("spectral.b1", Tensor::zeros(&[ce])?),
            e2: Parameter::new("spectral.e2", Tensor::uniform(&[c, ce], -g2, g2, &mut rng)?),
            b2: Parameter::new("spectral.b2", Tensor::zeros(&[c])?),
        })
    }

    pub fn groups(&self) -> usize {
        self.freqs.len()
    }

    pub fn channels(&self) -> usize {
        self.e1.value.shape()[1]
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        vec![&self.e1, &self.b1, &self.e2, &self.b2]
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.e1, &mut self.b1, &mut self.e2, &mut self.b2]
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> SpectralVars<'t> {
        SpectralVars {
            e1: self.e1.bind(tape),
            b1: self.b1.bind(tape),
            e2: self.e2.bind(tape),
            b2: self.b2.bind(tape),
        }
    }

    /// One cached basis per group, validated against the spatial extents.
    fn bases(&self, h: usize, w: usize) -> Result<Rc<Vec<Arr>>> {
        let mut out = Vec::with_capacity(self.freqs.len());
        for &(u, v) in &self.freqs {
            let vals = dct_basis_f64(h, w, u, v, self.variant)?;
            out.push(Arr { shape: vec![h, w], data: vals.as_ref().clone() });
        }
        Ok(Rc::new(out))
    }
}

/// The parameters of [`SpectralParams`] recorded on a tape.
#[derive(Clone, Copy)]
pub struct SpectralVars<'t> {
    pub e1: Var<'t>,
    pub b1: Var<'t>,
    pub e2: Var<'t>,
    pub b2: Var<'t>,
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

/// Per-channel frequency responses and the gates they excite.
#[derive(Clone, Debug)]
pub struct SpectralBand {
    pub kappa: Tensor,
    pub kappa_prime: Tensor,
}

/// `hid_pre` is the bottleneck before its ReLU; finite-difference checks
/// need to know how close a configuration sits to that kink.
#[derive(Clone, Copy)]
pub struct SpectralGraph<'t> {
    pub x_sp: Var<'t>,
    pub kappa: Var<'t>,
    pub kappa_prime: Var<'t>,
    pub hid_pre: Var<'t>,
}

/// The excitation bottleneck on a C x 1 column of responses. Returns the
/// gate vector and the hidden layer before its ReLU.
pub fn excite_graph<'t>(kappa_col: Var<'t>, p: SpectralVars<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let hid_pre = p.e1.matmul(kappa_col)?.add_col_bias(p.b1)?;
    let hid = hid_pre.relu();
    let gate = p.e2.matmul(hid)?.add_col_bias(p.b2)?.sigmoid().reshape(&[p.b2.shape()[0]])?;
    Ok((gate, hid_pre))
}

/// Records the block on the tape of `x`.
pub fn spectral_graph<'t>(
    x: Var<'t>,
    meta: &SpectralParams,
    p: SpectralVars<'t>,
) -> Result<SpectralGraph<'t>> {
    let xs = x.shape();
    let (c, h, w) = match xs.as_slice() {
        &[c, h, w] => (c, h, w),
        s => return Err(Error::shape(format!("spectral input wants C x H x W, got {s:?}"))),
    };
    if meta.channels() != c {
        return Err(Error::shape(format!(
            "excitation was built for C={}, input has C={c}",
            meta.channels()
        )));
    }
    if c % meta.groups() != 0 {
        return Err(Error::config(format!(
            "{c} channels cannot split into {} groups",
            meta.groups()
        )));
    }
    let kappa = x.freq_project(meta.bases(h, w)?, c / meta.groups())?;
    let (kappa_prime, hid_pre) = excite_graph(kappa.reshape(&[c, 1])?, p)?;
    let x_sp = x.scale_channels(kappa_prime)?;
    Ok(SpectralGraph { x_sp, kappa, kappa_prime, hid_pre })
}

/// Eager evaluation: gated features plus the response/gate vectors.
pub fn spectral_forward(x: &Tensor, p: &SpectralParams) -> Result<(Tensor, SpectralBand)> {
    let tape = Tape::new();
    let g = spectral_graph(tape.leaf(x), p, p.bind(&tape))?;
    Ok((
        g.x_sp.to_tensor()?,
        SpectralBand {
            kappa: g.kappa.to_tensor()?,
            kappa_prime: g.kappa_prime.to_tensor()?,
        },
    ))
}

/// The response vector alone: group projections, no excitation.
pub fn spectral_squeeze(x: &Tensor, p: &SpectralParams) -> Result<Tensor> {
    let (c, h, w) = match x.shape() {
        &[c, h, w] => (c, h, w),
        s => return Err(Error::shape(format!("spectral input wants C x H x W, got {s:?}"))),
    };
    if c % p.groups() != 0 {
        return Err(Error::config(format!(
            "{c} channels cannot split into {} groups",
            p.groups()
        )));
    }
    let group = c / p.groups();
    let hw = h * w;
    let mut out = Vec::with_capacity(c);
    for ci in 0..c {
        let (u, v) = p.freqs[ci / group];
        let basis = dct_basis_f64(h, w, u, v, p.variant)?;
        let mut acc = 0.0f64;
        for p_idx in 0..hw {
            acc += f64::from(x.data()[ci * hw + p_idx]) * basis[p_idx];
        }
        out.push(acc as f32);
    }
    Tensor::new(&[c], out)
}

/// The gate vector for a given response vector.
pub fn excite(kappa: &Tensor, p: &SpectralParams) -> Result<Tensor> {
    let c = p.channels();
    if kappa.shape() != [c] {
        return Err(Error::shape(format!(
            "excite wants a length-{c} response vector, got {:?}",
            kappa.shape()
        )));
    }
    let tape = Tape::new();
    let kv = tape.leaf(kappa).reshape(&[c, 1])?;
    excite_graph(kv, p.bind(&tape))?.0.to_tensor()
}
