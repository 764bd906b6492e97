//! Wave-token feature superposition.
//!
//! Features are split into m tokens of contiguous spatial slots. Each token
//! is assigned an amplitude |z| = |Wc.token| and a phase theta = Wq.token,
//! treated as a wave amp.e^{i.theta}. Fusion reweights the real and
//! imaginary parts across tokens and a final channel map produces the
//! output:
//!
//!   o[j] = sum_r ( Wt[j,r].amp[r].cos(theta[r]) + Wi[j,r].amp[r].sin(theta[r]) )
//!   P    = Wp . o        (per slot, tokens merged back to C x H x W)
//!
//! No complex number is ever materialized; the complex-sum view is used only
//! by test oracles, which verify the two formulations agree.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Parameter, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Token geometry
// ---------------------------------------------------------------------------

fn rank3(x: &Tensor, op: &str) -> Result<(usize, usize, usize)> {
    match x.shape() {
        &[c, h, w] => Ok((c, h, w)),
        s => Err(Error::shape(format!("{op} wants C x H x W, got {s:?}"))),
    }
}

fn slots_per_token(hw: usize, m: usize) -> Result<usize> {
    if m == 0 || hw % m != 0 {
        return Err(Error::config(format!("{hw} spatial slots cannot split into {m} tokens")));
    }
    Ok(hw / m)
}

/// Splits C x H x W into m tokens of shape C x s, s = H.W/m. Spatial
/// positions flatten row-major; token j owns slots [j.s, (j+1).s).
pub fn split_tokens(x: &Tensor, m: usize) -> Result<Vec<Tensor>> {
    let (c, h, w) = rank3(x, "split_tokens")?;
    let hw = h * w;
    let s = slots_per_token(hw, m)?;
    let mut tokens = Vec::with_capacity(m);
    for j in 0..m {
        let mut data = Vec::with_capacity(c * s);
        for ci in 0..c {
            data.extend_from_slice(&x.data()[ci * hw + j * s..ci * hw + (j + 1) * s]);
        }
        tokens.push(Tensor::new(&[c, s], data)?);
    }
    Ok(tokens)
}

/// Inverse of [`split_tokens`]; bitwise exact.
pub fn merge_tokens(tokens: &[Tensor], h: usize, w: usize) -> Result<Tensor> {
    let m = tokens.len();
    if m == 0 {
        return Err(Error::config("cannot merge zero tokens".to_string()));
    }
    let (c, s) = match tokens[0].shape() {
        &[c, s] => (c, s),
        sh => return Err(Error::shape(format!("tokens want C x s, got {sh:?}"))),
    };
    if m * s != h * w {
        return Err(Error::config(format!("{m} tokens of {s} slots do not tile {h}x{w}")));
    }
    let hw = h * w;
    let mut data = vec![0.0f32; c * hw];
    for (j, tok) in tokens.iter().enumerate() {
        if tok.shape() != [c, s] {
            return Err(Error::shape(format!(
                "token {j} has shape {:?}, want [{c}, {s}]",
                tok.shape()
            )));
        }
        for ci in 0..c {
            data[ci * hw + j * s..ci * hw + (j + 1) * s]
                .copy_from_slice(&tok.data()[ci * s..(ci + 1) * s]);
        }
    }
    Tensor::new(&[c, h, w], data)
}

// ---------------------------------------------------------------------------
// Waves
// ---------------------------------------------------------------------------

/// Amplitude of a token: |Wc . token|, the channel map applied per slot.
pub fn amplitude(token: &Tensor, wc: &Tensor) -> Result<Tensor> {
    wc.matmul(token)?.abs()
}

/// Phase of a token: Wq . token, unreduced radians.
pub fn phase(token: &Tensor, wq: &Tensor) -> Result<Tensor> {
    wq.matmul(token)
}

/// Per-token amplitude and phase arrays of shape m x C x s.
#[derive(Clone, Debug)]
pub struct WaveTokens {
    amplitude: Tensor,
    phase: Tensor,
}

impl WaveTokens {
    /// Both arrays m x C x s; amplitudes must be nonnegative.
    pub fn new(amplitude: Tensor, phase: Tensor) -> Result<WaveTokens> {
        if amplitude.shape() != phase.shape() || amplitude.rank() != 3 {
            return Err(Error::shape(format!(
                "amplitude {:?} and phase {:?} want one m x C x s shape",
                amplitude.shape(),
                phase.shape()
            )));
        }
        if amplitude.data().iter().any(|&a| a < 0.0) {
            return Err(Error::domain("negative amplitude".to_string()));
        }
        Ok(WaveTokens { amplitude, phase })
    }

    pub fn amplitude(&self) -> &Tensor {
        &self.amplitude
    }

    pub fn phase(&self) -> &Tensor {
        &self.phase
    }
}

/// Amplitude of the wave `a_k.e^{i.th_k} + a_j.e^{i.th_j}`, elementwise:
/// sqrt(a_k^2 + a_j^2 + 2.a_k.a_j.cos(th_j - th_k)). The radicand is
/// >= (a_k - a_j)^2 analytically; rounding dust below zero is clamped.
pub fn superpose_pair(
    amp_k: &Tensor,
    theta_k: &Tensor,
    amp_j: &Tensor,
    theta_j: &Tensor,
) -> Result<Tensor> {
    let shape = amp_k.shape();
    if theta_k.shape() != shape || amp_j.shape() != shape || theta_j.shape() != shape {
        return Err(Error::shape("superpose_pair wants four equal shapes".to_string()));
    }
    let mut out = Vec::with_capacity(amp_k.len());
    for i in 0..amp_k.len() {
        let ak = f64::from(amp_k.data()[i]);
        let aj = f64::from(amp_j.data()[i]);
        let dt = f64::from(theta_j.data()[i]) - f64::from(theta_k.data()[i]);
        let r2 = ak * ak + aj * aj + 2.0 * ak * aj * dt.cos();
        out.push(r2.max(0.0).sqrt() as f32);
    }
    Tensor::new(shape, out)
}

/// Phase-aware token fusion: o[j] = sum_r Wt[j,r].amp[r].cos(th[r]) +
/// Wi[j,r].amp[r].sin(th[r]), elementwise over (C, s). The reduction runs
/// over r in ascending order, so results are deterministic.
pub fn token_fuse(waves: &WaveTokens, wt: &Tensor, wi: &Tensor) -> Result<Tensor> {
    let (m, c, s) = match waves.amplitude.shape() {
        &[m, c, s] => (m, c, s),
        sh => return Err(Error::shape(format!("waves want m x C x s, got {sh:?}"))),
    };
    if wt.shape() != [m, m] || wi.shape() != [m, m] {
        return Err(Error::shape(format!(
            "fusion weights want [{m}, {m}], got {:?} and {:?}",
            wt.shape(),
            wi.shape()
        )));
    }
    let cs = c * s;
    let amp = waves.amplitude.data();
    let th = waves.phase.data();
    let mut real = vec![0.0f64; m * cs];
    let mut imag = vec![0.0f64; m * cs];
    for i in 0..m * cs {
        let (a, t) = (f64::from(amp[i]), f64::from(th[i]));
        real[i] = a * t.cos();
        imag[i] = a * t.sin();
    }
    let mut out = vec![0.0f32; m * cs];
    for j in 0..m {
        for q in 0..cs {
            let mut acc = 0.0f64;
            for r in 0..m {
                acc += f64::from(wt.data()[j * m + r]) * real[r * cs + q];
                acc += f64::from(wi.data()[j * m + r]) * imag[r * cs + q];
            }
            out[j * cs + q] = acc as f32;
        }
    }
    Tensor::new(&[m, c, s], out)
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Token count plus the five weight matrices; no biases anywhere.
#[derive(Clone, Debug)]
pub struct WaveParams {
    pub m: usize,
    pub wc: Parameter, // C x C amplitude channel map
    pub wq: Parameter, // C x C phase channel map
    pub wt: Parameter, // m x m real fusion weights
    pub wi: Parameter, // m x m imaginary fusion weights
    pub wp: Parameter, // C x C output channel map
}

impl WaveParams {
    pub fn zeros(c: usize, m: usize) -> Result<WaveParams> {
        if c == 0 || m == 0 {
            return Err(Error::config(format!("degenerate wave extents C={c}, m={m}")));
        }
        Ok(WaveParams {
            m,
            wc: Parameter::new("wave.wc", Tensor::zeros(&[c, c])?),
            wq: Parameter::new("wave.wq", Tensor::zeros(&[c, c])?),
            wt: Parameter::new("wave.wt", Tensor::zeros(&[m, m])?),
            wi: Parameter::new("wave.wi", Tensor::zeros(&[m, m])?),
            wp: Parameter::new("wave.wp", Tensor::zeros(&[c, c])?),
        })
    }

    /// Weights uniform in +-1/sqrt(fan_in), fixed draw order.
    pub fn seeded(c: usize, m: usize, seed: u64) -> Result<WaveParams> {
        if c == 0 || m == 0 {
            return Err(Error::config(format!("degenerate wave extents C={c}, m={m}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gc = 1.0 / (c as f32).sqrt();
        let gm = 1.0 / (m as f32).sqrt();
        Ok(WaveParams {
            m,
            wc: Parameter::new("wave.wc", Tensor::uniform(&[c, c], -gc, gc, &mut rng)?),
            wq: Parameter::new("wave.wq", Tensor::uniform(&[c, c], -gc, gc, &mut rng)?),
            wt: Parameter::new("wave.wt", Tensor::uniform(&[m, m], -gm, gm, &mut rng)?),
            wi: Parameter::new("wave.wi", Tensor::uniform(&[m, m], -gm, gm, &mut rng)?),
            wp: Parameter::new("wave.wp", Tensor::uniform(&[c, c], -gc, gc, &mut rng)?),
        })
    }

    pub fn channels(&self) -> usize {
        self.wc.value.shape()[0]
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        vec![&self.wc, &self.wq, &self.wt, &self.wi, &self.wp]
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.wc, &mut self.wq, &mut self.wt, &mut self.wi, &mut self.wp]
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> WaveVars<'t> {
        WaveVars {
            wc: self.wc.bind(tape),
            wq: self.wq.bind(tape),
            wt: self.wt.bind(tape),
            wi: self.wi.bind(tape),
            wp: self.wp.bind(tape),
        }
    }
}

/// The parameters of [`WaveParams`] recorded on a tape.
#[derive(Clone, Copy)]
pub struct WaveVars<'t> {
    pub wc: Var<'t>,
    pub wq: Var<'t>,
    pub wt: Var<'t>,
    pub wi: Var<'t>,
    pub wp: Var<'t>,
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
pub struct WaveGraph<'t> {
    pub out: Var<'t>,
    /// Wc.X before the absolute value, in channel-major C x (H.W) layout.
    /// Finite-difference checks need to know how close a configuration sits
    /// to that kink.
    pub amp_pre: Var<'t>,
    /// Amplitudes |Wc.X| in the same layout.
    pub amp: Var<'t>,
    /// Phases Wq.X in the same layout.
    pub theta: Var<'t>,
}

/// Records the block on the tape of `x`.
pub fn superposition_graph<'t>(x: Var<'t>, m: usize, p: WaveVars<'t>) -> Result<WaveGraph<'t>> {
    let xs = x.shape();
    let (c, h, w) = match xs.as_slice() {
        &[c, h, w] => (c, h, w),
        s => return Err(Error::shape(format!("superposition input wants C x H x W, got {s:?}"))),
    };
    if p.wc.shape().first() != Some(&c) {
        return Err(Error::shape(format!(
            "wave channel maps were built for C={}, input has C={c}",
            p.wc.shape().first().copied().unwrap_or(0)
        )));
    }
    let s = slots_per_token(h * w, m)?;
    let x_flat = x.reshape(&[c, h * w])?;
    let amp_pre = p.wc.matmul(x_flat)?;
    let amp = amp_pre.abs();
    let theta = p.wq.matmul(x_flat)?;
    let real = amp.mul(theta.cos())?.token_major(m, s)?;
    let imag = amp.mul(theta.sin())?.token_major(m, s)?;
    let fused = p.wt.matmul(real)?.add(p.wi.matmul(imag)?)?;
    let out = p.wp.matmul(fused.channel_major(c, s)?)?.reshape(&[c, h, w])?;
    Ok(WaveGraph { out, amp_pre, amp, theta })
}

/// Eager evaluation of the whole block.
pub fn superposition_forward(x: &Tensor, p: &WaveParams) -> Result<Tensor> {
    let tape = Tape::new();
    superposition_graph(tape.leaf(x), p.m, p.bind(&tape))?.out.to_tensor()
}

/// Amplitude and phase for every token of `x` under `p`.
pub fn wave_tokens(x: &Tensor, p: &WaveParams) -> Result<WaveTokens> {
    let (c, h, w) = rank3(x, "wave_tokens")?;
    let s = slots_per_token(h * w, p.m)?;
    let tokens = split_tokens(x, p.m)?;
    let mut amp = Vec::with_capacity(p.m * c * s);
    let mut th = Vec::with_capacity(p.m * c * s);
    for tok in &tokens {
        amp.extend_from_slice(amplitude(tok, &p.wc.value)?.data());
        th.extend_from_slice(phase(tok, &p.wq.value)?.data());
    }
    WaveTokens::new(
        Tensor::new(&[p.m, c, s], amp)?,
        Tensor::new(&[p.m, c, s], th)?,
    )
}
