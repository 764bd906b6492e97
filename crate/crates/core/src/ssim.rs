//! Windowed structural similarity and its dissimilarity map.
//!
//! Statistics use a k x k uniform window with replicated borders, computed
//! as two separable clamped box passes in f64. Multi-channel images are
//! reduced to luma first. The three factor maps are
//!
//!   l = (2 mu_f mu_s + C1) / (mu_f^2 + mu_s^2 + C1)
//!   c = (2 phi_f phi_s + C2) / (phi_f^2 + phi_s^2 + C2)
//!   s = (cov_fs + C3) / (phi_f phi_s + C3)
//!
//! where phi is the windowed standard deviation and cov the windowed
//! covariance. phi_f*phi_s is evaluated as sqrt(var_f*var_s): identical in
//! exact arithmetic, and for f == s it makes every factor exactly 1, so the
//! standard dissimilarity of an image with itself is exactly 0.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimConstants {
    /// Window side; must be odd.
    pub window: usize,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl SsimConstants {
    /// Stabilizers from the usual K-form: C1 = (k1 L)^2, C2 = (k2 L)^2,
    /// C3 = C2 / 2, with L the value range.
    pub fn from_k(k1: f64, k2: f64, range: f64, window: usize) -> SsimConstants {
        let c1 = (k1 * range).powi(2);
        let c2 = (k2 * range).powi(2);
        SsimConstants { window, c1, c2, c3: c2 / 2.0, alpha: 1.0, beta: 1.0, gamma: 1.0 }
    }

    fn validate(&self) -> Result<()> {
        if self.window == 0 || self.window % 2 == 0 {
            return Err(Error::config(format!("SSIM window {} must be odd", self.window)));
        }
        for (name, v) in [
            ("c1", self.c1),
            ("c2", self.c2),
            ("c3", self.c3),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ] {
            if !v.is_finite() {
                return Err(Error::config(format!("SSIM constant {name} = {v}")));
            }
        }
        if self.c1 < 0.0 || self.c2 < 0.0 || self.c3 < 0.0 {
            return Err(Error::config("SSIM stabilizers must be non-negative".to_string()));
        }
        Ok(())
    }
}

impl Default for SsimConstants {
    fn default() -> SsimConstants {
        SsimConstants::from_k(0.01, 0.03, 1.0, 7)
    }
}

/// Per-pixel factor maps, each H x W.
#[derive(Clone, Debug)]
pub struct SsimMaps {
    pub luminance: Tensor,
    pub contrast: Tensor,
    pub structure: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DssimMode {
    /// (1 - S) / 2, clamped at 0; bounded and zero for identical inputs.
    Standard,
    /// 1 / max(1 - S, 1e-6) as published; the singularity at S = 1 is capped.
    PaperLiteral,
}

impl std::str::FromStr for DssimMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<DssimMode> {
        match s {
            "standard" => Ok(DssimMode::Standard),
            "paper-literal" => Ok(DssimMode::PaperLiteral),
            other => Err(Error::config(format!(
                "dssim mode {other:?}, want standard or paper-literal"
            ))),
        }
    }
}

impl std::fmt::Display for DssimMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DssimMode::Standard => "standard",
            DssimMode::PaperLiteral => "paper-literal",
        })
    }
}

/// Clamped box sum over a k x k window, separable: one horizontal pass with
/// x clamped to the row, one vertical pass with y clamped to the column.
/// Equals the direct 2-D clamped sum term for term.
fn box_sum(plane: &[f64], h: usize, w: usize, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let mut rows = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for dx in -r..=r {
                let xc = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                acc += plane[y * w + xc];
            }
            rows[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for dy in -r..=r {
                let yc = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                acc += rows[yc * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

struct WindowStats {
    h: usize,
    w: usize,
    mu_f: Vec<f64>,
    mu_s: Vec<f64>,
    var_f: Vec<f64>,
    var_s: Vec<f64>,
    cov: Vec<f64>,
}

fn window_stats(f: &Image, s: &Image, k: &SsimConstants) -> Result<WindowStats> {
    k.validate()?;
    if f.width() != s.width() || f.height() != s.height() {
        return Err(Error::shape(format!(
            "image extents differ: {}x{} vs {}x{}",
            f.width(),
            f.height(),
            s.width(),
            s.height()
        )));
    }
    let (h, w) = (f.height(), f.width());
    let lf: Vec<f64> = f.luma()?.data().iter().map(|&v| f64::from(v)).collect();
    let ls: Vec<f64> = s.luma()?.data().iter().map(|&v| f64::from(v)).collect();

    let ff: Vec<f64> = lf.iter().map(|v| v * v).collect();
    let ss: Vec<f64> = ls.iter().map(|v| v * v).collect();
    let fs: Vec<f64> = lf.iter().zip(&ls).map(|(a, b)| a * b).collect();

    let radius = k.window / 2;
    let n = (k.window * k.window) as f64;
    let mean = |plane: &[f64]| -> Vec<f64> {
        box_sum(plane, h, w, radius).into_iter().map(|v| v / n).collect()
    };

    let mu_f = mean(&lf);
    let mu_s = mean(&ls);
    let e_ff = mean(&ff);
    let e_ss = mean(&ss);
    let e_fs = mean(&fs);

    let var = |e2: &[f64], mu: &[f64]| -> Vec<f64> {
        e2.iter().zip(mu).map(|(&e, &m)| (e - m * m).max(0.0)).collect()
    };
    let var_f = var(&e_ff, &mu_f);
    let var_s = var(&e_ss, &mu_s);
    let cov = e_fs
        .iter()
        .zip(mu_f.iter().zip(&mu_s))
        .map(|(&e, (&a, &b))| e - a * b)
        .collect();

    Ok(WindowStats { h, w, mu_f, mu_s, var_f, var_s, cov })
}

pub fn ssim_maps(f: &Image, s: &Image, k: &SsimConstants) -> Result<SsimMaps> {
    let st = window_stats(f, s, k)?;
    let n = st.h * st.w;
    let mut l = Vec::with_capacity(n);
    let mut c = Vec::with_capacity(n);
    let mut sm = Vec::with_capacity(n);
    for i in 0..n {
        let (mf, ms) = (st.mu_f[i], st.mu_s[i]);
        let (vf, vs) = (st.var_f[i], st.var_s[i]);
        let sd_prod = (vf * vs).sqrt();
        l.push(((2.0 * mf * ms + k.c1) / (mf * mf + ms * ms + k.c1)) as f32);
        c.push(((2.0 * sd_prod + k.c2) / (vf + vs + k.c2)) as f32);
        sm.push(((st.cov[i] + k.c3) / (sd_prod + k.c3)) as f32);
    }
    let shape = [st.h, st.w];
    Ok(SsimMaps {
        luminance: Tensor::new(&shape, l)?,
        contrast: Tensor::new(&shape, c)?,
        structure: Tensor::new(&shape, sm)?,
    })
}

/// Per-pixel dissimilarity from S = l^alpha * c^beta * s^gamma.
pub fn dssim_map(f: &Image, s: &Image, k: &SsimConstants, mode: DssimMode) -> Result<Tensor> {
    let maps = ssim_maps(f, s, k)?;
    let n = maps.luminance.len();
    let mut out = Vec::with_capacity(n);
    let pow = |v: f64, e: f64| if e == 1.0 { v } else { v.powf(e) };
    for i in 0..n {
        let ssim = pow(f64::from(maps.luminance.data()[i]), k.alpha)
            * pow(f64::from(maps.contrast.data()[i]), k.beta)
            * pow(f64::from(maps.structure.data()[i]), k.gamma);
        let d = match mode {
            DssimMode::Standard => ((1.0 - ssim) / 2.0).max(0.0),
            DssimMode::PaperLiteral => 1.0 / (1.0 - ssim).max(1e-6),
        };
        out.push(d as f32);
    }
    Tensor::new(maps.luminance.shape(), out)
}
