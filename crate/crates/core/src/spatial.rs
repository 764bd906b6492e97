//! Bi-directional spatial attention.
//!
//! Features are average-pooled along each spatial axis, the two directional
//! profiles are concatenated and squeezed through a shared bottleneck, and
//! the split halves drive per-row and per-column sigmoid gates:
//!
//!   z_h[c,h] = mean_w X[c,h,w]          y_w[c,w] = mean_h X[c,h,w]
//!   f        = relu(K1 . [z_h | y_w] + b1)
//!   g_h      = sigmoid(Kh . f[:, :H] + bh)
//!   g_w      = sigmoid(Kw . f[:, H:] + bw)
//!   X_bi[c,h,w] = X[c,h,w] . g_h[c,h] . g_w[c,w]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Parameter, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Directional pooling
// ---------------------------------------------------------------------------

/// Mean over the width axis: C x H x W -> C x H.
pub fn pool_horizontal(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = rank3(x, "pool_horizontal")?;
    let mut out = Vec::with_capacity(c * h);
    for ci in 0..c {
        for hi in 0..h {
            let row = &x.data()[ci * h * w + hi * w..ci * h * w + (hi + 1) * w];
            out.push((row.iter().map(|&v| f64::from(v)).sum::<f64>() / w as f64) as f32);
        }
    }
    Tensor::new(&[c, h], out)
}

/// Mean over the height axis: C x H x W -> C x W.
pub fn pool_vertical(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = rank3(x, "pool_vertical")?;
    let mut out = Vec::with_capacity(c * w);
    for ci in 0..c {
        for wi in 0..w {
            let mut acc = 0.0f64;
            for hi in 0..h {
                acc += f64::from(x.data()[ci * h * w + hi * w + wi]);
            }
            out.push((acc / h as f64) as f32);
        }
    }
    Tensor::new(&[c, w], out)
}

fn rank3(x: &Tensor, op: &str) -> Result<(usize, usize, usize)> {
    match x.shape() {
        &[c, h, w] => Ok((c, h, w)),
        s => Err(Error::shape(format!("{op} wants C x H x W, got {s:?}"))),
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// The squeeze kernel plus the two directional gate kernels, with biases.
#[derive(Clone, Debug)]
pub struct BiDirParams {
    pub reduction: usize,
    pub k1: Parameter,   // (C/r) x C
    pub k1_b: Parameter, // C/r
    pub kh: Parameter,   // C x (C/r)
    pub kh_b: Parameter, // C
    pub kw: Parameter,   // C x (C/r)
    pub kw_b: Parameter, // C
}

fn squeeze_width(c: usize, reduction: usize) -> Result<usize> {
    if reduction == 0 || c % reduction != 0 {
        return Err(Error::shape(format!(
            "channel count {c} is not divisible by reduction {reduction}"
        )));
    }
    Ok(c / reduction)
}

impl BiDirParams {
    /// All kernels and biases zero; both gates evaluate to exactly 1/2.
    pub fn zeros(c: usize, reduction: usize) -> Result<BiDirParams> {
        let cr = squeeze_width(c, reduction)?;
        Ok(BiDirParams {
            reduction,
            k1: Parameter::new("bidir.k1", Tensor::zeros(&[cr, c])?),
            k1_b: Parameter::new("bidir.k1_b", Tensor::zeros(&[cr])?),
            kh: Parameter::new("bidir.kh", Tensor::zeros(&[c, cr])?),
            kh_b: Parameter::new("bidir.kh_b", Tensor::zeros(&[c])?),
            kw: Parameter::new("bidir.kw", Tensor::zeros(&[c, cr])?),
            kw_b: Parameter::new("bidir.kw_b", Tensor::zeros(&[c])?),
        })
    }

    /// Kernels uniform in +-1/sqrt(fan_in), biases zero, in a fixed draw order.
    pub fn seeded(c: usize, reduction: usize, seed: u64) -> Result<BiDirParams> {
        let cr = squeeze_width(c, reduction)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b1 = 1.0 / (c as f32).sqrt();
        let b2 = 1.0 / (cr as f32).sqrt();
        Ok(BiDirParams {
            reduction,
            k1: Parameter::new("bidir.k1", Tensor::uniform(&[cr, c], -b1, b1, &mut rng)?),
            k1_b: Parameter::new("bidir.k1_b", Tensor::zeros(&[cr])?),
            kh: Parameter::new("bidir.kh", Tensor::uniform(&[c, cr], -b2, b2, &mut rng)?),
            kh_b: Parameter::new("bidir.kh_b", Tensor::zeros(&[c])?),
            kw: Parameter::new("bidir.kw", Tensor::uniform(&[c, cr], -b2, b2, &mut rng)?),
            kw_b: Parameter::new("bidir.kw_b", Tensor::zeros(&[c])?),
        })
    }

    pub fn channels(&self) -> usize {
        self.k1.value.shape()[1]
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        vec![&self.k1, &self.k1_b, &self.kh, &self.kh_b, &self.kw, &self.kw_b]
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        vec![
            &mut self.k1,
            &mut self.k1_b,
            &mut self.kh,
            &mut self.kh_b,
            &mut self.kw,
            &mut self.kw_b,
        ]
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BiDirVars<'t> {
        BiDirVars {
            k1: self.k1.bind(tape),
            k1_b: self.k1_b.bind(tape),
            kh: self.kh.bind(tape),
            kh_b: self.kh_b.bind(tape),
            kw: self.kw.bind(tape),
            kw_b: self.kw_b.bind(tape),
        }
    }
}

/// The parameters of [`BiDirParams`] recorded on a tape.
#[derive(Clone, Copy)]
pub struct BiDirVars<'t> {
    pub k1: Var<'t>,
    pub k1_b: Var<'t>,
    pub kh: Var<'t>,
    pub kh_b: Var<'t>,
    pub kw: Var<'t>,
    pub kw_b: Var<'t>,
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

/// Every intermediate the block produces, as tape variables. `f_pre` is the
/// squeeze before its ReLU; finite-difference checks need to know how close
/// a configuration sits to that kink.
#[derive(Clone, Copy)]
pub struct BiDirGraph<'t> {
    pub x_bi: Var<'t>,
    pub z_h: Var<'t>,
    pub y_w: Var<'t>,
    pub q: Var<'t>,
    pub f_pre: Var<'t>,
    pub f: Var<'t>,
    pub f_h: Var<'t>,
    pub f_w: Var<'t>,
    pub g_h: Var<'t>,
    pub g_w: Var<'t>,
}

/// Records the block on the tape of `x`.
pub fn bidir_graph<'t>(x: Var<'t>, p: BiDirVars<'t>) -> Result<BiDirGraph<'t>> {
    let xs = x.shape();
    let (c, h, _w) = match xs.as_slice() {
        &[c, h, w] => (c, h, w),
        s => return Err(Error::shape(format!("bidir input wants C x H x W, got {s:?}"))),
    };
    if p.k1.shape().get(1) != Some(&c) {
        return Err(Error::shape(format!(
            "kernels were built for C={}, input has C={c}",
            p.k1.shape().get(1).copied().unwrap_or(0)
        )));
    }
    let z_h = x.mean_over_w()?;
    let y_w = x.mean_over_h()?;
    let q = z_h.concat_cols(y_w)?;
    let f_pre = p.k1.matmul(q)?.add_col_bias(p.k1_b)?;
    let f = f_pre.relu();
    let f_h = f.slice_cols(0, h)?;
    let f_w = f.slice_cols(h, q.shape()[1] - h)?;
    let g_h = p.kh.matmul(f_h)?.add_col_bias(p.kh_b)?.sigmoid();
    let g_w = p.kw.matmul(f_w)?.add_col_bias(p.kw_b)?.sigmoid();
    let x_bi = x.scale_rows(g_h)?.scale_cols(g_w)?;
    Ok(BiDirGraph { x_bi, z_h, y_w, q, f_pre, f, f_h, f_w, g_h, g_w })
}

/// The pooled profiles, squeeze activations, and gates as plain tensors.
#[derive(Clone, Debug)]
pub struct DirectionalProfiles {
    pub z_h: Tensor,
    pub y_w: Tensor,
    pub q: Tensor,
    pub f: Tensor,
    pub f_h: Tensor,
    pub f_w: Tensor,
    pub g_h: Tensor,
    pub g_w: Tensor,
}

/// Eager evaluation: gated features plus all intermediates.
pub fn bidir_forward(x: &Tensor, p: &BiDirParams) -> Result<(Tensor, DirectionalProfiles)> {
    let tape = Tape::new();
    let g = bidir_graph(tape.leaf(x), p.bind(&tape))?;
    Ok((
        g.x_bi.to_tensor()?,
        DirectionalProfiles {
            z_h: g.z_h.to_tensor()?,
            y_w: g.y_w.to_tensor()?,
            q: g.q.to_tensor()?,
            f: g.f.to_tensor()?,
            f_h: g.f_h.to_tensor()?,
            f_w: g.f_w.to_tensor()?,
            g_h: g.g_h.to_tensor()?,
            g_w: g.g_w.to_tensor()?,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradient_check, DEFAULT_CHECK_EPS};

    fn random_x(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        Tensor::seeded_uniform(&[c, h, w], seed, -1.0, 1.0).unwrap()
    }

    #[test]
    fn pool_horizontal_of_constant_is_constant() {
        let x = Tensor::constant(&[2, 3, 4], 3.0).unwrap();
        let p = pool_horizontal(&x).unwrap();
        assert_eq!(p.shape(), &[2, 3]);
        assert!(p.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn pool_horizontal_averages_a_row() {
        let x = Tensor::new(&[1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(pool_horizontal(&x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn pool_vertical_of_constant_is_constant() {
        let x = Tensor::constant(&[2, 3, 4], -1.0).unwrap();
        let p = pool_vertical(&x).unwrap();
        assert_eq!(p.shape(), &[2, 4]);
        assert!(p.data().iter().all(|&v| v == -1.0));
    }

    #[test]
    fn pool_vertical_averages_a_column() {
        let x = Tensor::new(&[1, 2, 1], vec![0.0, 4.0]).unwrap();
        assert_eq!(pool_vertical(&x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn pools_match_a_naive_loop() {
        let x = random_x(3, 5, 7, 42);
        let (c, h, w) = (3, 5, 7);
        let ph = pool_horizontal(&x).unwrap();
        let pv = pool_vertical(&x).unwrap();
        for ci in 0..c {
            for hi in 0..h {
                let mut s = 0.0f32;
                for wi in 0..w {
                    s += x.get(&[ci, hi, wi]).unwrap();
                }
                assert!((ph.get(&[ci, hi]).unwrap() - s / w as f32).abs() < 1e-6);
            }
            for wi in 0..w {
                let mut s = 0.0f32;
                for hi in 0..h {
                    s += x.get(&[ci, hi, wi]).unwrap();
                }
                assert!((pv.get(&[ci, wi]).unwrap() - s / h as f32).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn pooling_directions_swap_under_transpose() {
        let x = random_x(2, 4, 6, 7);
        let ph = pool_horizontal(&x).unwrap();
        let pv_t = pool_vertical(&x.transpose_hw().unwrap()).unwrap();
        assert_eq!(ph.shape(), pv_t.shape());
        for (a, b) in ph.data().iter().zip(pv_t.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_parameters_halve_both_gates() {
        let x = random_x(4, 3, 5, 9);
        let p = BiDirParams::zeros(4, 2).unwrap();
        let (x_bi, prof) = bidir_forward(&x, &p).unwrap();
        assert!(prof.g_h.data().iter().all(|&g| g == 0.5));
        assert!(prof.g_w.data().iter().all(|&g| g == 0.5));
        for (a, b) in x_bi.data().iter().zip(x.data()) {
            assert_eq!(*a, b * 0.25);
        }
    }

    #[test]
    fn constant_input_gives_constant_gates_per_channel() {
        // Constant X pools to constant profiles, so each gate is constant
        // along its own axis and X_bi is a per-channel multiple of X.
        let x = Tensor::constant(&[4, 5, 5], 0.7).unwrap();
        let p = BiDirParams::seeded(4, 2, 11).unwrap();
        let (x_bi, prof) = bidir_forward(&x, &p).unwrap();
        for ci in 0..4 {
            let gh0 = prof.g_h.get(&[ci, 0]).unwrap();
            let gw0 = prof.g_w.get(&[ci, 0]).unwrap();
            for i in 1..5 {
                assert!((prof.g_h.get(&[ci, i]).unwrap() - gh0).abs() < 1e-6);
                assert!((prof.g_w.get(&[ci, i]).unwrap() - gw0).abs() < 1e-6);
            }
            let r0 = x_bi.get(&[ci, 0, 0]).unwrap() / 0.7;
            for hi in 0..5 {
                for wi in 0..5 {
                    assert!((x_bi.get(&[ci, hi, wi]).unwrap() / 0.7 - r0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn intermediates_have_the_documented_extents() {
        let x = random_x(8, 5, 3, 21);
        let p = BiDirParams::seeded(8, 4, 22).unwrap();
        let (x_bi, prof) = bidir_forward(&x, &p).unwrap();
        assert_eq!(x_bi.shape(), &[8, 5, 3]);
        assert_eq!(prof.z_h.shape(), &[8, 5]);
        assert_eq!(prof.y_w.shape(), &[8, 3]);
        assert_eq!(prof.q.shape(), &[8, 8]);
        assert_eq!(prof.f.shape(), &[2, 8]);
        assert_eq!(prof.f_h.shape(), &[2, 5]);
        assert_eq!(prof.f_w.shape(), &[2, 3]);
        assert_eq!(prof.g_h.shape(), &[8, 5]);
        assert_eq!(prof.g_w.shape(), &[8, 3]);
        assert!(prof.f.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn gates_strictly_shrink_nonzero_entries() {
        let x = random_x(6, 4, 4, 31);
        let p = BiDirParams::seeded(6, 2, 32).unwrap();
        let (x_bi, _) = bidir_forward(&x, &p).unwrap();
        for (a, b) in x_bi.data().iter().zip(x.data()) {
            if *b != 0.0 {
                assert!(a.abs() < b.abs());
            }
        }
    }

    #[test]
    fn gating_factorizes_into_directional_logs() {
        let x = Tensor::seeded_uniform(&[3, 4, 5], 41, 0.2, 1.0).unwrap();
        let p = BiDirParams::seeded(3, 3, 42).unwrap();
        let (x_bi, prof) = bidir_forward(&x, &p).unwrap();
        let (h, w) = (4, 5);
        for ci in 0..3 {
            for hi in 0..h {
                for wi in 0..w {
                    let ratio = x_bi.get(&[ci, hi, wi]).unwrap() / x.get(&[ci, hi, wi]).unwrap();
                    let lhs = f64::from(ratio).ln();
                    let rhs = f64::from(prof.g_h.get(&[ci, hi]).unwrap()).ln()
                        + f64::from(prof.g_w.get(&[ci, wi]).unwrap()).ln();
                    assert!((lhs - rhs).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn channel_permutation_is_equivariant() {
        let (c, h, w, r) = (6, 3, 4, 2);
        let x = random_x(c, h, w, 51);
        let p = BiDirParams::seeded(c, r, 52).unwrap();
        let perm = [2usize, 0, 5, 1, 3, 4];

        // Permute input channels and the C-indexed axes of every kernel.
        let mut xp = vec![0.0f32; c * h * w];
        for ci in 0..c {
            xp[perm[ci] * h * w..(perm[ci] + 1) * h * w]
                .copy_from_slice(&x.data()[ci * h * w..(ci + 1) * h * w]);
        }
        let xp = Tensor::new(&[c, h, w], xp).unwrap();
        let cr = c / r;
        let permute_cols = |t: &Tensor| {
            let mut out = vec![0.0f32; cr * c];
            for i in 0..cr {
                for j in 0..c {
                    out[i * c + perm[j]] = t.data()[i * c + j];
                }
            }
            Tensor::new(&[cr, c], out).unwrap()
        };
        let permute_rows = |t: &Tensor| {
            let mut out = vec![0.0f32; c * cr];
            for i in 0..c {
                out[perm[i] * cr..(perm[i] + 1) * cr]
                    .copy_from_slice(&t.data()[i * cr..(i + 1) * cr]);
            }
            Tensor::new(&[c, cr], out).unwrap()
        };
        let mut pp = BiDirParams::zeros(c, r).unwrap();
        pp.k1.value = permute_cols(&p.k1.value);
        pp.kh.value = permute_rows(&p.kh.value);
        pp.kw.value = permute_rows(&p.kw.value);

        let (x_bi, _) = bidir_forward(&x, &p).unwrap();
        let (x_bi_p, _) = bidir_forward(&xp, &pp).unwrap();
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    let a = x_bi.get(&[ci, hi, wi]).unwrap();
                    let b = x_bi_p.get(&[perm[ci], hi, wi]).unwrap();
                    assert!((a - b).abs() < 1e-6, "channel {ci} moved wrong");
                }
            }
        }
    }

    #[test]
    fn reduction_must_divide_channels() {
        assert!(matches!(BiDirParams::seeded(6, 4, 0), Err(Error::Shape(_))));
        assert!(matches!(BiDirParams::zeros(6, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn mismatched_input_channels_error() {
        let p = BiDirParams::seeded(4, 2, 1).unwrap();
        let x = random_x(6, 3, 3, 2);
        assert!(matches!(bidir_forward(&x, &p), Err(Error::Shape(_))));
    }

    #[test]
    fn gradients_pass_central_difference_checks() {
        let (c, h, w, r) = (4, 3, 3, 2);
        let x = random_x(c, h, w, 61);
        let p = BiDirParams::seeded(c, r, 62).unwrap();

        // With respect to the input.
        let report = gradient_check(
            |tape, xv| {
                let pv = p.bind(tape);
                Ok(bidir_graph(xv, pv)?.x_bi.sum_all())
            },
            &x,
            DEFAULT_CHECK_EPS,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-4, "input: {report:?}");

        // With respect to each kernel and bias in turn.
        for name in ["k1", "k1_b", "kh", "kh_b", "kw", "kw_b"] {
            let value = match name {
                "k1" => p.k1.value.clone(),
                "k1_b" => p.k1_b.value.clone(),
                "kh" => p.kh.value.clone(),
                "kh_b" => p.kh_b.value.clone(),
                "kw" => p.kw.value.clone(),
                "kw_b" => p.kw_b.value.clone(),
                _ => unreachable!(),
            };
            let report = gradient_check(
                |tape, pv| {
                    let mut bound = p.bind(tape);
                    match name {
                        "k1" => bound.k1 = pv,
                        "k1_b" => bound.k1_b = pv,
                        "kh" => bound.kh = pv,
                        "kh_b" => bound.kh_b = pv,
                        "kw" => bound.kw = pv,
                        "kw_b" => bound.kw_b = pv,
                        _ => unreachable!(),
                    }
                    Ok(bidir_graph(tape.leaf(&x), bound)?.x_bi.sum_all())
                },
                &value,
                DEFAULT_CHECK_EPS,
            )
            .unwrap();
            assert!(report.max_relative_error < 1e-4, "{name}: {report:?}");
        }
    }
}
