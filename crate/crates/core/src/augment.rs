//! Dissimilarity-guided swap augmentation.
//!
//! The window with the largest dissimilarity sum is found with a summed-area
//! table; ties go to the lexicographically smallest (row, column). A mask is
//! 1 inside that window and ramps linearly to 0 over `feather` pixels of
//! Euclidean distance outside it. Blending is the per-pixel convex
//! combination M*fake + (1-M)*source.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::ssim::{dssim_map, DssimMode, SsimConstants};
use crate::tensor::Tensor;

/// A window placement: (x_t, y_t) is the top-left corner as (column, row),
/// `h` rows tall and `w` columns wide.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct WindowSpec {
    pub x_t: usize,
    pub y_t: usize,
    pub h: usize,
    pub w: usize,
}

/// Inclusion-exclusion rectangle sums in O(1) after an O(HW) pass. The table
/// is padded by one row and column of zeros, so no corner special cases.
pub struct SummedAreaTable {
    h: usize,
    w: usize,
    sat: Vec<f64>,
}

impl SummedAreaTable {
    pub fn new(map: &Tensor) -> Result<SummedAreaTable> {
        let (h, w) = map_extents(map)?;
        let mut sat = vec![0.0f64; (h + 1) * (w + 1)];
        for y in 0..h {
            for x in 0..w {
                sat[(y + 1) * (w + 1) + (x + 1)] = f64::from(map.data()[y * w + x])
                    + sat[y * (w + 1) + (x + 1)]
                    + sat[(y + 1) * (w + 1) + x]
                    - sat[y * (w + 1) + x];
            }
        }
        Ok(SummedAreaTable { h, w, sat })
    }

    /// Sum of the map over the window.
    pub fn window_sum(&self, win: &WindowSpec) -> Result<f64> {
        if win.h == 0 || win.w == 0 || win.y_t + win.h > self.h || win.x_t + win.w > self.w {
            return Err(Error::shape(format!(
                "window {win:?} does not fit a {}x{} map",
                self.h, self.w
            )));
        }
        let (w1, y0, x0, y1, x1) =
            (self.w + 1, win.y_t, win.x_t, win.y_t + win.h, win.x_t + win.w);
        Ok(self.sat[y1 * w1 + x1] - self.sat[y0 * w1 + x1] - self.sat[y1 * w1 + x0]
            + self.sat[y0 * w1 + x0])
    }
}

fn map_extents(map: &Tensor) -> Result<(usize, usize)> {
    match map.shape() {
        &[h, w] => Ok((h, w)),
        s => Err(Error::shape(format!("dissimilarity map wants rank 2, got {s:?}"))),
    }
}

/// Finds the h x w window maximizing the dissimilarity sum. Scanning is
/// row-major with strict improvement, so ties keep the smallest (y_t, x_t).
pub fn locate_window(map: &Tensor, h: usize, w: usize) -> Result<WindowSpec> {
    let (mh, mw) = map_extents(map)?;
    if h == 0 || w == 0 || h > mh || w > mw {
        return Err(Error::shape(format!("window {h}x{w} does not fit a {mh}x{mw} map")));
    }
    let sat = SummedAreaTable::new(map)?;
    let mut best = WindowSpec { x_t: 0, y_t: 0, h, w };
    let mut best_sum = f64::NEG_INFINITY;
    for y in 0..=(mh - h) {
        for x in 0..=(mw - w) {
            let sum = sat.window_sum(&WindowSpec { x_t: x, y_t: y, h, w })?;
            if sum > best_sum {
                best_sum = sum;
                best = WindowSpec { x_t: x, y_t: y, h, w };
            }
        }
    }
    Ok(best)
}

/// Mask that is 1 inside the window and falls off linearly with Euclidean
/// distance to the window rectangle, reaching 0 at `feather` pixels out.
/// `feather == 0` gives a hard edge.
pub fn make_mask(width: usize, height: usize, win: &WindowSpec, feather: usize) -> Result<Mask> {
    if win.h == 0 || win.w == 0 || win.y_t + win.h > height || win.x_t + win.w > width {
        return Err(Error::shape(format!(
            "window {win:?} does not fit a {width}x{height} image"
        )));
    }
    let (x0, y0) = (win.x_t as f64, win.y_t as f64);
    let (x1, y1) = ((win.x_t + win.w - 1) as f64, (win.y_t + win.h - 1) as f64);
    let mut data = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let dx = (x0 - x as f64).max(x as f64 - x1).max(0.0);
            let dy = (y0 - y as f64).max(y as f64 - y1).max(0.0);
            let d = (dx * dx + dy * dy).sqrt();
            let v = if d == 0.0 {
                1.0
            } else if feather == 0 {
                0.0
            } else {
                (1.0 - d / feather as f64).max(0.0)
            };
            data.push(v as f32);
        }
    }
    Mask::new(width, height, data)
}

/// Per-pixel convex combination M*fake + (1-M)*source, clamped to [0, 1].
pub fn blend(fake: &Image, source: &Image, mask: &Mask) -> Result<Image> {
    if fake.width() != source.width()
        || fake.height() != source.height()
        || fake.channels() != source.channels()
    {
        return Err(Error::shape(format!(
            "blend inputs differ: {}x{}x{} vs {}x{}x{}",
            fake.width(),
            fake.height(),
            fake.channels(),
            source.width(),
            source.height(),
            source.channels()
        )));
    }
    if mask.width() != fake.width() || mask.height() != fake.height() {
        return Err(Error::shape(format!(
            "mask {}x{} does not match image {}x{}",
            mask.width(),
            mask.height(),
            fake.width(),
            fake.height()
        )));
    }
    let c = fake.channels();
    let mut data = Vec::with_capacity(fake.data().len());
    for (i, (&fv, &sv)) in fake.data().iter().zip(source.data()).enumerate() {
        let m = f64::from(mask.data()[i / c]);
        let v = m * f64::from(fv) + (1.0 - m) * f64::from(sv);
        data.push(v.clamp(0.0, 1.0) as f32);
    }
    Image::new(fake.width(), fake.height(), c, data)
}

/// Window scale ranges, sampled uniformly: first pick a range, then height
/// and width independently as inclusive integers inside it.
#[derive(Clone, Debug)]
pub struct AugmentConfig {
    pub ranges: Vec<(usize, usize)>,
    pub feather: usize,
    pub mode: DssimMode,
    pub constants: SsimConstants,
}

impl Default for AugmentConfig {
    fn default() -> AugmentConfig {
        AugmentConfig {
            ranges: vec![(40, 80), (80, 120), (120, 160), (224, 224)],
            feather: 2,
            mode: DssimMode::Standard,
            constants: SsimConstants::default(),
        }
    }
}

impl AugmentConfig {
    fn validate(&self) -> Result<()> {
        if self.ranges.is_empty() {
            return Err(Error::config("no window scale ranges".to_string()));
        }
        for &(lo, hi) in &self.ranges {
            if lo == 0 || lo > hi {
                return Err(Error::config(format!("bad scale range [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Augmented {
    pub image: Image,
    pub window: WindowSpec,
}

/// Full augmentation of one fake/source pair: sample a window scale, find
/// the most dissimilar window of that scale, feather a mask there, blend.
/// Everything after the scale draw is deterministic in the inputs.
pub fn augment_pair(
    fake: &Image,
    source: &Image,
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<Augmented> {
    cfg.validate()?;
    if fake.width() != source.width() || fake.height() != source.height() {
        return Err(Error::shape(format!(
            "pair extents differ: {}x{} vs {}x{}",
            fake.width(),
            fake.height(),
            source.width(),
            source.height()
        )));
    }
    let (iw, ih) = (fake.width(), fake.height());
    let min_lo = cfg.ranges.iter().map(|r| r.0).min().expect("ranges nonempty");
    if iw.min(ih) < min_lo {
        return Err(Error::config(format!(
            "{iw}x{ih} images are smaller than the smallest scale minimum {min_lo}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = cfg.ranges[rng.random_range(0..cfg.ranges.len())];
    let wh = rng.random_range(lo..=hi).min(ih);
    let ww = rng.random_range(lo..=hi).min(iw);

    let dmap = dssim_map(fake, source, &cfg.constants, cfg.mode)?;
    let window = locate_window(&dmap, wh, ww)?;
    let mask = make_mask(iw, ih, &window, cfg.feather)?;
    let image = blend(fake, source, &mask)?;
    Ok(Augmented { image, window })
}
