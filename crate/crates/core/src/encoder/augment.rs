//! Seeded view augmentation: crop-and-resize, horizontal flip, intensity
//! scaling and additive Gaussian noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volume::{slice_extent, Slice, Volume};

/// Minimum slice extent accepted by the augmentations.
pub const MIN_EXTENT: usize = 8;

/// Distribution of view transforms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformSpec {
    /// Smallest retained fraction of the slice area, in `[0.5, 1]`.
    pub min_crop_area: f64,
    /// Crop aspect ratios are drawn log-uniformly from `[1/r, r]`.
    pub max_aspect: f64,
    pub flip_prob: f64,
    pub noise_std: f64,
    /// Intensity scale drawn uniformly from `[lo, hi]`.
    pub intensity: (f64, f64),
    /// Draw independent parameters for every slice of a volume.
    pub per_slice: bool,
}

impl Default for TransformSpec {
    fn default() -> Self {
        Self {
            min_crop_area: 0.6,
            max_aspect: 4.0 / 3.0,
            flip_prob: 0.5,
            noise_std: 0.05,
            intensity: (0.8, 1.2),
            per_slice: false,
        }
    }
}

impl TransformSpec {
    /// Spec whose every draw leaves the input unchanged.
    pub fn identity() -> Self {
        Self {
            min_crop_area: 1.0,
            max_aspect: 1.0,
            flip_prob: 0.0,
            noise_std: 0.0,
            intensity: (1.0, 1.0),
            per_slice: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.5..=1.0).contains(&self.min_crop_area) {
            return Err(Error::Config(format!("min_crop_area {} outside [0.5, 1]", self.min_crop_area)));
        }
        if !(self.max_aspect >= 1.0) {
            return Err(Error::Config(format!("max_aspect {} below 1", self.max_aspect)));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("flip_prob {} outside [0, 1]", self.flip_prob)));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config(format!("noise_std {} is negative", self.noise_std)));
        }
        let (lo, hi) = self.intensity;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::Config(format!("intensity range ({lo}, {hi}) is invalid")));
        }
        Ok(())
    }

    /// Draws concrete parameters for a slice of `height x width`.
    pub fn draw(&self, seed: u64, height: usize, width: usize) -> TransformParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let area = if self.min_crop_area < 1.0 { rng.gen_range(self.min_crop_area..=1.0) } else { 1.0 };
        let ratio = if self.max_aspect > 1.0 && area < 1.0 {
            let l = self.max_aspect.ln();
            rng.gen_range(-l..=l).exp()
        } else {
            1.0
        };
        let (hf, wf) = (height as f64, width as f64);
        let mut h = (area * ratio).sqrt().min(1.0) * hf;
        let mut w = area * hf * wf / h;
        if w > wf {
            w = wf;
            h = area * hf;
        }
        let top = if hf > h { rng.gen_range(0.0..=hf - h) } else { 0.0 };
        let left = if wf > w { rng.gen_range(0.0..=wf - w) } else { 0.0 };
        let flip = self.flip_prob > 0.0 && rng.gen_bool(self.flip_prob);
        let (lo, hi) = self.intensity;
        let gain = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        TransformParams {
            crop: CropWindow { top, left, height: h, width: w },
            flip,
            gain,
            noise_std: self.noise_std,
            noise_seed: rng.gen(),
        }
    }
}

/// Crop rectangle in pixel units (may be fractional).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropWindow {
    pub top: f64,
    pub left: f64,
    pub height: f64,
    pub width: f64,
}

/// One concrete draw from a [`TransformSpec`].
#[derive(Clone, Debug, PartialEq)]
pub struct TransformParams {
    pub crop: CropWindow,
    pub flip: bool,
    pub gain: f64,
    pub noise_std: f64,
    pub noise_seed: u64,
}

impl TransformParams {
    /// No-op parameters for a slice of the given size.
    pub fn identity(height: usize, width: usize) -> Self {
        Self {
            crop: CropWindow { top: 0.0, left: 0.0, height: height as f64, width: width as f64 },
            flip: false,
            gain: 1.0,
            noise_std: 0.0,
            noise_seed: 0,
        }
    }

    /// Only a horizontal flip.
    pub fn flip_only(height: usize, width: usize) -> Self {
        Self { flip: true, ..Self::identity(height, width) }
    }

    /// Applies the transform; `index` decorrelates noise between slices that
    /// share one parameter draw.
    pub fn apply<T: Scalar>(&self, slice: &Slice<T>, index: u64) -> Result<Slice<T>> {
        let (h, w) = slice_extent(slice)?;
        let c = self.crop;
        let valid = c.height >= 1.0
            && c.width >= 1.0
            && c.top >= 0.0
            && c.left >= 0.0
            && c.top + c.height <= h as f64 + 1e-9
            && c.left + c.width <= w as f64 + 1e-9;
        if !valid {
            return Err(Error::DegenerateCrop(format!("{c:?} on a {h}x{w} slice")));
        }
        let mut out = resample(slice, h, w, &c);
        if self.flip {
            for row in out.chunks_mut(w) {
                row.reverse();
            }
        }
        if self.gain != 1.0 {
            let g = T::of(self.gain);
            out.iter_mut().for_each(|v| *v *= g);
        }
        if self.noise_std > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            for v in out.iter_mut() {
                let n: f64 = StandardNormal.sample(&mut rng);
                *v += T::of(n * self.noise_std);
            }
        }
        Ok(Tensor::from_vec(&[h, w], out))
    }
}

/// Bilinear resample of the crop window back to the full `h x w` grid, using
/// pixel-center alignment so that a full-frame window is the identity.
fn resample<T: Scalar>(slice: &Slice<T>, h: usize, w: usize, c: &CropWindow) -> Vec<T> {
    let src = slice.data();
    let sy = c.height / h as f64;
    let sx = c.width / w as f64;
    let sample_axis = |pos: f64, len: usize| -> (usize, usize, f64) {
        let p = pos.clamp(0.0, (len - 1) as f64);
        let i0 = (p.floor() as usize).min(len - 1);
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, p - i0 as f64)
    };
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let (y0, y1, fy) = sample_axis(c.top + (y as f64 + 0.5) * sy - 0.5, h);
        for x in 0..w {
            let (x0, x1, fx) = sample_axis(c.left + (x as f64 + 0.5) * sx - 0.5, w);
            let v = if fx == 0.0 && fy == 0.0 {
                src[y0 * w + x0]
            } else {
                let (fx, fy) = (T::of(fx), T::of(fy));
                let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                top * (T::one() - fy) + bot * fy
            };
            out.push(v);
        }
    }
    out
}

/// Seeded augmentation of a single slice.
pub fn augment_slice<T: Scalar>(slice: &Slice<T>, spec: &TransformSpec, seed: u64) -> Result<Slice<T>> {
    let (h, w) = slice_extent(slice)?;
    if h < MIN_EXTENT || w < MIN_EXTENT {
        return Err(Error::SliceTooSmall(h, w));
    }
    spec.draw(seed, h, w).apply(slice, 0)
}

/// Seeded augmentation of a volume. One parameter draw is shared by all
/// slices unless `spec.per_slice` is set.
pub fn augment_volume<T: Scalar>(volume: &Volume<T>, spec: &TransformSpec, seed: u64) -> Result<Volume<T>> {
    let (h, w) = volume.extent()?;
    if h < MIN_EXTENT || w < MIN_EXTENT {
        return Err(Error::SliceTooSmall(h, w));
    }
    let shared = spec.draw(seed, h, w);
    let slices = volume
        .slices()
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if spec.per_slice {
                spec.draw(seed.wrapping_add(0x5851_F42D_4C95_7F2D_u64.wrapping_mul(i as u64 + 1)), h, w).apply(s, 0)
            } else {
                shared.apply(s, i as u64)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Volume::new(slices, volume.dataset())
}
