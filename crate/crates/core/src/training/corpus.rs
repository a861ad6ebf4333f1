//! Seeded synthetic volumes with latent classes.
//!
//! Each class is a grating with its own spatial frequency and orientation
//! (horizontal or vertical, so mirror images stay in the same class) plus a
//! Gaussian blob. Phase and blob position drift smoothly along the slice axis.
//! Every dataset adds its own intensity offset, and strong pixel noise makes a
//! single slice a weak witness of its class while a whole volume is a strong
//! one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::mix_seed;
use crate::autodiff::Tensor;
use crate::encoder::augment::MIN_EXTENT;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volume::Volume;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    /// Class-specific gratings and blobs.
    Texture,
    /// Flat images whose intensity encodes the class, evenly spread over
    /// `[0.2, 0.8]`.
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticCorpusSpec {
    /// Volume count of every dataset.
    pub volumes_per_dataset: Vec<usize>,
    pub slices: usize,
    pub extent: usize,
    pub classes: usize,
    pub pattern: Pattern,
    /// Per-pixel Gaussian noise.
    pub noise_std: f64,
    /// Intensity offset added per dataset index.
    pub dataset_shift: f64,
    pub seed: u64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self {
            volumes_per_dataset: vec![100, 100],
            slices: 16,
            extent: 32,
            classes: 4,
            pattern: Pattern::Texture,
            noise_std: 0.6,
            dataset_shift: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.extent < MIN_EXTENT {
            return Err(Error::SliceTooSmall(self.extent, self.extent));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("corpus needs at least 2 classes, got {}", self.classes)));
        }
        if self.slices < 4 {
            return Err(Error::Config(format!("corpus needs at least 4 slices per volume, got {}", self.slices)));
        }
        if self.volumes_per_dataset.is_empty() {
            return Err(Error::Config("corpus needs at least one dataset".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config(format!("noise_std {} is negative", self.noise_std)));
        }
        Ok(())
    }

    pub fn volume_count(&self) -> usize {
        self.volumes_per_dataset.iter().sum()
    }
}

/// Generated volumes. Latent classes are reachable only through
/// [`Corpus::probe_view`].
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus<T> {
    volumes: Vec<Volume<T>>,
    labels: Vec<usize>,
    classes: usize,
}

/// Labelled view of a corpus for evaluation.
#[derive(Clone, Copy, Debug)]
pub struct ProbeView<'a, T> {
    pub volumes: &'a [Volume<T>],
    pub labels: &'a [usize],
    pub classes: usize,
}

impl<T: Scalar> Corpus<T> {
    /// Unlabelled volumes, in dataset order.
    pub fn volumes(&self) -> &[Volume<T>] {
        &self.volumes
    }

    pub fn len(&self) -> usize {
        self.volumes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.volumes.is_empty()
    }

    pub fn probe_view(&self) -> ProbeView<'_, T> {
        ProbeView { volumes: &self.volumes, labels: &self.labels, classes: self.classes }
    }
}

struct ClassStyle {
    frequency: f64,
    vertical: bool,
    blob_sign: f64,
}

fn class_style(class: usize) -> ClassStyle {
    ClassStyle {
        frequency: [2.0, 4.0, 6.0][(class / 2) % 3],
        vertical: class % 2 == 1,
        blob_sign: if (class / 6).is_multiple_of(2) { 1.0 } else { -1.0 },
    }
}

pub fn generate_corpus<T: Scalar>(spec: &SyntheticCorpusSpec) -> Result<Corpus<T>> {
    spec.validate()?;
    let mut volumes = Vec::with_capacity(spec.volume_count());
    let mut labels = Vec::with_capacity(spec.volume_count());
    let mut index = 0u64;
    for (dataset, &count) in spec.volumes_per_dataset.iter().enumerate() {
        for _ in 0..count {
            let class = index as usize % spec.classes;
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, &[index]));
            volumes.push(generate_volume(spec, dataset, class, &mut rng)?);
            labels.push(class);
            index += 1;
        }
    }
    Ok(Corpus { volumes, labels, classes: spec.classes })
}

fn generate_volume<T: Scalar>(
    spec: &SyntheticCorpusSpec,
    dataset: usize,
    class: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Volume<T>> {
    let e = spec.extent;
    let shift = spec.dataset_shift * dataset as f64;
    let style = class_style(class);
    let phase0 = rng.gen_range(0.0..std::f64::consts::TAU);
    let drift = rng.gen_range(0.15..0.35);
    let amplitude = rng.gen_range(0.8..1.2);
    let (bx, by) = (rng.gen_range(0.25..0.75), rng.gen_range(0.25..0.75));
    let (vx, vy) = (rng.gen_range(-0.02..0.02), rng.gen_range(-0.02..0.02));
    let mut slices = Vec::with_capacity(spec.slices);
    for s in 0..spec.slices {
        let mut data = Vec::with_capacity(e * e);
        for y in 0..e {
            for x in 0..e {
                let (u, v) = ((x as f64 + 0.5) / e as f64, (y as f64 + 0.5) / e as f64);
                let base = match spec.pattern {
                    Pattern::Constant => 0.2 + 0.6 * class as f64 / (spec.classes - 1) as f64,
                    Pattern::Texture => {
                        let axis = if style.vertical { u } else { v };
                        let grating =
                            (std::f64::consts::TAU * style.frequency * axis + phase0 + drift * s as f64).sin();
                        let (cx, cy) = (bx + vx * s as f64, by + vy * s as f64);
                        let blob = (-((u - cx).powi(2) + (v - cy).powi(2)) / 0.02).exp();
                        0.5 + 0.3 * amplitude * grating + 0.3 * style.blob_sign * blob
                    }
                };
                let noise: f64 = StandardNormal.sample(rng);
                data.push(T::of(base + shift + spec.noise_std * noise));
            }
        }
        slices.push(Tensor::from_vec(&[e, e], data));
    }
    Volume::new(slices, dataset)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(pattern: Pattern, classes: usize) -> SyntheticCorpusSpec {
        SyntheticCorpusSpec {
            volumes_per_dataset: vec![3, 5],
            slices: 4,
            extent: 8,
            classes,
            pattern,
            ..Default::default()
        }
    }

    #[test]
    fn generation_is_pure() {
        let spec = small(Pattern::Texture, 4);
        assert_eq!(generate_corpus::<f64>(&spec).unwrap(), generate_corpus::<f64>(&spec).unwrap());
    }

    #[test]
    fn counts_and_dataset_tags() {
        let c = generate_corpus::<f64>(&small(Pattern::Texture, 2)).unwrap();
        assert_eq!(c.len(), 8);
        let tags: Vec<usize> = c.volumes().iter().map(|v| v.dataset()).collect();
        assert_eq!(tags, vec![0, 0, 0, 1, 1, 1, 1, 1]);
    }

    #[test]
    fn constant_classes_split_by_mean_intensity() {
        let spec = SyntheticCorpusSpec { noise_std: 0.05, dataset_shift: 0.0, ..small(Pattern::Constant, 2) };
        let c = generate_corpus::<f64>(&spec).unwrap();
        let view = c.probe_view();
        for (v, &label) in view.volumes.iter().zip(view.labels) {
            for s in v.slices() {
                let mean = s.data().iter().sum::<f64>() / s.len() as f64;
                assert_eq!(usize::from(mean > 0.5), label);
            }
        }
    }

    #[test]
    fn rejects_tiny_extent() {
        let spec = SyntheticCorpusSpec { extent: 6, ..Default::default() };
        assert!(matches!(generate_corpus::<f64>(&spec), Err(Error::SliceTooSmall(6, 6))));
    }
}
