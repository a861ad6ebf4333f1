//! Per-slice feature extractor.
//!
//! A stack of stride-2 3x3 convolution stages with SiLU activations. The last
//! `taps` stages are spatially averaged and projected to `feature_width`; those
//! projected taps are the multi-level slice features fed to the volume
//! aggregator, and their concatenation projected to `embed_dim` and
//! L2-normalized is the slice embedding `z`.

pub mod augment;

pub use augment::{augment_slice, augment_volume, CropWindow, TransformParams, TransformSpec, MIN_EXTENT};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{bind, Bound, Parameters};
use crate::scalar::Scalar;
use crate::volume::{Slice, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Output channels of each stride-2 stage.
    pub channels: Vec<usize>,
    /// Number of trailing stages tapped for multi-level features.
    pub taps: usize,
    /// Width of each tapped feature row.
    pub feature_width: usize,
    /// Width of the normalized slice embedding.
    pub embed_dim: usize,
    /// Expected slice side length.
    pub input_extent: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { channels: vec![8, 16, 32, 64], taps: 2, feature_width: 32, embed_dim: 16, input_extent: 32 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("encoder channels must be non-empty and positive".into()));
        }
        if self.taps == 0 || self.taps > self.channels.len() {
            return Err(Error::Config(format!("taps {} must lie in 1..={}", self.taps, self.channels.len())));
        }
        if self.feature_width == 0 || self.embed_dim == 0 {
            return Err(Error::Config("feature and embedding widths must be positive".into()));
        }
        if self.input_extent < MIN_EXTENT {
            return Err(Error::SliceTooSmall(self.input_extent, self.input_extent));
        }
        Ok(())
    }

    fn first_tap(&self) -> usize {
        self.channels.len() - self.taps
    }
}

/// Trainable parameters of the slice encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    config: EncoderConfig,
    conv_weights: Vec<Tensor<T>>,
    conv_biases: Vec<Tensor<T>>,
    tap_weights: Vec<Tensor<T>>,
    tap_biases: Vec<Tensor<T>>,
    projection: Tensor<T>,
}

/// Graph outputs for one encoded slice.
#[derive(Clone, Debug)]
pub struct SliceFeatures {
    /// `taps` rows of shape `[1, feature_width]`, shallowest tap first.
    pub levels: Vec<Var>,
    /// Unit-norm embedding `[1, embed_dim]`.
    pub z: Var,
}

impl<T: Scalar> EncoderParams<T> {
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut conv_weights = Vec::new();
        let mut conv_biases = Vec::new();
        let mut inputs = 1;
        for &out in &config.channels {
            let std = (2.0 / (inputs * 9) as f64).sqrt();
            conv_weights.push(Tensor::randn(&[out, inputs, 3, 3], std, rng));
            conv_biases.push(Tensor::zeros(&[out]));
            inputs = out;
        }
        let f = config.feature_width;
        let mut tap_weights = Vec::new();
        let mut tap_biases = Vec::new();
        for &c in &config.channels[config.first_tap()..] {
            tap_weights.push(Tensor::randn(&[c, f], (1.0 / c as f64).sqrt(), rng));
            tap_biases.push(Tensor::zeros(&[1, f]));
        }
        let cat = config.taps * f;
        let projection = Tensor::randn(&[cat, config.embed_dim], (1.0 / cat as f64).sqrt(), rng);
        Ok(Self { config, conv_weights, conv_biases, tap_weights, tap_biases, projection })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn bind(&self, g: &mut Graph<T>, prefix: &str, trainable: bool) -> Result<Bound> {
        bind(self, g, prefix, trainable)
    }

    /// Records the forward pass of one slice.
    pub fn forward(&self, g: &mut Graph<T>, bound: &Bound, slice: &Slice<T>) -> Result<SliceFeatures> {
        let [h, w] = *slice.shape() else {
            return Err(Error::Shape(format!("slice must be [H, W], got {:?}", slice.shape())));
        };
        let e = self.config.input_extent;
        if h != e || w != e {
            return Err(Error::Shape(format!("slice is {h}x{w}, encoder expects {e}x{e}")));
        }
        let image = slice.clone().reshaped(&[1, h, w]).expect("same element count");
        let mut x = g.constant(image);
        let mut levels = Vec::with_capacity(self.config.taps);
        for stage in 0..self.config.channels.len() {
            let conv =
                g.conv2d(x, bound.get(&format!("conv{stage}.weight")), bound.get(&format!("conv{stage}.bias")), 2, 1)?;
            x = g.silu(conv)?;
            if stage >= self.config.first_tap() {
                let l = stage - self.config.first_tap();
                let pooled = g.spatial_mean(x)?;
                let proj = g.matmul(pooled, bound.get(&format!("tap{l}.weight")))?;
                levels.push(g.add_row_bias(proj, bound.get(&format!("tap{l}.bias")))?);
            }
        }
        let cat = if levels.len() == 1 { levels[0] } else { g.concat_cols(&levels)? };
        let raw = g.matmul(cat, bound.get("proj.weight"))?;
        let z = g.l2_normalize_rows(raw)?;
        Ok(SliceFeatures { levels, z })
    }

    /// Records the stacked multi-level features `Y` of a volume: `n * taps`
    /// rows ordered slice-major, then level.
    pub fn forward_volume(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        volume: &Volume<T>,
    ) -> Result<(Var, Vec<SliceFeatures>)> {
        let feats = volume.slices().iter().map(|s| self.forward(g, bound, s)).collect::<Result<Vec<_>>>()?;
        let rows: Vec<Var> = feats.iter().flat_map(|f| f.levels.iter().copied()).collect();
        let y = if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows)? };
        Ok((y, feats))
    }
}

impl<T: Scalar> Parameters<T> for EncoderParams<T> {
    fn parameters(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.conv_weights.iter().zip(&self.conv_biases).enumerate() {
            out.push((format!("conv{i}.weight"), w));
            out.push((format!("conv{i}.bias"), b));
        }
        for (i, (w, b)) in self.tap_weights.iter().zip(&self.tap_biases).enumerate() {
            out.push((format!("tap{i}.weight"), w));
            out.push((format!("tap{i}.bias"), b));
        }
        out.push(("proj.weight".into(), &self.projection));
        out
    }

    fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.conv_weights.iter_mut().zip(self.conv_biases.iter_mut()).enumerate() {
            out.push((format!("conv{i}.weight"), w));
            out.push((format!("conv{i}.bias"), b));
        }
        for (i, (w, b)) in self.tap_weights.iter_mut().zip(self.tap_biases.iter_mut()).enumerate() {
            out.push((format!("tap{i}.weight"), w));
            out.push((format!("tap{i}.bias"), b));
        }
        out.push(("proj.weight".into(), &mut self.projection));
        out
    }
}

/// Unit-norm embedding of one slice, evaluated outside any training graph.
pub fn encode_slice<T: Scalar>(params: &EncoderParams<T>, slice: &Slice<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let b = params.bind(&mut g, "encoder.", false)?;
    let f = params.forward(&mut g, &b, slice)?;
    Ok(g.value(f.z).clone())
}

/// Stacked multi-level features `[n * taps, feature_width]` of a volume.
pub fn encode_volume_slices<T: Scalar>(params: &EncoderParams<T>, volume: &Volume<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let b = params.bind(&mut g, "encoder.", false)?;
    let (y, _) = params.forward_volume(&mut g, &b, volume)?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> EncoderConfig {
        EncoderConfig { channels: vec![3, 4, 5], taps: 2, feature_width: 6, embed_dim: 4, input_extent: 8 }
    }

    fn random_slice(r: &mut ChaCha8Rng, e: usize) -> Slice<f64> {
        Tensor::randn(&[e, e], 1.0, r)
    }

    #[test]
    fn embeddings_are_unit_norm_and_deterministic() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let p = EncoderParams::<f64>::new(EncoderConfig::default(), &mut r).unwrap();
        for _ in 0..5 {
            let s = random_slice(&mut r, 32);
            let z = encode_slice(&p, &s).unwrap();
            assert_eq!(z.shape(), &[1, 16]);
            assert!((z.l2_norm() - 1.0).abs() < 1e-9);
            assert!(z.bit_eq(&encode_slice(&p, &s).unwrap()));
        }
    }

    #[test]
    fn volume_rows_are_slice_major() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let p = EncoderParams::<f64>::new(small_config(), &mut r).unwrap();
        let slices: Vec<_> = (0..4).map(|_| random_slice(&mut r, 8)).collect();
        let vol = Volume::new(slices.clone(), 0).unwrap();
        let y = encode_volume_slices(&p, &vol).unwrap();
        assert_eq!(y.shape(), &[8, 6]);
        for (i, s) in slices.iter().enumerate() {
            let mut g = Graph::new();
            let b = p.bind(&mut g, "e.", false).unwrap();
            let f = p.forward(&mut g, &b, s).unwrap();
            for (l, &lv) in f.levels.iter().enumerate() {
                assert_eq!(y.row_slice(i * 2 + l), g.value(lv).data());
            }
        }
    }

    #[test]
    fn single_slice_single_level_is_the_tap() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let cfg = EncoderConfig { taps: 1, ..small_config() };
        let p = EncoderParams::<f64>::new(cfg, &mut r).unwrap();
        let s = random_slice(&mut r, 8);
        let y = encode_volume_slices(&p, &Volume::new(vec![s.clone()], 0).unwrap()).unwrap();
        let mut g = Graph::new();
        let b = p.bind(&mut g, "e.", false).unwrap();
        let f = p.forward(&mut g, &b, &s).unwrap();
        assert!(y.bit_eq(g.value(f.levels[0])));
    }

    #[test]
    fn slice_permutation_permutes_blocks() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let p = EncoderParams::<f64>::new(small_config(), &mut r).unwrap();
        let vol = Volume::new((0..3).map(|_| random_slice(&mut r, 8)).collect(), 0).unwrap();
        let order = [2, 0, 1];
        let y = encode_volume_slices(&p, &vol).unwrap();
        let yp = encode_volume_slices(&p, &vol.permuted(&order)).unwrap();
        for (dst, &src) in order.iter().enumerate() {
            for l in 0..2 {
                assert_eq!(yp.row_slice(dst * 2 + l), y.row_slice(src * 2 + l));
            }
        }
    }

    #[test]
    fn zero_feature_is_an_error() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let mut p = EncoderParams::<f64>::new(small_config(), &mut r).unwrap();
        for (_, t) in p.parameters_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let err = encode_slice(&p, &random_slice(&mut r, 8)).unwrap_err();
        assert!(err.to_string().contains("zero norm"), "{err}");
    }

    #[test]
    fn wrong_extent_rejected() {
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let p = EncoderParams::<f64>::new(small_config(), &mut r).unwrap();
        assert!(encode_slice(&p, &Tensor::zeros(&[9, 9])).is_err());
    }
}
