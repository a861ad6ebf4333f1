//! Masked slice-feature prediction.
//!
//! A random subset of slices has all of its feature rows replaced by a learned
//! token; the attention stack runs on the corrupted sequence and a per-position
//! affine decoder reconstructs the concatenated multi-level feature of each
//! masked slice. Targets come from the uncorrupted features and are constant.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionStack, Overrides};
use crate::autodiff::{Graph, Tensor, Var};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::params::{bind, Bound, Parameters};
use crate::scalar::Scalar;
use crate::volume::Volume;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    pub ratio: f64,
    /// Penalize squared residual norms instead of plain norms.
    pub squared: bool,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self { ratio: 0.10, squared: false }
    }
}

/// Which slices of a volume are masked.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    mask: Vec<bool>,
    seed: u64,
}

/// Number of masked positions for `n` slices at ratio `ratio`.
pub fn mask_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64).ceil() as usize).clamp(1, n)
}

/// Draws `max(1, ceil(ratio * n))` positions uniformly without replacement.
pub fn sample_mask(n: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::MaskRatio(ratio));
    }
    if n == 0 {
        return Err(Error::EmptyVolume);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = vec![false; n];
    for i in sample(&mut rng, n, mask_count(n, ratio)) {
        mask[i] = true;
    }
    Ok(MaskPlan { mask, seed })
}

impl MaskPlan {
    pub fn from_mask(mask: Vec<bool>) -> Self {
        Self { mask, seed: 0 }
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn masked(&self) -> Vec<usize> {
        self.mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
    }

    /// Expands the per-slice plan to the `levels` feature rows of each slice.
    pub fn row_mask(&self, levels: usize) -> Vec<bool> {
        self.mask.iter().flat_map(|&m| std::iter::repeat_n(m, levels)).collect()
    }
}

/// Learned replacement vector for masked feature rows.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskToken<T> {
    value: Tensor<T>,
}

impl<T: Scalar> MaskToken<T> {
    pub fn new<R: Rng + ?Sized>(width: usize, rng: &mut R) -> Self {
        Self { value: Tensor::randn(&[1, width], 0.02, rng) }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn bind(&self, g: &mut Graph<T>, name: &str, trainable: bool) -> Result<Var> {
        Ok(g.input(name, self.value.clone(), trainable)?)
    }
}

impl<T: Scalar> Parameters<T> for MaskToken<T> {
    fn parameters(&self) -> Vec<(String, &Tensor<T>)> {
        vec![("token".into(), &self.value)]
    }

    fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![("token".into(), &mut self.value)]
    }
}

/// Affine decoder `h_i W + b_i` with one bias row per slice position.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder<T> {
    weight: Tensor<T>,
    bias: Tensor<T>,
}

impl<T: Scalar> Decoder<T> {
    pub fn new<R: Rng + ?Sized>(width: usize, out_width: usize, positions: usize, rng: &mut R) -> Self {
        Self {
            weight: Tensor::randn(&[width, out_width], (1.0 / width as f64).sqrt(), rng),
            bias: Tensor::zeros(&[positions, out_width]),
        }
    }

    pub fn from_parts(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        if weight.shape().len() != 2 || bias.shape().len() != 2 || weight.cols() != bias.cols() {
            return Err(Error::Shape(format!("decoder weight {:?} vs bias {:?}", weight.shape(), bias.shape())));
        }
        Ok(Self { weight, bias })
    }

    pub fn out_width(&self) -> usize {
        self.weight.cols()
    }

    pub fn positions(&self) -> usize {
        self.bias.rows()
    }

    pub fn bind(&self, g: &mut Graph<T>, prefix: &str, trainable: bool) -> Result<Bound> {
        bind(self, g, prefix, trainable)
    }

    /// Decodes per-slice outputs `[n, width]` into `[n, out_width]`.
    pub fn forward(&self, g: &mut Graph<T>, bound: &Bound, h: Var) -> Result<Var> {
        let n = g.shape(h)[0];
        if n != self.positions() {
            return Err(Error::Shape(format!("decoder built for {} positions, got {n}", self.positions())));
        }
        let proj = g.matmul(h, bound.get("weight"))?;
        Ok(g.add(proj, bound.get("bias"))?)
    }
}

impl<T: Scalar> Parameters<T> for Decoder<T> {
    fn parameters(&self) -> Vec<(String, &Tensor<T>)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![("weight".into(), &mut self.weight), ("bias".into(), &mut self.bias)]
    }
}

/// Replaces every feature row of each masked slice by the token.
pub fn apply_mask<T: Scalar>(g: &mut Graph<T>, y: Var, plan: &MaskPlan, token: Var) -> Result<Var> {
    let rows = g.shape(y)[0];
    if plan.is_empty() || !rows.is_multiple_of(plan.len()) {
        return Err(Error::MaskLength { plan: plan.len(), slices: rows });
    }
    let levels = rows / plan.len();
    Ok(g.mask_rows(y, token, &plan.row_mask(levels))?)
}

/// Sum over masked slices of the residual norm (or squared norm).
pub fn residual_loss<T: Scalar>(
    g: &mut Graph<T>,
    predictions: Var,
    targets: Var,
    plan: &MaskPlan,
    squared: bool,
) -> Result<Var> {
    let masked = plan.masked();
    if masked.is_empty() {
        return Err(Error::NothingMasked);
    }
    if g.shape(predictions)[0] != plan.len() {
        return Err(Error::MaskLength { plan: plan.len(), slices: g.shape(predictions)[0] });
    }
    let resid = g.sub(predictions, targets)?;
    let rows = masked.iter().map(|&i| g.slice_rows(resid, i, i + 1)).collect::<Result<Vec<_>, _>>()?;
    let picked = if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows)? };
    let sq = g.mul(picked, picked)?;
    if squared {
        return Ok(g.sum(sq)?);
    }
    let per_slice = g.sum_cols(sq)?;
    let norms = g.sqrt(per_slice)?;
    Ok(g.sum(norms)?)
}

/// Graph handles of one masked-prediction loss.
#[derive(Clone, Debug)]
pub struct MaskOutput {
    pub loss: Var,
    /// Uncorrupted stacked features `Y`.
    pub features: Var,
    /// Constant targets `[n, levels * width]`.
    pub targets: Var,
    /// Decoded predictions `[n, levels * width]`.
    pub predictions: Var,
}

/// Trainable modules taking part in the masked-prediction loss.
pub struct MaskModel<'a, T> {
    pub encoder: &'a EncoderParams<T>,
    pub encoder_bound: &'a Bound,
    pub stack: &'a AttentionStack<T>,
    pub stack_bound: &'a Bound,
    pub decoder: &'a Decoder<T>,
    pub decoder_bound: &'a Bound,
    pub token: Var,
}

/// Masked-prediction loss for one (augmented) volume view.
pub fn mask_loss<T: Scalar>(
    g: &mut Graph<T>,
    model: &MaskModel<'_, T>,
    view: &Volume<T>,
    plan: &MaskPlan,
    squared: bool,
) -> Result<MaskOutput> {
    if plan.len() != view.len() {
        return Err(Error::MaskLength { plan: plan.len(), slices: view.len() });
    }
    if plan.masked().is_empty() {
        return Err(Error::NothingMasked);
    }
    let (features, feats) = model.encoder.forward_volume(g, model.encoder_bound, view)?;
    let levels = feats[0].levels.len();
    let width = g.shape(features)[1];
    let flat = g.reshape(features, &[view.len(), levels * width])?;
    let targets = g.detach(flat)?;

    let corrupted = apply_mask(g, features, plan, model.token)?;
    let (tokens, _) = model.stack.forward_tokens(g, model.stack_bound, corrupted, Overrides::default())?;
    let h = model.stack.per_slice_outputs(g, tokens, view.len(), levels)?;
    let predictions = model.decoder.forward(g, model.decoder_bound, h)?;
    let loss = residual_loss(g, predictions, targets, plan, squared)?;
    Ok(MaskOutput { loss, features, targets, predictions })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_counts() {
        assert_eq!(sample_mask(20, 0.1, 0).unwrap().masked().len(), 2);
        assert_eq!(sample_mask(5, 0.1, 0).unwrap().masked().len(), 1);
        for n in 1..=256 {
            for ratio in [0.05, 0.1, 0.25] {
                let want = ((ratio * n as f64).ceil() as usize).max(1);
                assert_eq!(sample_mask(n, ratio, n as u64).unwrap().masked().len(), want);
            }
        }
    }

    #[test]
    fn plan_is_reproducible() {
        assert_eq!(sample_mask(40, 0.25, 9).unwrap(), sample_mask(40, 0.25, 9).unwrap());
    }

    #[test]
    fn bad_ratio_rejected() {
        assert!(matches!(sample_mask(4, 0.0, 0), Err(Error::MaskRatio(_))));
        assert!(matches!(sample_mask(4, 1.5, 0), Err(Error::MaskRatio(_))));
    }

    #[test]
    fn apply_mask_branches() {
        let mut g = Graph::<f64>::new();
        let y = g.constant(Tensor::from_vec(&[4, 2], (0..8).map(f64::from).collect()));
        let token = g.input("token", Tensor::row(&[-1.0, 9.0]), true).unwrap();
        let none = apply_mask(&mut g, y, &MaskPlan::from_mask(vec![false; 2]), token).unwrap();
        assert!(g.value(none).bit_eq(g.value(y)));
        let all = apply_mask(&mut g, y, &MaskPlan::from_mask(vec![true; 2]), token).unwrap();
        for r in 0..4 {
            assert_eq!(g.value(all).row_slice(r), &[-1.0, 9.0]);
        }
        let one = apply_mask(&mut g, y, &MaskPlan::from_mask(vec![false, true]), token).unwrap();
        assert_eq!(g.value(one).row_slice(0), &[0.0, 1.0]);
        assert_eq!(g.value(one).row_slice(2), &[-1.0, 9.0]);
        let s = g.sum(one).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(token).data(), &[2.0, 2.0]);
        assert!(apply_mask(&mut g, y, &MaskPlan::from_mask(vec![true; 3]), token).is_err());
    }

    #[test]
    fn residual_loss_zero_and_scaling() {
        let mut g = Graph::<f64>::new();
        let t = Tensor::from_vec(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let targets = g.constant(t.clone());
        let same = g.constant(t.clone());
        let plan = MaskPlan::from_mask(vec![true, false, true]);
        let zero = residual_loss(&mut g, same, targets, &plan, false).unwrap();
        assert_eq!(g.scalar_value(zero).unwrap(), 0.0);

        let mut off = t.clone();
        off.data_mut()[0] += 3.0;
        off.data_mut()[1] += 4.0;
        let p1 = g.constant(off);
        let l1 = residual_loss(&mut g, p1, targets, &plan, false).unwrap();
        assert_eq!(g.scalar_value(l1).unwrap(), 5.0);
        let mut off2 = t.clone();
        off2.data_mut()[0] += 6.0;
        off2.data_mut()[1] += 8.0;
        let p2 = g.constant(off2);
        let l2 = residual_loss(&mut g, p2, targets, &plan, false).unwrap();
        assert_eq!(g.scalar_value(l2).unwrap(), 10.0);
        let sq = residual_loss(&mut g, p1, targets, &plan, true).unwrap();
        assert_eq!(g.scalar_value(sq).unwrap(), 25.0);
        // Residuals at unmasked rows are ignored.
        let mut off3 = t;
        off3.data_mut()[2] += 1.0;
        let p3 = g.constant(off3);
        let l3 = residual_loss(&mut g, p3, targets, &plan, false).unwrap();
        assert_eq!(g.scalar_value(l3).unwrap(), 0.0);
        assert!(matches!(
            residual_loss(&mut g, p3, targets, &MaskPlan::from_mask(vec![false; 3]), false),
            Err(Error::NothingMasked)
        ));
    }
}
