//! Swapped-prediction clustering losses over shared prototypes.
//!
//! Every feature is scored against the prototypes; codes are solved by the
//! transport solver on the stacked batch and enter as constant targets. View
//! `t` predicts the code of view `s` and vice versa.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionStack;
use crate::autodiff::{Graph, Tensor, Var};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::params::Bound;
use crate::prototypes::{code_distributions, sinkhorn_codes, SinkhornConfig};
use crate::scalar::Scalar;
use crate::volume::{Slice, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Softmax temperature τ.
    pub temperature: f64,
    pub sinkhorn: SinkhornConfig,
    /// Prototype count `H`; fixes the shape of the prototype matrix.
    pub prototypes: usize,
    /// Give the volume loss its own prototype matrix instead of sharing.
    pub separate_volume_prototypes: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { temperature: 0.2, sinkhorn: SinkhornConfig::TRAINING, prototypes: 12, separate_volume_prototypes: false }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        check_temperature(self.temperature)?;
        if !(self.sinkhorn.epsilon > 0.0) {
            return Err(Error::NonPositiveEpsilon(self.sinkhorn.epsilon));
        }
        if self.prototypes == 0 {
            return Err(Error::Config("prototype count must be positive".into()));
        }
        if self.sinkhorn.max_iters == 0 {
            return Err(Error::Config("sinkhorn.max_iters must be positive".into()));
        }
        Ok(())
    }
}

fn check_temperature(tau: f64) -> Result<()> {
    if !(tau > 0.0) {
        return Err(Error::NonPositiveTemperature(tau));
    }
    Ok(())
}

/// Log-probabilities `log softmax(Z C / τ)` for feature rows `[M, d_z]`.
pub fn log_probabilities<T: Scalar>(g: &mut Graph<T>, z: Var, c: Var, tau: f64) -> Result<Var> {
    check_temperature(tau)?;
    let logits = g.matmul(z, c)?;
    let scaled = g.scale(logits, T::of(1.0 / tau))?;
    Ok(g.log_softmax_rows(scaled)?)
}

/// `-Σ_k q_k log p_k` for one feature `[1, d_z]` and a non-negative code
/// `[1, H]`, which is renormalized to a distribution first.
pub fn code_fit_loss<T: Scalar>(g: &mut Graph<T>, z: Var, q: Var, c: Var, tau: f64) -> Result<Var> {
    let total: f64 = g.value(q).data().iter().map(|v| v.as_f64()).sum();
    if !(total > 0.0) || g.value(q).data().iter().any(|v| *v < T::zero()) {
        return Err(Error::EmptyCode);
    }
    let target = g.detached_map(
        q,
        Arc::new(|t: &Tensor<T>| {
            let s: T = t.data().iter().copied().sum();
            Ok(t.map(|v| v / s))
        }),
    )?;
    let logp = log_probabilities(g, z, c, tau)?;
    let weighted = g.mul(target, logp)?;
    let s = g.sum(weighted)?;
    Ok(g.scale(s, -T::one())?)
}

/// `l(z_t, q_s) + l(z_s, q_t)`.
pub fn intra_loss<T: Scalar>(
    g: &mut Graph<T>,
    z_t: Var,
    q_t: Var,
    z_s: Var,
    q_s: Var,
    c: Var,
    tau: f64,
) -> Result<Var> {
    let a = code_fit_loss(g, z_t, q_s, c, tau)?;
    let b = code_fit_loss(g, z_s, q_t, c, tau)?;
    Ok(g.add(a, b)?)
}

/// Graph handles of a swapped batch loss.
#[derive(Clone, Debug)]
pub struct SwappedLoss {
    pub loss: Var,
    /// Feature rows `[2B, d_z]`: all `t` views, then all `s` views.
    pub features: Var,
    /// Constant code distributions `[2B, H]`, same row order as `features`.
    pub codes: Var,
    /// Log-probabilities `[2B, H]`.
    pub log_probs: Var,
}

/// Mean over the batch of the swapped cross-entropy between two views.
/// Codes are solved jointly on all `2B` features.
pub fn swapped_loss<T: Scalar>(
    g: &mut Graph<T>,
    z_t: &[Var],
    z_s: &[Var],
    c: Var,
    cfg: &LossConfig,
) -> Result<SwappedLoss> {
    cfg.validate()?;
    let b = z_t.len();
    if b < 2 {
        return Err(Error::BatchTooSmall { needed: 2, got: b });
    }
    if z_s.len() != b {
        return Err(Error::Shape(format!("{b} t-views but {} s-views", z_s.len())));
    }
    let rows: Vec<Var> = z_t.iter().chain(z_s).copied().collect();
    let features = g.concat_rows(&rows)?;
    let logits = g.matmul(features, c)?;
    let sinkhorn = cfg.sinkhorn;
    let codes = g.detached_map(
        logits,
        Arc::new(move |t: &Tensor<T>| {
            let (m, h) = (t.rows(), t.cols());
            let mut scores = vec![T::zero(); h * m];
            for i in 0..m {
                for k in 0..h {
                    scores[k * m + i] = t.at(i, k);
                }
            }
            let q = sinkhorn_codes(&Tensor::from_vec(&[h, m], scores), &sinkhorn).map_err(|e| e.to_string())?;
            code_distributions(&q.q).map_err(|e| e.to_string())
        }),
    )?;
    let scaled = g.scale(logits, T::of(1.0 / cfg.temperature))?;
    let log_probs = g.log_softmax_rows(scaled)?;

    let codes_t = g.slice_rows(codes, 0, b)?;
    let codes_s = g.slice_rows(codes, b, 2 * b)?;
    let swapped = g.concat_rows(&[codes_s, codes_t])?;
    let weighted = g.mul(swapped, log_probs)?;
    let ce = g.sum_cols(weighted)?;
    let ce_t = g.slice_rows(ce, 0, b)?;
    let ce_s = g.slice_rows(ce, b, 2 * b)?;
    let pairs = g.add(ce_t, ce_s)?;
    let mean = g.mean(pairs)?;
    let loss = g.scale(mean, -T::one())?;
    Ok(SwappedLoss { loss, features, codes, log_probs })
}

/// Slice-level loss over pairs of augmented views `(t, s)` of each slice.
pub fn batch_intra_loss<T: Scalar>(
    g: &mut Graph<T>,
    encoder: &EncoderParams<T>,
    bound: &Bound,
    c: Var,
    views: &[(Slice<T>, Slice<T>)],
    cfg: &LossConfig,
) -> Result<SwappedLoss> {
    if views.len() < 2 {
        return Err(Error::BatchTooSmall { needed: 2, got: views.len() });
    }
    let mut z_t = Vec::with_capacity(views.len());
    let mut z_s = Vec::with_capacity(views.len());
    for (t, s) in views {
        z_t.push(encoder.forward(g, bound, t)?.z);
        z_s.push(encoder.forward(g, bound, s)?.z);
    }
    swapped_loss(g, &z_t, &z_s, c, cfg)
}

/// Volume-level loss over pairs of augmented views of each volume, using the
/// holistic embeddings of the attention stack.
#[allow(clippy::too_many_arguments)]
pub fn batch_inter_loss<T: Scalar>(
    g: &mut Graph<T>,
    encoder: &EncoderParams<T>,
    enc_bound: &Bound,
    stack: &AttentionStack<T>,
    att_bound: &Bound,
    c: Var,
    views: &[(Volume<T>, Volume<T>)],
    cfg: &LossConfig,
) -> Result<SwappedLoss> {
    if views.len() < 2 {
        return Err(Error::BatchTooSmall { needed: 2, got: views.len() });
    }
    let embed = |g: &mut Graph<T>, v: &Volume<T>| -> Result<Var> {
        let (y, _) = encoder.forward_volume(g, enc_bound, v)?;
        Ok(stack.forward(g, att_bound, y)?.z)
    };
    let mut z_t = Vec::with_capacity(views.len());
    let mut z_s = Vec::with_capacity(views.len());
    for (t, s) in views {
        z_t.push(embed(g, t)?);
        z_s.push(embed(g, s)?);
    }
    swapped_loss(g, &z_t, &z_s, c, cfg)
}
