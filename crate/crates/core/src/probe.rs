//! Frozen-feature evaluation and whole-model gradient validation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionConfig;
use crate::autodiff::{check_group, Graph, Tensor};
use crate::encoder::augment::{augment_slice, augment_volume, TransformSpec};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::losses::{batch_inter_loss, batch_intra_loss, LossConfig};
use crate::masked::{mask_loss, sample_mask, MaskModel};
use crate::scalar::Scalar;
use crate::training::corpus::{generate_corpus, SyntheticCorpusSpec};
use crate::training::{mix_seed, ModelConfig, ModelState};

/// Minimum samples per class the probe accepts.
pub const MIN_PER_CLASS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub train_fraction: f64,
    pub epochs: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { train_fraction: 0.7, epochs: 100, batch: 16, learning_rate: 0.1, weight_decay: 1e-3, seed: 0 }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!("train_fraction {} outside (0, 1)", self.train_fraction)));
        }
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::Config("probe epochs and batch must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("probe learning rate must be positive and weight decay non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// Held-out accuracy.
    pub accuracy: f64,
    /// Accuracy of uniform guessing, `1 / classes`.
    pub chance: f64,
    /// `confusion[true][predicted]` over the held-out samples.
    pub confusion: Vec<Vec<usize>>,
    /// Which embeddings were probed, e.g. `slice` or `volume`.
    pub source: String,
    pub seed: u64,
    pub train_size: usize,
    pub test_size: usize,
}

/// Trains a softmax affine classifier on frozen embeddings `[N, d]` and
/// reports its held-out accuracy.
///
/// The split is stratified by class. When `groups` is given, samples that
/// share a group id (e.g. slices of one volume) land on the same side.
pub fn linear_probe<T: Scalar>(
    embeddings: &Tensor<T>,
    labels: &[usize],
    groups: Option<&[usize]>,
    source: &str,
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    cfg.validate()?;
    let (n, d) = (embeddings.rows(), embeddings.cols());
    if labels.len() != n || groups.is_some_and(|g| g.len() != n) {
        return Err(Error::Shape(format!("{n} embeddings but {} labels", labels.len())));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; classes];
    labels.iter().for_each(|&l| counts[l] += 1);
    let present = counts.iter().filter(|&&c| c > 0).count();
    if present < 2 {
        return Err(Error::ProbeInput(format!("found {present} class(es)")));
    }
    if let Some((c, &k)) = counts.iter().enumerate().find(|(_, &k)| k > 0 && k < MIN_PER_CLASS) {
        return Err(Error::ProbeInput(format!("class {c} has {k} samples")));
    }
    if !embeddings.all_finite() {
        return Err(Error::ProbeInput("embeddings are not finite".into()));
    }

    let train = split(labels, groups, cfg)?;
    let x: Vec<f64> = embeddings.data().iter().map(|v| v.as_f64()).collect();
    let (mean, scale) = standardizer(&x, d, &train);
    let feat = |i: usize, j: usize| (x[i * d + j] - mean[j]) / scale[j];

    let train_idx: Vec<usize> = (0..n).filter(|&i| train[i]).collect();
    let test_idx: Vec<usize> = (0..n).filter(|&i| !train[i]).collect();
    let mut w = vec![0.0f64; d * classes];
    let mut b = vec![0.0f64; classes];
    let logits = |w: &[f64], b: &[f64], i: usize| -> Vec<f64> {
        (0..classes).map(|k| b[k] + (0..d).map(|j| feat(i, j) * w[j * classes + k]).sum::<f64>()).collect()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &[0x9A0B]));
    let mut order = train_idx.clone();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch) {
            let mut gw = vec![0.0f64; d * classes];
            let mut gb = vec![0.0f64; classes];
            for &i in chunk {
                let p = softmax(&logits(&w, &b, i));
                for k in 0..classes {
                    let e = p[k] - f64::from(u8::from(labels[i] == k));
                    gb[k] += e;
                    for j in 0..d {
                        gw[j * classes + k] += e * feat(i, j);
                    }
                }
            }
            let step = cfg.learning_rate / chunk.len() as f64;
            for (wi, gi) in w.iter_mut().zip(&gw) {
                *wi -= step * gi + cfg.learning_rate * cfg.weight_decay * *wi;
            }
            for (bi, gi) in b.iter_mut().zip(&gb) {
                *bi -= step * gi;
            }
        }
    }

    let mut confusion = vec![vec![0usize; classes]; classes];
    let mut correct = 0usize;
    for &i in &test_idx {
        let l = logits(&w, &b, i);
        // First maximum wins, so ties resolve deterministically.
        let pred = (0..classes).fold(0, |best, k| if l[k] > l[best] { k } else { best });
        confusion[labels[i]][pred] += 1;
        correct += usize::from(pred == labels[i]);
    }
    Ok(ProbeReport {
        accuracy: correct as f64 / test_idx.len() as f64,
        chance: 1.0 / classes as f64,
        confusion,
        source: source.to_string(),
        seed: cfg.seed,
        train_size: train_idx.len(),
        test_size: test_idx.len(),
    })
}

fn softmax(l: &[f64]) -> Vec<f64> {
    let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = l.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Marks training samples. Each class keeps at least one unit on both sides.
fn split(labels: &[usize], groups: Option<&[usize]>, cfg: &ProbeConfig) -> Result<Vec<bool>> {
    let unit = |i: usize| groups.map_or(i, |g| g[i]);
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut units: Vec<Vec<usize>> = vec![Vec::new(); classes];
    let mut seen = std::collections::BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        match seen.insert(unit(i), l) {
            Some(prev) if prev != l => {
                return Err(Error::ProbeInput(format!("group {} mixes classes {prev} and {l}", unit(i))));
            }
            Some(_) => {}
            None => units[l].push(unit(i)),
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &[0x5B17]));
    let mut in_train = std::collections::BTreeSet::new();
    for (c, list) in units.iter_mut().enumerate() {
        if list.is_empty() {
            continue;
        }
        if list.len() < 2 {
            return Err(Error::ProbeInput(format!("class {c} has a single group")));
        }
        list.shuffle(&mut rng);
        let k = ((cfg.train_fraction * list.len() as f64).round() as usize).clamp(1, list.len() - 1);
        in_train.extend(list[..k].iter().copied());
    }
    Ok((0..labels.len()).map(|i| in_train.contains(&unit(i))).collect())
}

fn standardizer(x: &[f64], d: usize, train: &[bool]) -> (Vec<f64>, Vec<f64>) {
    let rows: Vec<usize> = (0..train.len()).filter(|&i| train[i]).collect();
    let m = rows.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|&i| x[i * d + j]).sum::<f64>() / m).collect();
    let scale = (0..d)
        .map(|j| {
            let var = rows.iter().map(|&i| (x[i * d + j] - mean[j]).powi(2)).sum::<f64>() / m;
            var.sqrt().max(1e-8)
        })
        .collect();
    (mean, scale)
}

/// Finite-difference result for one parameter group under one loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub loss: String,
    pub group: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub groups: Vec<GroupCheck>,
    /// Gradient norm reaching the transport codes; zero when they are
    /// correctly treated as constants.
    pub code_grad_norm: f64,
    /// Gradient norm reaching the predicted log-probabilities.
    pub prob_grad_norm: f64,
}

impl GradCheckReport {
    pub fn codes_detached(&self) -> bool {
        self.code_grad_norm == 0.0 && self.prob_grad_norm > 0.0
    }

    pub fn failures(&self) -> Vec<&GroupCheck> {
        self.groups.iter().filter(|g| !g.passed).collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty() && self.codes_detached()
    }
}

pub const GRAD_CHECK_STEP: f64 = 1e-5;
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

/// Model used by [`grad_check_all`]: 8-wide embeddings, 4 slices, 5
/// prototypes, 2 heads and 2 pyramid blocks.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig { channels: vec![2, 4], taps: 2, feature_width: 4, embed_dim: 8, input_extent: 8 },
        attention: AttentionConfig {
            blocks: 2,
            heads: 2,
            offset_groups: 1,
            downsample: 2,
            ffn_hidden: 8,
            max_offset: None,
        },
        prototypes: 5,
        separate_volume_prototypes: false,
        slices: 4,
    }
}

/// Checks every parameter group of the slice, volume and masked losses
/// against central differences on the toy model.
pub fn grad_check_all(seed: u64) -> Result<GradCheckReport> {
    run_grad_check(seed, None)
}

/// [`grad_check_all`] with the adjoint of every `op` node scaled by
/// `factor`, to show that a broken backward pass is caught.
#[doc(hidden)]
pub fn grad_check_with_fault(seed: u64, op: &'static str, factor: f64) -> Result<GradCheckReport> {
    run_grad_check(seed, Some((op, factor)))
}

fn run_grad_check(seed: u64, fault: Option<(&'static str, f64)>) -> Result<GradCheckReport> {
    let cfg = toy_model_config();
    let state = ModelState::<f64>::new(&cfg, seed)?;
    let spec = SyntheticCorpusSpec {
        volumes_per_dataset: vec![2],
        slices: cfg.slices,
        extent: cfg.encoder.input_extent,
        classes: 2,
        seed,
        ..Default::default()
    };
    let corpus = generate_corpus::<f64>(&spec)?;
    let volumes = corpus.volumes();
    let aug = TransformSpec::default();
    let losses = LossConfig::default();
    let new_graph = || {
        let mut g = Graph::<f64>::new();
        if let Some((op, factor)) = fault {
            g.corrupt_adjoint(op, factor);
        }
        g
    };
    let mut groups = Vec::new();
    let mut check = |g: &mut Graph<f64>, loss: crate::autodiff::Var, name: &str, prefixes: &[&str]| -> Result<()> {
        for p in prefixes {
            let err = check_group(g, loss, p, GRAD_CHECK_STEP)?.unwrap_or(0.0);
            groups.push(GroupCheck {
                loss: name.to_string(),
                group: p.trim_end_matches('.').to_string(),
                max_rel_error: err,
                passed: err < GRAD_CHECK_TOLERANCE,
            });
        }
        Ok(())
    };

    // Slice loss over two slices.
    let mut g = new_graph();
    let eb = state.encoder.bind(&mut g, "encoder.", true)?;
    let c = state.prototypes.bind(&mut g, "prototypes", true)?;
    let views: Vec<_> = (0..2u64)
        .map(|i| {
            let s = &volumes[i as usize].slices()[i as usize];
            Ok((
                augment_slice(s, &aug, mix_seed(seed, &[1, i, 0]))?,
                augment_slice(s, &aug, mix_seed(seed, &[1, i, 1]))?,
            ))
        })
        .collect::<Result<_>>()?;
    let out = batch_intra_loss(&mut g, &state.encoder, &eb, c, &views, &losses)?;
    g.backward(out.loss)?;
    let code_grad_norm = g.grad(out.codes).l2_norm();
    let prob_grad_norm = g.grad(out.log_probs).l2_norm();
    check(&mut g, out.loss, "slice", &["encoder.", "prototypes"])?;

    // Volume loss over two volumes.
    let mut g = new_graph();
    let eb = state.encoder.bind(&mut g, "encoder.", true)?;
    let ab = state.stack.bind(&mut g, "attention.", true)?;
    let c = state.prototypes.bind(&mut g, "prototypes", true)?;
    let views: Vec<_> = (0..2u64)
        .map(|i| {
            let v = &volumes[i as usize];
            Ok((
                augment_volume(v, &aug, mix_seed(seed, &[3, i, 0]))?,
                augment_volume(v, &aug, mix_seed(seed, &[3, i, 1]))?,
            ))
        })
        .collect::<Result<_>>()?;
    let out = batch_inter_loss(&mut g, &state.encoder, &eb, &state.stack, &ab, c, &views, &losses)?;
    check(&mut g, out.loss, "volume", &["encoder.", "attention.", "prototypes"])?;

    // Masked prediction on one volume.
    let mut g = new_graph();
    let eb = state.encoder.bind(&mut g, "encoder.", true)?;
    let ab = state.stack.bind(&mut g, "attention.", true)?;
    let db = state.decoder.bind(&mut g, "decoder.", true)?;
    let token = state.token.bind(&mut g, "mask.token", true)?;
    let model = MaskModel {
        encoder: &state.encoder,
        encoder_bound: &eb,
        stack: &state.stack,
        stack_bound: &ab,
        decoder: &state.decoder,
        decoder_bound: &db,
        token,
    };
    let view = augment_volume(&volumes[0], &aug, mix_seed(seed, &[2]))?;
    let plan = sample_mask(view.len(), 0.25, mix_seed(seed, &[2, 1]))?;
    let out = mask_loss(&mut g, &model, &view, &plan, false)?;
    check(&mut g, out.loss, "mask", &["encoder.", "attention.", "decoder.", "mask.token"])?;

    Ok(GradCheckReport {
        step: GRAD_CHECK_STEP,
        tolerance: GRAD_CHECK_TOLERANCE,
        groups,
        code_grad_norm,
        prob_grad_norm,
    })
}
