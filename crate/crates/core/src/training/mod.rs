//! Three-stage pre-training over a volume corpus.
//!
//! Stage 1 fits the slice encoder and prototypes with the slice-level
//! clustering loss. Stage 2 fits the attention stack, decoder and mask token
//! with masked prediction while the encoder stays frozen. Stage 3 fits the
//! encoder, attention stack and prototypes with the volume-level clustering
//! loss. All updates are plain gradient descent with a fixed rate.

pub mod corpus;

use std::time::Instant;

use rand::seq::{index::sample, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, AttentionStack};
use crate::autodiff::{Graph, Tensor, Var};
use crate::encoder::augment::{augment_slice, augment_volume, TransformSpec};
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::losses::{batch_inter_loss, batch_intra_loss, LossConfig};
use crate::masked::{mask_loss, sample_mask, Decoder, MaskConfig, MaskModel, MaskToken};
use crate::params::{gradients, sgd_step, sgd_update, Parameters};
use crate::prototypes::Prototypes;
use crate::scalar::Scalar;
use crate::volume::Volume;

pub use corpus::{generate_corpus, Corpus, Pattern, ProbeView, SyntheticCorpusSpec};

/// Deterministic seed derived from a base seed and a path of indices.
pub fn mix_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h = splitmix(h ^ splitmix(p.wrapping_add(0xD1B5_4A32_D192_ED03)));
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Slice = 1,
    Mask = 2,
    Volume = 3,
}

impl Stage {
    pub fn number(self) -> u8 {
        self as u8
    }
}

impl TryFrom<u8> for Stage {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Stage::Slice),
            2 => Ok(Stage::Mask),
            3 => Ok(Stage::Volume),
            other => Err(Error::Config(format!("stage must be 1, 2 or 3, got {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Slices per batch in stage 1.
    pub slice_batch: usize,
    /// Volumes per batch in stages 2 and 3.
    pub volume_batch: usize,
    /// Slices drawn from every volume per stage-1 epoch.
    pub slices_per_volume: usize,
    pub learning_rate: f64,
    /// Single-threaded, bit-reproducible execution with zeroed timings.
    pub strict: bool,
    pub seed: u64,
    /// Let stage 2 update the encoder as well.
    pub joint_stage2: bool,
    /// Allow stages 2 and 3 to start without their predecessors.
    pub cold_start: bool,
    pub augment: TransformSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            slice_batch: 64,
            volume_batch: 8,
            slices_per_volume: 4,
            learning_rate: 0.05,
            strict: true,
            seed: 0,
            joint_stage2: false,
            cold_start: false,
            augment: TransformSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.slice_batch < 2 || self.volume_batch < 2 {
            return Err(Error::Config("batch sizes must be at least 2".into()));
        }
        if self.slices_per_volume == 0 {
            return Err(Error::Config("slices_per_volume must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        self.augment.validate()
    }
}

/// Settings consumed by [`run_stage`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageConfig {
    pub train: TrainConfig,
    pub losses: LossConfig,
    pub mask: MaskConfig,
}

/// Shapes of every trainable module.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub attention: AttentionConfig,
    pub prototypes: usize,
    pub separate_volume_prototypes: bool,
    /// Slices per volume; fixes the attention sequence length.
    pub slices: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            attention: AttentionConfig::default(),
            prototypes: 12,
            separate_volume_prototypes: false,
            slices: 16,
        }
    }
}

/// Where training stands.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Progress {
    pub stages_done: [bool; 3],
    /// Last stage that ran (0 before any) and its last completed epoch.
    pub stage: u8,
    pub epoch: usize,
}

impl Progress {
    pub fn done(&self, stage: Stage) -> bool {
        self.stages_done[stage as usize - 1]
    }

    pub fn bitmask(&self) -> u32 {
        self.stages_done.iter().enumerate().map(|(i, &d)| u32::from(d) << i).sum()
    }

    pub fn from_bitmask(mask: u32, stage: u8, epoch: usize) -> Self {
        Self { stages_done: [mask & 1 != 0, mask & 2 != 0, mask & 4 != 0], stage, epoch }
    }
}

/// All trainable modules plus the training cursor.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T> {
    pub encoder: EncoderParams<T>,
    pub prototypes: Prototypes<T>,
    pub volume_prototypes: Option<Prototypes<T>>,
    pub stack: AttentionStack<T>,
    pub decoder: Decoder<T>,
    pub token: MaskToken<T>,
    pub progress: Progress,
}

impl<T: Scalar> ModelState<T> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[0xC0DE]));
        let enc = &cfg.encoder;
        let encoder = EncoderParams::new(enc.clone(), &mut rng)?;
        if cfg.prototypes == 0 {
            return Err(Error::Config("prototype count must be positive".into()));
        }
        let prototypes = Prototypes::random(enc.embed_dim, cfg.prototypes, &mut rng);
        let seq = cfg.slices * enc.taps;
        let stack = AttentionStack::new(cfg.attention.clone(), seq, enc.feature_width, enc.embed_dim, &mut rng)?;
        let decoder = Decoder::new(enc.feature_width, enc.taps * enc.feature_width, cfg.slices, &mut rng);
        let token = MaskToken::new(enc.feature_width, &mut rng);
        let volume_prototypes =
            cfg.separate_volume_prototypes.then(|| Prototypes::random(enc.embed_dim, cfg.prototypes, &mut rng));
        Ok(Self { encoder, prototypes, volume_prototypes, stack, decoder, token, progress: Progress::default() })
    }

    /// Every parameter tensor under a stable, globally unique name.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = Vec::new();
        out.extend(self.encoder.parameters().into_iter().map(|(n, t)| (format!("encoder.{n}"), t)));
        out.push(("prototypes".into(), self.prototypes.matrix()));
        if let Some(p) = &self.volume_prototypes {
            out.push(("volume_prototypes".into(), p.matrix()));
        }
        out.extend(self.stack.parameters().into_iter().map(|(n, t)| (format!("attention.{n}"), t)));
        out.extend(self.decoder.parameters().into_iter().map(|(n, t)| (format!("decoder.{n}"), t)));
        out.extend(self.token.parameters().into_iter().map(|(n, t)| (format!("mask.{n}"), t)));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = Vec::new();
        out.extend(self.encoder.parameters_mut().into_iter().map(|(n, t)| (format!("encoder.{n}"), t)));
        out.push(("prototypes".into(), self.prototypes.matrix_mut()));
        if let Some(p) = &mut self.volume_prototypes {
            out.push(("volume_prototypes".into(), p.matrix_mut()));
        }
        out.extend(self.stack.parameters_mut().into_iter().map(|(n, t)| (format!("attention.{n}"), t)));
        out.extend(self.decoder.parameters_mut().into_iter().map(|(n, t)| (format!("decoder.{n}"), t)));
        out.extend(self.token.parameters_mut().into_iter().map(|(n, t)| (format!("mask.{n}"), t)));
        out
    }

    fn volume_prototypes_mut(&mut self) -> &mut Prototypes<T> {
        self.volume_prototypes.as_mut().unwrap_or(&mut self.prototypes)
    }

    fn volume_prototypes_ref(&self) -> &Prototypes<T> {
        self.volume_prototypes.as_ref().unwrap_or(&self.prototypes)
    }
}

/// One line of the metric stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub stage: u8,
    pub epoch: usize,
    pub loss: f64,
    pub wall_ms: u64,
    pub seed: u64,
}

/// What one optimizer step saw, handed to an optional observer.
#[derive(Clone, Debug)]
pub struct StepReport<T> {
    pub stage: Stage,
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
    /// Embeddings emitted in this step (slice `z` in stage 1, volume `Z` in
    /// stage 3, none in stage 2).
    pub embeddings: Vec<Tensor<T>>,
}

pub fn run_stage<T: Scalar>(
    stage: Stage,
    state: &mut ModelState<T>,
    volumes: &[Volume<T>],
    cfg: &StageConfig,
) -> Result<Vec<MetricRecord>> {
    run_stage_observed(stage, state, volumes, cfg, None::<&mut fn(&StepReport<T>)>)
}

/// Runs every epoch of one stage and returns one record per epoch.
pub fn run_stage_observed<T: Scalar, F: FnMut(&StepReport<T>)>(
    stage: Stage,
    state: &mut ModelState<T>,
    volumes: &[Volume<T>],
    cfg: &StageConfig,
    mut observer: Option<&mut F>,
) -> Result<Vec<MetricRecord>> {
    let train = &cfg.train;
    // A zero rate is accepted here as an explicit no-op run.
    if train.learning_rate != 0.0 {
        train.validate()?;
    }
    cfg.losses.validate()?;
    check_prerequisites(stage, state, train.cold_start)?;
    if volumes.is_empty() {
        return Err(Error::EmptyVolume);
    }
    let mut records = Vec::with_capacity(train.epochs);
    for epoch in 1..=train.epochs {
        let started = Instant::now();
        let mut runner = EpochRunner { stage, epoch, cfg, observer: observer.as_deref_mut() };
        let losses = match stage {
            Stage::Slice => runner.slice_epoch(state, volumes)?,
            Stage::Mask => runner.mask_epoch(state, volumes)?,
            Stage::Volume => runner.volume_epoch(state, volumes)?,
        };
        let loss = losses.iter().sum::<f64>() / losses.len() as f64;
        let wall_ms = if train.strict { 0 } else { started.elapsed().as_millis() as u64 };
        records.push(MetricRecord { stage: stage.number(), epoch, loss, wall_ms, seed: train.seed });
        state.progress.stage = stage.number();
        state.progress.epoch = epoch;
    }
    state.progress.stages_done[stage as usize - 1] = true;
    Ok(records)
}

fn check_prerequisites<T: Scalar>(stage: Stage, state: &ModelState<T>, cold_start: bool) -> Result<()> {
    if cold_start {
        return Ok(());
    }
    let needed: &[Stage] = match stage {
        Stage::Slice => &[],
        Stage::Mask => &[Stage::Slice],
        Stage::Volume => &[Stage::Slice, Stage::Mask],
    };
    for &s in needed {
        if !state.progress.done(s) {
            return Err(Error::Prerequisite(format!(
                "stage {} requires a completed stage {} (or cold_start)",
                stage.number(),
                s.number()
            )));
        }
    }
    Ok(())
}

struct EpochRunner<'a, F> {
    stage: Stage,
    epoch: usize,
    cfg: &'a StageConfig,
    observer: Option<&'a mut F>,
}

impl<F> EpochRunner<'_, F> {
    fn seed(&self, parts: &[u64]) -> u64 {
        let mut p = vec![self.stage.number() as u64, self.epoch as u64];
        p.extend_from_slice(parts);
        mix_seed(self.cfg.train.seed, &p)
    }

    fn lr(&self) -> f64 {
        self.cfg.train.learning_rate
    }

    fn finish<T: Scalar>(&mut self, g: &Graph<T>, loss: Var, batch: usize, emitted: Option<Var>) -> Result<f64>
    where
        F: FnMut(&StepReport<T>),
    {
        let value = g.scalar_value(loss).map(|v| v.as_f64()).unwrap_or(f64::NAN);
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { stage: self.stage.number(), epoch: self.epoch, batch });
        }
        if let Some(obs) = self.observer.as_mut() {
            let embeddings = emitted
                .map(|v| {
                    let t = g.value(v);
                    (0..t.rows()).map(|r| Tensor::row(t.row_slice(r))).collect()
                })
                .unwrap_or_default();
            (*obs)(&StepReport { stage: self.stage, epoch: self.epoch, batch, loss: value, embeddings });
        }
        Ok(value)
    }

    /// Splits `0..n` into shuffled batches of at most `size`, folding a
    /// trailing singleton into the previous batch.
    fn batches(&self, n: usize, size: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed(&[u64::MAX])));
        let mut out: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
        if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
            let last = out.pop().expect("non-empty");
            out.last_mut().expect("non-empty").extend(last);
        }
        out
    }

    fn slice_epoch<T: Scalar>(&mut self, state: &mut ModelState<T>, volumes: &[Volume<T>]) -> Result<Vec<f64>>
    where
        F: FnMut(&StepReport<T>),
    {
        let train = &self.cfg.train;
        let mut pick = ChaCha8Rng::seed_from_u64(self.seed(&[u64::MAX - 1]));
        let mut items = Vec::new();
        for (v, vol) in volumes.iter().enumerate() {
            let k = train.slices_per_volume.min(vol.len());
            let mut chosen = sample(&mut pick, vol.len(), k).into_vec();
            chosen.sort_unstable();
            items.extend(chosen.into_iter().map(|s| (v, s)));
        }
        if items.len() < 2 {
            return Err(Error::BatchTooSmall { needed: 2, got: items.len() });
        }
        let mut losses = Vec::new();
        for (b, batch) in self.batches(items.len(), train.slice_batch).into_iter().enumerate() {
            let mut views = Vec::with_capacity(batch.len());
            for &i in &batch {
                let (v, s) = items[i];
                let x = &volumes[v].slices()[s];
                let t = augment_slice(x, &train.augment, self.seed(&[i as u64, 0]))?;
                let u = augment_slice(x, &train.augment, self.seed(&[i as u64, 1]))?;
                views.push((t, u));
            }
            let mut g = Graph::new();
            let eb = state.encoder.bind(&mut g, "encoder.", true)?;
            let c = state.prototypes.bind(&mut g, "prototypes", true)?;
            let out = batch_intra_loss(&mut g, &state.encoder, &eb, c, &views, &self.cfg.losses)?;
            let value = self.finish(&g, out.loss, b, Some(out.features))?;
            g.backward(out.loss)?;
            if self.lr() != 0.0 {
                let grads = gradients(&state.encoder, &g, &eb);
                sgd_update(&mut state.encoder, &grads, self.lr())?;
                step_prototypes(&mut state.prototypes, &g.grad(c), self.lr())?;
            }
            losses.push(value);
        }
        Ok(losses)
    }

    fn mask_epoch<T: Scalar>(&mut self, state: &mut ModelState<T>, volumes: &[Volume<T>]) -> Result<Vec<f64>>
    where
        F: FnMut(&StepReport<T>),
    {
        let train = &self.cfg.train;
        let mut losses = Vec::new();
        for (b, batch) in self.batches(volumes.len(), train.volume_batch).into_iter().enumerate() {
            let mut g = Graph::new();
            let eb = state.encoder.bind(&mut g, "encoder.", train.joint_stage2)?;
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
            let mut parts = Vec::with_capacity(batch.len());
            for &v in &batch {
                let view = augment_volume(&volumes[v], &train.augment, self.seed(&[v as u64, 0]))?;
                let plan = sample_mask(view.len(), self.cfg.mask.ratio, self.seed(&[v as u64, 1]))?;
                parts.push(mask_loss(&mut g, &model, &view, &plan, self.cfg.mask.squared)?.loss);
            }
            let mut total = parts[0];
            for &p in &parts[1..] {
                total = g.add(total, p)?;
            }
            let loss = g.scale(total, T::one() / T::of_usize(parts.len()))?;
            let value = self.finish(&g, loss, b, None)?;
            g.backward(loss)?;
            if self.lr() != 0.0 {
                let grads = gradients(&state.stack, &g, &ab);
                sgd_update(&mut state.stack, &grads, self.lr())?;
                let grads = gradients(&state.decoder, &g, &db);
                sgd_update(&mut state.decoder, &grads, self.lr())?;
                sgd_update(&mut state.token, &[g.grad(token)], self.lr())?;
                if train.joint_stage2 {
                    let grads = gradients(&state.encoder, &g, &eb);
                    sgd_update(&mut state.encoder, &grads, self.lr())?;
                }
            }
            losses.push(value);
        }
        Ok(losses)
    }

    fn volume_epoch<T: Scalar>(&mut self, state: &mut ModelState<T>, volumes: &[Volume<T>]) -> Result<Vec<f64>>
    where
        F: FnMut(&StepReport<T>),
    {
        let train = &self.cfg.train;
        if volumes.len() < 2 {
            return Err(Error::BatchTooSmall { needed: 2, got: volumes.len() });
        }
        let mut losses = Vec::new();
        for (b, batch) in self.batches(volumes.len(), train.volume_batch).into_iter().enumerate() {
            let mut views = Vec::with_capacity(batch.len());
            for &v in &batch {
                let t = augment_volume(&volumes[v], &train.augment, self.seed(&[v as u64, 0]))?;
                let s = augment_volume(&volumes[v], &train.augment, self.seed(&[v as u64, 1]))?;
                views.push((t, s));
            }
            let mut g = Graph::new();
            let eb = state.encoder.bind(&mut g, "encoder.", true)?;
            let ab = state.stack.bind(&mut g, "attention.", true)?;
            let c = state.volume_prototypes_ref().bind(&mut g, "prototypes", true)?;
            let out = batch_inter_loss(&mut g, &state.encoder, &eb, &state.stack, &ab, c, &views, &self.cfg.losses)?;
            let value = self.finish(&g, out.loss, b, Some(out.features))?;
            g.backward(out.loss)?;
            if self.lr() != 0.0 {
                let grads = gradients(&state.encoder, &g, &eb);
                sgd_update(&mut state.encoder, &grads, self.lr())?;
                let grads = gradients(&state.stack, &g, &ab);
                sgd_update(&mut state.stack, &grads, self.lr())?;
                let lr = self.lr();
                step_prototypes(state.volume_prototypes_mut(), &g.grad(c), lr)?;
            }
            losses.push(value);
        }
        Ok(losses)
    }
}

/// Gradient step on the prototypes followed by projection of every column
/// back onto the unit sphere.
pub fn step_prototypes<T: Scalar>(prototypes: &mut Prototypes<T>, grad: &Tensor<T>, lr: f64) -> Result<()> {
    sgd_step(prototypes.matrix_mut(), grad, lr)?;
    prototypes.normalize_columns();
    Ok(())
}

/// Unit-norm slice embeddings `[N * n, d_z]` of every slice, volume-major.
pub fn slice_embeddings<T: Scalar>(state: &ModelState<T>, volumes: &[Volume<T>]) -> Result<Tensor<T>> {
    let d = state.encoder.config().embed_dim;
    let mut data = Vec::new();
    for v in volumes {
        let mut g = Graph::new();
        let b = state.encoder.bind(&mut g, "encoder.", false)?;
        for s in v.slices() {
            let f = state.encoder.forward(&mut g, &b, s)?;
            data.extend_from_slice(g.value(f.z).data());
        }
    }
    Ok(Tensor::from_vec(&[data.len() / d, d], data))
}

/// Unit-norm holistic embeddings `[N, d_z]` of every volume.
pub fn volume_embeddings<T: Scalar>(state: &ModelState<T>, volumes: &[Volume<T>]) -> Result<Tensor<T>> {
    let d = state.encoder.config().embed_dim;
    let mut data = Vec::with_capacity(volumes.len() * d);
    for v in volumes {
        let mut g = Graph::new();
        let eb = state.encoder.bind(&mut g, "encoder.", false)?;
        let ab = state.stack.bind(&mut g, "attention.", false)?;
        let (y, _) = state.encoder.forward_volume(&mut g, &eb, v)?;
        let out = state.stack.forward(&mut g, &ab, y)?;
        data.extend_from_slice(g.value(out.z).data());
    }
    Ok(Tensor::from_vec(&[volumes.len(), d], data))
}
