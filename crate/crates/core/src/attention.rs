//! Deformable-attention aggregator over a sequence of slice features.
//!
//! Each block runs pre-norm deformable multi-head attention followed by a
//! feed-forward sublayer, both residual. Keys and values are not read at every
//! sequence position: a reference grid subsampled by `downsample` is shifted by
//! bounded offsets predicted from the queries, and the (normalized) sequence
//! is linearly interpolated at the shifted positions. A learned relative
//! position bias table is interpolated at the same fractional offsets.
//! Blocks after the first halve the sequence by stride-2 average pooling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{bind, Bound, Parameters};
use crate::scalar::Scalar;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionConfig {
    pub blocks: usize,
    pub heads: usize,
    pub offset_groups: usize,
    /// Reference grid downsampling factor `r`.
    pub downsample: usize,
    pub ffn_hidden: usize,
    /// Offset bound; defaults to one grid stride (`downsample`).
    pub max_offset: Option<f64>,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self { blocks: 4, heads: 2, offset_groups: 1, downsample: 2, ffn_hidden: 64, max_offset: None }
    }
}

impl AttentionConfig {
    pub fn max_offset(&self) -> f64 {
        self.max_offset.unwrap_or(self.downsample as f64)
    }

    pub fn validate(&self, feature_width: usize) -> Result<()> {
        if self.blocks == 0 || self.heads == 0 || self.offset_groups == 0 || self.downsample == 0 {
            return Err(Error::Config("blocks, heads, offset_groups and downsample must be positive".into()));
        }
        if !feature_width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("feature width {feature_width} not divisible by {} heads", self.heads)));
        }
        if !feature_width.is_multiple_of(self.offset_groups) {
            return Err(Error::Config(format!(
                "feature width {feature_width} not divisible by {} offset groups",
                self.offset_groups
            )));
        }
        if !self.heads.is_multiple_of(self.offset_groups) && !self.offset_groups.is_multiple_of(self.heads) {
            return Err(Error::Config("heads and offset groups must divide one another".into()));
        }
        if !(self.max_offset() >= 0.0) {
            return Err(Error::Config("max_offset must be non-negative".into()));
        }
        Ok(())
    }

    /// Smallest sequence length the pyramid accepts.
    pub fn min_sequence(&self) -> usize {
        1 << (self.blocks - 1)
    }
}

/// Sequence lengths entering each block.
pub fn pyramid_lengths(len: usize, blocks: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(blocks);
    let mut l = len;
    for b in 0..blocks {
        if b > 0 {
            l = l.div_ceil(2);
        }
        out.push(l);
    }
    out
}

/// Reference grid positions: centers of consecutive windows of `r` rows.
pub fn reference_grid(len: usize, r: usize) -> Vec<f64> {
    let count = len.div_ceil(r);
    (0..count).map(|g| ((g * r) as f64 + (r as f64 - 1.0) / 2.0).min((len - 1) as f64)).collect()
}

/// Sinusoidal positional encoding `[len, width]`.
pub fn positional_encoding<T: Scalar>(len: usize, width: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(len * width);
    for pos in 0..len {
        for i in 0..width {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / width as f64);
            data.push(T::of(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::from_vec(&[len, width], data)
}

/// `[ceil(len/2), len]` stride-2 average pooling matrix.
fn pooling_matrix<T: Scalar>(len: usize) -> Tensor<T> {
    let out = len.div_ceil(2);
    let mut m = Tensor::zeros(&[out, len]);
    for o in 0..out {
        let members: Vec<usize> = [2 * o, 2 * o + 1].into_iter().filter(|&i| i < len).collect();
        let w = T::one() / T::of_usize(members.len());
        for i in members {
            m.data_mut()[o * len + i] = w;
        }
    }
    m
}

/// Parameters of one deformable-attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T> {
    len: usize,
    wq: Tensor<T>,
    wk: Tensor<T>,
    wv: Tensor<T>,
    wo: Tensor<T>,
    off_w1: Tensor<T>,
    off_b1: Tensor<T>,
    off_w2: Tensor<T>,
    off_b2: Tensor<T>,
    /// `[2 * len - 1, heads]`
    rel_bias: Tensor<T>,
    ffn_w1: Tensor<T>,
    ffn_b1: Tensor<T>,
    ffn_w2: Tensor<T>,
    ffn_b2: Tensor<T>,
}

impl<T: Scalar> BlockParams<T> {
    fn new<R: Rng + ?Sized>(len: usize, width: usize, cfg: &AttentionConfig, rng: &mut R) -> Self {
        let gw = width / cfg.offset_groups;
        let hidden = (gw / 2).max(1);
        let s = |n: usize| (1.0 / n as f64).sqrt();
        Self {
            len,
            wq: Tensor::randn(&[width, width], s(width), rng),
            wk: Tensor::randn(&[width, width], s(width), rng),
            wv: Tensor::randn(&[width, width], s(width), rng),
            wo: Tensor::randn(&[width, width], s(width), rng),
            off_w1: Tensor::randn(&[gw, hidden], s(gw), rng),
            off_b1: Tensor::zeros(&[1, hidden]),
            off_w2: Tensor::randn(&[hidden, 1], 0.5 * s(hidden), rng),
            off_b2: Tensor::zeros(&[1, 1]),
            rel_bias: Tensor::randn(&[2 * len - 1, cfg.heads], 0.02, rng),
            ffn_w1: Tensor::randn(&[width, cfg.ffn_hidden], s(width), rng),
            ffn_b1: Tensor::zeros(&[1, cfg.ffn_hidden]),
            ffn_w2: Tensor::randn(&[cfg.ffn_hidden, width], s(cfg.ffn_hidden), rng),
            ffn_b2: Tensor::zeros(&[1, width]),
        }
    }

    fn named(&self) -> [(&'static str, &Tensor<T>); 13] {
        [
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("offset.w1", &self.off_w1),
            ("offset.b1", &self.off_b1),
            ("offset.w2", &self.off_w2),
            ("offset.b2", &self.off_b2),
            ("rel_bias", &self.rel_bias),
            ("ffn.w1", &self.ffn_w1),
            ("ffn.b1", &self.ffn_b1),
            ("ffn.w2", &self.ffn_w2),
            ("ffn.b2", &self.ffn_b2),
        ]
    }

    fn named_mut(&mut self) -> [(&'static str, &mut Tensor<T>); 13] {
        [
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
            ("offset.w1", &mut self.off_w1),
            ("offset.b1", &mut self.off_b1),
            ("offset.w2", &mut self.off_w2),
            ("offset.b2", &mut self.off_b2),
            ("rel_bias", &mut self.rel_bias),
            ("ffn.w1", &mut self.ffn_w1),
            ("ffn.b1", &mut self.ffn_b1),
            ("ffn.w2", &mut self.ffn_w2),
            ("ffn.b2", &mut self.ffn_b2),
        ]
    }

    /// Sequence length this block was built for.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Graph handles recorded by one attention sublayer.
#[derive(Clone, Debug)]
pub struct AttentionTrace {
    /// Per-group sampling positions `[G, 1]` (grid plus offsets).
    pub positions: Vec<Var>,
    /// Per-group offsets `[G, 1]`.
    pub offsets: Vec<Var>,
    /// Per-head attention weights `[len, G]`.
    pub probs: Vec<Var>,
    /// Per-head outputs `[len, d_head]`.
    pub heads: Vec<Var>,
    /// Concatenated heads projected by `W^O`.
    pub output: Var,
}

/// Result of running the whole stack on one sequence.
#[derive(Clone, Debug)]
pub struct StackOutput {
    /// Unit-norm holistic embedding `[1, embed_dim]`.
    pub z: Var,
    /// Normalized per-position outputs of the last block, before pooling.
    pub tokens: Var,
    pub traces: Vec<AttentionTrace>,
}

/// Trainable parameters and configuration of the attention stack.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionStack<T> {
    config: AttentionConfig,
    seq_len: usize,
    width: usize,
    embed_dim: usize,
    blocks: Vec<BlockParams<T>>,
    projection: Tensor<T>,
}

/// Test hooks that pin parts of the attention to a fixed behavior.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Overrides {
    /// Replace predicted offsets by zero.
    pub zero_offsets: bool,
    /// Drop the relative position bias.
    pub zero_bias: bool,
}

impl<T: Scalar> AttentionStack<T> {
    /// Builds a stack for sequences of exactly `seq_len` rows of width
    /// `width`, emitting embeddings of width `embed_dim`.
    pub fn new<R: Rng + ?Sized>(
        config: AttentionConfig,
        seq_len: usize,
        width: usize,
        embed_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate(width)?;
        if seq_len < config.min_sequence() {
            return Err(Error::SequenceTooShort {
                len: seq_len,
                blocks: config.blocks,
                required: config.min_sequence(),
            });
        }
        let blocks = pyramid_lengths(seq_len, config.blocks)
            .into_iter()
            .map(|len| BlockParams::new(len, width, &config, rng))
            .collect();
        let projection = Tensor::randn(&[width, embed_dim], (1.0 / width as f64).sqrt(), rng);
        Ok(Self { config, seq_len, width, embed_dim, blocks, projection })
    }

    pub fn config(&self) -> &AttentionConfig {
        &self.config
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn blocks(&self) -> &[BlockParams<T>] {
        &self.blocks
    }

    /// Sets every offset-network weight to zero, so offsets are exactly zero.
    pub fn zero_offset_network(&mut self) {
        for b in &mut self.blocks {
            for t in [&mut b.off_w1, &mut b.off_b1, &mut b.off_w2, &mut b.off_b2] {
                t.data_mut().iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }

    pub fn zero_relative_bias(&mut self) {
        for b in &mut self.blocks {
            b.rel_bias.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn bind(&self, g: &mut Graph<T>, prefix: &str, trainable: bool) -> Result<Bound> {
        bind(self, g, prefix, trainable)
    }

    /// Holistic embedding of a stacked feature sequence `Y`.
    pub fn forward(&self, g: &mut Graph<T>, bound: &Bound, y: Var) -> Result<StackOutput> {
        self.forward_with(g, bound, y, Overrides::default())
    }

    pub fn forward_with(&self, g: &mut Graph<T>, bound: &Bound, y: Var, ov: Overrides) -> Result<StackOutput> {
        let (tokens, traces) = self.forward_tokens(g, bound, y, ov)?;
        let pooled = g.mean_rows(tokens)?;
        let raw = g.matmul(pooled, bound.get("proj.weight"))?;
        let z = g.l2_normalize_rows(raw)?;
        Ok(StackOutput { z, tokens, traces })
    }

    /// Normalized per-position outputs of the last block, with no pooling or
    /// projection.
    pub fn forward_tokens(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        y: Var,
        ov: Overrides,
    ) -> Result<(Var, Vec<AttentionTrace>)> {
        let shape = g.shape(y).to_vec();
        if shape.len() != 2 || shape[1] != self.width {
            return Err(Error::Shape(format!("sequence must be [len, {}], got {shape:?}", self.width)));
        }
        let len = shape[0];
        if len < self.config.min_sequence() {
            return Err(Error::SequenceTooShort {
                len,
                blocks: self.config.blocks,
                required: self.config.min_sequence(),
            });
        }
        if len != self.seq_len {
            return Err(Error::Shape(format!("stack built for {} positions, got {len}", self.seq_len)));
        }
        let pe = g.constant(positional_encoding(len, self.width));
        let mut x = g.add(y, pe)?;
        let mut traces = Vec::with_capacity(self.blocks.len());
        for (b, block) in self.blocks.iter().enumerate() {
            if b > 0 {
                let cur = g.shape(x)[0];
                let pool = g.constant(pooling_matrix(cur));
                x = g.matmul(pool, x)?;
            }
            let (next, trace) = self.block_forward(g, bound, b, block, x, ov)?;
            x = next;
            traces.push(trace);
        }
        let tokens = g.layer_norm_rows(x, T::of(LN_EPS))?;
        Ok((tokens, traces))
    }

    /// Per-slice outputs `[n, width]`: the last-block tokens interpolated at
    /// each slice's center, mapped through the pooling pyramid.
    pub fn per_slice_outputs(&self, g: &mut Graph<T>, tokens: Var, slices: usize, levels: usize) -> Result<Var> {
        let halvings = (self.config.blocks - 1) as i32;
        let scale = 2f64.powi(halvings);
        let pos: Vec<T> = (0..slices)
            .map(|i| {
                let center = (i * levels) as f64 + (levels as f64 - 1.0) / 2.0;
                T::of((center + 0.5) / scale - 0.5)
            })
            .collect();
        let p = g.constant(Tensor::from_vec(&[slices, 1], pos));
        Ok(g.interp1d(tokens, p)?)
    }

    fn block_forward(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        index: usize,
        block: &BlockParams<T>,
        x: Var,
        ov: Overrides,
    ) -> Result<(Var, AttentionTrace)> {
        let p = |name: &str| bound.get(&format!("block{index}.{name}"));
        let xn = g.layer_norm_rows(x, T::of(LN_EPS))?;
        let trace = self.attention(g, bound, index, block, xn, ov)?;
        let x = g.add(x, trace.output)?;

        let xn2 = g.layer_norm_rows(x, T::of(LN_EPS))?;
        let h = g.matmul(xn2, p("ffn.w1"))?;
        let h = g.add_row_bias(h, p("ffn.b1"))?;
        let h = g.silu(h)?;
        let h = g.matmul(h, p("ffn.w2"))?;
        let h = g.add_row_bias(h, p("ffn.b2"))?;
        let x = g.add(x, h)?;
        Ok((x, trace))
    }

    /// Deformable multi-head attention over the normalized sequence `xn`.
    pub fn attention(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        index: usize,
        block: &BlockParams<T>,
        xn: Var,
        ov: Overrides,
    ) -> Result<AttentionTrace> {
        let p = |name: &str| bound.get(&format!("block{index}.{name}"));
        let len = g.shape(xn)[0];
        if len != block.len {
            return Err(Error::Shape(format!("block {index} expects {} positions, got {len}", block.len)));
        }
        let cfg = &self.config;
        let groups = cfg.offset_groups;
        let gw = self.width / groups;
        let dh = self.width / cfg.heads;
        let grid = reference_grid(len, cfg.downsample);
        let gcount = grid.len();
        let grid_var = g.constant(Tensor::from_vec(&[gcount, 1], grid.iter().map(|&v| T::of(v)).collect()));

        let q = g.matmul(xn, p("wq"))?;
        let mut positions = Vec::with_capacity(groups);
        let mut offsets = Vec::with_capacity(groups);
        let mut sampled = Vec::with_capacity(groups);
        for gi in 0..groups {
            let qg = slice_cols_or_self(g, q, gi * gw, (gi + 1) * gw, self.width)?;
            let offset = if ov.zero_offsets {
                g.constant(Tensor::zeros(&[gcount, 1]))
            } else {
                predict_offsets(
                    g,
                    qg,
                    grid_var,
                    p("offset.w1"),
                    p("offset.b1"),
                    p("offset.w2"),
                    p("offset.b2"),
                    cfg.max_offset(),
                )?
            };
            let pos = g.add(grid_var, offset)?;
            let yg = slice_cols_or_self(g, xn, gi * gw, (gi + 1) * gw, self.width)?;
            sampled.push(sample_interp(g, yg, pos)?);
            positions.push(pos);
            offsets.push(offset);
        }
        let ys = if groups == 1 { sampled[0] } else { g.concat_cols(&sampled)? };
        let k = g.matmul(ys, p("wk"))?;
        let v = g.matmul(ys, p("wv"))?;

        let mut heads = Vec::with_capacity(cfg.heads);
        let mut probs = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let group = h * groups / cfg.heads;
            let qh = slice_cols_or_self(g, q, h * dh, (h + 1) * dh, self.width)?;
            let kh = slice_cols_or_self(g, k, h * dh, (h + 1) * dh, self.width)?;
            let vh = slice_cols_or_self(g, v, h * dh, (h + 1) * dh, self.width)?;
            let bias = if ov.zero_bias {
                None
            } else {
                let table = slice_cols_or_self(g, p("rel_bias"), h, h + 1, cfg.heads)?;
                Some(relative_bias(g, table, positions[group], len)?)
            };
            let (out, a) = attention_head(g, qh, kh, vh, bias)?;
            heads.push(out);
            probs.push(a);
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        let output = g.matmul(cat, p("wo"))?;
        Ok(AttentionTrace { positions, offsets, probs, heads, output })
    }
}

fn slice_cols_or_self<T: Scalar>(g: &mut Graph<T>, a: Var, s: usize, e: usize, width: usize) -> Result<Var> {
    if s == 0 && e == width {
        return Ok(a);
    }
    Ok(g.slice_cols(a, s, e)?)
}

/// Bounded offsets at each reference grid point: queries are read at the grid
/// positions and passed through `max_offset * tanh(W2 silu(W1 q + b1) + b2)`.
#[allow(clippy::too_many_arguments)]
pub fn predict_offsets<T: Scalar>(
    g: &mut Graph<T>,
    queries: Var,
    grid: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
    max_offset: f64,
) -> Result<Var> {
    if g.shape(grid)[0] == 0 || g.value(queries).is_empty() {
        return Err(Error::EmptyVolume);
    }
    let qg = g.interp1d(queries, grid)?;
    let h = g.matmul(qg, w1)?;
    let h = g.add_row_bias(h, b1)?;
    let h = g.silu(h)?;
    let o = g.matmul(h, w2)?;
    let o = g.add_row_bias(o, b2)?;
    let o = g.tanh(o)?;
    Ok(g.scale(o, T::of(max_offset))?)
}

/// Rows of `y` linearly interpolated at real positions (clamped to the
/// sequence).
pub fn sample_interp<T: Scalar>(g: &mut Graph<T>, y: Var, positions: Var) -> Result<Var> {
    Ok(g.interp1d(y, positions)?)
}

/// `[len, G]` bias: the 1D table interpolated at relative offsets
/// `i - u_j`, shifted into table coordinates.
fn relative_bias<T: Scalar>(g: &mut Graph<T>, table: Var, positions: Var, len: usize) -> Result<Var> {
    let gcount = g.shape(positions)[0];
    let ones = g.constant(Tensor::ones(&[len, 1]));
    let pos_row = g.transpose(positions)?;
    let spread = g.matmul(ones, pos_row)?;
    let base: Vec<T> = (0..len).flat_map(|i| std::iter::repeat_n(T::of_usize(i + len - 1), gcount)).collect();
    let base = g.constant(Tensor::from_vec(&[len, gcount], base));
    let idx = g.sub(base, spread)?;
    let flat = g.reshape(idx, &[len * gcount, 1])?;
    let vals = g.interp1d(table, flat)?;
    Ok(g.reshape(vals, &[len, gcount])?)
}

/// One attention head: `softmax(q kᵀ / sqrt(d) + bias) v`. Returns the output
/// and the attention weights.
pub fn attention_head<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var, bias: Option<Var>) -> Result<(Var, Var)> {
    let d = g.shape(q).get(1).copied().unwrap_or(0);
    if d == 0 {
        return Err(Error::Config("head width must be positive".into()));
    }
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let mut logits = g.scale(logits, T::one() / T::of_usize(d).sqrt())?;
    if let Some(b) = bias {
        logits = g.add(logits, b)?;
    }
    let a = g.softmax_rows(logits)?;
    Ok((g.matmul(a, v)?, a))
}

impl<T: Scalar> Parameters<T> for AttentionStack<T> {
    fn parameters(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = self
            .blocks
            .iter()
            .enumerate()
            .flat_map(|(i, b)| b.named().into_iter().map(move |(n, t)| (format!("block{i}.{n}"), t)))
            .collect();
        out.push(("proj.weight".into(), &self.projection));
        out
    }

    fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = self
            .blocks
            .iter_mut()
            .enumerate()
            .flat_map(|(i, b)| b.named_mut().into_iter().map(move |(n, t)| (format!("block{i}.{n}"), t)))
            .collect();
        out.push(("proj.weight".into(), &mut self.projection));
        out
    }
}

/// Holistic unit-norm embedding of `y`, evaluated outside a training graph.
pub fn volume_embed<T: Scalar>(stack: &AttentionStack<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let b = stack.bind(&mut g, "attention.", false)?;
    let yv = g.constant(y.clone());
    let out = stack.forward(&mut g, &b, yv)?;
    Ok(g.value(out.z).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradient;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn toy(seed: u64, cfg: AttentionConfig, len: usize, width: usize) -> AttentionStack<f64> {
        AttentionStack::new(cfg, len, width, 4, &mut rng(seed)).unwrap()
    }

    #[test]
    fn grid_and_pyramid_shapes() {
        assert_eq!(reference_grid(8, 2), vec![0.5, 2.5, 4.5, 6.5]);
        assert_eq!(reference_grid(5, 1), vec![0.0, 1.0, 2.0, 3.0, 4.0]);
        assert_eq!(reference_grid(5, 2), vec![0.5, 2.5, 4.0]);
        assert_eq!(pyramid_lengths(32, 4), vec![32, 16, 8, 4]);
        assert_eq!(pyramid_lengths(7, 3), vec![7, 4, 2]);
    }

    #[test]
    fn positional_encoding_is_pure() {
        let a: Tensor<f64> = positional_encoding(6, 8);
        assert!(a.bit_eq(&positional_encoding(6, 8)));
        assert_eq!(a.at(0, 0), 0.0);
        assert_eq!(a.at(0, 1), 1.0);
    }

    #[test]
    fn zero_offset_network_gives_zero_offsets() {
        let mut s = toy(1, AttentionConfig { blocks: 2, ..Default::default() }, 8, 8);
        s.zero_offset_network();
        let mut g = Graph::new();
        let b = s.bind(&mut g, "a.", false).unwrap();
        let y = g.constant(Tensor::randn(&[8, 8], 1.0, &mut rng(2)));
        let out = s.forward(&mut g, &b, y).unwrap();
        for t in &out.traces {
            for o in &t.offsets {
                assert!(g.value(*o).data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn offsets_stay_bounded() {
        let cfg = AttentionConfig { blocks: 1, downsample: 2, ..Default::default() };
        let mut r = rng(3);
        for _ in 0..1000 {
            let mut s = toy(r.gen(), cfg.clone(), 6, 4);
            // Large weights push the saturating nonlinearity to its limits.
            for (n, t) in s.parameters_mut() {
                if n.contains("offset") {
                    t.data_mut().iter_mut().for_each(|v| *v *= 50.0);
                }
            }
            let mut g = Graph::new();
            let b = s.bind(&mut g, "a.", false).unwrap();
            let y = g.constant(Tensor::randn(&[6, 4], 3.0, &mut r));
            let out = s.forward(&mut g, &b, y).unwrap();
            for v in g.value(out.traces[0].offsets[0]).data() {
                assert!(v.abs() <= 2.0);
            }
        }
    }

    #[test]
    fn offset_gradients_match_differences() {
        let s = toy(4, AttentionConfig { blocks: 1, ..Default::default() }, 6, 4);
        let mut g = Graph::new();
        let b = s.bind(&mut g, "a.", true).unwrap();
        let y = g.constant(Tensor::randn(&[6, 4], 1.0, &mut rng(5)));
        let out = s.forward(&mut g, &b, y).unwrap();
        let probe = g.constant(Tensor::randn(&[3, 1], 1.0, &mut rng(6)));
        let weighted = g.mul(out.traces[0].offsets[0], probe).unwrap();
        let l = g.sum(weighted).unwrap();
        for name in ["offset.w1", "offset.b1", "offset.w2", "offset.b2"] {
            let v = g.lookup(&format!("a.block0.{name}")).unwrap();
            let r = check_gradient(&mut g, l, v, 1e-5).unwrap();
            assert!(r.max_rel_error < 1e-4, "{name}: {r:?}");
        }
    }

    #[test]
    fn interpolation_exact_linear_and_clamped() {
        let mut g = Graph::<f64>::new();
        let y = g.constant(Tensor::matrix(&[
            vec![0.0, 0.5, 9.0],
            vec![1.0, 1.0, 1.0],
            vec![4.0, -2.0, 7.0],
            vec![3.0, 3.0, 3.0],
        ]));
        let pos = g.constant(Tensor::from_vec(&[4, 1], vec![2.0, 2.0, -0.7, 3.0]));
        let s = sample_interp(&mut g, y, pos).unwrap();
        assert_eq!(g.value(s).row_slice(0), &[4.0, -2.0, 7.0]);
        assert_eq!(g.value(s).row_slice(2), &[0.0, 0.5, 9.0]);
        assert_eq!(g.value(s).row_slice(3), &[3.0, 3.0, 3.0]);
        let mid = g.constant(Tensor::from_vec(&[1, 1], vec![2.5]));
        let y2 = g.constant(Tensor::matrix(&[vec![0.0; 3], vec![0.0; 3], vec![1.0, 1.0, 1.0], vec![3.0, 3.0, 3.0]]));
        let m = sample_interp(&mut g, y2, mid).unwrap();
        assert_eq!(g.value(m).data(), &[2.0, 2.0, 2.0]);
        let nan = g.constant(Tensor::from_vec(&[1, 1], vec![f64::NAN]));
        assert!(sample_interp(&mut g, y, nan).is_err());
    }

    #[test]
    fn single_key_returns_value_row() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::randn(&[5, 3], 1.0, &mut rng(7)));
        let k = g.constant(Tensor::randn(&[1, 3], 1.0, &mut rng(8)));
        let v = g.constant(Tensor::row(&[0.25, -1.0, 2.0]));
        let (o, _) = attention_head(&mut g, q, k, v, None).unwrap();
        for r in 0..5 {
            assert_eq!(g.value(o).row_slice(r), &[0.25, -1.0, 2.0]);
        }
    }

    #[test]
    fn head_is_shift_invariant() {
        let mut g = Graph::<f64>::new();
        let mut r = rng(9);
        let q = g.constant(Tensor::randn(&[4, 2], 1.0, &mut r));
        let k = g.constant(Tensor::randn(&[3, 2], 1.0, &mut r));
        let v = g.constant(Tensor::randn(&[3, 2], 1.0, &mut r));
        let bias = g.constant(Tensor::randn(&[4, 3], 1.0, &mut r));
        let shifted = g.constant(Tensor::from_vec(
            &[4, 3],
            g.value(bias)
                .data()
                .chunks(3)
                .enumerate()
                .flat_map(|(i, row)| row.iter().map(move |b| b + 3.0 * i as f64 + 1.5))
                .collect(),
        ));
        let (a, _) = attention_head(&mut g, q, k, v, Some(bias)).unwrap();
        let (b, _) = attention_head(&mut g, q, k, v, Some(shifted)).unwrap();
        for (x, y) in g.value(a).data().iter().zip(g.value(b).data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let empty = g.constant(Tensor::zeros(&[4, 1]));
        let _ = empty;
    }

    #[test]
    fn embedding_is_unit_norm_and_order_sensitive() {
        let s = toy(10, AttentionConfig { blocks: 2, ..Default::default() }, 8, 8);
        let y = Tensor::randn(&[8, 8], 1.0, &mut rng(11));
        let z = volume_embed(&s, &y).unwrap();
        assert!((z.l2_norm() - 1.0).abs() < 1e-9);
        let mut perm = y.clone();
        for r in 0..8 {
            let src = (r + 3) % 8;
            perm.data_mut()[r * 8..(r + 1) * 8].copy_from_slice(y.row_slice(src));
        }
        let zp = volume_embed(&s, &perm).unwrap();
        assert!(z.data().iter().zip(zp.data()).any(|(a, b)| (a - b).abs() > 1e-6));
    }

    #[test]
    fn rejects_short_or_mismatched_sequences() {
        let cfg = AttentionConfig { blocks: 4, ..Default::default() };
        assert!(matches!(
            AttentionStack::<f64>::new(cfg, 6, 8, 4, &mut rng(1)),
            Err(Error::SequenceTooShort { len: 6, blocks: 4, required: 8 })
        ));
        let s = toy(1, AttentionConfig { blocks: 2, ..Default::default() }, 8, 8);
        assert!(volume_embed(&s, &Tensor::zeros(&[6, 8])).is_err());
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let s = toy(12, AttentionConfig { blocks: 3, heads: 2, offset_groups: 2, ..Default::default() }, 16, 8);
        let mut g = Graph::new();
        let b = s.bind(&mut g, "a.", false).unwrap();
        let y = g.constant(Tensor::randn(&[16, 8], 1.0, &mut rng(13)));
        let out = s.forward(&mut g, &b, y).unwrap();
        for t in &out.traces {
            for p in &t.probs {
                let a = g.value(*p);
                for r in 0..a.rows() {
                    let row = a.row_slice(r);
                    assert!(row.iter().all(|&v| v >= 0.0));
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                }
            }
        }
    }
}
