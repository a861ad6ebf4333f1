//! Shared prototype matrix and equipartitioned code assignment.
//!
//! Codes are the entropic optimal transport plan between a batch of features
//! and the prototypes, with uniform marginals on both sides. They are used as
//! fixed targets by the swapped-prediction losses and never differentiated.

use rand::Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::{permutation_invariant_sum, Scalar};

/// Prototype matrix `C` stored as `[d_z, H]`; each column is one prototype.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototypes<T> {
    weights: Tensor<T>,
}

impl<T: Scalar> Prototypes<T> {
    /// Random unit-norm prototypes.
    pub fn random<R: Rng + ?Sized>(dim: usize, count: usize, rng: &mut R) -> Self {
        let mut p = Self { weights: Tensor::randn(&[dim, count], 1.0, rng) };
        p.normalize_columns();
        p
    }

    /// Wraps a `[d_z, H]` matrix without renormalizing it.
    pub fn from_matrix(weights: Tensor<T>) -> Result<Self> {
        if weights.shape().len() != 2 {
            return Err(Error::Shape(format!("prototypes must be [d_z, H], got {:?}", weights.shape())));
        }
        Ok(Self { weights })
    }

    pub fn dim(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn count(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn matrix(&self) -> &Tensor<T> {
        &self.weights
    }

    pub fn matrix_mut(&mut self) -> &mut Tensor<T> {
        &mut self.weights
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.dim()).map(|r| self.weights.at(r, j)).collect()
    }

    /// Rescales every column to unit Euclidean norm. Zero columns are left
    /// untouched.
    pub fn normalize_columns(&mut self) {
        let (d, h) = (self.dim(), self.count());
        let data = self.weights.data_mut();
        for j in 0..h {
            let norm = (0..d).map(|r| data[r * h + j] * data[r * h + j]).sum::<T>().sqrt();
            if norm > T::zero() {
                for r in 0..d {
                    data[r * h + j] /= norm;
                }
            }
        }
    }

    pub fn bind(&self, g: &mut Graph<T>, name: &str, trainable: bool) -> Result<Var> {
        Ok(g.input(name, self.weights.clone(), trainable)?)
    }
}

/// Score matrix `Cᵀ Z` as `[H, M]` for features given as rows of `[M, d_z]`.
pub fn score<T: Scalar>(prototypes: &Prototypes<T>, features: &Tensor<T>) -> Result<Tensor<T>> {
    let (d, h) = (prototypes.dim(), prototypes.count());
    if features.shape().len() != 2 || features.cols() != d {
        return Err(Error::Shape(format!("features {:?} against prototypes of width {d}", features.shape())));
    }
    let m = features.rows();
    let c = prototypes.matrix();
    let mut out = vec![T::zero(); h * m];
    for i in 0..m {
        let z = features.row_slice(i);
        for j in 0..h {
            let mut acc = T::zero();
            for (r, &zr) in z.iter().enumerate() {
                acc += c.at(r, j) * zr;
            }
            out[j * m + i] = acc;
        }
    }
    Ok(Tensor::from_vec(&[h, m], out))
}

/// Iteration policy for the transport solver.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl SinkhornConfig {
    /// Policy used inside training loops.
    pub const TRAINING: Self = Self { epsilon: 0.05, max_iters: 3, tol: 1e-3 };
    /// Tight policy used to verify marginals.
    pub const EXACT: Self = Self { epsilon: 0.05, max_iters: 1000, tol: 1e-9 };

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self::TRAINING
    }
}

/// Solved assignment `Q` of shape `[H, M]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeMatrix<T> {
    pub q: Tensor<T>,
    pub epsilon: f64,
    pub iterations: usize,
    /// Max absolute deviation of row sums from `1/H` and column sums from `1/M`.
    pub residual: f64,
    pub converged: bool,
    /// L1 row-marginal violation after each iteration.
    pub residual_history: Vec<f64>,
}

impl<T: Scalar> CodeMatrix<T> {
    pub fn prototypes(&self) -> usize {
        self.q.shape()[0]
    }

    pub fn columns(&self) -> usize {
        self.q.shape()[1]
    }

    pub fn row_sums(&self) -> Vec<T> {
        self.q.data().chunks(self.columns()).map(|r| r.iter().copied().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<T> {
        let (h, m) = (self.prototypes(), self.columns());
        (0..m).map(|i| (0..h).map(|k| self.q.at(k, i)).sum()).collect()
    }

    /// Per-feature code distributions `[M, H]`: each column of `Q`
    /// renormalized to sum to one.
    pub fn distributions(&self) -> Result<Tensor<T>> {
        code_distributions(&self.q)
    }
}

/// Transposes `[H, M]` codes into `[M, H]` rows that each sum to one.
pub fn code_distributions<T: Scalar>(q: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, m) = (q.shape()[0], q.shape()[1]);
    let mut out = vec![T::zero(); m * h];
    for i in 0..m {
        let total: T = (0..h).map(|k| q.at(k, i)).sum();
        if total <= T::zero() {
            return Err(Error::EmptyCode);
        }
        for k in 0..h {
            out[i * h + k] = q.at(k, i) / total;
        }
    }
    Ok(Tensor::from_vec(&[m, h], out))
}

/// Entropic transport codes for `[H, M]` scores by alternating row and column
/// rescaling of `exp(S / ε)`.
///
/// Row sums are accumulated in sorted order, so permuting the score columns
/// permutes the result bit-exactly.
pub fn sinkhorn_codes<T: Scalar>(scores: &Tensor<T>, config: &SinkhornConfig) -> Result<CodeMatrix<T>> {
    if !(config.epsilon > 0.0) {
        return Err(Error::NonPositiveEpsilon(config.epsilon));
    }
    if scores.shape().len() != 2 {
        return Err(Error::Shape(format!("scores must be [H, M], got {:?}", scores.shape())));
    }
    if !scores.all_finite() {
        return Err(Error::NonFiniteScores);
    }
    let (h, m) = (scores.shape()[0], scores.shape()[1]);
    let eps = T::of(config.epsilon);
    let row_target = T::one() / T::of_usize(h);
    let col_target = T::one() / T::of_usize(m);

    // Per-column max subtraction; column rescaling absorbs the shift.
    let mut q = scores.clone();
    for i in 0..m {
        let max = (0..h).map(|k| scores.at(k, i)).fold(T::neg_infinity(), T::max);
        for k in 0..h {
            q.data_mut()[k * m + i] = ((scores.at(k, i) - max) / eps).exp();
        }
    }
    if !q.all_finite() {
        return Err(Error::NonFiniteScores);
    }

    let mut scratch = vec![T::zero(); m];
    let mut history = Vec::new();
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < config.max_iters {
        iterations += 1;
        let data = q.data_mut();
        for (k, row) in data.chunks_mut(m).enumerate() {
            scratch.copy_from_slice(row);
            let total = permutation_invariant_sum(&mut scratch);
            if !(total > T::zero()) || !total.is_finite() {
                return Err(Error::KernelUnderflow { row: k, epsilon: config.epsilon });
            }
            let f = row_target / total;
            row.iter_mut().for_each(|v| *v *= f);
        }
        for i in 0..m {
            let total: T = (0..h).map(|k| data[k * m + i]).sum();
            let f = col_target / total;
            for k in 0..h {
                data[k * m + i] *= f;
            }
        }
        let (row_dev, l1, col_dev) = marginal_deviation(&q, &mut scratch);
        history.push(l1);
        residual = row_dev.max(col_dev);
        if residual < config.tol {
            break;
        }
    }
    if config.max_iters == 0 {
        residual = marginal_deviation(&q, &mut scratch).0;
    }
    Ok(CodeMatrix {
        q,
        epsilon: config.epsilon,
        iterations,
        residual,
        converged: residual < config.tol,
        residual_history: history,
    })
}

/// (max row deviation, L1 row deviation, max column deviation).
fn marginal_deviation<T: Scalar>(q: &Tensor<T>, scratch: &mut [T]) -> (f64, f64, f64) {
    let (h, m) = (q.shape()[0], q.shape()[1]);
    let row_target = 1.0 / h as f64;
    let col_target = 1.0 / m as f64;
    let mut max_row = 0.0f64;
    let mut l1 = 0.0f64;
    for row in q.data().chunks(m) {
        scratch.copy_from_slice(row);
        let dev = (permutation_invariant_sum(scratch).as_f64() - row_target).abs();
        max_row = max_row.max(dev);
        l1 += dev;
    }
    let mut max_col = 0.0f64;
    for i in 0..m {
        let s: T = (0..h).map(|k| q.at(k, i)).sum();
        max_col = max_col.max((s.as_f64() - col_target).abs());
    }
    (max_row, l1, max_col)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Straight transcription of the rescaling loop, kept independent of the
    /// production path (no stabilization, plain sums).
    fn reference_sinkhorn(s: &[Vec<f64>], eps: f64, iters: usize) -> Vec<Vec<f64>> {
        let h = s.len();
        let m = s[0].len();
        let mut q: Vec<Vec<f64>> = s.iter().map(|r| r.iter().map(|v| (v / eps).exp()).collect()).collect();
        for _ in 0..iters {
            for row in q.iter_mut() {
                let t: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= t * h as f64);
            }
            for i in 0..m {
                let t: f64 = q.iter().map(|r| r[i]).sum();
                q.iter_mut().for_each(|r| r[i] /= t * m as f64);
            }
        }
        q
    }

    fn random_scores(h: usize, m: usize, r: &mut ChaCha8Rng) -> Tensor<f64> {
        let protos = Prototypes::<f64>::random(8, h, r);
        let mut z = Tensor::<f64>::randn(&[m, 8], 1.0, r);
        for row in z.data_mut().chunks_mut(8) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= n);
        }
        score(&protos, &z).unwrap()
    }

    #[test]
    fn orthonormal_prototypes_select_matching_row() {
        let c =
            Prototypes::from_matrix(Tensor::matrix(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]))
                .unwrap();
        let z = Tensor::row(&[1.0, 0.0, 0.0]);
        assert_eq!(score(&c, &z).unwrap().data(), &[1.0, 0.0, 0.0]);
        let c2 = Prototypes::from_matrix(Tensor::matrix(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]])).unwrap();
        let orth = Tensor::row(&[0.0, 0.0, 1.0]);
        assert_eq!(score(&c2, &orth).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn score_matches_naive_double_loop() {
        let mut r = rng(3);
        let c = Prototypes::<f64>::random(2, 3, &mut r);
        let z = Tensor::<f64>::randn(&[2, 2], 1.0, &mut r);
        let s = score(&c, &z).unwrap();
        for j in 0..3 {
            for i in 0..2 {
                let naive: f64 = (0..2).map(|d| c.matrix().at(d, j) * z.at(i, d)).sum();
                assert!((s.at(j, i) - naive).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn score_rejects_width_mismatch() {
        let c = Prototypes::<f64>::random(4, 3, &mut rng(1));
        assert!(score(&c, &Tensor::zeros(&[2, 5])).is_err());
    }

    #[test]
    fn equal_scores_give_uniform_codes() {
        let s = Tensor::filled(&[2, 2], 0.3);
        let q = sinkhorn_codes(&s, &SinkhornConfig::EXACT).unwrap();
        assert_eq!(q.q.data(), &[0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn single_prototype_spreads_over_columns() {
        let s = Tensor::<f64>::matrix(&[vec![0.1, -0.4, 0.9, 0.2]]);
        let q = sinkhorn_codes(&s, &SinkhornConfig::EXACT).unwrap();
        for v in q.q.data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn diagonal_scores_concentrate_on_diagonal() {
        let s = Tensor::<f64>::matrix(&[vec![10.0, 0.0], vec![0.0, 10.0]]);
        let q = sinkhorn_codes(&s, &SinkhornConfig::EXACT).unwrap();
        let oracle = reference_sinkhorn(&[vec![10.0 - 10.0, 0.0 - 10.0], vec![-10.0, 0.0]], 0.05, 1000);
        let expected = [[0.5, 0.0], [0.0, 0.5]];
        for k in 0..2 {
            for i in 0..2 {
                assert!((q.q.at(k, i) - expected[k][i]).abs() < 1e-6);
                assert!((q.q.at(k, i) - oracle[k][i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_unstabilized_reference() {
        let mut r = rng(11);
        let s = random_scores(5, 7, &mut r);
        let rows: Vec<Vec<f64>> = (0..5).map(|k| s.row_slice(k).to_vec()).collect();
        let cfg = SinkhornConfig { epsilon: 0.5, max_iters: 50, tol: 0.0 };
        let q = sinkhorn_codes(&s, &cfg).unwrap();
        let oracle = reference_sinkhorn(&rows, 0.5, 50);
        #[allow(clippy::needless_range_loop)]
        for k in 0..5 {
            for i in 0..7 {
                assert!((q.q.at(k, i) - oracle[k][i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_epsilon_and_scores() {
        let s = Tensor::filled(&[2, 2], 0.0);
        assert!(matches!(
            sinkhorn_codes(&s, &SinkhornConfig::EXACT.with_epsilon(0.0)),
            Err(Error::NonPositiveEpsilon(_))
        ));
        assert!(sinkhorn_codes(&s, &SinkhornConfig::EXACT.with_epsilon(-1.0)).is_err());
        let bad = Tensor::from_vec(&[1, 2], vec![f64::INFINITY, 0.0]);
        assert_eq!(sinkhorn_codes(&bad, &SinkhornConfig::EXACT), Err(Error::NonFiniteScores));
    }

    #[test]
    fn underflow_suggests_larger_epsilon() {
        // Prototype 1 sits far below prototype 0 for every column.
        let s = Tensor::matrix(&[vec![1.0, 1.0], vec![-1.0, -1.0]]);
        let err = sinkhorn_codes(&s, &SinkhornConfig::EXACT.with_epsilon(1e-4)).unwrap_err();
        assert!(matches!(err, Error::KernelUnderflow { row: 1, .. }));
        assert!(err.to_string().contains("larger epsilon"));
    }

    #[test]
    fn residual_is_non_increasing() {
        let mut r = rng(21);
        for _ in 0..20 {
            let s = random_scores(6, 10, &mut r);
            let q = sinkhorn_codes(&s, &SinkhornConfig { epsilon: 0.05, max_iters: 200, tol: 0.0 }).unwrap();
            for w in q.residual_history.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-9) + 1e-15, "{:?}", q.residual_history);
            }
        }
    }

    #[test]
    fn column_permutation_is_equivariant() {
        let mut r = rng(5);
        let s = random_scores(4, 6, &mut r);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let mut permuted = s.clone();
        for k in 0..4 {
            for (dst, &src) in perm.iter().enumerate() {
                permuted.data_mut()[k * 6 + dst] = s.at(k, src);
            }
        }
        let a = sinkhorn_codes(&s, &SinkhornConfig::EXACT).unwrap();
        let b = sinkhorn_codes(&permuted, &SinkhornConfig::EXACT).unwrap();
        for k in 0..4 {
            for (dst, &src) in perm.iter().enumerate() {
                assert_eq!(b.q.at(k, dst).to_bits(), a.q.at(k, src).to_bits());
            }
        }
    }

    #[test]
    fn large_epsilon_approaches_uniform() {
        let mut r = rng(8);
        let s = random_scores(5, 9, &mut r);
        let uniform = 1.0 / 45.0;
        let dev: Vec<f64> = [0.05, 1.0, 100.0]
            .iter()
            .map(|&eps| {
                let q = sinkhorn_codes(&s, &SinkhornConfig::EXACT.with_epsilon(eps)).unwrap();
                q.q.data().iter().map(|v| (v - uniform).abs()).fold(0.0, f64::max)
            })
            .collect();
        assert!(dev[0] > dev[1] && dev[1] > dev[2], "{dev:?}");
        assert!(dev[2] < 1e-3);
    }

    #[test]
    fn distributions_renormalize_columns() {
        let s = Tensor::matrix(&[vec![1.0, 0.0, 0.2], vec![0.0, 1.0, 0.1]]);
        let q = sinkhorn_codes(&s, &SinkhornConfig::EXACT.with_epsilon(0.5)).unwrap();
        let d = q.distributions().unwrap();
        assert_eq!(d.shape(), &[3, 2]);
        for i in 0..3 {
            assert!((d.row_slice(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn column_normalization_yields_unit_prototypes() {
        let mut p = Prototypes::from_matrix(Tensor::matrix(&[vec![2.0, 0.0], vec![0.0, 3.0]])).unwrap();
        p.normalize_columns();
        assert_eq!(p.matrix().data(), &[1.0, 0.0, 0.0, 1.0]);
    }
}
