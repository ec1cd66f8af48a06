//! Expected monotonic alignment marginalization and hard-path sampling.
//!
//! Three routes compute the same marginal: a literal summation-form oracle
//! (`expected_alignment_recurrent`), a cumsum/cumprod form that participates
//! in the gradient graph (`expected_alignment_parallel`), and an exhaustive
//! enumeration of every read/write decision path (`brute_force_alignment`)
//! for small instances. The summation form is normative; the published
//! single-step recurrence divides by the wrong selection probability and is
//! not used.

use crate::error::{Error, Result};
use crate::numerics::{concat_rows, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Selection probabilities are clamped into this closed interval before use;
/// the parallel form divides by products of their complements.
pub const P_CLAMP: (f64, f64) = (1e-6, 1.0 - 1e-6);

/// Floor for the exclusive-cumprod divisor in the parallel form.
const DIV_FLOOR: f64 = 1e-10;

/// Per-(target, source) read/write probabilities, entries in (0, 1).
#[derive(Debug, Clone)]
pub struct SelectionProbabilities {
    p: Tensor,
}

impl SelectionProbabilities {
    /// Wrap a [T x S] tensor, clamping entries into the open unit interval.
    pub fn new(p: Tensor) -> Result<Self> {
        if p.shape().len() != 2 {
            return Err(Error::Contract(format!(
                "selection probabilities must be a [T x S] matrix, got {:?}",
                p.shape()
            )));
        }
        Ok(SelectionProbabilities {
            p: p.clamp(P_CLAMP.0, P_CLAMP.1),
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() || rows[0].is_empty() {
            return Err(Error::Contract("empty probability matrix".into()));
        }
        let s = rows[0].len();
        if rows.iter().any(|r| r.len() != s) {
            return Err(Error::Contract("ragged probability matrix".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(Tensor::constant(flat, &[rows.len(), s])?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.p
    }

    pub fn target_len(&self) -> usize {
        self.p.shape()[0]
    }

    pub fn source_len(&self) -> usize {
        self.p.shape()[1]
    }

    fn rows(&self) -> Vec<Vec<f64>> {
        let (t, s) = (self.target_len(), self.source_len());
        let vals = self.p.values();
        (0..t).map(|i| vals[i * s..(i + 1) * s].to_vec()).collect()
    }
}

/// Marginal alignment probabilities plus the per-row mass that fell off the
/// end of the source (paths that read past position S).
#[derive(Debug, Clone)]
pub struct ExpectedAlignment {
    /// [T x S], nonnegative.
    pub alpha: Tensor,
    /// [T]; row conservation: sum_j alpha[i,j] + residual[i] = 1.
    pub residual: Tensor,
}

impl ExpectedAlignment {
    pub fn target_len(&self) -> usize {
        self.alpha.shape()[0]
    }

    pub fn source_len(&self) -> usize {
        self.alpha.shape()[1]
    }

    pub fn alpha_at(&self, i: usize, j: usize) -> f64 {
        self.alpha.value_at(i * self.source_len() + j)
    }

    fn from_rows(alpha: Vec<Vec<f64>>) -> Self {
        let t = alpha.len();
        let s = alpha[0].len();
        let residual: Vec<f64> = alpha.iter().map(|r| 1.0 - r.iter().sum::<f64>()).collect();
        let flat: Vec<f64> = alpha.into_iter().flatten().collect();
        ExpectedAlignment {
            alpha: Tensor::constant(flat, &[t, s]).expect("alpha shape"),
            residual: Tensor::constant(residual, &[t]).expect("residual shape"),
        }
    }
}

/// A sampled monotone attention path; positions are 1-based, `1 <= t[i] <= S`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HardAlignmentPath {
    pub t: Vec<usize>,
}

/// Literal summation-form marginalization: for each row,
/// `alpha[i,j] = p[i,j] * sum_k alpha[i-1,k] * prod_{l=k..j-1} (1 - p[i,l])`,
/// with the row-0 input alignment one-hot at source position 1. This is the
/// oracle the parallel form is checked against.
pub fn expected_alignment_recurrent(p: &SelectionProbabilities) -> ExpectedAlignment {
    let rows = p.rows();
    let (t_len, s_len) = (p.target_len(), p.source_len());
    let mut alpha: Vec<Vec<f64>> = Vec::with_capacity(t_len);
    let mut prev: Vec<f64> = {
        let mut one_hot = vec![0.0; s_len];
        one_hot[0] = 1.0;
        one_hot
    };
    for i in 0..t_len {
        let pi = &rows[i];
        let mut row = vec![0.0; s_len];
        for j in 0..s_len {
            let mut acc = 0.0;
            for k in 0..=j {
                let mut prod = 1.0;
                for l in k..j {
                    prod *= 1.0 - pi[l];
                }
                acc += prev[k] * prod;
            }
            row[j] = pi[j] * acc;
        }
        prev = row.clone();
        alpha.push(row);
    }
    ExpectedAlignment::from_rows(alpha)
}

/// Cumulative-sum/cumulative-product form of the same marginal:
/// `alpha_i = p_i * ecp_i * cumsum(alpha_{i-1} / ecp_i)` with `ecp` the
/// exclusive cumprod of `(1 - p_i)` and the divisor floored at 1e-10.
/// Runs on graph kernels, so gradients flow to `p`.
pub fn expected_alignment_parallel(p: &SelectionProbabilities) -> Result<ExpectedAlignment> {
    let (t_len, s_len) = (p.target_len(), p.source_len());
    let mut prev = {
        let mut one_hot = vec![0.0; s_len];
        one_hot[0] = 1.0;
        Tensor::constant(one_hot, &[1, s_len])?
    };
    let mut rows: Vec<Tensor> = Vec::with_capacity(t_len);
    for i in 0..t_len {
        let p_row = p.tensor().slice_rows(i, 1)?;
        let ecp = p_row.scale(-1.0).add_const(1.0).cumprod_rows()?.shift_rows_right(1.0)?;
        let inner = prev.div_clamped(&ecp, DIV_FLOOR)?.cumsum_rows()?;
        let row = p_row.mul(&ecp)?.mul(&inner)?;
        prev = row.clone();
        rows.push(row);
    }
    let alpha = concat_rows(&rows)?;
    let ones = Tensor::constant(vec![1.0; t_len], &[t_len])?;
    let residual = ones.sub(&alpha.sum_rows()?)?;
    Ok(ExpectedAlignment { alpha, residual })
}

/// Exact expectation of the hard monotonic process by enumerating every
/// read/write decision sequence, weighted by its Bernoulli probability.
/// Mass on paths that read past the end of the source is charged to the
/// residual of the current and all later target rows.
pub fn brute_force_alignment(p: &SelectionProbabilities) -> Result<ExpectedAlignment> {
    let (t_len, s_len) = (p.target_len(), p.source_len());
    if t_len * s_len > 16 {
        return Err(Error::Size(format!(
            "brute_force_alignment enumerates all decision paths; T*S = {} exceeds 16",
            t_len * s_len
        )));
    }
    let rows = p.rows();
    let mut alpha = vec![vec![0.0; s_len]; t_len];
    let mut dead = vec![0.0; t_len];
    walk(&rows, 0, 0, 1.0, &mut alpha, &mut dead);
    let mut out = ExpectedAlignment::from_rows(alpha);
    // Replace the derived residual with the enumerated one; they agree up to
    // rounding but the enumeration is the definition here.
    let mut cum = 0.0;
    let residual: Vec<f64> = dead
        .iter()
        .map(|d| {
            cum += d;
            cum
        })
        .collect();
    out.residual = Tensor::constant(residual, &[t_len])?;
    Ok(out)
}

fn walk(
    p: &[Vec<f64>],
    i: usize,
    j: usize,
    prob: f64,
    alpha: &mut [Vec<f64>],
    dead: &mut [f64],
) {
    if i == alpha.len() {
        return;
    }
    if j == p[0].len() {
        // Read past the end: this and every later target row never writes.
        dead[i] += prob;
        return;
    }
    let pij = p[i][j];
    alpha[i][j] += prob * pij;
    walk(p, i + 1, j, prob * pij, alpha, dead);
    walk(p, i, j + 1, prob * (1.0 - pij), alpha, dead);
}

/// Simulate the read/write automaton for one target sequence. At each cell a
/// Bernoulli draw decides write (attend `j`, next row resumes at `j`) or read
/// (advance `j`); reading past the end forces a write at position S.
pub fn sample_hard_alignment(p: &SelectionProbabilities, rng_seed: u64) -> HardAlignmentPath {
    let rows = p.rows();
    let (t_len, s_len) = (p.target_len(), p.source_len());
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut t = Vec::with_capacity(t_len);
    let mut j = 0usize;
    for i in 0..t_len {
        loop {
            if j >= s_len {
                t.push(s_len);
                break;
            }
            if rng.random::<f64>() < rows[i][j] {
                t.push(j + 1);
                break;
            }
            j += 1;
        }
        // Resume from the attended position (0-based).
        j = t[i] - 1;
    }
    debug_assert!(t.windows(2).all(|w| w[1] >= w[0]));
    HardAlignmentPath { t }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{backward, finite_difference_gradient};
    use proptest::prelude::*;

    fn uniform_p(t: usize, s: usize, v: f64) -> SelectionProbabilities {
        SelectionProbabilities::from_rows(&vec![vec![v; s]; t]).unwrap()
    }

    fn random_p(rng: &mut ChaCha8Rng, t: usize, s: usize, lo: f64, hi: f64) -> SelectionProbabilities {
        let rows: Vec<Vec<f64>> = (0..t)
            .map(|_| (0..s).map(|_| lo + rng.random::<f64>() * (hi - lo)).collect())
            .collect();
        SelectionProbabilities::from_rows(&rows).unwrap()
    }

    fn max_cell_diff(a: &ExpectedAlignment, b: &ExpectedAlignment) -> f64 {
        a.alpha
            .values()
            .iter()
            .zip(b.alpha.values().iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn always_write_collapses_to_first_position() {
        let p = uniform_p(3, 4, 1.0 - 1e-9);
        for exp in [
            expected_alignment_recurrent(&p),
            expected_alignment_parallel(&p).unwrap(),
        ] {
            for i in 0..3 {
                assert!((exp.alpha_at(i, 0) - 1.0).abs() < 1e-5);
                for j in 1..4 {
                    assert!(exp.alpha_at(i, j) < 1e-5);
                }
            }
        }
    }

    #[test]
    fn single_row_half_half() {
        let p = SelectionProbabilities::from_rows(&[vec![0.5, 0.5]]).unwrap();
        for exp in [
            expected_alignment_recurrent(&p),
            expected_alignment_parallel(&p).unwrap(),
            brute_force_alignment(&p).unwrap(),
        ] {
            assert!((exp.alpha_at(0, 0) - 0.5).abs() < 1e-12);
            assert!((exp.alpha_at(0, 1) - 0.25).abs() < 1e-12);
            assert!((exp.residual.value_at(0) - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn two_by_two_matches_brute_force() {
        let p = uniform_p(2, 2, 0.5);
        let rec = expected_alignment_recurrent(&p);
        let brute = brute_force_alignment(&p).unwrap();
        assert!(max_cell_diff(&rec, &brute) < 1e-12);
        for i in 0..2 {
            let s: f64 = (0..2).map(|j| brute.alpha_at(i, j)).sum::<f64>()
                + brute.residual.value_at(i);
            assert!((s - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn brute_force_single_certain_cell() {
        let p = SelectionProbabilities::from_rows(&[vec![1.0 - 1e-9]]).unwrap();
        let b = brute_force_alignment(&p).unwrap();
        assert!((b.alpha_at(0, 0) - 1.0).abs() < 1e-5);
    }

    #[test]
    fn brute_force_rejects_large_instances() {
        let p = uniform_p(5, 4, 0.5);
        assert!(matches!(brute_force_alignment(&p), Err(Error::Size(_))));
    }

    #[test]
    fn equivalence_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for case in 0..100 {
            let t = rng.random_range(1..=12);
            let s = rng.random_range(1..=12);
            let p = random_p(&mut rng, t, s, 0.01, 0.99);
            let rec = expected_alignment_recurrent(&p);
            let par = expected_alignment_parallel(&p).unwrap();
            let diff = max_cell_diff(&rec, &par);
            assert!(diff < 1e-8, "case {case}: parallel vs recurrent diff {diff}");
            if t * s <= 12 {
                let brute = brute_force_alignment(&p).unwrap();
                assert!(max_cell_diff(&rec, &brute) < 1e-10);
                assert!(max_cell_diff(&par, &brute) < 1e-10);
            }
        }
    }

    #[test]
    fn sampling_extremes() {
        let eager = uniform_p(4, 5, 1.0 - 1e-9);
        assert_eq!(sample_hard_alignment(&eager, 9).t, vec![1, 1, 1, 1]);
        let patient = uniform_p(4, 5, 1e-9);
        assert_eq!(sample_hard_alignment(&patient, 9).t, vec![5, 5, 5, 5]);
    }

    #[test]
    fn monte_carlo_matches_brute_force() {
        // A lighter version of the acceptance run: 20k seeds, 0.02 per cell.
        let p = uniform_p(2, 3, 0.5);
        let brute = brute_force_alignment(&p).unwrap();
        let n = 20_000usize;
        let mut counts = vec![vec![0usize; 3]; 2];
        for seed in 0..n {
            let path = sample_hard_alignment(&p, seed as u64);
            for (i, t) in path.t.iter().enumerate() {
                counts[i][t - 1] += 1;
            }
        }
        for i in 0..2 {
            for j in 0..3 {
                let expected = brute.alpha_at(i, j)
                    + if j == 2 { brute.residual.value_at(i) } else { 0.0 };
                let emp = counts[i][j] as f64 / n as f64;
                assert!(
                    (emp - expected).abs() < 0.02,
                    "cell ({i},{j}): empirical {emp} vs expected {expected}"
                );
            }
        }
    }

    #[test]
    fn parallel_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (t, s) = (3, 4);
        let vals: Vec<f64> = (0..t * s).map(|_| 0.1 + rng.random::<f64>() * 0.8).collect();
        let p = Tensor::param(vals, &[t, s]).unwrap();
        let loss_of = |pt: &Tensor| -> crate::Result<f64> {
            let sel = SelectionProbabilities::new(pt.clone())?;
            let exp = expected_alignment_parallel(&sel)?;
            // Weighted sum sensitises each cell differently.
            let w = Tensor::constant((0..t * s).map(|i| 0.2 + 0.07 * i as f64).collect(), &[t, s])?;
            Ok(exp.alpha.mul(&w)?.sum_all().item())
        };
        let sel = SelectionProbabilities::new(p.clone()).unwrap();
        let exp = expected_alignment_parallel(&sel).unwrap();
        let w =
            Tensor::constant((0..t * s).map(|i| 0.2 + 0.07 * i as f64).collect(), &[t, s]).unwrap();
        let loss = exp.alpha.mul(&w).unwrap().sum_all();
        backward(&loss).unwrap();
        let fd = finite_difference_gradient(loss_of, &p, 1e-6).unwrap();
        for (a, f) in p.grad().unwrap().iter().zip(fd.values().iter()) {
            let denom = f.abs().max(a.abs()).max(1e-6);
            assert!((a - f).abs() / denom < 1e-4, "analytic {a} vs fd {f}");
        }
    }

    proptest! {
        #[test]
        fn row_conservation(t in 1usize..6, s in 1usize..6, seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_p(&mut rng, t, s, 0.01, 0.99);
            for exp in [expected_alignment_recurrent(&p), expected_alignment_parallel(&p).unwrap()] {
                for i in 0..t {
                    let total: f64 = (0..s).map(|j| exp.alpha_at(i, j)).sum::<f64>()
                        + exp.residual.value_at(i);
                    prop_assert!((total - 1.0).abs() < 1e-9);
                    for j in 0..s {
                        prop_assert!(exp.alpha_at(i, j) >= 0.0);
                    }
                }
            }
        }

        #[test]
        fn sampled_paths_are_monotone(t in 1usize..8, s in 1usize..8, seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_p(&mut rng, t, s, 0.05, 0.95);
            let path = sample_hard_alignment(&p, seed.wrapping_mul(31));
            prop_assert_eq!(path.t.len(), t);
            for w in path.t.windows(2) {
                prop_assert!(w[1] >= w[0]);
            }
            for &ti in &path.t {
                prop_assert!(ti >= 1 && ti <= s);
            }
        }
    }
}
