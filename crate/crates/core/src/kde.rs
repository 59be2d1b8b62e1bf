//! Gaussian kernels, bandwidth selection and the KDE score
//! `ξ(x) = ∇ log Σₙ k(x, xₙ)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::linalg::sq_dist;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum BandwidthRule {
    /// Median of pairwise squared distances.
    Median,
    /// A user-supplied value.
    Fixed { h: f64 },
}

/// Kernel width `h` in `k(w, w') = exp(−‖w − w'‖² / 2h)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bandwidth {
    pub h: f64,
    pub rule: BandwidthRule,
    pub scale: f64,
}

impl Bandwidth {
    pub fn fixed(h: f64) -> Result<Self> {
        if !(h > 0.0) || !h.is_finite() {
            return Err(Error::Config(format!("bandwidth must be positive and finite, got {h}")));
        }
        Ok(Self { h, rule: BandwidthRule::Fixed { h }, scale: 1.0 })
    }

    /// Evaluate `rule` on the rows of `points` and multiply by `scale`.
    pub fn select(rule: BandwidthRule, scale: f64, points: &DMatrix<f64>) -> Result<Self> {
        if !(scale > 0.0) {
            return Err(Error::Config(format!("bandwidth scale must be positive, got {scale}")));
        }
        let base = match rule {
            BandwidthRule::Median => median_sq_distance(points)?,
            BandwidthRule::Fixed { h } => h,
        };
        let h = scale * base;
        if !(h > 0.0) || !h.is_finite() {
            return Err(Error::DegenerateEnsemble(format!("bandwidth evaluated to {h}")));
        }
        Ok(Self { h, rule, scale })
    }
}

pub fn gaussian_kernel(w: &[f64], w2: &[f64], bw: &Bandwidth) -> f64 {
    (-sq_dist(w, w2) / (2.0 * bw.h)).exp()
}

fn median_sq_distance(points: &DMatrix<f64>) -> Result<f64> {
    let n = points.nrows();
    if n < 2 {
        return Err(Error::DegenerateEnsemble("median bandwidth needs at least two particles".into()));
    }
    let rows: Vec<Vec<f64>> = (0..n).map(|i| points.row(i).iter().copied().collect()).collect();
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            dists.push(sq_dist(&rows[i], &rows[j]));
        }
    }
    dists.sort_by(f64::total_cmp);
    let m = dists.len();
    let median = if m % 2 == 1 { dists[m / 2] } else { 0.5 * (dists[m / 2 - 1] + dists[m / 2]) };
    if !(median > 0.0) {
        return Err(Error::DegenerateEnsemble(format!(
            "median squared distance is {median}; particles coincide"
        )));
    }
    Ok(median)
}

/// Median-of-squared-distances bandwidth with unit scale.
pub fn median_bandwidth(points: &DMatrix<f64>) -> Result<Bandwidth> {
    Bandwidth::select(BandwidthRule::Median, 1.0, points)
}

/// Log-weights below this underflow `exp` to zero.
const LOG_UNDERFLOW: f64 = -745.0;

/// `∇ log Σₙ k(x, xₙ)` over the rows of `particles`.
///
/// Computed with a max-shift so that far-field queries stay finite. If every
/// raw kernel value underflows, the score of the nearest particle alone is
/// returned, which is the limit of the exact expression.
pub fn kde_score(x: &[f64], particles: &DMatrix<f64>, bw: &Bandwidth) -> DVector<f64> {
    let n = particles.nrows();
    let r = x.len();
    let mut log_w = Vec::with_capacity(n);
    for i in 0..n {
        let d2: f64 = (0..r).map(|c| (x[c] - particles[(i, c)]).powi(2)).sum();
        log_w.push(-d2 / (2.0 * bw.h));
    }
    let (nearest, &max) = log_w
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("kde_score needs at least one particle");
    if max < LOG_UNDERFLOW {
        log::warn!("all kernel values underflow; using nearest-particle score");
        return DVector::from_fn(r, |c, _| -(x[c] - particles[(nearest, c)]) / bw.h);
    }
    let mut total = 0.0;
    let mut acc = vec![0.0; r];
    for (i, lw) in log_w.iter().enumerate() {
        let w = (lw - max).exp();
        total += w;
        for (c, a) in acc.iter_mut().enumerate() {
            *a += w * (x[c] - particles[(i, c)]);
        }
    }
    DVector::from_fn(r, |c, _| -acc[c] / (total * bw.h))
}

/// `log Σₙ k(x, xₙ)`, the unnormalized log-KDE.
pub fn log_kde(x: &[f64], particles: &DMatrix<f64>, bw: &Bandwidth) -> f64 {
    let n = particles.nrows();
    let log_w: Vec<f64> = (0..n)
        .map(|i| {
            let d2: f64 = x.iter().enumerate().map(|(c, v)| (v - particles[(i, c)]).powi(2)).sum();
            -d2 / (2.0 * bw.h)
        })
        .collect();
    let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + log_w.iter().map(|lw| (lw - max).exp()).sum::<f64>().ln()
}

/// Contiguous coordinate blocks whose indicator projectors sum to `I_r`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPartition {
    pub blocks: Vec<std::ops::Range<usize>>,
    pub block_size: usize,
}

impl BatchPartition {
    pub fn dim(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.end)
    }

    /// Diagonal 0/1 projector of block `j`.
    pub fn projector(&self, j: usize) -> DMatrix<f64> {
        let r = self.dim();
        let block = &self.blocks[j];
        DMatrix::from_fn(r, r, |a, b| if a == b && block.contains(&a) { 1.0 } else { 0.0 })
    }
}

/// Split `0..r` into `⌈r/b⌉` contiguous blocks of size `b` (last may be shorter).
pub fn make_partition(r: usize, block_size: usize) -> Result<BatchPartition> {
    if block_size < 1 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    if r < 1 {
        return Err(Error::Config("cannot partition an empty coordinate set".into()));
    }
    let b = block_size.min(r);
    let blocks = (0..r).step_by(b).map(|s| s..(s + b).min(r)).collect();
    Ok(BatchPartition { blocks, block_size: b })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_points(n: usize, r: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = stream_rng(seed, 0, 0);
        DMatrix::from_fn(n, r, |_, _| rng.random_range(-1.5..1.5))
    }

    #[test]
    fn kernel_values() {
        let bw = Bandwidth::fixed(2.0).unwrap();
        assert_eq!(gaussian_kernel(&[0.3, 1.0], &[0.3, 1.0], &bw), 1.0);
        assert!((gaussian_kernel(&[0.0], &[2.0], &bw) - 0.367_879_441_171_442_3).abs() < 1e-15);
        let a = [0.1, -0.4, 2.0];
        let b = [1.3, 0.2, -0.5];
        assert_eq!(gaussian_kernel(&a, &b, &bw), gaussian_kernel(&b, &a, &bw));
    }

    #[test]
    fn median_of_three_points() {
        let p = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 3.0]);
        assert_eq!(median_bandwidth(&p).unwrap().h, 4.0);
        let shifted = p.map(|v| v + 7.5);
        assert_eq!(median_bandwidth(&shifted).unwrap().h, 4.0);
        let scaled = p.map(|v| v * 3.0);
        assert!((median_bandwidth(&scaled).unwrap().h - 36.0).abs() < 1e-12);
    }

    #[test]
    fn identical_particles_are_degenerate() {
        let p = DMatrix::from_element(4, 2, 1.0);
        assert!(matches!(median_bandwidth(&p), Err(Error::DegenerateEnsemble(_))));
        assert!(matches!(median_bandwidth(&DMatrix::zeros(1, 2)), Err(Error::DegenerateEnsemble(_))));
    }

    #[test]
    fn single_particle_score_is_gaussian_score() {
        let p = DMatrix::from_element(1, 1, 0.0);
        let s = kde_score(&[2.0], &p, &Bandwidth::fixed(1.0).unwrap());
        assert_eq!(s[0], -2.0);
    }

    #[test]
    fn symmetric_pair_gives_zero_at_midpoint() {
        let p = DMatrix::from_row_slice(2, 2, &[-0.7, 1.1, 0.7, -1.1]);
        let s = kde_score(&[0.0, 0.0], &p, &Bandwidth::fixed(0.8).unwrap());
        assert!(s.amax() < 1e-15);
    }

    #[test]
    fn far_field_falls_back_to_nearest_particle() {
        let p = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let bw = Bandwidth::fixed(1e-3).unwrap();
        let s = kde_score(&[100.0], &p, &bw);
        assert_eq!(s[0], -(100.0 - 1.0) / 1e-3);
    }

    fn fd_check(x: &[f64], p: &DMatrix<f64>, bw: &Bandwidth) -> f64 {
        let s = kde_score(x, p, bw);
        let mut worst: f64 = 0.0;
        for c in 0..x.len() {
            let h = 1e-5 * (1.0 + x[c].abs());
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[c] += h;
            xm[c] -= h;
            let fd = (log_kde(&xp, p, bw) - log_kde(&xm, p, bw)) / (2.0 * h);
            worst = worst.max((fd - s[c]).abs() / s.amax().max(1.0));
        }
        worst
    }

    #[test]
    fn score_matches_finite_differences() {
        let p = random_points(3, 2, 4);
        let bw = median_bandwidth(&p).unwrap();
        assert!(fd_check(&[0.2, -0.3], &p, &bw) < 1e-6);
        for r in [1, 2, 5, 8] {
            let p = random_points(12, r, r as u64);
            let bw = median_bandwidth(&p).unwrap();
            let x: Vec<f64> = p.row(3).iter().map(|v| v + 0.1).collect();
            assert!(fd_check(&x, &p, &bw) < 1e-6, "r={r}");
        }
    }

    #[test]
    fn partitions() {
        let p = make_partition(8, 5).unwrap();
        assert_eq!(p.blocks, vec![0..5, 5..8]);
        assert_eq!(make_partition(4, 4).unwrap().blocks, vec![0..4]);
        let p = make_partition(6, 2).unwrap();
        assert_eq!(p.blocks.len(), 3);
        let sum = (0..3).fold(DMatrix::zeros(6, 6), |acc, j| acc + p.projector(j));
        assert_eq!(sum, DMatrix::identity(6, 6));
        assert!(make_partition(4, 0).is_err());
    }

    proptest! {
        #[test]
        fn score_is_translation_equivariant(seed in 0u64..500, shift in -50.0f64..50.0, r in 1usize..6) {
            let p = random_points(7, r, seed);
            let bw = median_bandwidth(&p).unwrap();
            let x: Vec<f64> = (0..r).map(|c| 0.3 * c as f64 - 0.2).collect();
            let s = kde_score(&x, &p, &bw);
            let ps = p.map(|v| v + shift);
            let xs: Vec<f64> = x.iter().map(|v| v + shift).collect();
            let s2 = kde_score(&xs, &ps, &bw);
            prop_assert!((s - s2).amax() <= 1e-12 * (1.0 + shift.abs()));
        }

        #[test]
        fn score_is_bounded_by_farthest_particle(seed in 0u64..500, r in 1usize..6) {
            let p = random_points(9, r, seed);
            let bw = median_bandwidth(&p).unwrap();
            let x: Vec<f64> = (0..r).map(|c| 0.5 - 0.1 * c as f64).collect();
            let s = kde_score(&x, &p, &bw);
            let far = (0..9).map(|i| sq_dist(&x, &p.row(i).iter().copied().collect::<Vec<_>>()).sqrt()).fold(0.0, f64::max);
            prop_assert!(s.norm() <= far / bw.h * (1.0 + 1e-12));
        }

        #[test]
        fn blocks_cover_exactly(r in 1usize..40, b in 1usize..40) {
            let p = make_partition(r, b).unwrap();
            let mut seen = vec![0u8; r];
            for blk in &p.blocks {
                for i in blk.clone() { seen[i] += 1; }
            }
            prop_assert!(seen.iter().all(|&c| c == 1));
            prop_assert_eq!(p.blocks.len(), r.div_ceil(b.min(r)));
        }
    }
}
