//! The trainable codebook and everything that maintains or scores it:
//! weighted distance / cosine scores against latent vectors, usage
//! statistics, the EMA update, and the usage-based reset heuristic.

use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};
use crate::{Error, Result};

/// K learnable d_b-dimensional code vectors, row-major.
#[derive(Debug, Clone)]
pub struct Codebook {
    pub entries: Vec<f64>,
    pub k: usize,
    pub d_b: usize,
    /// Rows are kept at unit Euclidean norm (spherical latent space).
    pub unit_norm: bool,
}

impl Codebook {
    /// i.i.d. Normal(0, 1/d_b) entries, renormalized when `unit_norm`,
    /// keeping initial score magnitudes O(1).
    pub fn init(k: usize, d_b: usize, unit_norm: bool, rng: &mut Rng) -> Result<Self> {
        if k < 2 || d_b < 1 {
            return Err(Error::Contract(format!(
                "codebook needs k >= 2 and d_b >= 1, got k={k} d_b={d_b}"
            )));
        }
        let sd = (1.0 / d_b as f64).sqrt();
        let entries: Vec<f64> = (0..k * d_b).map(|_| sd * rng.normal()).collect();
        let mut cb = Codebook { entries, k, d_b, unit_norm };
        if unit_norm {
            cb.renormalize_rows();
        }
        Ok(cb)
    }

    pub fn from_entries(entries: Vec<f64>, k: usize, d_b: usize, unit_norm: bool) -> Self {
        assert_eq!(entries.len(), k * d_b);
        Codebook { entries, k, d_b, unit_norm }
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.entries[k * self.d_b..(k + 1) * self.d_b]
    }

    /// Scale every row to unit norm; call after each optimizer step in
    /// spherical mode.
    pub fn renormalize_rows(&mut self) {
        renormalize_rows(&mut self.entries, self.d_b);
    }

    /// Index of the nearest code under Euclidean distance; ties go to the
    /// lowest index.
    pub fn nearest(&self, z: &[f64]) -> usize {
        debug_assert_eq!(z.len(), self.d_b);
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for k in 0..self.k {
            let d: f64 = self
                .row(k)
                .iter()
                .zip(z)
                .map(|(b, z)| (b - z) * (b - z))
                .sum();
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }
}

pub fn renormalize_rows(entries: &mut [f64], d_b: usize) {
    for row in entries.chunks_mut(d_b) {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for x in row {
                *x /= norm;
            }
        }
    }
}

// ── differentiable scores ──────────────────────────────────────────────

/// Unnormalized log-probabilities `-(1/2) sum_j w_ij (b_kj - z_ij)^2` for
/// every latent row i and code k.
///
/// `inv_weights` is the n×d_b inverse-variance matrix; all variance
/// parameterizations reduce to it by broadcasting, which also makes their
/// nesting bit-exact (equal weights give bitwise-equal scores regardless of
/// which parameterization produced them).
pub fn gaussian_scores(
    tape: &mut Tape,
    z: Tensor,
    codes: Tensor,
    inv_weights: Tensor,
) -> Result<Tensor> {
    let (n, d_b) = match tape.shape(z) {
        [n, d] => (*n, *d),
        s => {
            return Err(Error::Shape { op: "gaussian_scores", detail: format!("latents {s:?}") })
        }
    };
    if tape.shape(inv_weights) != [n, d_b] {
        return Err(Error::Shape {
            op: "gaussian_scores",
            detail: format!("weights {:?} for latents [{n}, {d_b}]", tape.shape(inv_weights)),
        });
    }
    if tape.value(inv_weights).iter().any(|&w| w <= 0.0) {
        return Err(Error::Contract("nonpositive variance in gaussian_scores".into()));
    }
    let k = tape.shape(codes)[0];
    let bt = tape.transpose(codes)?;
    let b_sq = tape.mul(codes, codes)?;
    let b_sq_t = tape.transpose(b_sq)?;

    let zw = tape.mul(z, inv_weights)?;
    let z_sq = tape.mul(z, z)?;
    let z_sq_w = tape.mul(z_sq, inv_weights)?;

    let cross = tape.matmul(zw, bt)?; // n×K: sum_j w z b
    let code_term = tape.matmul(inv_weights, b_sq_t)?; // n×K: sum_j w b^2
    let z_term_col = tape.row_sum(z_sq_w)?; // n×1
    let z_term = tape.broadcast_col(z_term_col, k)?;

    let minus_two_cross = tape.scale(cross, -2.0)?;
    let d2 = tape.add(z_term, minus_two_cross)?;
    let d2 = tape.add(d2, code_term)?;
    tape.scale(d2, -0.5)
}

/// Scores `kappa * b_k . z_i`: concentration-scaled cosine similarity.
/// Both the latent rows and the code rows must be unit vectors.
pub fn vmf_scores(tape: &mut Tape, z: Tensor, codes: Tensor, kappa: Tensor) -> Result<Tensor> {
    for (name, t) in [("latents", z), ("codes", codes)] {
        let d = tape.shape(t)[1];
        for row in tape.value(t).chunks(d) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-8 {
                return Err(Error::Contract(format!(
                    "vmf_scores {name} row has norm {norm}, expected 1"
                )));
            }
        }
    }
    if tape.item(kappa) < 0.0 {
        return Err(Error::Contract("negative concentration in vmf_scores".into()));
    }
    let bt = tape.transpose(codes)?;
    let cos = tape.matmul(z, bt)?;
    tape.scale_by(cos, kappa)
}

// ── usage accounting ───────────────────────────────────────────────────

/// Per-code EMA accumulators and the reset window.
#[derive(Debug, Clone)]
pub struct UsageStats {
    /// Hard-assignment counts accumulated over the current reset window.
    pub window_counts: Vec<u64>,
    /// Batches accumulated into `window_counts` so far.
    pub window_batches: usize,
    pub ema_cluster_size: Vec<f64>,
    /// K×d_b running sums of assigned latents.
    pub ema_cluster_sum: Vec<f64>,
}

impl UsageStats {
    pub fn new(k: usize, d_b: usize) -> Self {
        UsageStats {
            window_counts: vec![0; k],
            window_batches: 0,
            ema_cluster_size: vec![0.0; k],
            ema_cluster_sum: vec![0.0; k * d_b],
        }
    }
}

/// Count hard assignments into a length-K histogram.
pub fn usage_histogram(indices: &[usize], k: usize) -> Result<Vec<u64>> {
    let mut counts = vec![0u64; k];
    for &i in indices {
        if i >= k {
            return Err(Error::Contract(format!("code index {i} out of range for K={k}")));
        }
        counts[i] += 1;
    }
    Ok(counts)
}

/// Exponential of the Shannon entropy of the empirical usage distribution.
/// Ranges from 1 (one code carries everything) to K (uniform utilization).
pub fn perplexity(counts: &[u64]) -> Result<f64> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::Contract("perplexity of an all-zero histogram".into()));
    }
    let total = total as f64;
    let mut entropy = 0.0;
    for &c in counts {
        if c > 0 {
            let p = c as f64 / total;
            entropy -= p * p.ln();
        }
    }
    Ok(entropy.exp())
}

/// Floor on the EMA cluster size when dividing; keeps unused codes from
/// collapsing the quotient.
pub const EMA_SIZE_EPS: f64 = 1e-5;

/// EMA codebook update:
///   size_k <- gamma size_k + (1-gamma) n_k
///   sum_k  <- gamma sum_k  + (1-gamma) sum of latents assigned to k
///   entry_k <- sum_k / max(size_k, eps)
pub fn ema_update(
    entries: &mut [f64],
    stats: &mut UsageStats,
    latents: &[f64],
    assignments: &[usize],
    gamma: f64,
    d_b: usize,
) -> Result<()> {
    if !(0.0 < gamma && gamma < 1.0) {
        return Err(Error::Contract(format!("EMA decay gamma={gamma} outside (0, 1)")));
    }
    let k = stats.ema_cluster_size.len();
    debug_assert_eq!(entries.len(), k * d_b);
    let counts = usage_histogram(assignments, k)?;

    let mut batch_sum = vec![0.0; k * d_b];
    for (row, &a) in assignments.iter().enumerate() {
        let z = &latents[row * d_b..(row + 1) * d_b];
        let dst = &mut batch_sum[a * d_b..(a + 1) * d_b];
        for (d, &v) in dst.iter_mut().zip(z) {
            *d += v;
        }
    }
    for code in 0..k {
        stats.ema_cluster_size[code] =
            gamma * stats.ema_cluster_size[code] + (1.0 - gamma) * counts[code] as f64;
        let sum = &mut stats.ema_cluster_sum[code * d_b..(code + 1) * d_b];
        let batch = &batch_sum[code * d_b..(code + 1) * d_b];
        for (s, &b) in sum.iter_mut().zip(batch) {
            *s = gamma * *s + (1.0 - gamma) * b;
        }
        let denom = stats.ema_cluster_size[code].max(EMA_SIZE_EPS);
        let entry = &mut entries[code * d_b..(code + 1) * d_b];
        for (e, s) in entry.iter_mut().zip(sum.iter()) {
            *e = *s / denom;
        }
    }
    Ok(())
}

/// Reset noise variance around the most-used code.
pub const RESET_NOISE_VAR: f64 = 0.01;
/// A code is reset when its window usage falls below this fraction of the
/// most-used code's.
pub const RESET_THRESHOLD: f64 = 0.03;

/// If the least-used code saw under `RESET_THRESHOLD` of the most-used
/// code's traffic over the window, move it next to the most-used code.
/// Returns the reset code index, if any. Ties pick the lowest index.
pub fn codebook_reset(
    entries: &mut [f64],
    window_counts: &[u64],
    d_b: usize,
    rng: &mut Rng,
) -> Option<usize> {
    let most = window_counts
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))?
        .0;
    let least = window_counts
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.cmp(b.1).then(a.0.cmp(&b.0)))?
        .0;
    if (window_counts[least] as f64) < RESET_THRESHOLD * window_counts[most] as f64 {
        let sd = RESET_NOISE_VAR.sqrt();
        let src: Vec<f64> = entries[most * d_b..(most + 1) * d_b].to_vec();
        let dst = &mut entries[least * d_b..(least + 1) * d_b];
        for (d, s) in dst.iter_mut().zip(src) {
            *d = s + sd * rng.normal();
        }
        Some(least)
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Rng, Stream};
    use proptest::prelude::*;

    fn scores_with_scalar_weight(
        z: &[f64],
        zs: &[usize; 2],
        b: &[f64],
        k: usize,
        w: f64,
    ) -> Vec<f64> {
        let mut tape = Tape::new();
        let zt = tape.constant(z.to_vec(), vec![zs[0], zs[1]]);
        let bt = tape.constant(b.to_vec(), vec![k, zs[1]]);
        let wt = tape.constant(vec![w; zs[0] * zs[1]], vec![zs[0], zs[1]]);
        let s = gaussian_scores(&mut tape, zt, bt, wt).unwrap();
        tape.value(s).to_vec()
    }

    #[test]
    fn gaussian_scores_match_hand_computed_mahalanobis() {
        // sigma^2 = 0.5 -> w = 2; squared distances 1, 1, 4.
        let s = scores_with_scalar_weight(
            &[0.0, 0.0],
            &[1, 2],
            &[1.0, 0.0, -1.0, 0.0, 0.0, 2.0],
            3,
            2.0,
        );
        assert!((s[0] + 1.0).abs() < 1e-12);
        assert!((s[1] + 1.0).abs() < 1e-12);
        assert!((s[2] + 4.0).abs() < 1e-12);
    }

    #[test]
    fn equidistant_latent_scores_equal() {
        let s = scores_with_scalar_weight(&[0.0, 0.0], &[1, 2], &[1.0, 0.0, -1.0, 0.0], 2, 1.0);
        assert_eq!(s[0], s[1]);
    }

    #[test]
    fn vmf_scores_orthonormal_and_antipodal() {
        let mut tape = Tape::new();
        let z = tape.constant(vec![1.0, 0.0], vec![1, 2]);
        let b = tape.constant(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]);
        let kappa = tape.constant(vec![2.0], vec![1]);
        let s = vmf_scores(&mut tape, z, b, kappa).unwrap();
        assert_eq!(tape.value(s), &[2.0, 0.0]);

        let mut tape = Tape::new();
        let z = tape.constant(vec![-1.0, 0.0], vec![1, 2]);
        let b = tape.constant(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]);
        let kappa = tape.constant(vec![3.0], vec![1]);
        let s = vmf_scores(&mut tape, z, b, kappa).unwrap();
        assert_eq!(tape.value(s)[0], -3.0);

        let mut tape = Tape::new();
        let z = tape.constant(vec![1.0, 0.0], vec![1, 2]);
        let b = tape.constant(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]);
        let kappa = tape.constant(vec![0.0], vec![1]);
        let s = vmf_scores(&mut tape, z, b, kappa).unwrap();
        assert_eq!(tape.value(s), &[0.0, 0.0]);
    }

    #[test]
    fn vmf_scores_reject_non_unit_rows() {
        let mut tape = Tape::new();
        let z = tape.constant(vec![1.0, 1.0], vec![1, 2]);
        let b = tape.constant(vec![1.0, 0.0], vec![1, 2]);
        let kappa = tape.constant(vec![1.0], vec![1]);
        assert!(vmf_scores(&mut tape, z, b, kappa).is_err());
    }

    #[test]
    fn histogram_examples() {
        assert_eq!(usage_histogram(&[0, 0, 1], 3).unwrap(), vec![2, 1, 0]);
        assert_eq!(usage_histogram(&[], 4).unwrap(), vec![0; 4]);
        assert_eq!(usage_histogram(&[2; 10], 4).unwrap(), vec![0, 0, 10, 0]);
        assert!(usage_histogram(&[5], 4).is_err());
    }

    #[test]
    fn perplexity_examples() {
        assert_eq!(perplexity(&[7, 0, 0]).unwrap(), 1.0);
        assert!((perplexity(&[5, 5, 5, 5]).unwrap() - 4.0).abs() < 1e-12);
        // counts [3, 1]: H = -(0.75 ln 0.75 + 0.25 ln 0.25)
        let h = -(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln());
        assert!((perplexity(&[3, 1]).unwrap() - h.exp()).abs() < 1e-12);
        assert!(perplexity(&[0, 0]).is_err());
    }

    #[test]
    fn ema_single_update_from_zero_stats_reaches_batch_mean() {
        let d_b = 2;
        let mut entries = vec![5.0, 5.0, 0.0, 0.0];
        let mut stats = UsageStats::new(2, d_b);
        let z0 = [0.25, -1.5];
        let n = 6;
        let latents: Vec<f64> = (0..n).flat_map(|_| z0).collect();
        let assignments = vec![0usize; n];
        ema_update(&mut entries, &mut stats, &latents, &assignments, 0.99, d_b).unwrap();
        // entry 0 = (0.01 N z0) / (0.01 N) = z0
        assert!((entries[0] - z0[0]).abs() < 1e-12);
        assert!((entries[1] - z0[1]).abs() < 1e-12);
    }

    #[test]
    fn ema_near_one_gamma_keeps_consistent_entries() {
        let d_b = 1;
        let mut entries = vec![3.0, -1.0];
        let mut stats = UsageStats::new(2, d_b);
        stats.ema_cluster_size = vec![2.0, 2.0];
        stats.ema_cluster_sum = vec![6.0, -2.0];
        ema_update(&mut entries, &mut stats, &[0.0], &[0], 1.0 - 1e-13, d_b).unwrap();
        assert!((entries[0] - 3.0).abs() < 1e-10);
        assert!((entries[1] + 1.0).abs() < 1e-10);
    }

    #[test]
    fn ema_unassigned_code_entry_invariant_under_decay() {
        let d_b = 1;
        let mut entries = vec![0.0, 4.0];
        let mut stats = UsageStats::new(2, d_b);
        stats.ema_cluster_size = vec![1.0, 0.5];
        stats.ema_cluster_sum = vec![0.0, 2.0];
        // Only code 0 receives latents; code 1's sum and size decay together.
        ema_update(&mut entries, &mut stats, &[1.0], &[0], 0.9, d_b).unwrap();
        assert!((entries[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn ema_rejects_bad_gamma() {
        let mut entries = vec![0.0, 0.0];
        let mut stats = UsageStats::new(2, 1);
        assert!(ema_update(&mut entries, &mut stats, &[1.0], &[0], 1.0, 1).is_err());
    }

    #[test]
    fn reset_fires_only_below_three_percent() {
        let mut rng = Rng::stream(0, Stream::Reset, 0);
        let mut entries = vec![1.0, 1.0, -1.0, -1.0];
        assert_eq!(codebook_reset(&mut entries, &[100, 50], 2, &mut rng), None);
        assert_eq!(entries, vec![1.0, 1.0, -1.0, -1.0]);
        assert_eq!(codebook_reset(&mut entries, &[100, 2], 2, &mut rng), Some(1));
        assert_ne!(&entries[2..], &[-1.0, -1.0]);
        // Boundary: exactly 3% does not fire.
        let mut entries = vec![0.0, 0.0];
        assert_eq!(codebook_reset(&mut entries, &[100, 3], 1, &mut rng), None);
        // All usages equal: most == least, never fires.
        assert_eq!(codebook_reset(&mut entries, &[7, 7], 1, &mut rng), None);
    }

    #[test]
    fn reset_noise_has_expected_squared_distance() {
        let d_b = 16;
        let mut rng = Rng::stream(1, Stream::Reset, 0);
        let most: Vec<f64> = (0..d_b).map(|i| i as f64 * 0.1).collect();
        let trials = 2000;
        let mut mean_d2 = 0.0;
        for _ in 0..trials {
            let mut entries = most.clone();
            entries.extend(vec![9.0; d_b]);
            codebook_reset(&mut entries, &[100, 0], d_b, &mut rng).unwrap();
            let d2: f64 = entries[d_b..]
                .iter()
                .zip(&most)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            mean_d2 += d2;
        }
        mean_d2 /= trials as f64;
        // E d^2 = 0.01 d_b = 0.16; tolerance ~5 standard errors.
        assert!((mean_d2 - 0.16).abs() < 0.0065, "mean_d2={mean_d2}");
    }

    #[test]
    fn init_respects_unit_norm() {
        let mut rng = Rng::stream(3, Stream::Init, 0);
        let cb = Codebook::init(8, 4, true, &mut rng).unwrap();
        for k in 0..8 {
            let norm: f64 = cb.row(k).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-10);
        }
        assert!(Codebook::init(1, 4, false, &mut rng).is_err());
    }

    proptest! {
        #[test]
        fn perplexity_in_bounds_and_permutation_invariant(
            counts in proptest::collection::vec(0u64..50, 2..12)
        ) {
            prop_assume!(counts.iter().sum::<u64>() > 0);
            let p = perplexity(&counts).unwrap();
            prop_assert!(p >= 1.0 - 1e-12);
            prop_assert!(p <= counts.len() as f64 + 1e-12);
            let mut rev = counts.clone();
            rev.reverse();
            let q = perplexity(&rev).unwrap();
            prop_assert!((p - q).abs() < 1e-12);
        }

        #[test]
        fn nearest_matches_type_one_score_argmax(
            seed in 0u64..500
        ) {
            let mut rng = Rng::from_seed(seed);
            let k = 2 + rng.below(6);
            let d_b = 1 + rng.below(4);
            let cb = Codebook::init(k, d_b, false, &mut rng).unwrap();
            let z: Vec<f64> = (0..d_b).map(|_| rng.normal()).collect();

            let mut tape = Tape::new();
            let zt = tape.constant(z.clone(), vec![1, d_b]);
            let bt = tape.constant(cb.entries.clone(), vec![k, d_b]);
            let w = tape.constant(vec![1.0 / 0.7; d_b], vec![1, d_b]);
            let s = gaussian_scores(&mut tape, zt, bt, w).unwrap();
            let scores = tape.value(s);
            let mut best = 0;
            for i in 1..k {
                if scores[i] > scores[best] {
                    best = i;
                }
            }
            prop_assert_eq!(best, cb.nearest(&z));
        }
    }
}
