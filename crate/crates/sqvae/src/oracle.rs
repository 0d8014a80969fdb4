//! Brute-force scalar oracles for verification: everything here is written
//! with plain f64 loops, independent of the tape engine, so tests can check
//! the differentiable implementations against arithmetic that shares no
//! code path with them.

/// Squared Euclidean distance between equal-length slices.
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn softmax_row(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn entropy_row(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// Visit every assignment in `[0, K)^{d_z}` as a mixed-radix counter.
pub fn for_each_assignment(d_z: usize, k: usize, mut visit: impl FnMut(&[usize])) {
    let mut idx = vec![0usize; d_z];
    loop {
        visit(&idx);
        let mut pos = 0;
        loop {
            if pos == d_z {
                return;
            }
            idx[pos] += 1;
            if idx[pos] < k {
                break;
            }
            idx[pos] = 0;
            pos += 1;
        }
    }
}

/// A tiny Gaussian quantization instance: per-position categorical
/// posteriors from scaled squared distances.
pub struct GaussianInstance {
    /// d_z × d_b encoder latents.
    pub zhat: Vec<f64>,
    /// K × d_b codes.
    pub codes: Vec<f64>,
    pub d_z: usize,
    pub d_b: usize,
    pub k: usize,
    pub sigma_phi2: f64,
}

impl GaussianInstance {
    fn latent(&self, i: usize) -> &[f64] {
        &self.zhat[i * self.d_b..(i + 1) * self.d_b]
    }

    pub fn code(&self, k: usize) -> &[f64] {
        &self.codes[k * self.d_b..(k + 1) * self.d_b]
    }

    /// d_z × K posterior from `softmax_k(-|b_k - z_i|^2 / (2 sigma_phi^2))`.
    pub fn probs(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.d_z * self.k);
        for i in 0..self.d_z {
            let scores: Vec<f64> = (0..self.k)
                .map(|c| -sq_dist(self.latent(i), self.code(c)) / (2.0 * self.sigma_phi2))
                .collect();
            out.extend(softmax_row(&scores));
        }
        out
    }

    /// Sum over positions of the per-position entropy.
    pub fn entropy_total(&self) -> f64 {
        self.probs().chunks(self.k).map(entropy_row).sum()
    }

    /// Exact `E[R]` in its linear form: `sum_i sum_k p_ik d_ik^2 / (2 s^2)`.
    pub fn expected_regularizer(&self) -> f64 {
        let probs = self.probs();
        let mut total = 0.0;
        for i in 0..self.d_z {
            for c in 0..self.k {
                total += probs[i * self.k + c] * sq_dist(self.latent(i), self.code(c))
                    / (2.0 * self.sigma_phi2);
            }
        }
        total
    }

    /// Expectation of `f(assignment)` by full enumeration of the joint
    /// categorical (positions independent).
    pub fn enumerated_expectation(&self, f: impl Fn(&[usize]) -> f64) -> f64 {
        let probs = self.probs();
        let mut total = 0.0;
        for_each_assignment(self.d_z, self.k, |assignment| {
            let p: f64 = assignment
                .iter()
                .enumerate()
                .map(|(i, &c)| probs[i * self.k + c])
                .product();
            total += p * f(assignment);
        });
        total
    }

    /// Joint entropy `-sum_a P(a) ln P(a)`; equals the sum of per-position
    /// entropies because positions are independent.
    pub fn enumerated_entropy(&self) -> f64 {
        let probs = self.probs();
        let mut total = 0.0;
        for_each_assignment(self.d_z, self.k, |assignment| {
            let p: f64 = assignment
                .iter()
                .enumerate()
                .map(|(i, &c)| probs[i * self.k + c])
                .product();
            if p > 0.0 {
                total -= p * p.ln();
            }
        });
        total
    }

    /// Enumerated `E[R]` over hard assignments; must agree with
    /// [`Self::expected_regularizer`].
    pub fn enumerated_expected_regularizer(&self) -> f64 {
        self.enumerated_expectation(|assignment| {
            assignment
                .iter()
                .enumerate()
                .map(|(i, &c)| sq_dist(self.latent(i), self.code(c)) / (2.0 * self.sigma_phi2))
                .sum()
        })
    }

    /// Flat d_z*d_b code configuration for one assignment.
    pub fn assignment_codes(&self, assignment: &[usize]) -> Vec<f64> {
        let mut z = Vec::with_capacity(self.d_z * self.d_b);
        for &c in assignment {
            z.extend_from_slice(self.code(c));
        }
        z
    }
}

/// Spherical counterpart with cosine scores `kappa_phi * b_k . z_i`.
pub struct VmfInstance {
    pub zhat: Vec<f64>,
    pub codes: Vec<f64>,
    pub d_z: usize,
    pub d_b: usize,
    pub k: usize,
    pub kappa_phi: f64,
}

impl VmfInstance {
    fn latent(&self, i: usize) -> &[f64] {
        &self.zhat[i * self.d_b..(i + 1) * self.d_b]
    }

    pub fn code(&self, k: usize) -> &[f64] {
        &self.codes[k * self.d_b..(k + 1) * self.d_b]
    }

    fn dot(&self, i: usize, c: usize) -> f64 {
        self.latent(i).iter().zip(self.code(c)).map(|(a, b)| a * b).sum()
    }

    pub fn probs(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.d_z * self.k);
        for i in 0..self.d_z {
            let scores: Vec<f64> =
                (0..self.k).map(|c| self.kappa_phi * self.dot(i, c)).collect();
            out.extend(softmax_row(&scores));
        }
        out
    }

    pub fn entropy_total(&self) -> f64 {
        self.probs().chunks(self.k).map(entropy_row).sum()
    }

    /// Exact `E[R] = sum_i sum_k p_ik kappa_phi (1 - b_k . z_i)`.
    pub fn expected_regularizer(&self) -> f64 {
        let probs = self.probs();
        let mut total = 0.0;
        for i in 0..self.d_z {
            for c in 0..self.k {
                total += probs[i * self.k + c] * self.kappa_phi * (1.0 - self.dot(i, c));
            }
        }
        total
    }

    pub fn enumerated_expectation(&self, f: impl Fn(&[usize]) -> f64) -> f64 {
        let probs = self.probs();
        let mut total = 0.0;
        for_each_assignment(self.d_z, self.k, |assignment| {
            let p: f64 = assignment
                .iter()
                .enumerate()
                .map(|(i, &c)| probs[i * self.k + c])
                .product();
            total += p * f(assignment);
        });
        total
    }

    pub fn enumerated_expected_regularizer(&self) -> f64 {
        self.enumerated_expectation(|assignment| {
            assignment
                .iter()
                .enumerate()
                .map(|(i, &c)| self.kappa_phi * (1.0 - self.dot(i, c)))
                .sum()
        })
    }

    pub fn assignment_codes(&self, assignment: &[usize]) -> Vec<f64> {
        let mut z = Vec::with_capacity(self.d_z * self.d_b);
        for &c in assignment {
            z.extend_from_slice(self.code(c));
        }
        z
    }
}

/// Plain-loop MLP forward pass (relu hidden layers) so oracle losses can
/// decode without touching the tape engine.
pub struct ScalarMlp {
    pub dims: Vec<usize>,
    /// Per layer, row-major `[fan_in, fan_out]`.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub sigmoid_output: bool,
}

impl ScalarMlp {
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.dims[0]);
        let mut h = x.to_vec();
        let layers = self.weights.len();
        for l in 0..layers {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let w = &self.weights[l];
            let mut out = self.biases[l].clone();
            for (i, &hv) in h.iter().enumerate() {
                for j in 0..fan_out {
                    out[j] += hv * w[i * fan_out + j];
                }
            }
            debug_assert_eq!(w.len(), fan_in * fan_out);
            let last = l + 1 == layers;
            if !last {
                for v in out.iter_mut() {
                    *v = v.max(0.0);
                }
            } else if self.sigmoid_output {
                for v in out.iter_mut() {
                    *v = 1.0 / (1.0 + (-*v).exp());
                }
            }
            h = out;
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn instance() -> GaussianInstance {
        GaussianInstance {
            zhat: vec![0.3, -0.1, 0.7, 0.4],
            codes: vec![0.0, 0.0, 1.0, 0.5, -0.5, 0.3],
            d_z: 2,
            d_b: 2,
            k: 3,
            sigma_phi2: 0.4,
        }
    }

    #[test]
    fn enumeration_reproduces_analytic_entropy_and_regularizer() {
        let inst = instance();
        assert!((inst.enumerated_entropy() - inst.entropy_total()).abs() < 1e-12);
        assert!(
            (inst.enumerated_expected_regularizer() - inst.expected_regularizer()).abs() < 1e-12
        );
    }

    #[test]
    fn assignment_space_has_k_pow_dz_points() {
        let mut n = 0;
        for_each_assignment(3, 4, |_| n += 1);
        assert_eq!(n, 64);
    }

    #[test]
    fn enumerated_probabilities_sum_to_one() {
        let inst = instance();
        let total = inst.enumerated_expectation(|_| 1.0);
        assert!((total - 1.0).abs() < 1e-12);
    }
}
