//! Stochastic and deterministic quantization of encoder latents onto the
//! codebook: categorical posteriors, Gumbel-softmax relaxation, the
//! straight-through hard assignment, temperature scheduling, analytic
//! entropy, and the latent regularizers.

use crate::codebook;
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};
use crate::{Error, Result};

/// Probabilities below this floor are clamped before logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// How the dequantization spread is parameterized. Gaussian variants carry
/// log-variances (realized variance is `exp`, hence always positive); the
/// spherical variant carries a log-concentration.
#[derive(Debug, Clone, Copy)]
pub enum Variance {
    /// One global scalar `sigma^2`.
    TypeI { log_var: Tensor },
    /// One scalar per sample, shape `[batch, 1]`; each sample owns `d_z`
    /// latent rows.
    TypeII { log_var: Tensor, d_z: usize },
    /// One scalar per latent row, shape `[rows, 1]`.
    TypeIII { log_var: Tensor },
    /// A full diagonal per latent row, shape `[rows, d_b]`.
    TypeIV { log_var: Tensor },
    /// Spherical concentration `kappa`, one global scalar.
    VmfKappa { log_kappa: Tensor },
    /// Non-trainable scalar `sigma_q^2`.
    FixedSigmaQ { sigma_q2: f64 },
}

impl Variance {
    /// Expand to the n×d_b inverse-variance weight matrix shared by all
    /// Gaussian parameterizations. Broadcasting through the same expression
    /// makes nested parameterizations agree bit-for-bit.
    pub fn inverse_weights(&self, tape: &mut Tape, rows: usize, d_b: usize) -> Result<Tensor> {
        match *self {
            Variance::TypeI { log_var } => {
                let neg = tape.scale(log_var, -1.0)?;
                let inv = tape.exp(neg)?; // [1]
                let col = tape.broadcast_row(inv, rows)?; // [rows, 1]
                tape.broadcast_col(col, d_b)
            }
            Variance::TypeII { log_var, d_z } => {
                let batch = tape.shape(log_var)[0];
                if batch * d_z != rows {
                    return Err(Error::Shape {
                        op: "inverse_weights",
                        detail: format!("{batch} samples x d_z={d_z} != {rows} rows"),
                    });
                }
                let neg = tape.scale(log_var, -1.0)?;
                let inv = tape.exp(neg)?; // [batch, 1]
                let idx: Vec<usize> = (0..batch).flat_map(|s| std::iter::repeat(s).take(d_z)).collect();
                let per_row = tape.gather_rows(inv, &idx)?; // [rows, 1]
                tape.broadcast_col(per_row, d_b)
            }
            Variance::TypeIII { log_var } => {
                if tape.shape(log_var) != [rows, 1] {
                    return Err(Error::Shape {
                        op: "inverse_weights",
                        detail: format!("{:?} for {rows} rows", tape.shape(log_var)),
                    });
                }
                let neg = tape.scale(log_var, -1.0)?;
                let inv = tape.exp(neg)?;
                tape.broadcast_col(inv, d_b)
            }
            Variance::TypeIV { log_var } => {
                if tape.shape(log_var) != [rows, d_b] {
                    return Err(Error::Shape {
                        op: "inverse_weights",
                        detail: format!("{:?} for [{rows}, {d_b}]", tape.shape(log_var)),
                    });
                }
                let neg = tape.scale(log_var, -1.0)?;
                tape.exp(neg)
            }
            Variance::FixedSigmaQ { sigma_q2 } => {
                if sigma_q2 <= 0.0 {
                    return Err(Error::Contract(format!("sigma_q^2 = {sigma_q2} must be > 0")));
                }
                Ok(tape.constant(vec![1.0 / sigma_q2; rows * d_b], vec![rows, d_b]))
            }
            Variance::VmfKappa { .. } => Err(Error::Contract(
                "inverse_weights is a Gaussian-family operation".into(),
            )),
        }
    }
}

/// Unnormalized log-probabilities over codes for every latent row.
pub fn scores(tape: &mut Tape, z: Tensor, codes: Tensor, var: &Variance) -> Result<Tensor> {
    match var {
        Variance::VmfKappa { log_kappa } => {
            let kappa = tape.exp(*log_kappa)?;
            codebook::vmf_scores(tape, z, codes, kappa)
        }
        _ => {
            let (rows, d_b) = match tape.shape(z) {
                [n, d] => (*n, *d),
                s => {
                    return Err(Error::Shape { op: "scores", detail: format!("latents {s:?}") })
                }
            };
            let w = var.inverse_weights(tape, rows, d_b)?;
            codebook::gaussian_scores(tape, z, codes, w)
        }
    }
}

/// Categorical posterior over codes: row-softmax of the scores.
/// Differentiable w.r.t. latents, codebook, and variance parameters.
pub fn quantize_probs(tape: &mut Tape, z: Tensor, codes: Tensor, var: &Variance) -> Result<Tensor> {
    let s = scores(tape, z, codes, var)?;
    tape.row_softmax(s)
}

/// One relaxed one-hot sample per row:
/// `Y_i = softmax((ln p_i + g) / tau)` with `g` i.i.d. standard Gumbel,
/// drawn row-major from `rng`. Probabilities are clamped at [`PROB_FLOOR`]
/// before the log.
pub fn gumbel_softmax_sample(
    tape: &mut Tape,
    probs: Tensor,
    tau: f64,
    rng: &mut Rng,
) -> Result<Tensor> {
    if tau <= 0.0 {
        return Err(Error::Contract(format!("temperature {tau} must be > 0")));
    }
    let shape = tape.shape(probs).to_vec();
    let n: usize = shape.iter().product();
    let noise: Vec<f64> = (0..n).map(|_| rng.gumbel()).collect();
    let g = tape.constant(noise, shape);
    let clamped = tape.clamp_min(probs, PROB_FLOOR)?;
    let logp = tape.log(clamped)?;
    let shifted = tape.add(logp, g)?;
    let scaled = tape.scale(shifted, 1.0 / tau)?;
    tape.row_softmax(scaled)
}

/// Exact categorical sample per row via the Gumbel-argmax identity — the
/// zero-temperature limit of [`gumbel_softmax_sample`]. Noise is drawn in
/// the same row-major order.
pub fn gumbel_hard_indices(probs: &[f64], k: usize, rng: &mut Rng) -> Vec<usize> {
    probs
        .chunks(k)
        .map(|row| {
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for (j, &p) in row.iter().enumerate() {
                let v = p.max(PROB_FLOOR).ln() + rng.gumbel();
                if v > best_v {
                    best_v = v;
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Gumbel-softmax temperature schedule. The published rule is displayed
/// with a positive exponent, which grows instead of annealing; the decaying
/// sign is the default and the sign stays configurable for reproducing the
/// literal form.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TemperatureSchedule {
    pub rate: f64,
    pub floor: f64,
    pub sign: f64,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        TemperatureSchedule { rate: 1e-5, floor: 0.1, sign: -1.0 }
    }
}

/// `tau(t) = max(floor, exp(sign * rate * t))`.
pub fn temperature(step: u64, sched: &TemperatureSchedule) -> f64 {
    (sched.sign * sched.rate * step as f64).exp().max(sched.floor)
}

/// Row argmax with ties broken toward the lowest index.
pub fn argmax_rows(values: &[f64], k: usize) -> Vec<usize> {
    values
        .chunks(k)
        .map(|row| {
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Hard nearest-neighbor assignment with a straight-through gradient.
pub struct HardQuant {
    /// Selected code per latent row; ties to the lowest index.
    pub indices: Vec<usize>,
    /// Selected code values; backward passes the gradient to the latents
    /// unchanged and none to the codebook.
    pub straight_through: Tensor,
    /// The same rows gathered from the codebook node; backward reaches the
    /// codebook only.
    pub codes: Tensor,
}

/// Map every latent row to its nearest code under Euclidean distance.
pub fn deterministic_quantize(tape: &mut Tape, z: Tensor, codes: Tensor) -> Result<HardQuant> {
    let (rows, d_b) = match tape.shape(z) {
        [n, d] => (*n, *d),
        s => {
            return Err(Error::Shape {
                op: "deterministic_quantize",
                detail: format!("latents {s:?}"),
            })
        }
    };
    let k = tape.shape(codes)[0];
    if tape.shape(codes) != [k, d_b] {
        return Err(Error::Shape {
            op: "deterministic_quantize",
            detail: format!("codes {:?} vs d_b {d_b}", tape.shape(codes)),
        });
    }
    let zv = tape.value(z);
    let bv = tape.value(codes);
    let mut indices = Vec::with_capacity(rows);
    for i in 0..rows {
        let zr = &zv[i * d_b..(i + 1) * d_b];
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for c in 0..k {
            let br = &bv[c * d_b..(c + 1) * d_b];
            let d: f64 = zr.iter().zip(br).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        indices.push(best);
    }
    let mut selected = Vec::with_capacity(rows * d_b);
    for &c in &indices {
        selected.extend_from_slice(&bv[c * d_b..(c + 1) * d_b]);
    }
    let straight_through = tape.straight_through(z, selected)?;
    let gathered = tape.gather_rows(codes, &indices)?;
    Ok(HardQuant { indices, straight_through, codes: gathered })
}

/// Exact per-row entropy `-sum_k p ln p` (with `0 ln 0 := 0` via the
/// probability floor) and its mean, both differentiable.
pub struct Entropy {
    /// Shape `[rows, 1]`.
    pub per_position: Tensor,
    /// Scalar mean over rows.
    pub mean: Tensor,
    /// Scalar sum over rows.
    pub total: Tensor,
}

pub fn analytic_entropy(tape: &mut Tape, probs: Tensor) -> Result<Entropy> {
    let rows = tape.shape(probs)[0];
    let clamped = tape.clamp_min(probs, PROB_FLOOR)?;
    let logp = tape.log(clamped)?;
    let plogp = tape.mul(probs, logp)?;
    let row = tape.row_sum(plogp)?;
    let per_position = tape.scale(row, -1.0)?;
    let total = tape.sum(per_position)?;
    let mean = tape.scale(total, 1.0 / rows as f64)?;
    Ok(Entropy { per_position, mean, total })
}

/// Pairwise latent regularizer between the encoder latents `z` and a code
/// configuration `z_q` (soft or hard):
/// Gaussian families: `(1/2) sum_ij w_ij (z_ij - z_q,ij)^2`;
/// spherical: `kappa * sum_i (1 - z_q,i . z_i)` (z rows must be unit).
pub fn regularizer(tape: &mut Tape, z: Tensor, z_q: Tensor, var: &Variance) -> Result<Tensor> {
    tape.same_shape_check("regularizer", z, z_q)?;
    match var {
        Variance::VmfKappa { log_kappa } => {
            let (rows, d_b) = (tape.shape(z)[0], tape.shape(z)[1]);
            for row in tape.value(z).chunks(d_b) {
                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > 1e-8 {
                    return Err(Error::Contract(format!(
                        "regularizer latent row has norm {norm}, expected 1"
                    )));
                }
            }
            let prod = tape.mul(z, z_q)?;
            let dots = tape.row_sum(prod)?; // [rows, 1]
            let ones = tape.constant(vec![1.0; rows], vec![rows, 1]);
            let gaps = tape.sub(ones, dots)?;
            let total = tape.sum(gaps)?;
            let kappa = tape.exp(*log_kappa)?;
            tape.scale_by(total, kappa)
        }
        _ => {
            let (rows, d_b) = (tape.shape(z)[0], tape.shape(z)[1]);
            let w = var.inverse_weights(tape, rows, d_b)?;
            let diff = tape.sub(z, z_q)?;
            let sq = tape.mul(diff, diff)?;
            let weighted = tape.mul(sq, w)?;
            let total = tape.sum(weighted)?;
            tape.scale(total, 0.5)
        }
    }
}

/// Exact expectation of the pairwise regularizer under the categorical
/// posterior. Linear in the probabilities, so it follows directly from the
/// scores: Gaussian families give `-sum(probs * scores)`; the spherical
/// form adds `kappa * rows` because each row contributes `kappa * 1`.
pub fn expected_regularizer(
    tape: &mut Tape,
    probs: Tensor,
    scores: Tensor,
    var: &Variance,
) -> Result<Tensor> {
    tape.same_shape_check("expected_regularizer", probs, scores)?;
    let ps = tape.mul(probs, scores)?;
    let total = tape.sum(ps)?;
    let neg = tape.scale(total, -1.0)?;
    match var {
        Variance::VmfKappa { log_kappa } => {
            let rows = tape.shape(probs)[0] as f64;
            let kappa = tape.exp(*log_kappa)?;
            let k_rows = tape.scale(kappa, rows)?;
            tape.add(k_rows, neg)
        }
        _ => Ok(neg),
    }
}

/// Per-row categorical posterior summary used by evaluation and reporting.
#[derive(Debug, Clone)]
pub struct QuantizationOutput {
    /// n×K row-stochastic matrix.
    pub probs: Vec<f64>,
    pub k: usize,
    /// n×d_b code values actually fed to the decoder.
    pub soft_code: Vec<f64>,
    pub hard_indices: Vec<usize>,
    pub entropy_per_position: Vec<f64>,
    pub regularizer_value: f64,
}

impl QuantizationOutput {
    pub fn from_tape(
        tape: &Tape,
        probs: Tensor,
        soft_code: Tensor,
        entropy_rows: Tensor,
        regularizer_value: f64,
    ) -> Self {
        let k = tape.shape(probs)[1];
        let probs = tape.value(probs).to_vec();
        QuantizationOutput {
            hard_indices: argmax_rows(&probs, k),
            probs,
            k,
            soft_code: tape.value(soft_code).to_vec(),
            entropy_per_position: tape.value(entropy_rows).to_vec(),
            regularizer_value,
        }
    }
}
