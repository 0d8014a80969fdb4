//! The training loop: model assembly per objective kind, the Adam
//! optimizer, learning-rate plateau halving, single-step execution with the
//! codebook maintenance side effects, and deterministic evaluation passes.

use crate::codebook::{self, Codebook, UsageStats};
use crate::data::{self, Dataset, Split};
use crate::metrics::{self, MetricRow};
use crate::models::{
    Binding, CategoryProjection, DecoderKind, DecoderNet, EncoderNet, HeadKind, ParamId,
    ParamStore, ProjectionMode,
};
use crate::objectives::{self, QuantTerms};
use crate::quantizer::{self, TemperatureSchedule, Variance};
use crate::rng::{Rng, Stream};
use crate::tensor::{Gradients, Tape, Tensor};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

// ── configuration ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "gaussian_sqvae_I")]
    GaussianSqvaeI,
    #[serde(rename = "gaussian_sqvae_II")]
    GaussianSqvaeII,
    #[serde(rename = "gaussian_sqvae_III")]
    GaussianSqvaeIII,
    #[serde(rename = "gaussian_sqvae_IV")]
    GaussianSqvaeIV,
    #[serde(rename = "vmf_sqvae")]
    VmfSqvae,
    #[serde(rename = "nc_sqvae")]
    NcSqvae,
    #[serde(rename = "vqvae")]
    Vqvae,
    #[serde(rename = "vqvae_ema")]
    VqvaeEma,
    #[serde(rename = "vqvae_ema_reset")]
    VqvaeEmaReset,
    #[serde(rename = "fixed_sigma_q")]
    FixedSigmaQ,
    #[serde(rename = "vae")]
    Vae,
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::GaussianSqvaeI => "gaussian_sqvae_I",
            ModelKind::GaussianSqvaeII => "gaussian_sqvae_II",
            ModelKind::GaussianSqvaeIII => "gaussian_sqvae_III",
            ModelKind::GaussianSqvaeIV => "gaussian_sqvae_IV",
            ModelKind::VmfSqvae => "vmf_sqvae",
            ModelKind::NcSqvae => "nc_sqvae",
            ModelKind::Vqvae => "vqvae",
            ModelKind::VqvaeEma => "vqvae_ema",
            ModelKind::VqvaeEmaReset => "vqvae_ema_reset",
            ModelKind::FixedSigmaQ => "fixed_sigma_q",
            ModelKind::Vae => "vae",
        }
    }

    pub fn is_vq(&self) -> bool {
        matches!(self, ModelKind::Vqvae | ModelKind::VqvaeEma | ModelKind::VqvaeEmaReset)
    }

    pub fn uses_ema(&self) -> bool {
        matches!(self, ModelKind::VqvaeEma | ModelKind::VqvaeEmaReset)
    }

    pub fn uses_reset(&self) -> bool {
        matches!(self, ModelKind::VqvaeEmaReset)
    }

    fn gaussian_head(&self) -> Option<HeadKind> {
        match self {
            ModelKind::GaussianSqvaeII => Some(HeadKind::PerSample),
            ModelKind::GaussianSqvaeIII => Some(HeadKind::PerPosition),
            ModelKind::GaussianSqvaeIV => Some(HeadKind::PerPositionDim),
            _ => None,
        }
    }

    /// Requires categorical data (`Some(true)`), continuous (`Some(false)`),
    /// or accepts both (`None`).
    fn wants_categorical(&self) -> Option<bool> {
        match self {
            ModelKind::VmfSqvae | ModelKind::NcSqvae => Some(true),
            ModelKind::GaussianSqvaeI
            | ModelKind::GaussianSqvaeII
            | ModelKind::GaussianSqvaeIII
            | ModelKind::GaussianSqvaeIV
            | ModelKind::FixedSigmaQ => Some(false),
            ModelKind::Vqvae | ModelKind::VqvaeEma | ModelKind::VqvaeEmaReset | ModelKind::Vae => {
                None
            }
        }
    }

    pub fn default_lr(&self) -> f64 {
        if self.is_vq() {
            3e-4
        } else {
            1e-3
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// IDX image files; the last 10,000 training rows become validation.
    Mnist {
        images: PathBuf,
        #[serde(default)]
        labels: Option<PathBuf>,
        #[serde(default)]
        test_images: Option<PathBuf>,
    },
    SynthContinuous { n: usize, side: usize, seed: u64 },
    SynthCategorical { n: usize, side: usize, classes: usize, seed: u64 },
}

impl DatasetSpec {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSpec::Mnist { images, labels, test_images } => {
                data::load_mnist_idx(images, labels.as_deref(), test_images.as_deref())
            }
            DatasetSpec::SynthContinuous { n, side, seed } => {
                data::synth_continuous(*n, *side, *seed)
            }
            DatasetSpec::SynthCategorical { n, side, classes, seed } => {
                data::synth_categorical(*n, *side, *classes, *seed)
            }
        }
    }
}

fn default_batch_size() -> usize {
    32
}
fn default_beta() -> f64 {
    0.25
}
fn default_gamma() -> f64 {
    0.99
}
fn default_sigma_q2() -> f64 {
    1.0
}
fn default_vq_sigma2() -> f64 {
    1.0
}
fn default_clip_norm() -> f64 {
    10.0
}
fn default_projection() -> ProjectionMode {
    ProjectionMode::OneHot
}
fn default_hidden() -> Vec<usize> {
    vec![256, 128]
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub dataset: DatasetSpec,
    pub d_z: usize,
    pub d_b: usize,
    pub k: usize,
    pub epochs: u64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Materialized to the per-kind default when absent.
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Fixed quantization variance for the `fixed_sigma_q` kind.
    #[serde(default = "default_sigma_q2")]
    pub sigma_q2: f64,
    /// Fixed reconstruction scale for the vector-quantized kinds.
    #[serde(default = "default_vq_sigma2")]
    pub vq_sigma2: f64,
    #[serde(default)]
    pub temperature: TemperatureSchedule,
    /// Global gradient-norm clip; 0 disables.
    #[serde(default = "default_clip_norm")]
    pub clip_norm: f64,
    pub seed: u64,
    #[serde(default = "default_projection")]
    pub projection: ProjectionMode,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    /// Keep the per-pixel factor on the spherical normalizing constant.
    #[serde(default = "default_true")]
    pub normalizer_per_pixel: bool,
    #[serde(default)]
    pub log_every_step: bool,
}

impl TrainConfig {
    /// Check field contracts and fill the materialized defaults.
    pub fn validated(mut self) -> Result<TrainConfig> {
        if self.d_z < 1 || self.d_b < 1 {
            return Err(Error::Contract("d_z and d_b must be >= 1".into()));
        }
        if self.k < 2 {
            return Err(Error::Contract(format!("k = {} must be >= 2", self.k)));
        }
        if self.batch_size < 1 {
            return Err(Error::Contract("batch_size must be >= 1".into()));
        }
        if self.beta <= 0.0 {
            return Err(Error::Contract(format!("beta = {} must be > 0", self.beta)));
        }
        if !(0.0 < self.gamma && self.gamma < 1.0) {
            return Err(Error::Contract(format!("gamma = {} outside (0, 1)", self.gamma)));
        }
        if self.sigma_q2 <= 0.0 || self.vq_sigma2 <= 0.0 {
            return Err(Error::Contract("sigma_q2 and vq_sigma2 must be > 0".into()));
        }
        if self.clip_norm < 0.0 {
            return Err(Error::Contract("clip_norm must be >= 0".into()));
        }
        if self.temperature.floor <= 0.0 || self.temperature.rate <= 0.0 {
            return Err(Error::Contract("temperature floor and rate must be > 0".into()));
        }
        if let Some(lr) = self.lr {
            if lr < 0.0 {
                return Err(Error::Contract(format!("lr = {lr} must be >= 0")));
            }
        } else {
            self.lr = Some(self.model.default_lr());
        }
        if self.hidden.is_empty() {
            return Err(Error::Contract("hidden layer list must not be empty".into()));
        }
        let categorical = matches!(self.dataset, DatasetSpec::SynthCategorical { .. });
        if let Some(wants) = self.model.wants_categorical() {
            if wants != categorical {
                return Err(Error::Contract(format!(
                    "model {} needs a {} dataset",
                    self.model.name(),
                    if wants { "categorical" } else { "continuous" }
                )));
            }
        }
        Ok(self)
    }
}

// ── optimizer ──────────────────────────────────────────────────────────

/// Canonical bias-corrected Adam over a parameter store.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let m = store.iter().map(|(_, e)| vec![0.0; e.data.len()]).collect();
        let v = store.iter().map(|(_, e)| vec![0.0; e.data.len()]).collect();
        AdamState { m, v, step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Global L2 norm over the gradients of optimizable parameters.
pub fn global_grad_norm(store: &ParamStore, binding: &Binding, grads: &Gradients) -> f64 {
    let mut total = 0.0;
    for (id, entry) in store.iter() {
        if !entry.optimize {
            continue;
        }
        if let Some(g) = grads.get(binding.node(id)) {
            total += g.iter().map(|x| x * x).sum::<f64>();
        }
    }
    total.sqrt()
}

/// One Adam step: `p -= lr * m_hat / (sqrt(v_hat) + eps)` with gradients
/// scaled by `grad_scale` (the clip factor). Parameters without a gradient
/// this step are treated as having a zero gradient.
pub fn adam_update(
    store: &mut ParamStore,
    binding: &Binding,
    grads: &Gradients,
    adam: &mut AdamState,
    lr: f64,
    grad_scale: f64,
) {
    adam.step += 1;
    let bc1 = 1.0 - adam.beta1.powi(adam.step as i32);
    let bc2 = 1.0 - adam.beta2.powi(adam.step as i32);
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        if !store.entry(id).optimize {
            continue;
        }
        let g = grads.get(binding.node(id)).map(|s| s.to_vec());
        let m = &mut adam.m[id.0];
        let v = &mut adam.v[id.0];
        let p = store.data_mut(id);
        for j in 0..p.len() {
            let gj = g.as_ref().map_or(0.0, |g| g[j]) * grad_scale;
            m[j] = adam.beta1 * m[j] + (1.0 - adam.beta1) * gj;
            v[j] = adam.beta2 * v[j] + (1.0 - adam.beta2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + adam.eps);
        }
    }
}

/// Plateau schedule: halve the rate when the best validation loss has not
/// improved for three consecutive epochs; the counter resets both on
/// improvement and after each halving.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauSchedule {
    pub lr: f64,
    pub best: f64,
    pub stale_epochs: u32,
}

pub const PLATEAU_PATIENCE: u32 = 3;

impl PlateauSchedule {
    pub fn new(lr: f64) -> Self {
        PlateauSchedule { lr, best: f64::INFINITY, stale_epochs: 0 }
    }

    pub fn epoch_end(&mut self, val_loss: f64) {
        if val_loss < self.best {
            self.best = val_loss;
            self.stale_epochs = 0;
        } else {
            self.stale_epochs += 1;
            if self.stale_epochs >= PLATEAU_PATIENCE {
                self.lr /= 2.0;
                self.stale_epochs = 0;
            }
        }
    }
}

// ── model assembly ─────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Model {
    pub kind: ModelKind,
    pub store: ParamStore,
    pub encoder: EncoderNet,
    pub decoder: DecoderNet,
    pub codebook: Option<ParamId>,
    pub codebook_unit_norm: bool,
    pub log_sigma2: Option<ParamId>,
    pub log_kappa: Option<ParamId>,
    /// `ln sigma_phi^2` (Gaussian type I) or `ln kappa_phi` (spherical).
    pub log_scale_phi: Option<ParamId>,
    pub projection: Option<CategoryProjection>,
    pub data_dim: usize,
    pub classes: usize,
    pub d_z: usize,
    pub d_b: usize,
    pub k: usize,
}

impl Model {
    pub fn build(cfg: &TrainConfig, ds: &Dataset) -> Result<Model> {
        let kind = cfg.model;
        let categorical = ds.is_categorical();
        if let Some(wants) = kind.wants_categorical() {
            if wants != categorical {
                return Err(Error::Contract(format!(
                    "model {} incompatible with this dataset",
                    kind.name()
                )));
            }
        }
        let d = ds.dim;
        let mut store = ParamStore::new();
        let mut rng = Rng::stream(cfg.seed, Stream::Init, 0);

        let projection = if kind == ModelKind::VmfSqvae {
            Some(CategoryProjection::new(cfg.projection, ds.classes)?)
        } else {
            None
        };
        let input_dim = if categorical {
            match &projection {
                Some(p) => d * p.f_dim,
                None => d * ds.classes,
            }
        } else {
            d
        };
        let head = match kind {
            ModelKind::Vae => Some(HeadKind::PerPositionDim),
            _ => kind.gaussian_head(),
        };
        let spherical = kind == ModelKind::VmfSqvae;
        let encoder = EncoderNet::init(
            &mut store,
            "enc",
            input_dim,
            &cfg.hidden,
            cfg.d_z,
            cfg.d_b,
            head,
            spherical,
            &mut rng,
        );

        let dec_kind = if !categorical {
            DecoderKind::GaussianMean { d }
        } else if kind == ModelKind::VmfSqvae {
            DecoderKind::Spherical { d, f_dim: projection.as_ref().unwrap().f_dim }
        } else {
            DecoderKind::Logits { d, classes: ds.classes }
        };
        let dec_hidden: Vec<usize> = cfg.hidden.iter().rev().copied().collect();
        let decoder = DecoderNet::init(
            &mut store,
            "dec",
            cfg.d_z * cfg.d_b,
            &dec_hidden,
            dec_kind,
            &mut rng,
        );

        let codebook_unit_norm = spherical;
        let codebook = if kind == ModelKind::Vae {
            None
        } else {
            let cb = Codebook::init(cfg.k, cfg.d_b, codebook_unit_norm, &mut rng)?;
            Some(store.register_with(
                "codebook",
                cb.entries,
                vec![cfg.k, cfg.d_b],
                !kind.uses_ema(),
            ))
        };

        // Trainable scales, all initialized at ln(1) = 0.
        let log_sigma2 = match kind {
            ModelKind::GaussianSqvaeI
            | ModelKind::GaussianSqvaeII
            | ModelKind::GaussianSqvaeIII
            | ModelKind::GaussianSqvaeIV
            | ModelKind::FixedSigmaQ => Some(store.register("log_sigma2", vec![0.0], vec![1])),
            ModelKind::Vae if !categorical => {
                Some(store.register("log_sigma2", vec![0.0], vec![1]))
            }
            _ => None,
        };
        let log_kappa = match kind {
            ModelKind::VmfSqvae => Some(store.register("log_kappa", vec![0.0], vec![1])),
            _ => None,
        };
        let log_scale_phi = match kind {
            // The naive-categorical variant keeps the Gaussian latent
            // machinery (type I), so it still trains its own spread.
            ModelKind::GaussianSqvaeI | ModelKind::NcSqvae => {
                Some(store.register("log_sigma_phi2", vec![0.0], vec![1]))
            }
            ModelKind::VmfSqvae => Some(store.register("log_kappa_phi", vec![0.0], vec![1])),
            _ => None,
        };

        Ok(Model {
            kind,
            store,
            encoder,
            decoder,
            codebook,
            codebook_unit_norm,
            log_sigma2,
            log_kappa,
            log_scale_phi,
            projection,
            data_dim: d,
            classes: ds.classes,
            d_z: cfg.d_z,
            d_b: cfg.d_b,
            k: cfg.k,
        })
    }

    fn codebook_node(&self, binding: &Binding) -> Tensor {
        binding.node(self.codebook.expect("model has a codebook"))
    }
}

// ── training state ─────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: Model,
    pub adam: AdamState,
    pub sched: PlateauSchedule,
    pub usage: UsageStats,
    pub epoch: u64,
    pub global_step: u64,
}

impl TrainState {
    pub fn new(cfg: TrainConfig, ds: &Dataset) -> Result<TrainState> {
        let cfg = cfg.validated()?;
        let model = Model::build(&cfg, ds)?;
        let adam = AdamState::new(&model.store);
        let sched = PlateauSchedule::new(cfg.lr.unwrap());
        let usage = UsageStats::new(cfg.k, cfg.d_b);
        Ok(TrainState { config: cfg, model, adam, sched, usage, epoch: 0, global_step: 0 })
    }
}

/// Mean loss terms and diagnostics of one optimizer step (batch means).
#[derive(Debug, Clone, Copy)]
pub struct StepMetrics {
    pub loss_total: f64,
    pub reconstruction: f64,
    pub regularization: f64,
    pub neg_entropy: f64,
    pub decoder_variance_term: f64,
    pub constant: f64,
    /// Per-position posterior entropy, batch mean; absent for the plain VAE.
    pub mean_entropy: Option<f64>,
    pub tau: f64,
}

enum Target {
    Continuous { x: Tensor },
    Categorical { labels: Vec<usize>, v: Option<Tensor> },
}

struct BatchInput {
    enc_in: Tensor,
    target: Target,
    batch: usize,
}

fn assemble_batch(model: &Model, ds: &Dataset, idx: &[usize], tape: &mut Tape) -> Result<BatchInput> {
    let batch = idx.len();
    let d = model.data_dim;
    if ds.is_categorical() {
        let labels = ds.categorical_rows(idx)?;
        match &model.projection {
            Some(proj) => {
                let v_data = proj.project(&labels)?;
                let v = tape.constant(v_data, vec![batch * d, proj.f_dim]);
                let enc_in = tape.reshape(v, vec![batch, d * proj.f_dim])?;
                Ok(BatchInput { enc_in, target: Target::Categorical { labels, v: Some(v) }, batch })
            }
            None => {
                let classes = model.classes;
                let mut one_hot = vec![0.0; batch * d * classes];
                for (pos, &c) in labels.iter().enumerate() {
                    one_hot[pos * classes + c] = 1.0;
                }
                let enc_in = tape.constant(one_hot, vec![batch, d * classes]);
                Ok(BatchInput { enc_in, target: Target::Categorical { labels, v: None }, batch })
            }
        }
    } else {
        let rows = ds.continuous_rows(idx)?;
        let x = tape.constant(rows, vec![batch, d]);
        Ok(BatchInput { enc_in: x, target: Target::Continuous { x }, batch })
    }
}

fn build_variance(
    model: &Model,
    tape: &mut Tape,
    binding: &Binding,
    head: Option<Tensor>,
    batch: usize,
    sigma_q2: f64,
) -> Result<Option<Variance>> {
    let v = match model.kind {
        ModelKind::GaussianSqvaeI | ModelKind::NcSqvae => {
            Some(Variance::TypeI { log_var: binding.node(model.log_scale_phi.unwrap()) })
        }
        ModelKind::GaussianSqvaeII => {
            Some(Variance::TypeII { log_var: head.unwrap(), d_z: model.d_z })
        }
        ModelKind::GaussianSqvaeIII => {
            let h = tape.reshape(head.unwrap(), vec![batch * model.d_z, 1])?;
            Some(Variance::TypeIII { log_var: h })
        }
        ModelKind::GaussianSqvaeIV => {
            let h = tape.reshape(head.unwrap(), vec![batch * model.d_z, model.d_b])?;
            Some(Variance::TypeIV { log_var: h })
        }
        ModelKind::FixedSigmaQ => Some(Variance::FixedSigmaQ { sigma_q2 }),
        ModelKind::VmfSqvae => {
            Some(Variance::VmfKappa { log_kappa: binding.node(model.log_scale_phi.unwrap()) })
        }
        _ => None,
    };
    Ok(v)
}

struct ForwardOutcome {
    loss: Tensor,
    metrics: StepMetrics,
    /// Hard code per latent row, for usage accounting.
    hard_indices: Option<Vec<usize>>,
    /// Encoder latent values, for EMA updates.
    latent_values: Option<Vec<f64>>,
}

/// Build the forward graph and the loss for one batch. `stochastic` draws
/// the Gumbel (and reparameterization) noise; evaluation passes use the
/// hard assignment instead.
fn forward_loss(
    model: &Model,
    cfg: &TrainConfig,
    tape: &mut Tape,
    binding: &Binding,
    input: &BatchInput,
    tau: f64,
    noise: Option<(&mut Rng, &mut Rng)>,
) -> Result<ForwardOutcome> {
    let batch = input.batch;
    let enc_out = model.encoder.forward(tape, binding, input.enc_in)?;
    let zhat = enc_out.latents;

    match model.kind {
        ModelKind::GaussianSqvaeI
        | ModelKind::GaussianSqvaeII
        | ModelKind::GaussianSqvaeIII
        | ModelKind::GaussianSqvaeIV
        | ModelKind::FixedSigmaQ
        | ModelKind::VmfSqvae
        | ModelKind::NcSqvae => {
            let var = build_variance(model, tape, binding, enc_out.head, batch, cfg.sigma_q2)?
                .expect("stochastic kinds carry a variance");
            let codes = model.codebook_node(binding);
            let probs = quantizer::quantize_probs(tape, zhat, codes, &var)?;
            let (code, hard_indices) = match noise {
                Some((gumbel_rng, _)) => {
                    let y = quantizer::gumbel_softmax_sample(tape, probs, tau, gumbel_rng)?;
                    let code = tape.matmul(y, codes)?;
                    let hard = quantizer::argmax_rows(tape.value(probs), model.k);
                    (code, hard)
                }
                None => {
                    let hq = quantizer::deterministic_quantize(tape, zhat, codes)?;
                    (hq.codes, hq.indices)
                }
            };
            let ent = quantizer::analytic_entropy(tape, probs)?;
            let mean_entropy = tape.item(ent.mean);
            let quant = QuantTerms { probs, code, entropy_total: ent.total };
            let zq_flat = tape.reshape(code, vec![batch, model.d_z * model.d_b])?;
            let decoded = model.decoder.forward(tape, binding, zq_flat)?;

            let (loss, bd) = match (&input.target, model.kind) {
                (Target::Continuous { x }, _) => {
                    let log_sigma2 = binding.node(model.log_sigma2.unwrap());
                    objectives::gaussian_sq_loss(tape, *x, zhat, &quant, decoded, &var, log_sigma2)?
                }
                (Target::Categorical { v: Some(v), .. }, ModelKind::VmfSqvae) => {
                    let log_kappa = binding.node(model.log_kappa.unwrap());
                    objectives::vmf_sq_loss(
                        tape,
                        *v,
                        zhat,
                        &quant,
                        decoded,
                        log_kappa,
                        &var,
                        batch,
                        cfg.normalizer_per_pixel,
                    )?
                }
                (Target::Categorical { labels, .. }, _) => {
                    objectives::nc_sq_loss(tape, labels, zhat, &quant, decoded, &var, batch)?
                }
            };
            Ok(ForwardOutcome {
                loss,
                metrics: StepMetrics {
                    loss_total: bd.total,
                    reconstruction: bd.reconstruction,
                    regularization: bd.regularization,
                    neg_entropy: bd.neg_entropy,
                    decoder_variance_term: bd.decoder_variance_term,
                    constant: bd.constant,
                    mean_entropy: Some(mean_entropy),
                    tau,
                },
                hard_indices: Some(hard_indices),
                latent_values: Some(tape.value(zhat).to_vec()),
            })
        }

        ModelKind::Vqvae | ModelKind::VqvaeEma | ModelKind::VqvaeEmaReset => {
            let codes = model.codebook_node(binding);
            let hq = quantizer::deterministic_quantize(tape, zhat, codes)?;
            let zq_flat =
                tape.reshape(hq.straight_through, vec![batch, model.d_z * model.d_b])?;
            let decoded = model.decoder.forward(tape, binding, zq_flat)?;
            let include_dictionary = !model.kind.uses_ema();

            let (loss, recon, dict, commit) = match &input.target {
                Target::Continuous { x } => {
                    let (loss, bd) = objectives::vq_loss(
                        tape,
                        *x,
                        zhat,
                        hq.codes,
                        decoded,
                        cfg.beta,
                        cfg.vq_sigma2,
                        include_dictionary,
                    )?;
                    (loss, bd.reconstruction, bd.dictionary, bd.commitment)
                }
                Target::Categorical { labels, .. } => {
                    let ce = objectives::cross_entropy_sum(tape, decoded, labels, model.classes)?;
                    let recon = tape.scale(ce, 1.0 / batch as f64)?;
                    let (latent, dict, commit) = objectives::vq_latent_terms(
                        tape,
                        zhat,
                        hq.codes,
                        cfg.beta,
                        include_dictionary,
                        batch,
                    )?;
                    let loss = tape.add(recon, latent)?;
                    (loss, tape.item(recon), dict, commit)
                }
            };
            let reg = if include_dictionary { dict + commit } else { commit };
            Ok(ForwardOutcome {
                loss,
                metrics: StepMetrics {
                    loss_total: tape.item(loss),
                    reconstruction: recon,
                    regularization: reg,
                    neg_entropy: 0.0,
                    decoder_variance_term: 0.0,
                    constant: 0.0,
                    mean_entropy: Some(0.0),
                    tau,
                },
                hard_indices: Some(hq.indices),
                latent_values: Some(tape.value(zhat).to_vec()),
            })
        }

        ModelKind::Vae => {
            let latent_dim = model.d_z * model.d_b;
            let mu = tape.reshape(zhat, vec![batch, latent_dim])?;
            let log_s2 = enc_out.head.expect("vae encoder has a log-variance head");
            let z = match noise {
                Some((_, eps_rng)) => {
                    let eps: Vec<f64> =
                        (0..batch * latent_dim).map(|_| eps_rng.normal()).collect();
                    let eps = tape.constant(eps, vec![batch, latent_dim]);
                    let half = tape.scale(log_s2, 0.5)?;
                    let sd = tape.exp(half)?;
                    let noise = tape.mul(sd, eps)?;
                    tape.add(mu, noise)?
                }
                None => mu,
            };
            let decoded = model.decoder.forward(tape, binding, z)?;
            let (loss, bd) = match &input.target {
                Target::Continuous { x } => {
                    let log_sigma2 = binding.node(model.log_sigma2.unwrap());
                    objectives::vae_loss(tape, *x, mu, log_s2, decoded, log_sigma2)?
                }
                Target::Categorical { labels, .. } => {
                    // Categorical decoder: cross-entropy plus the closed-form KL.
                    let ce = objectives::cross_entropy_sum(tape, decoded, labels, model.classes)?;
                    let recon = tape.scale(ce, 1.0 / batch as f64)?;
                    let mu_sq = tape.sqnorm(mu)?;
                    let s2 = tape.exp(log_s2)?;
                    let s2_sum = tape.sum(s2)?;
                    let ls_sum = tape.sum(log_s2)?;
                    let a = tape.add(mu_sq, s2_sum)?;
                    let b = tape.sub(a, ls_sum)?;
                    let c = tape.add_scalar(b, -((batch * latent_dim) as f64))?;
                    let kl = tape.scale(c, 0.5 / batch as f64)?;
                    let loss = tape.add(recon, kl)?;
                    let bd = objectives::ElboBreakdown {
                        reconstruction: tape.item(recon),
                        regularization: tape.item(kl),
                        neg_entropy: 0.0,
                        decoder_variance_term: 0.0,
                        constant: 0.0,
                        total: tape.item(loss),
                    };
                    (loss, bd)
                }
            };
            Ok(ForwardOutcome {
                loss,
                metrics: StepMetrics {
                    loss_total: bd.total,
                    reconstruction: bd.reconstruction,
                    regularization: bd.regularization,
                    neg_entropy: bd.neg_entropy,
                    decoder_variance_term: bd.decoder_variance_term,
                    constant: bd.constant,
                    mean_entropy: None,
                    tau,
                },
                hard_indices: None,
                latent_values: None,
            })
        }
    }
}

/// Batches accumulated per reset window.
pub const RESET_WINDOW_BATCHES: usize = 20;

/// One optimizer step: forward, backward, clip, Adam, then the codebook
/// side effects (EMA update, reset window) for the kinds that use them.
pub fn train_step(state: &mut TrainState, ds: &Dataset, idx: &[usize]) -> Result<StepMetrics> {
    let step = state.global_step;
    run_step(state, ds, idx).map_err(|e| Error::AtStep { step, source: Box::new(e) })
}

fn run_step(state: &mut TrainState, ds: &Dataset, idx: &[usize]) -> Result<StepMetrics> {
    let cfg = state.config.clone();
    let tau = quantizer::temperature(state.global_step, &cfg.temperature);
    let mut gumbel_rng = Rng::stream(cfg.seed, Stream::Gumbel, state.global_step);
    let mut eps_rng = Rng::stream(cfg.seed, Stream::Noise, state.global_step);

    let mut tape = Tape::new();
    let binding = state.model.store.bind(&mut tape);
    let input = assemble_batch(&state.model, ds, idx, &mut tape)?;
    let outcome = forward_loss(
        &state.model,
        &cfg,
        &mut tape,
        &binding,
        &input,
        tau,
        Some((&mut gumbel_rng, &mut eps_rng)),
    )?;

    let grads = tape.backward(outcome.loss)?;
    let grad_norm = global_grad_norm(&state.model.store, &binding, &grads);
    let grad_scale = if cfg.clip_norm > 0.0 && grad_norm > cfg.clip_norm {
        cfg.clip_norm / grad_norm
    } else {
        1.0
    };
    adam_update(
        &mut state.model.store,
        &binding,
        &grads,
        &mut state.adam,
        state.sched.lr,
        grad_scale,
    );

    if let Some(cb) = state.model.codebook {
        if state.model.kind.uses_ema() {
            let indices = outcome.hard_indices.as_ref().expect("vq kinds assign codes");
            let latents = outcome.latent_values.as_ref().expect("vq kinds keep latents");
            codebook::ema_update(
                state.model.store.data_mut(cb),
                &mut state.usage,
                latents,
                indices,
                cfg.gamma,
                state.model.d_b,
            )?;
        }
        if state.model.kind.uses_reset() {
            let indices = outcome.hard_indices.as_ref().expect("vq kinds assign codes");
            for &i in indices {
                state.usage.window_counts[i] += 1;
            }
            state.usage.window_batches += 1;
            if state.usage.window_batches >= RESET_WINDOW_BATCHES {
                let mut reset_rng = Rng::stream(cfg.seed, Stream::Reset, state.global_step);
                codebook::codebook_reset(
                    state.model.store.data_mut(cb),
                    &state.usage.window_counts,
                    state.model.d_b,
                    &mut reset_rng,
                );
                state.usage.window_counts.fill(0);
                state.usage.window_batches = 0;
            }
        }
        if state.model.codebook_unit_norm {
            codebook::renormalize_rows(state.model.store.data_mut(cb), state.model.d_b);
        }
    }

    state.global_step += 1;
    Ok(outcome.metrics)
}

// ── evaluation ─────────────────────────────────────────────────────────

/// Deterministic metrics over a split: hard-assignment quantization and
/// deterministic decoding throughout.
#[derive(Debug, Clone, Copy)]
pub struct EvalMetrics {
    pub n: usize,
    /// Deterministic objective value (mean per sample); drives the
    /// learning-rate schedule when computed on the validation split.
    pub loss: f64,
    pub mse: Option<f64>,
    pub pixel_error: Option<f64>,
    pub miou: Option<f64>,
    pub perplexity: Option<f64>,
    pub mean_entropy: Option<f64>,
    pub sigma2: Option<f64>,
    pub sigma2_phi: Option<f64>,
    pub kappa: Option<f64>,
    pub kappa_phi: Option<f64>,
}

const EVAL_CHUNK: usize = 256;

pub fn evaluate(state: &TrainState, ds: &Dataset, split: Split) -> Result<EvalMetrics> {
    let model = &state.model;
    let cfg = &state.config;
    let idx = ds.split(split);
    if idx.is_empty() {
        return Err(Error::Contract(format!("split {split:?} is empty")));
    }
    let n = idx.len();

    let mut loss_weighted = 0.0;
    let mut sq_err_sum = 0.0;
    let mut sq_err_count = 0usize;
    let mut wrong_pixels = 0usize;
    let mut pixel_count = 0usize;
    let mut intersection = vec![0usize; model.classes.max(1)];
    let mut union = vec![0usize; model.classes.max(1)];
    let mut code_counts = vec![0u64; model.k.max(1)];
    let mut entropy_sum = 0.0;
    let mut entropy_rows = 0usize;
    let mut head_var_sum = 0.0;
    let mut head_var_count = 0usize;

    for chunk in idx.chunks(EVAL_CHUNK) {
        let mut tape = Tape::new();
        let binding = model.store.bind_frozen(&mut tape);
        let input = assemble_batch(model, ds, chunk, &mut tape)?;
        let outcome = forward_loss(model, cfg, &mut tape, &binding, &input, 1.0, None)?;
        loss_weighted += outcome.metrics.loss_total * chunk.len() as f64;
        if let Some(me) = outcome.metrics.mean_entropy {
            entropy_sum += me * (chunk.len() * model.d_z) as f64;
            entropy_rows += chunk.len() * model.d_z;
        }
        if let Some(hard) = &outcome.hard_indices {
            for &c in hard {
                code_counts[c] += 1;
            }
        }

        // Reconstruction metrics need the decoded output; rebuild the
        // decode path from the values already on the tape would be wasted
        // work, so the forward pass is repeated in prediction form below.
        let preds = predict_chunk(model, cfg, &mut tape, &binding, &input)?;
        match (&input.target, preds) {
            (Target::Continuous { x }, Prediction::Continuous(mean)) => {
                let xv = tape.value(*x);
                sq_err_sum += xv
                    .iter()
                    .zip(&mean)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
                sq_err_count += xv.len();
            }
            (Target::Categorical { labels, .. }, Prediction::Classes(pred)) => {
                for (&l, &p) in labels.iter().zip(&pred) {
                    if l == p {
                        intersection[l] += 1;
                        union[l] += 1;
                    } else {
                        union[l] += 1;
                        union[p] += 1;
                        wrong_pixels += 1;
                    }
                }
                pixel_count += labels.len();
            }
            _ => unreachable!("prediction kind follows the dataset kind"),
        }

        if let Some((_, _)) = model.encoder.var_head.as_ref().map(|h| (h, ())) {
            if model.kind != ModelKind::Vae {
                let enc_out = model.encoder.forward(&mut tape, &binding, input.enc_in)?;
                if let Some(head) = enc_out.head {
                    for &lv in tape.value(head) {
                        head_var_sum += lv.exp();
                        head_var_count += 1;
                    }
                }
            }
        }
    }

    let value_of = |id: Option<ParamId>| id.map(|p| model.store.data(p)[0].exp());
    let (sigma2, kappa, sigma2_phi, kappa_phi);
    match model.kind {
        ModelKind::VmfSqvae => {
            sigma2 = None;
            kappa = value_of(model.log_kappa);
            sigma2_phi = None;
            kappa_phi = value_of(model.log_scale_phi);
        }
        ModelKind::FixedSigmaQ => {
            sigma2 = value_of(model.log_sigma2);
            kappa = None;
            sigma2_phi = Some(cfg.sigma_q2);
            kappa_phi = None;
        }
        ModelKind::Vqvae | ModelKind::VqvaeEma | ModelKind::VqvaeEmaReset => {
            sigma2 = if ds.is_categorical() { None } else { Some(cfg.vq_sigma2) };
            kappa = None;
            sigma2_phi = None;
            kappa_phi = None;
        }
        _ => {
            sigma2 = value_of(model.log_sigma2);
            kappa = None;
            sigma2_phi = if head_var_count > 0 {
                Some(head_var_sum / head_var_count as f64)
            } else {
                value_of(model.log_scale_phi)
            };
            kappa_phi = None;
        }
    }

    let quantizes = model.kind != ModelKind::Vae;
    Ok(EvalMetrics {
        n,
        loss: loss_weighted / n as f64,
        mse: (sq_err_count > 0).then(|| sq_err_sum / sq_err_count as f64),
        pixel_error: (pixel_count > 0).then(|| 100.0 * wrong_pixels as f64 / pixel_count as f64),
        miou: (pixel_count > 0).then(|| {
            let mut total = 0.0;
            let mut present = 0usize;
            for c in 0..model.classes {
                if union[c] > 0 {
                    total += intersection[c] as f64 / union[c] as f64;
                    present += 1;
                }
            }
            total / present.max(1) as f64
        }),
        perplexity: if quantizes { Some(codebook::perplexity(&code_counts)?) } else { None },
        mean_entropy: (entropy_rows > 0).then(|| entropy_sum / entropy_rows as f64),
        sigma2,
        sigma2_phi,
        kappa,
        kappa_phi,
    })
}

enum Prediction {
    Continuous(Vec<f64>),
    Classes(Vec<usize>),
}

/// Deterministic reconstruction for metric purposes: hard codes through
/// the decoder, class argmax for categorical outputs.
fn predict_chunk(
    model: &Model,
    _cfg: &TrainConfig,
    tape: &mut Tape,
    binding: &Binding,
    input: &BatchInput,
) -> Result<Prediction> {
    let batch = input.batch;
    let enc_out = model.encoder.forward(tape, binding, input.enc_in)?;
    let code_flat = if model.kind == ModelKind::Vae {
        tape.reshape(enc_out.latents, vec![batch, model.d_z * model.d_b])?
    } else {
        let codes = model.codebook_node(binding);
        let hq = quantizer::deterministic_quantize(tape, enc_out.latents, codes)?;
        tape.reshape(hq.codes, vec![batch, model.d_z * model.d_b])?
    };
    let decoded = model.decoder.forward(tape, binding, code_flat)?;
    match model.decoder.kind {
        DecoderKind::GaussianMean { .. } => Ok(Prediction::Continuous(tape.value(decoded).to_vec())),
        DecoderKind::Logits { classes, .. } => {
            Ok(Prediction::Classes(quantizer::argmax_rows(tape.value(decoded), classes)))
        }
        DecoderKind::Spherical { .. } => {
            let proj = model.projection.as_ref().expect("spherical decoder has projections");
            let preds = tape
                .value(decoded)
                .chunks(proj.f_dim)
                .map(|row| proj.nearest_class(row))
                .collect();
            Ok(Prediction::Classes(preds))
        }
    }
}

// ── epoch driver ───────────────────────────────────────────────────────

/// Run epochs from `state.epoch` up to the configured total. `on_row` sees
/// every emitted row; the flag marks end-of-epoch rows (the others are
/// per-step rows, present only with `log_every_step`).
pub fn run_epochs(
    state: &mut TrainState,
    ds: &Dataset,
    run_id: &str,
    mut on_row: impl FnMut(&TrainState, &MetricRow, bool) -> Result<()>,
) -> Result<()> {
    while state.epoch < state.config.epochs {
        let epoch = state.epoch;
        let batch_list =
            data::batches(ds, Split::Train, state.config.batch_size, state.config.seed, epoch)?;
        let mut sums = [0.0f64; 6];
        let mut entropy_sum = 0.0;
        let mut entropy_steps = 0usize;
        let mut steps = 0usize;
        let mut last_tau = quantizer::temperature(state.global_step, &state.config.temperature);
        for batch in &batch_list {
            let m = train_step(state, ds, batch)?;
            sums[0] += m.loss_total;
            sums[1] += m.reconstruction;
            sums[2] += m.regularization;
            sums[3] += m.neg_entropy;
            sums[4] += m.decoder_variance_term;
            sums[5] += m.constant;
            if let Some(me) = m.mean_entropy {
                entropy_sum += me;
                entropy_steps += 1;
            }
            steps += 1;
            last_tau = m.tau;
            if state.config.log_every_step {
                let row = MetricRow {
                    run_id: run_id.to_string(),
                    epoch,
                    step: state.global_step,
                    loss_total: m.loss_total,
                    loss_recon: m.reconstruction,
                    loss_reg: m.regularization,
                    loss_negent: m.neg_entropy,
                    loss_decvar: m.decoder_variance_term,
                    loss_const: m.constant,
                    val_loss: None,
                    sigma2: None,
                    sigma2_phi: None,
                    kappa: None,
                    kappa_phi: None,
                    perplexity: None,
                    mean_entropy: m.mean_entropy,
                    test_mse: None,
                    pixel_error: None,
                    miou: None,
                    tau: m.tau,
                };
                on_row(state, &row, false)?;
            }
        }
        let inv = 1.0 / steps as f64;

        let val = evaluate(state, ds, Split::Val)?;
        state.sched.epoch_end(val.loss);
        let test = evaluate(state, ds, Split::Test)?;

        state.epoch += 1;
        let row = MetricRow {
            run_id: run_id.to_string(),
            epoch,
            step: state.global_step,
            loss_total: sums[0] * inv,
            loss_recon: sums[1] * inv,
            loss_reg: sums[2] * inv,
            loss_negent: sums[3] * inv,
            loss_decvar: sums[4] * inv,
            loss_const: sums[5] * inv,
            val_loss: Some(val.loss),
            sigma2: test.sigma2,
            sigma2_phi: test.sigma2_phi,
            kappa: test.kappa,
            kappa_phi: test.kappa_phi,
            perplexity: test.perplexity,
            mean_entropy: (entropy_steps > 0).then(|| entropy_sum / entropy_steps as f64),
            test_mse: test.mse,
            pixel_error: test.pixel_error,
            miou: test.miou,
            tau: last_tau,
        };
        on_row(state, &row, true)?;
    }
    Ok(())
}

/// Convenience driver used by tests and sweeps: fresh state, all epochs,
/// rows collected in memory.
pub fn train_full(cfg: TrainConfig, run_id: &str) -> Result<(TrainState, Dataset, Vec<MetricRow>)> {
    let ds = cfg.dataset.load()?;
    let mut state = TrainState::new(cfg, &ds)?;
    let mut rows = Vec::new();
    run_epochs(&mut state, &ds, run_id, |_, row, end| {
        if end {
            rows.push(row.clone());
        }
        Ok(())
    })?;
    Ok((state, ds, rows))
}

pub use metrics::METRIC_COLUMNS;
