//! Fully-connected encoder/decoder pairs at desk scale, the variance and
//! concentration heads that ride on the encoder trunk, and the projection
//! of categorical data onto the unit hypersphere.

use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};
use crate::{Error, Result};

// ── trainable parameter storage ────────────────────────────────────────

/// Handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
    /// False for buffers managed outside the gradient optimizer
    /// (the EMA-updated codebook).
    pub optimize: bool,
}

/// Named parameter buffers with a stable registration order; the order
/// drives initialization draws, optimizer state layout, and checkpoints.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, data: Vec<f64>, shape: Vec<usize>) -> ParamId {
        self.register_with(name, data, shape, true)
    }

    pub fn register_with(
        &mut self,
        name: impl Into<String>,
        data: Vec<f64>,
        shape: Vec<usize>,
        optimize: bool,
    ) -> ParamId {
        assert_eq!(data.len(), shape.iter().product::<usize>());
        self.entries.push(ParamEntry { name: name.into(), data, shape, optimize });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn data(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].data
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id.0].data
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Create one leaf per entry on a fresh tape. Entries flagged
    /// `optimize` track gradients.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        let nodes = self
            .entries
            .iter()
            .map(|e| tape.leaf(e.data.clone(), e.shape.clone(), e.optimize))
            .collect();
        Binding { nodes }
    }

    /// Leaves without gradient tracking, for evaluation passes.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Binding {
        let nodes = self
            .entries
            .iter()
            .map(|e| tape.leaf(e.data.clone(), e.shape.clone(), false))
            .collect();
        Binding { nodes }
    }
}

/// Tape leaves for every parameter of one forward/backward pass.
pub struct Binding {
    nodes: Vec<Tensor>,
}

impl Binding {
    pub fn node(&self, id: ParamId) -> Tensor {
        self.nodes[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = Tensor> + '_ {
        self.nodes.iter().copied()
    }
}

// ── multi-layer perceptrons ────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputActivation {
    Identity,
    Sigmoid,
    /// relu on the final layer too — used for trunks feeding further heads.
    Relu,
    /// Rows scaled to unit norm. Callers that normalize per sub-vector
    /// (spherical latents) reshape first and use `Identity` here.
    RowL2Normalize,
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

/// relu hidden layers, configurable output activation.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub dims: Vec<usize>,
    pub output: OutputActivation,
}

impl Mlp {
    /// Weight init: N(0, 2/fan_in) for layers followed by relu,
    /// N(0, 1/fan_in) for the output layer; biases zero.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        dims: &[usize],
        output: OutputActivation,
        rng: &mut Rng,
    ) -> Mlp {
        assert!(dims.len() >= 2, "mlp needs at least one layer");
        let mut layers = Vec::new();
        for l in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let relu_follows = l + 2 < dims.len() || output == OutputActivation::Relu;
            let sd = if relu_follows {
                (2.0 / fan_in as f64).sqrt()
            } else {
                (1.0 / fan_in as f64).sqrt()
            };
            let w: Vec<f64> = (0..fan_in * fan_out).map(|_| sd * rng.normal()).collect();
            let w = store.register(format!("{prefix}.w{l}"), w, vec![fan_in, fan_out]);
            let b = store.register(format!("{prefix}.b{l}"), vec![0.0; fan_out], vec![1, fan_out]);
            layers.push(Linear { w, b });
        }
        Mlp { layers, dims: dims.to_vec(), output }
    }

    /// `x` is `[batch, dims[0]]`; returns `[batch, dims.last()]`.
    pub fn forward(&self, tape: &mut Tape, binding: &Binding, x: Tensor) -> Result<Tensor> {
        let batch = tape.shape(x)[0];
        let mut h = x;
        for (l, layer) in self.layers.iter().enumerate() {
            let z = tape.matmul(h, binding.node(layer.w))?;
            let bias = tape.broadcast_row(binding.node(layer.b), batch)?;
            let z = tape.add(z, bias)?;
            let last = l + 1 == self.layers.len();
            h = if !last {
                tape.relu(z)?
            } else {
                match self.output {
                    OutputActivation::Identity => z,
                    OutputActivation::Sigmoid => tape.sigmoid(z)?,
                    OutputActivation::Relu => tape.relu(z)?,
                    OutputActivation::RowL2Normalize => tape.row_l2_normalize(z)?,
                }
            };
        }
        Ok(h)
    }
}

// ── encoder with optional variance head ────────────────────────────────

/// Shape of the variance head riding on the encoder trunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// One log-variance per sample.
    PerSample,
    /// One log-variance per latent position: `[batch, d_z]`.
    PerPosition,
    /// A log-variance per position and dimension: `[batch, d_z*d_b]`.
    PerPositionDim,
}

impl HeadKind {
    pub fn out_dim(&self, d_z: usize, d_b: usize) -> usize {
        match self {
            HeadKind::PerSample => 1,
            HeadKind::PerPosition => d_z,
            HeadKind::PerPositionDim => d_z * d_b,
        }
    }
}

/// Deterministic encoder `x -> Zhat_q` plus the optional head emitting
/// log-variances. The trunk is shared between the mean and the head.
#[derive(Debug, Clone)]
pub struct EncoderNet {
    pub trunk: Mlp,
    pub mean_head: Mlp,
    pub var_head: Option<(HeadKind, Mlp)>,
    pub d_z: usize,
    pub d_b: usize,
    /// Normalize each d_b-dimensional latent position onto the sphere.
    pub spherical: bool,
}

pub struct EncoderOutput {
    /// `[batch*d_z, d_b]` latent rows.
    pub latents: Tensor,
    /// Raw head output `[batch, head_dim]` when a head is configured.
    pub head: Option<Tensor>,
}

impl EncoderNet {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden: &[usize],
        d_z: usize,
        d_b: usize,
        head: Option<HeadKind>,
        spherical: bool,
        rng: &mut Rng,
    ) -> EncoderNet {
        let mut trunk_dims = vec![input_dim];
        trunk_dims.extend_from_slice(hidden);
        let trunk =
            Mlp::init(store, &format!("{prefix}.trunk"), &trunk_dims, OutputActivation::Relu, rng);
        let feat = *trunk_dims.last().unwrap();
        let mean_head = Mlp::init(
            store,
            &format!("{prefix}.mean"),
            &[feat, d_z * d_b],
            OutputActivation::Identity,
            rng,
        );
        let var_head = head.map(|kind| {
            let mlp = Mlp::init(
                store,
                &format!("{prefix}.var"),
                &[feat, kind.out_dim(d_z, d_b)],
                OutputActivation::Identity,
                rng,
            );
            (kind, mlp)
        });
        EncoderNet { trunk, mean_head, var_head, d_z, d_b, spherical }
    }

    pub fn forward(&self, tape: &mut Tape, binding: &Binding, x: Tensor) -> Result<EncoderOutput> {
        let batch = tape.shape(x)[0];
        let feat = self.trunk.forward(tape, binding, x)?;
        let mean = self.mean_head.forward(tape, binding, feat)?;
        let latents = tape.reshape(mean, vec![batch * self.d_z, self.d_b])?;
        let latents = if self.spherical { tape.row_l2_normalize(latents)? } else { latents };
        let head = match &self.var_head {
            Some((_, mlp)) => Some(mlp.forward(tape, binding, feat)?),
            None => None,
        };
        Ok(EncoderOutput { latents, head })
    }
}

// ── decoders ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderKind {
    /// Pixel means in (0, 1): sigmoid over `[batch, D]`.
    GaussianMean { d: usize },
    /// Class logits `[batch, D*classes]`, reshaped to `[batch*D, classes]`.
    Logits { d: usize, classes: usize },
    /// Unit directions: `[batch, D*F]` reshaped to `[batch*D, F]` rows on
    /// the sphere.
    Spherical { d: usize, f_dim: usize },
}

#[derive(Debug, Clone)]
pub struct DecoderNet {
    pub net: Mlp,
    pub kind: DecoderKind,
}

impl DecoderNet {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        latent_dim: usize,
        hidden: &[usize],
        kind: DecoderKind,
        rng: &mut Rng,
    ) -> DecoderNet {
        let (out_dim, act) = match kind {
            DecoderKind::GaussianMean { d } => (d, OutputActivation::Sigmoid),
            DecoderKind::Logits { d, classes } => (d * classes, OutputActivation::Identity),
            DecoderKind::Spherical { d, f_dim } => (d * f_dim, OutputActivation::Identity),
        };
        let mut dims = vec![latent_dim];
        dims.extend_from_slice(hidden);
        dims.push(out_dim);
        let net = Mlp::init(store, prefix, &dims, act, rng);
        DecoderNet { net, kind }
    }

    /// `z_q` is `[batch, latent_dim]`.
    pub fn forward(&self, tape: &mut Tape, binding: &Binding, z_q: Tensor) -> Result<Tensor> {
        let batch = tape.shape(z_q)[0];
        let out = self.net.forward(tape, binding, z_q)?;
        match self.kind {
            DecoderKind::GaussianMean { .. } => Ok(out),
            DecoderKind::Logits { d, classes } => tape.reshape(out, vec![batch * d, classes]),
            DecoderKind::Spherical { d, f_dim } => {
                let rows = tape.reshape(out, vec![batch * d, f_dim])?;
                tape.row_l2_normalize(rows)
            }
        }
    }
}

/// Class probabilities of a spherical decoder output:
/// `softmax_c(kappa * w_c . f_d)` for every decoded direction row.
pub fn vmf_class_probs(
    tape: &mut Tape,
    directions: Tensor,
    proj: &CategoryProjection,
    kappa: Tensor,
) -> Result<Tensor> {
    let w = tape.constant(proj.w.clone(), vec![proj.classes, proj.f_dim]);
    let wt = tape.transpose(w)?;
    let sim = tape.matmul(directions, wt)?;
    let scaled = tape.scale_by(sim, kappa)?;
    tape.row_softmax(scaled)
}

// ── category projections ───────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMode {
    OneHot,
    Circle,
}

/// Fixed unit vectors placing the data categories on the sphere S^{F-1}.
#[derive(Debug, Clone)]
pub struct CategoryProjection {
    /// `classes × F`, unit rows.
    pub w: Vec<f64>,
    pub classes: usize,
    pub f_dim: usize,
    pub mode: ProjectionMode,
}

impl CategoryProjection {
    pub fn new(mode: ProjectionMode, classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Contract(format!("need at least 2 classes, got {classes}")));
        }
        match mode {
            ProjectionMode::OneHot => {
                let f_dim = classes;
                let mut w = vec![0.0; classes * f_dim];
                for c in 0..classes {
                    w[c * f_dim + c] = 1.0;
                }
                Ok(CategoryProjection { w, classes, f_dim, mode })
            }
            ProjectionMode::Circle => {
                // Half-circle placement preserving ordinal adjacency:
                // alpha_c = pi c / L for class values c in [0, L).
                let f_dim = 2;
                let mut w = Vec::with_capacity(classes * 2);
                for c in 0..classes {
                    let alpha = std::f64::consts::PI * c as f64 / classes as f64;
                    w.push(alpha.cos());
                    w.push(alpha.sin());
                }
                Ok(CategoryProjection { w, classes, f_dim, mode })
            }
        }
    }

    pub fn class_vector(&self, c: usize) -> &[f64] {
        &self.w[c * self.f_dim..(c + 1) * self.f_dim]
    }

    /// Rows `v_d = w_{x_d}` for a categorical sample.
    pub fn project(&self, labels: &[usize]) -> Result<Vec<f64>> {
        let mut v = Vec::with_capacity(labels.len() * self.f_dim);
        for &l in labels {
            if l >= self.classes {
                return Err(Error::Contract(format!(
                    "class {l} out of range for {} categories",
                    self.classes
                )));
            }
            v.extend_from_slice(self.class_vector(l));
        }
        Ok(v)
    }

    /// Most similar class under the dot product; ties to the lowest index.
    pub fn nearest_class(&self, v: &[f64]) -> usize {
        let mut best = 0usize;
        let mut best_dot = f64::NEG_INFINITY;
        for c in 0..self.classes {
            let dot: f64 = self.class_vector(c).iter().zip(v).map(|(a, b)| a * b).sum();
            if dot > best_dot {
                best_dot = dot;
                best = c;
            }
        }
        best
    }
}
