//! Fully connected fusion network with linear output heads, exact
//! reverse-mode gradients, Adam and gradient clipping.
//!
//! Parameters live in one flat vector. Each layer stores its weight matrix
//! column-major (`out × in`) followed by its bias. Fusion layers come first,
//! then heads in spec order. Batched activations are `features × batch`.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DMatrixView, DMatrixViewMut};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::{GmmLayout, MultiTaskWeights};
use crate::simulator::Observation;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid network spec: {0}")]
    Spec(String),
    #[error("input has length {got}, expected {expected}")]
    InputShape { got: usize, expected: usize },
    #[error("non-finite value in network input")]
    NonFiniteInput,
    #[error("gradient for head {head} has shape {got:?}, expected {expected:?}")]
    GradShape { head: String, got: (usize, usize), expected: (usize, usize) },
    #[error("parameter vector has length {got}, spec needs {expected}")]
    ParamShape { got: usize, expected: usize },
    #[error("normalizer needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("dimension {0} has zero variance")]
    ZeroVariance(usize),
    #[error("unsupported checkpoint version {0}")]
    CheckpointVersion(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadKind {
    Gmm { modes: usize, dim: usize },
    Linear { dim: usize },
    Affordance { dim: usize },
    Actuation,
}

impl HeadKind {
    pub fn output_dim(&self) -> usize {
        match *self {
            HeadKind::Gmm { modes, dim } => GmmLayout::new(modes, dim).raw_len(),
            HeadKind::Linear { dim } | HeadKind::Affordance { dim } => dim,
            HeadKind::Actuation => 2,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            HeadKind::Gmm { .. } => "gmm",
            HeadKind::Linear { .. } => "linear",
            HeadKind::Affordance { .. } => "affordance",
            HeadKind::Actuation => "actuation",
        }
    }

    fn is_policy(&self) -> bool {
        !matches!(self, HeadKind::Affordance { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub input_dim: usize,
    pub fusion_layers: Vec<usize>,
    pub heads: Vec<HeadKind>,
}

impl NetSpec {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.input_dim == 0 {
            return Err(NetError::Spec("input_dim must be positive".into()));
        }
        if self.fusion_layers.contains(&0) {
            return Err(NetError::Spec("fusion layer width 0".into()));
        }
        if !self.heads.iter().any(HeadKind::is_policy) {
            return Err(NetError::Spec("need a trajectory or actuation head".into()));
        }
        for (i, h) in self.heads.iter().enumerate() {
            if self.heads[..i].iter().any(|o| o.name() == h.name()) {
                return Err(NetError::Spec(format!("duplicate {} head", h.name())));
            }
            if h.output_dim() == 0 {
                return Err(NetError::Spec(format!("{} head has no outputs", h.name())));
            }
        }
        Ok(())
    }

    pub fn head_index(&self, name: &str) -> Option<usize> {
        self.heads.iter().position(|h| h.name() == name)
    }
}

/// Position of one affine layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSlot {
    pub rows: usize,
    pub cols: usize,
    pub weight: usize,
    pub bias: usize,
}

impl LayerSlot {
    pub fn end(&self) -> usize {
        self.bias + self.rows
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: NetSpec,
    fusion: Vec<LayerSlot>,
    heads: Vec<LayerSlot>,
    n_params: usize,
}

/// Everything the backward pass needs from a batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub input: DMatrix<f64>,
    pre: Vec<DMatrix<f64>>,
    post: Vec<DMatrix<f64>>,
    /// Raw head outputs, `output_dim × batch`, in spec order.
    pub outputs: Vec<DMatrix<f64>>,
}

impl ForwardCache {
    pub fn batch(&self) -> usize {
        self.input.ncols()
    }

    /// Raw output of head `head` for sample `i`.
    pub fn output(&self, head: usize, i: usize) -> Vec<f64> {
        self.outputs[head].column(i).iter().copied().collect()
    }

    fn features(&self) -> &DMatrix<f64> {
        self.post.last().unwrap_or(&self.input)
    }
}

fn view(params: &[f64], slot: LayerSlot) -> DMatrixView<'_, f64> {
    DMatrixView::from_slice(&params[slot.weight..slot.bias], slot.rows, slot.cols)
}

fn affine(params: &[f64], slot: LayerSlot, x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut z = view(params, slot) * x;
    let b = &params[slot.bias..slot.end()];
    for mut col in z.column_iter_mut() {
        for (v, bi) in col.iter_mut().zip(b) {
            *v += bi;
        }
    }
    z
}

fn write_affine_grad(grad: &mut [f64], slot: LayerSlot, upstream: &DMatrix<f64>, x: &DMatrix<f64>) {
    let mut gw = DMatrixViewMut::from_slice(&mut grad[slot.weight..slot.bias], slot.rows, slot.cols);
    gw.gemm(1.0, upstream, &x.transpose(), 1.0);
    for (r, g) in grad[slot.bias..slot.end()].iter_mut().enumerate() {
        *g += upstream.row(r).sum();
    }
}

impl Network {
    pub fn new(spec: NetSpec) -> Result<Self, NetError> {
        spec.validate()?;
        let mut offset = 0;
        let mut slot = |rows: usize, cols: usize| {
            let s = LayerSlot { rows, cols, weight: offset, bias: offset + rows * cols };
            offset = s.end();
            s
        };
        let mut width = spec.input_dim;
        let mut fusion = Vec::new();
        for &w in &spec.fusion_layers {
            fusion.push(slot(w, width));
            width = w;
        }
        let heads = spec.heads.iter().map(|h| slot(h.output_dim(), width)).collect();
        Ok(Self { spec, fusion, heads, n_params: offset })
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn fusion_slots(&self) -> &[LayerSlot] {
        &self.fusion
    }

    pub fn head_slot(&self, head: usize) -> LayerSlot {
        self.heads[head]
    }

    /// Parameter indices feeding the log-variance outputs of a GMM head.
    pub fn log_var_param_indices(&self, head: usize) -> Vec<usize> {
        let HeadKind::Gmm { modes, dim } = self.spec.heads[head] else {
            return Vec::new();
        };
        let layout = GmmLayout::new(modes, dim);
        let slot = self.heads[head];
        let mut idx = Vec::new();
        for r in layout.log_var_range() {
            idx.extend((0..slot.cols).map(|c| slot.weight + c * slot.rows + r));
            idx.push(slot.bias + r);
        }
        idx.sort_unstable();
        idx
    }

    /// He-uniform weights, zero biases. Rows producing GMM log-variances
    /// start at zero so every mode begins with unit variance.
    pub fn init_params(&self, seed: u64) -> Params {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; self.n_params];
        for slot in self.fusion.iter().chain(&self.heads) {
            let bound = (6.0 / slot.cols as f64).sqrt();
            for v in &mut values[slot.weight..slot.bias] {
                *v = rng.random_range(-bound..bound);
            }
        }
        for (h, _) in self.spec.heads.iter().enumerate() {
            for i in self.log_var_param_indices(h) {
                values[i] = 0.0;
            }
        }
        Params::new(values)
    }

    pub fn zero_params(&self) -> Params {
        Params::new(vec![0.0; self.n_params])
    }

    fn check_params(&self, params: &[f64]) -> Result<(), NetError> {
        if params.len() != self.n_params {
            return Err(NetError::ParamShape { got: params.len(), expected: self.n_params });
        }
        Ok(())
    }

    /// Batched forward pass; `inputs` holds one sample per element.
    pub fn forward_batch(&self, params: &[f64], inputs: &[Vec<f64>]) -> Result<ForwardCache, NetError> {
        self.check_params(params)?;
        let d = self.spec.input_dim;
        let mut x = DMatrix::zeros(d, inputs.len());
        for (i, row) in inputs.iter().enumerate() {
            if row.len() != d {
                return Err(NetError::InputShape { got: row.len(), expected: d });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(NetError::NonFiniteInput);
            }
            x.column_mut(i).copy_from_slice(row);
        }
        let mut pre = Vec::with_capacity(self.fusion.len());
        let mut post = Vec::with_capacity(self.fusion.len());
        for &slot in &self.fusion {
            let z = affine(params, slot, post.last().unwrap_or(&x));
            post.push(z.map(|v| v.max(0.0)));
            pre.push(z);
        }
        let feats = post.last().unwrap_or(&x);
        let outputs = self.heads.iter().map(|&slot| affine(params, slot, feats)).collect();
        Ok(ForwardCache { input: x, pre, post, outputs })
    }

    /// Single-sample forward pass.
    pub fn forward(&self, params: &[f64], input: &[f64]) -> Result<ForwardCache, NetError> {
        self.forward_batch(params, &[input.to_vec()])
    }

    /// Gradient of Σ_heads ⟨upstream_h, output_h⟩ with respect to the flat
    /// parameters. `None` marks a head that receives no gradient.
    pub fn backward(
        &self,
        params: &[f64],
        cache: &ForwardCache,
        upstream: &[Option<DMatrix<f64>>],
    ) -> Result<Vec<f64>, NetError> {
        self.check_params(params)?;
        if upstream.len() != self.heads.len() {
            return Err(NetError::Spec(format!(
                "{} upstream gradients for {} heads",
                upstream.len(),
                self.heads.len()
            )));
        }
        let batch = cache.batch();
        let mut grad = vec![0.0; self.n_params];
        let feats = cache.features();
        let mut dh = DMatrix::zeros(feats.nrows(), batch);
        for ((slot, g), kind) in self.heads.iter().zip(upstream).zip(&self.spec.heads) {
            let Some(g) = g else { continue };
            if g.shape() != (slot.rows, batch) {
                return Err(NetError::GradShape {
                    head: kind.name().into(),
                    got: g.shape(),
                    expected: (slot.rows, batch),
                });
            }
            write_affine_grad(&mut grad, *slot, g, feats);
            dh.gemm_tr(1.0, &view(params, *slot), g, 1.0);
        }
        for l in (0..self.fusion.len()).rev() {
            let slot = self.fusion[l];
            let dz = dh.zip_map(&cache.pre[l], |g, z| if z > 0.0 { g } else { 0.0 });
            let below = if l == 0 { &cache.input } else { &cache.post[l - 1] };
            write_affine_grad(&mut grad, slot, &dz, below);
            if l > 0 {
                dh = view(params, slot).transpose() * &dz;
            }
        }
        Ok(grad)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Flat parameters plus Adam moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub values: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl Params {
    pub fn new(values: Vec<f64>) -> Self {
        let n = values.len();
        Self { values, m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().chain(&self.m).chain(&self.v).all(|x| x.is_finite())
    }
}

/// One bias-corrected Adam update, no weight decay.
pub fn adam_step(params: &mut Params, grads: &[f64], cfg: &AdamConfig) {
    assert_eq!(grads.len(), params.values.len());
    params.step += 1;
    let t = params.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..grads.len() {
        let g = grads[i];
        params.m[i] = cfg.beta1 * params.m[i] + (1.0 - cfg.beta1) * g;
        params.v[i] = cfg.beta2 * params.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = params.m[i] / c1;
        let v_hat = params.v[i] / c2;
        params.values[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Rescales `grads` to `max_norm` when its Euclidean norm exceeds it.
/// Returns the norm before clipping.
pub fn clip_gradient_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= scale);
    }
    norm
}

/// Per-dimension standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    /// Population mean and standard deviation of `targets`.
    pub fn fit<T: AsRef<[f64]>>(targets: &[T]) -> Result<Self, NetError> {
        if targets.len() < 2 {
            return Err(NetError::TooFewSamples(targets.len()));
        }
        let dim = targets[0].as_ref().len();
        let n = targets.len() as f64;
        let mut mean = vec![0.0; dim];
        for t in targets {
            for (m, v) in mean.iter_mut().zip(t.as_ref()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for t in targets {
            for ((s, v), m) in var.iter_mut().zip(t.as_ref()).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let mut std = Vec::with_capacity(dim);
        for (j, s) in var.iter().enumerate() {
            let sd = (s / n).sqrt();
            if !(sd > 1e-12 * (1.0 + mean[j].abs())) {
                return Err(NetError::ZeroVariance(j));
            }
            std.push(sd);
        }
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn invert(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| v * s + m).collect()
    }
}

pub const CHECKPOINT_FORMAT: &str = "traj-clone-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Losses logged at the end of an epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: String,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_traj_loss: f64,
    pub val_cvar90: f64,
}

/// How raw observations were scaled into network inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputScaling {
    pub n_beams: usize,
    pub range_scale: f64,
    pub speed_scale: f64,
    /// Per-feature standardization fitted on the training inputs.
    #[serde(default)]
    pub standardize: Option<Normalizer>,
}

impl InputScaling {
    pub fn new(n_beams: usize, range_scale: f64, speed_scale: f64) -> Self {
        Self { n_beams, range_scale, speed_scale, standardize: None }
    }

    /// Scaled ranges followed by scaled speed, before standardization.
    pub fn scaled(&self, obs: &Observation) -> Vec<f64> {
        let mut f: Vec<f64> = obs.ranges.iter().map(|r| r / self.range_scale).collect();
        f.push(obs.speed / self.speed_scale);
        f
    }

    /// Network input.
    pub fn features(&self, obs: &Observation) -> Vec<f64> {
        let f = self.scaled(obs);
        match &self.standardize {
            Some(n) => n.apply(&f),
            None => f,
        }
    }

    /// Fits the standardization on `inputs` (already scaled). Constant
    /// features are centered but not rescaled.
    pub fn fit_standardization<T: AsRef<[f64]>>(&mut self, inputs: &[T]) -> Result<(), NetError> {
        if inputs.len() < 2 {
            return Err(NetError::TooFewSamples(inputs.len()));
        }
        let dim = inputs[0].as_ref().len();
        let n = inputs.len() as f64;
        let mut mean = vec![0.0; dim];
        for x in inputs {
            mean.iter_mut().zip(x.as_ref()).for_each(|(m, v)| *m += v / n);
        }
        let mut var = vec![0.0; dim];
        for x in inputs {
            for ((s, v), m) in var.iter_mut().zip(x.as_ref()).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let std = var.iter().map(|v| if v.sqrt() > 1e-9 { v.sqrt() } else { 1.0 }).collect();
        self.standardize = Some(Normalizer { mean, std });
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epoch: usize,
    pub k: usize,
    pub dt_label: f64,
    pub input: InputScaling,
    /// Loss weights the parameters were trained with.
    pub weights: MultiTaskWeights,
    pub history: Vec<EpochRecord>,
}

/// Self-describing model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub spec: NetSpec,
    pub params: Params,
    /// Target normalizers keyed by head name.
    pub normalizers: BTreeMap<String, Normalizer>,
    pub meta: TrainingMeta,
}

impl Checkpoint {
    pub fn new(
        spec: NetSpec,
        params: Params,
        normalizers: BTreeMap<String, Normalizer>,
        meta: TrainingMeta,
    ) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            spec,
            params,
            normalizers,
            meta,
        }
    }

    pub fn network(&self) -> Result<Network, NetError> {
        Network::new(self.spec.clone())
    }

    pub fn save(&self, path: &Path) -> Result<(), NetError> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NetError> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let ck: Checkpoint = serde_json::from_reader(file)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(NetError::CheckpointVersion(ck.version));
        }
        let net = ck.network()?;
        if ck.params.values.len() != net.n_params() {
            return Err(NetError::ParamShape { got: ck.params.values.len(), expected: net.n_params() });
        }
        Ok(ck)
    }
}

/// A checkpoint ready for inference.
#[derive(Debug, Clone)]
pub struct Model {
    pub checkpoint: Checkpoint,
    pub net: Network,
}

impl Model {
    pub fn new(checkpoint: Checkpoint) -> Result<Self, NetError> {
        let net = checkpoint.network()?;
        Ok(Self { checkpoint, net })
    }

    pub fn load(path: &Path) -> Result<Self, NetError> {
        Self::new(Checkpoint::load(path)?)
    }

    pub fn head(&self, name: &str) -> Option<usize> {
        self.net.spec.head_index(name)
    }

    pub fn normalizer(&self, head: &str) -> Result<&Normalizer, NetError> {
        self.checkpoint
            .normalizers
            .get(head)
            .ok_or_else(|| NetError::Spec(format!("checkpoint has no normalizer for {head}")))
    }

    pub fn forward_observation(&self, obs: &Observation) -> Result<ForwardCache, NetError> {
        let x = self.checkpoint.meta.input.features(obs);
        self.net.forward(&self.checkpoint.params.values, &x)
    }
}
