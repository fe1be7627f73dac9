//! Sparse autoencoder architectures.
//!
//! Two encoder families share one parameter/gradient interface:
//!
//! * [`MlpSae`]: `z = σ(W_enc (x - b_enc))`, `x̂ = W_dec z + b_dec`.
//! * [`AttnSae`]: the input is a query against a learned concept matrix
//!   `C`; keys and values are both projections of `C`, and
//!   `x̂ = σ(Q Kᵀ / √d) V`.
//!
//! Backward passes are written out by hand. Inputs are row-major with the
//! batch as the leading dimension.

mod attn;
pub mod checkpoint;
mod mlp;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use attn::AttnSae;
pub use mlp::{GatedParams, MlpSae};

use crate::activations::{self, JumpReluParams, SparseCode, DEFAULT_JUMPRELU_BANDWIDTH};
use crate::error::{Error, Result};
use crate::numeric::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Mlp,
    Attn,
}

impl Architecture {
    pub fn tag(self) -> &'static str {
        match self {
            Architecture::Mlp => "mlp",
            Architecture::Attn => "attn",
        }
    }
}

impl FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Architecture::Mlp),
            "attn" => Ok(Architecture::Attn),
            other => Err(Error::invalid(format!("unknown architecture `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Relu,
    Jumprelu,
    Topk,
    BatchTopk,
    Gated,
    Sparsemax,
    Softmax,
}

impl ActivationKind {
    pub const ALL: [ActivationKind; 7] = [
        ActivationKind::Relu,
        ActivationKind::Jumprelu,
        ActivationKind::Topk,
        ActivationKind::BatchTopk,
        ActivationKind::Gated,
        ActivationKind::Sparsemax,
        ActivationKind::Softmax,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::Jumprelu => "jumprelu",
            ActivationKind::Topk => "topk",
            ActivationKind::BatchTopk => "batch_topk",
            ActivationKind::Gated => "gated",
            ActivationKind::Sparsemax => "sparsemax",
            ActivationKind::Softmax => "softmax",
        }
    }

    /// The sparsity penalty paired with this activation in the training loss.
    pub fn penalty(self) -> Penalty {
        match self {
            ActivationKind::Relu | ActivationKind::Gated => Penalty::L1,
            ActivationKind::Jumprelu => Penalty::L0,
            _ => Penalty::None,
        }
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for ActivationKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ActivationKind::ALL
            .into_iter()
            .find(|a| a.tag() == s)
            .ok_or_else(|| Error::invalid(format!("unknown activation `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Penalty {
    None,
    L1,
    L0,
}

fn default_k() -> usize {
    32
}

fn default_bandwidth() -> f64 {
    DEFAULT_JUMPRELU_BANDWIDTH
}

/// Shape and activation choice for a model; everything needed to rebuild
/// an untrained instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub activation: ActivationKind,
    pub d: usize,
    pub m: usize,
    /// Active concepts per sample for the top-k family.
    #[serde(default = "default_k")]
    pub k: usize,
    /// Straight-through kernel width for JumpReLU thresholds.
    #[serde(default = "default_bandwidth")]
    pub bandwidth: f64,
    /// Learnable output gain and bias on the attention reconstruction.
    #[serde(default)]
    pub output_affine: bool,
}

impl ModelConfig {
    pub fn new(architecture: Architecture, activation: ActivationKind, d: usize, m: usize) -> Self {
        Self {
            architecture,
            activation,
            d,
            m,
            k: default_k(),
            bandwidth: default_bandwidth(),
            output_affine: false,
        }
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = k;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.m == 0 {
            return Err(Error::invalid("d and m must be positive"));
        }
        if self.m < self.d {
            return Err(Error::invalid(format!(
                "dictionary must be overcomplete: m = {} < d = {}",
                self.m, self.d
            )));
        }
        if self.m < 4 * self.d {
            log::warn!(
                "dictionary size m = {} is below 4·d = {}; the SAE is only mildly overcomplete",
                self.m,
                4 * self.d
            );
        }
        if matches!(
            self.activation,
            ActivationKind::Topk | ActivationKind::BatchTopk
        ) && (self.k == 0 || self.k > self.m)
        {
            return Err(Error::invalid(format!(
                "k must lie in 1..={}, got {}",
                self.m, self.k
            )));
        }
        if !(self.bandwidth > 0.0) {
            return Err(Error::invalid("bandwidth must be positive"));
        }
        if self.architecture == Architecture::Attn && self.activation == ActivationKind::Gated {
            return Err(Error::invalid(
                "the gated activation needs its own encoder and is only available for mlp",
            ));
        }
        if self.output_affine && self.architecture != Architecture::Attn {
            return Err(Error::invalid(
                "output_affine applies to the attn architecture only",
            ));
        }
        Ok(())
    }
}

/// Intermediates kept by a training forward pass.
#[derive(Debug, Clone)]
pub(crate) struct ActCache {
    /// Rectangle-kernel values for JumpReLU, same shape as `pre`.
    pub kernel: Option<Matrix>,
    pub sparse: Vec<SparseCode>,
    /// Distance of the nearest score to a kink of the activation.
    pub margin: f64,
}

/// Result of a forward pass over a batch.
#[derive(Debug, Clone)]
pub struct Forward {
    pub codes: Matrix,
    pub recon: Matrix,
    /// Per-row sparsemax threshold τ, when the activation is sparsemax.
    pub thresholds: Option<Vec<f64>>,
    /// Gated SAEs penalize `relu(π_gate)` rather than the codes.
    pub gate_activations: Option<Matrix>,
    /// Gated SAEs reconstruct from `relu(π_gate)` through a frozen decoder.
    pub aux_recon: Option<Matrix>,
    pub(crate) cache: Option<Cache>,
}

impl Forward {
    /// The matrix the sparsity penalty is applied to.
    pub fn penalized(&self) -> &Matrix {
        self.gate_activations.as_ref().unwrap_or(&self.codes)
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    /// Smallest distance from any activation input to a point where the
    /// activation is not differentiable (ReLU kink, top-k cut, sparsemax
    /// threshold, JumpReLU or gate threshold). `None` without a cache.
    pub fn kink_margin(&self) -> Option<f64> {
        match self.cache.as_ref()? {
            Cache::Mlp(c) => Some(c.margin()),
            Cache::Attn(c) => Some(c.margin()),
        }
    }

    /// Drops backward intermediates.
    pub fn detach(mut self) -> Self {
        self.cache = None;
        self
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Cache {
    Mlp(mlp::MlpCache),
    Attn(attn::AttnCache),
}

/// Upstream gradients handed to a backward pass.
#[derive(Debug, Clone)]
pub struct Seeds {
    /// ∂L/∂recon.
    pub d_recon: Matrix,
    /// ∂L/∂(penalized matrix), from an L1 penalty.
    pub d_penalized: Option<Matrix>,
    /// Weight on the L0 count; feeds JumpReLU thresholds via the kernel.
    pub l0_weight: f64,
    /// ∂L/∂aux_recon for gated models.
    pub d_aux_recon: Option<Matrix>,
}

impl Seeds {
    pub fn reconstruction_only(d_recon: Matrix) -> Self {
        Self {
            d_recon,
            d_penalized: None,
            l0_weight: 0.0,
            d_aux_recon: None,
        }
    }
}

/// Parameter gradients in the same order as [`Sae::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<(&'static str, Matrix)>);

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.0.iter().find(|(n, _)| *n == name).map(|(_, g)| g)
    }

    pub fn iter(&self) -> impl Iterator<Item = &(&'static str, Matrix)> {
        self.0.iter()
    }

    pub fn global_norm(&self) -> f64 {
        self.0
            .iter()
            .map(|(_, g)| g.frobenius_sq())
            .sum::<f64>()
            .sqrt()
    }
}

/// Common interface of the SAE architectures.
pub trait Sae {
    fn config(&self) -> &ModelConfig;

    /// Forward pass; `keep_cache` retains what [`Sae::backward`] needs.
    fn forward_with(&self, x: &Matrix, keep_cache: bool) -> Result<Forward>;

    fn backward(&self, fwd: &Forward, seeds: &Seeds) -> Result<Gradients>;

    fn params(&self) -> Vec<(&'static str, &Matrix)>;

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Matrix)>;

    /// Re-imposes parameter constraints after an optimizer update.
    fn post_step(&mut self);

    /// Dictionary directions in input space, one per column (d × M).
    fn dictionary(&self) -> Result<Matrix>;

    fn forward(&self, x: &Matrix) -> Result<Forward> {
        self.forward_with(x, false)
    }

    fn forward_train(&self, x: &Matrix) -> Result<Forward> {
        self.forward_with(x, true)
    }
}

/// Either architecture, for code that picks one at run time.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Mlp(MlpSae),
    Attn(AttnSae),
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(match config.architecture {
            Architecture::Mlp => Model::Mlp(MlpSae::init(config, seed)?),
            Architecture::Attn => Model::Attn(AttnSae::init(config, seed)?),
        })
    }

    fn inner(&self) -> &dyn Sae {
        match self {
            Model::Mlp(m) => m,
            Model::Attn(m) => m,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn Sae {
        match self {
            Model::Mlp(m) => m,
            Model::Attn(m) => m,
        }
    }

    /// Overwrites the parameter called `name`.
    pub fn set_param(&mut self, name: &str, value: Matrix) -> Result<()> {
        for (n, p) in self.params_mut() {
            if n == name {
                if p.shape() != value.shape() {
                    return Err(Error::shape("set_param", p.shape(), value.shape()));
                }
                *p = value;
                return Ok(());
            }
        }
        Err(Error::invalid(format!("model has no parameter `{name}`")))
    }
}

impl Sae for Model {
    fn config(&self) -> &ModelConfig {
        self.inner().config()
    }
    fn forward_with(&self, x: &Matrix, keep_cache: bool) -> Result<Forward> {
        self.inner().forward_with(x, keep_cache)
    }
    fn backward(&self, fwd: &Forward, seeds: &Seeds) -> Result<Gradients> {
        self.inner().backward(fwd, seeds)
    }
    fn params(&self) -> Vec<(&'static str, &Matrix)> {
        self.inner().params()
    }
    fn params_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        self.inner_mut().params_mut()
    }
    fn post_step(&mut self) {
        self.inner_mut().post_step()
    }
    fn dictionary(&self) -> Result<Matrix> {
        self.inner().dictionary()
    }
}

/// Applies a non-gated activation row-wise (or batch-wise for batch top-k).
pub(crate) fn apply_activation(
    config: &ModelConfig,
    pre: &Matrix,
    thresholds: Option<&Matrix>,
) -> Result<(Matrix, ActCache)> {
    let (n, m) = pre.shape();
    let mut codes = Matrix::zeros(n, m);
    let mut kernel = None;
    let mut sparse = Vec::new();
    let relu_margin = || {
        pre.as_slice()
            .iter()
            .fold(f64::INFINITY, |a, v| a.min(v.abs()))
    };
    let margin;
    match config.activation {
        ActivationKind::Relu => {
            for r in 0..n {
                codes
                    .row_mut(r)
                    .copy_from_slice(&activations::relu(pre.row(r)));
            }
            margin = relu_margin();
        }
        ActivationKind::Jumprelu => {
            let theta = thresholds.ok_or_else(|| Error::invalid("JumpReLU thresholds missing"))?;
            let params = JumpReluParams::new(theta.row(0).to_vec(), config.bandwidth)?;
            let mut kern = Matrix::zeros(n, m);
            let mut mg = f64::INFINITY;
            for r in 0..n {
                let out = activations::jumprelu(pre.row(r), &params)?;
                codes.row_mut(r).copy_from_slice(&out.values);
                kern.row_mut(r).copy_from_slice(&out.kernel);
                for (v, t) in pre.row(r).iter().zip(&params.thresholds) {
                    mg = mg.min((v - t).abs());
                }
            }
            kernel = Some(kern);
            margin = mg;
        }
        ActivationKind::Topk => {
            for r in 0..n {
                codes
                    .row_mut(r)
                    .copy_from_slice(&activations::topk(pre.row(r), config.k)?);
            }
            let gaps = (0..n).map(|r| cut_gap(pre.row(r), config.k));
            margin = gaps.fold(relu_margin(), f64::min);
        }
        ActivationKind::BatchTopk => {
            codes = activations::batch_topk(pre, config.k)?;
            margin = relu_margin().min(cut_gap(pre.as_slice(), n * config.k));
        }
        ActivationKind::Sparsemax => {
            sparse.reserve(n);
            for r in 0..n {
                let code = activations::sparsemax(pre.row(r))?;
                codes.row_mut(r).copy_from_slice(&code.values);
                sparse.push(code);
            }
            margin = sparse
                .iter()
                .enumerate()
                .flat_map(|(r, c)| pre.row(r).iter().map(move |v| (v - c.threshold).abs()))
                .fold(f64::INFINITY, f64::min);
        }
        ActivationKind::Softmax => {
            for r in 0..n {
                codes
                    .row_mut(r)
                    .copy_from_slice(&activations::softmax(pre.row(r)));
            }
            margin = f64::INFINITY;
        }
        ActivationKind::Gated => {
            return Err(Error::invalid(
                "gated encoding is handled by the MLP encoder",
            ));
        }
    }
    Ok((
        codes,
        ActCache {
            kernel,
            sparse,
            margin,
        },
    ))
}

/// Gap between the `k`-th and `(k+1)`-th largest values.
fn cut_gap(values: &[f64], k: usize) -> f64 {
    if k >= values.len() {
        return f64::INFINITY;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted[k - 1] - sorted[k]
}

/// Pulls `d_codes` back through the activation. Returns the gradient with
/// respect to the scores and, for JumpReLU, the threshold gradient
/// (straight-through, including the L0 term weighted by `l0_weight`).
pub(crate) fn activation_vjp(
    config: &ModelConfig,
    cache: &ActCache,
    codes: &Matrix,
    d_codes: &Matrix,
    thresholds: Option<&Matrix>,
    l0_weight: f64,
) -> Result<(Matrix, Option<Matrix>)> {
    let (n, m) = codes.shape();
    let mut d_pre = Matrix::zeros(n, m);
    let mut d_theta = None;
    match config.activation {
        ActivationKind::Relu
        | ActivationKind::Topk
        | ActivationKind::BatchTopk
        | ActivationKind::Jumprelu => {
            for ((g, &c), &u) in d_pre
                .as_mut_slice()
                .iter_mut()
                .zip(codes.as_slice())
                .zip(d_codes.as_slice())
            {
                if c > 0.0 {
                    *g = u;
                }
            }
            if config.activation == ActivationKind::Jumprelu {
                let theta =
                    thresholds.ok_or_else(|| Error::invalid("JumpReLU thresholds missing"))?;
                let kernel = cache
                    .kernel
                    .as_ref()
                    .ok_or_else(|| Error::invalid("JumpReLU kernel missing from cache"))?;
                let mut dt = vec![0.0; m];
                for r in 0..n {
                    for j in 0..m {
                        let kv = kernel.get(r, j);
                        if kv != 0.0 {
                            dt[j] -= kv * (theta.get(0, j) * d_codes.get(r, j) + l0_weight);
                        }
                    }
                }
                d_theta = Some(Matrix::row_vector(&dt));
            }
        }
        ActivationKind::Sparsemax => {
            for (r, code) in cache.sparse.iter().enumerate() {
                let g = activations::sparsemax_vjp(code, d_codes.row(r))?;
                d_pre.row_mut(r).copy_from_slice(&g);
            }
        }
        ActivationKind::Softmax => {
            for r in 0..n {
                let g = activations::softmax_vjp(codes.row(r), d_codes.row(r));
                d_pre.row_mut(r).copy_from_slice(&g);
            }
        }
        ActivationKind::Gated => {
            return Err(Error::invalid(
                "gated encoding is handled by the MLP encoder",
            ));
        }
    }
    Ok((d_pre, d_theta))
}

pub(crate) fn check_input(op: &'static str, x: &Matrix, d: usize) -> Result<()> {
    if x.cols() != d {
        return Err(Error::shape(op, x.shape(), (x.rows(), d)));
    }
    Ok(())
}

pub(crate) fn missing_cache() -> Error {
    Error::invalid("backward needs a forward pass run with keep_cache = true")
}
