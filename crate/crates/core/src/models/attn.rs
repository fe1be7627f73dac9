use super::{
    activation_vjp, apply_activation, check_input, missing_cache, ActCache, ActivationKind, Cache,
    Forward, Gradients, ModelConfig, Sae, Seeds,
};
use crate::error::{Error, Result};
use crate::models::mlp::JUMPRELU_INIT_THRESHOLD;
use crate::numeric::{randn, Matrix, Rng};

/// Cross-attention SAE: each input row is a query, the concept matrix
/// supplies both keys and values.
///
/// ```text
/// Q = x W_Q      K = Cᵀ W_K      V = Cᵀ W_V
/// codes = σ(Q Kᵀ / √d)           x̂ = codes · V
/// ```
///
/// With `output_affine`, the reconstruction becomes `g · x̂ + b_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnSae {
    config: ModelConfig,
    /// d × M.
    pub concepts: Matrix,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub jump_thresholds: Option<Matrix>,
    /// 1 × 1 gain and 1 × d bias, present only with `output_affine`.
    pub output_affine: Option<(Matrix, Matrix)>,
}

#[derive(Debug, Clone)]
pub(crate) struct AttnCache {
    input: Matrix,
    queries: Matrix,
    keys: Matrix,
    values: Matrix,
    mixed: Matrix,
    act: ActCache,
}

impl AttnCache {
    pub(crate) fn margin(&self) -> f64 {
        self.act.margin
    }
}

impl AttnSae {
    /// Concept columns start as unit-norm Gaussians; projections as
    /// Gaussians with standard deviation `1/√d`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (d, m) = (config.d, config.m);
        let mut rng = Rng::new(seed);
        let mut concepts = randn(&mut rng, d, m, 1.0)?;
        concepts.normalize_columns();
        let s = 1.0 / (d as f64).sqrt();
        let w_q = randn(&mut rng, d, d, s)?;
        let w_k = randn(&mut rng, d, d, s)?;
        let w_v = randn(&mut rng, d, d, s)?;
        let jump_thresholds = (config.activation == ActivationKind::Jumprelu)
            .then(|| Matrix::row_vector(&vec![JUMPRELU_INIT_THRESHOLD; m]));
        let output_affine = config
            .output_affine
            .then(|| (Matrix::row_vector(&[1.0]), Matrix::zeros(1, d)));
        Ok(Self {
            config,
            concepts,
            w_q,
            w_k,
            w_v,
            jump_thresholds,
            output_affine,
        })
    }

    pub fn from_parts(
        config: ModelConfig,
        concepts: Matrix,
        w_q: Matrix,
        w_k: Matrix,
        w_v: Matrix,
    ) -> Result<Self> {
        let mut model = Self::init(config, 0)?;
        let (d, m) = (model.config.d, model.config.m);
        for (got, want) in [
            (concepts.shape(), (d, m)),
            (w_q.shape(), (d, d)),
            (w_k.shape(), (d, d)),
            (w_v.shape(), (d, d)),
        ] {
            if got != want {
                return Err(Error::shape("AttnSae::from_parts", got, want));
            }
        }
        model.concepts = concepts;
        model.w_q = w_q;
        model.w_k = w_k;
        model.w_v = w_v;
        Ok(model)
    }

    /// Key rows `Cᵀ W_K` (M × d).
    pub fn keys(&self) -> Result<Matrix> {
        self.concepts.t_matmul(&self.w_k)
    }

    /// Value rows `Cᵀ W_V` (M × d); these are the vectors the codes mix.
    pub fn values(&self) -> Result<Matrix> {
        self.concepts.t_matmul(&self.w_v)
    }

    fn score_scale(&self) -> f64 {
        1.0 / (self.config.d as f64).sqrt()
    }
}

impl Sae for AttnSae {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn forward_with(&self, x: &Matrix, keep_cache: bool) -> Result<Forward> {
        check_input("attn_forward", x, self.config.d)?;
        let queries = x.matmul(&self.w_q)?;
        let keys = self.keys()?;
        let values = self.values()?;
        let scores = queries.matmul_t(&keys)?.scale(self.score_scale());
        let (codes, act) = apply_activation(&self.config, &scores, self.jump_thresholds.as_ref())?;
        let mixed = codes.matmul(&values)?;
        let recon = match &self.output_affine {
            Some((gain, bias)) => mixed.scale(gain.get(0, 0)).add_row_broadcast(bias.row(0))?,
            None => mixed.clone(),
        };
        let thresholds = (self.config.activation == ActivationKind::Sparsemax)
            .then(|| act.sparse.iter().map(|c| c.threshold).collect());
        Ok(Forward {
            codes,
            recon,
            thresholds,
            gate_activations: None,
            aux_recon: None,
            cache: keep_cache.then(|| {
                Cache::Attn(AttnCache {
                    input: x.clone(),
                    queries,
                    keys,
                    values,
                    mixed,
                    act,
                })
            }),
        })
    }

    fn backward(&self, fwd: &Forward, seeds: &Seeds) -> Result<Gradients> {
        let Some(Cache::Attn(cache)) = &fwd.cache else {
            return Err(missing_cache());
        };
        let n = fwd.codes.rows();
        let d = self.config.d;
        if seeds.d_recon.shape() != (n, d) {
            return Err(Error::shape("attn_backward", seeds.d_recon.shape(), (n, d)));
        }

        let mut affine_grads = None;
        let d_mixed = match &self.output_affine {
            Some((gain, _)) => {
                let d_gain: f64 = seeds
                    .d_recon
                    .as_slice()
                    .iter()
                    .zip(cache.mixed.as_slice())
                    .map(|(a, b)| a * b)
                    .sum();
                affine_grads = Some((
                    Matrix::row_vector(&[d_gain]),
                    Matrix::row_vector(&seeds.d_recon.sum_rows()),
                ));
                seeds.d_recon.scale(gain.get(0, 0))
            }
            None => seeds.d_recon.clone(),
        };

        let d_values = fwd.codes.t_matmul(&d_mixed)?;
        let mut d_codes = d_mixed.matmul_t(&cache.values)?;
        if let Some(dp) = &seeds.d_penalized {
            d_codes.axpy(1.0, dp)?;
        }
        let (d_scores, d_theta) = activation_vjp(
            &self.config,
            &cache.act,
            &fwd.codes,
            &d_codes,
            self.jump_thresholds.as_ref(),
            seeds.l0_weight,
        )?;
        let d_scores = d_scores.scale(self.score_scale());
        let d_queries = d_scores.matmul(&cache.keys)?;
        let d_keys = d_scores.t_matmul(&cache.queries)?;

        let d_w_q = cache.input.t_matmul(&d_queries)?;
        let d_w_k = self.concepts.matmul(&d_keys)?;
        let d_w_v = self.concepts.matmul(&d_values)?;
        let mut d_concepts = self.w_k.matmul_t(&d_keys)?;
        d_concepts.axpy(1.0, &self.w_v.matmul_t(&d_values)?)?;

        let mut grads = vec![
            ("concepts", d_concepts),
            ("w_q", d_w_q),
            ("w_k", d_w_k),
            ("w_v", d_w_v),
        ];
        if let Some(dt) = d_theta {
            grads.push(("jump_threshold", dt));
        }
        if let Some((dg, db)) = affine_grads {
            grads.push(("gain", dg));
            grads.push(("b_out", db));
        }
        Ok(Gradients(grads))
    }

    fn params(&self) -> Vec<(&'static str, &Matrix)> {
        let mut out = vec![
            ("concepts", &self.concepts),
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
        ];
        if let Some(t) = &self.jump_thresholds {
            out.push(("jump_threshold", t));
        }
        if let Some((g, b)) = &self.output_affine {
            out.push(("gain", g));
            out.push(("b_out", b));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        let mut out = vec![
            ("concepts", &mut self.concepts),
            ("w_q", &mut self.w_q),
            ("w_k", &mut self.w_k),
            ("w_v", &mut self.w_v),
        ];
        if let Some(t) = &mut self.jump_thresholds {
            out.push(("jump_threshold", t));
        }
        if let Some((g, b)) = &mut self.output_affine {
            out.push(("gain", g));
            out.push(("b_out", b));
        }
        out
    }

    fn post_step(&mut self) {
        if let Some(t) = &mut self.jump_thresholds {
            for v in t.as_mut_slice() {
                *v = v.max(0.0);
            }
        }
    }

    /// Value rows, transposed to one column per concept.
    fn dictionary(&self) -> Result<Matrix> {
        Ok(self.values()?.transpose())
    }
}
