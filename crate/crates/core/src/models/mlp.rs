use super::{
    activation_vjp, apply_activation, check_input, missing_cache, ActCache, ActivationKind, Cache,
    Forward, Gradients, ModelConfig, Sae, Seeds,
};
use crate::error::{Error, Result};
use crate::numeric::{randn, Matrix, Rng};

pub(crate) const JUMPRELU_INIT_THRESHOLD: f64 = 1e-3;

/// Gate/magnitude split of a gated SAE. The gate encoder is the model's
/// `w_enc`; the magnitude path reuses it, rescaled per concept by
/// `exp(r_mag)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedParams {
    pub b_gate: Matrix,
    pub b_mag: Matrix,
    pub r_mag: Matrix,
}

impl GatedParams {
    pub fn zeros(m: usize) -> Self {
        Self {
            b_gate: Matrix::zeros(1, m),
            b_mag: Matrix::zeros(1, m),
            r_mag: Matrix::zeros(1, m),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpSae {
    config: ModelConfig,
    /// M × d.
    pub w_enc: Matrix,
    /// 1 × d, subtracted from the input before encoding.
    pub b_enc: Matrix,
    /// d × M; columns are the concepts.
    pub w_dec: Matrix,
    /// 1 × d.
    pub b_dec: Matrix,
    /// 1 × M JumpReLU thresholds.
    pub jump_thresholds: Option<Matrix>,
    pub gated: Option<GatedParams>,
}

#[derive(Debug, Clone)]
pub(crate) struct MlpCache {
    centered: Matrix,
    act: Option<ActCache>,
    gated: Option<GatedCache>,
}

impl MlpCache {
    pub(crate) fn margin(&self) -> f64 {
        let mut m = self.act.as_ref().map_or(f64::INFINITY, |a| a.margin);
        if let Some(g) = &self.gated {
            for (gp, mp) in g.gate_pre.as_slice().iter().zip(g.mag_pre.as_slice()) {
                m = m.min(gp.abs());
                if *gp > 0.0 {
                    m = m.min(mp.abs());
                }
            }
        }
        m
    }
}

#[derive(Debug, Clone)]
struct GatedCache {
    hidden: Matrix,
    gate_pre: Matrix,
    mag_pre: Matrix,
}

impl MlpSae {
    /// Decoder columns are unit-norm Gaussian directions and the encoder
    /// starts as the decoder's transpose. Biases start at zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (d, m) = (config.d, config.m);
        let mut rng = Rng::new(seed);
        let mut w_dec = randn(&mut rng, d, m, 1.0)?;
        w_dec.normalize_columns();
        let w_enc = w_dec.transpose();
        let jump_thresholds = (config.activation == ActivationKind::Jumprelu)
            .then(|| Matrix::row_vector(&vec![JUMPRELU_INIT_THRESHOLD; m]));
        let gated = (config.activation == ActivationKind::Gated).then(|| GatedParams::zeros(m));
        Ok(Self {
            config,
            w_enc,
            b_enc: Matrix::zeros(1, d),
            w_dec,
            b_dec: Matrix::zeros(1, d),
            jump_thresholds,
            gated,
        })
    }

    /// Builds a model from explicit weights; shapes are checked against `config`.
    pub fn from_parts(
        config: ModelConfig,
        w_enc: Matrix,
        b_enc: Matrix,
        w_dec: Matrix,
        b_dec: Matrix,
    ) -> Result<Self> {
        let mut model = Self::init(config, 0)?;
        let (d, m) = (model.config.d, model.config.m);
        for (got, want) in [
            (w_enc.shape(), (m, d)),
            (b_enc.shape(), (1, d)),
            (w_dec.shape(), (d, m)),
            (b_dec.shape(), (1, d)),
        ] {
            if got != want {
                return Err(Error::shape("MlpSae::from_parts", got, want));
            }
        }
        model.w_enc = w_enc;
        model.b_enc = b_enc;
        model.w_dec = w_dec;
        model.b_dec = b_dec;
        Ok(model)
    }

    /// Gated codes `1[π > 0] ⊙ relu(exp(r_mag) ⊙ h + b_mag)` where
    /// `h = W_enc (x - b_dec)` and `π = h + b_gate`.
    pub fn gated_encode(&self, x: &Matrix) -> Result<Matrix> {
        check_input("gated_encode", x, self.config.d)?;
        let params = self
            .gated
            .as_ref()
            .ok_or_else(|| Error::invalid("model was not built with the gated activation"))?;
        let centered = x.add_row_broadcast(&negated(self.b_dec.row(0)))?;
        let (codes, _, _) = self.gated_codes(params, &centered)?;
        Ok(codes)
    }

    fn gated_codes(
        &self,
        params: &GatedParams,
        centered: &Matrix,
    ) -> Result<(Matrix, Matrix, GatedCache)> {
        let hidden = centered.matmul_t(&self.w_enc)?;
        let gate_pre = hidden.add_row_broadcast(params.b_gate.row(0))?;
        let (n, m) = hidden.shape();
        let scale: Vec<f64> = params.r_mag.row(0).iter().map(|r| r.exp()).collect();
        let mut mag_pre = Matrix::zeros(n, m);
        let mut codes = Matrix::zeros(n, m);
        let mut gate_act = Matrix::zeros(n, m);
        for r in 0..n {
            for j in 0..m {
                let mp = scale[j] * hidden.get(r, j) + params.b_mag.get(0, j);
                mag_pre.set(r, j, mp);
                let g = gate_pre.get(r, j);
                if g > 0.0 {
                    codes.set(r, j, mp.max(0.0));
                    gate_act.set(r, j, g);
                }
            }
        }
        Ok((
            codes,
            gate_act,
            GatedCache {
                hidden,
                gate_pre,
                mag_pre,
            },
        ))
    }

    fn decode(&self, codes: &Matrix) -> Result<Matrix> {
        codes
            .matmul_t(&self.w_dec)?
            .add_row_broadcast(self.b_dec.row(0))
    }
}

fn negated(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| -x).collect()
}

impl Sae for MlpSae {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn forward_with(&self, x: &Matrix, keep_cache: bool) -> Result<Forward> {
        check_input("mlp_forward", x, self.config.d)?;
        if let Some(params) = &self.gated {
            let centered = x.add_row_broadcast(&negated(self.b_dec.row(0)))?;
            let (codes, gate_act, gcache) = self.gated_codes(params, &centered)?;
            let recon = self.decode(&codes)?;
            let aux_recon = self.decode(&gate_act)?;
            return Ok(Forward {
                codes,
                recon,
                thresholds: None,
                gate_activations: Some(gate_act),
                aux_recon: Some(aux_recon),
                cache: keep_cache.then_some(Cache::Mlp(MlpCache {
                    centered,
                    act: None,
                    gated: Some(gcache),
                })),
            });
        }

        let centered = x.add_row_broadcast(&negated(self.b_enc.row(0)))?;
        let pre = centered.matmul_t(&self.w_enc)?;
        let (codes, act) = apply_activation(&self.config, &pre, self.jump_thresholds.as_ref())?;
        let recon = self.decode(&codes)?;
        let thresholds = (self.config.activation == ActivationKind::Sparsemax)
            .then(|| act.sparse.iter().map(|c| c.threshold).collect());
        Ok(Forward {
            codes,
            recon,
            thresholds,
            gate_activations: None,
            aux_recon: None,
            cache: keep_cache.then_some(Cache::Mlp(MlpCache {
                centered,
                act: Some(act),
                gated: None,
            })),
        })
    }

    fn backward(&self, fwd: &Forward, seeds: &Seeds) -> Result<Gradients> {
        let Some(Cache::Mlp(cache)) = &fwd.cache else {
            return Err(missing_cache());
        };
        let (n, m) = fwd.codes.shape();
        let d = self.config.d;
        if seeds.d_recon.shape() != (n, d) {
            return Err(Error::shape("mlp_backward", seeds.d_recon.shape(), (n, d)));
        }

        let d_recon = &seeds.d_recon;
        let d_w_dec = d_recon.t_matmul(&fwd.codes)?;
        let mut d_b_dec = d_recon.sum_rows();
        let mut d_codes = d_recon.matmul(&self.w_dec)?;

        if let (Some(params), Some(gc)) = (&self.gated, &cache.gated) {
            // Magnitude path.
            let scale: Vec<f64> = params.r_mag.row(0).iter().map(|r| r.exp()).collect();
            let mut d_hidden = Matrix::zeros(n, m);
            let mut d_r = vec![0.0; m];
            let mut d_b_mag = vec![0.0; m];
            for r in 0..n {
                for j in 0..m {
                    if gc.gate_pre.get(r, j) > 0.0 && gc.mag_pre.get(r, j) > 0.0 {
                        let g = d_codes.get(r, j);
                        d_b_mag[j] += g;
                        d_r[j] += g * scale[j] * gc.hidden.get(r, j);
                        d_hidden.set(r, j, g * scale[j]);
                    }
                }
            }
            // Gate path: sparsity penalty and auxiliary reconstruction, both
            // on relu(π). The auxiliary decoder is frozen.
            let mut d_gate_act = Matrix::zeros(n, m);
            if let Some(dp) = &seeds.d_penalized {
                d_gate_act.axpy(1.0, dp)?;
            }
            if let Some(da) = &seeds.d_aux_recon {
                d_gate_act.axpy(1.0, &da.matmul(&self.w_dec)?)?;
            }
            let mut d_b_gate = vec![0.0; m];
            for r in 0..n {
                for j in 0..m {
                    if gc.gate_pre.get(r, j) > 0.0 {
                        let g = d_gate_act.get(r, j);
                        d_b_gate[j] += g;
                        d_hidden.set(r, j, d_hidden.get(r, j) + g);
                    }
                }
            }
            let d_w_enc = d_hidden.t_matmul(&cache.centered)?;
            let d_centered = d_hidden.matmul(&self.w_enc)?;
            for (b, s) in d_b_dec.iter_mut().zip(d_centered.sum_rows()) {
                *b -= s;
            }
            return Ok(Gradients(vec![
                ("w_enc", d_w_enc),
                ("b_enc", Matrix::zeros(1, d)),
                ("w_dec", d_w_dec),
                ("b_dec", Matrix::row_vector(&d_b_dec)),
                ("b_gate", Matrix::row_vector(&d_b_gate)),
                ("b_mag", Matrix::row_vector(&d_b_mag)),
                ("r_mag", Matrix::row_vector(&d_r)),
            ]));
        }

        let act = cache.act.as_ref().ok_or_else(missing_cache)?;
        if let Some(dp) = &seeds.d_penalized {
            d_codes.axpy(1.0, dp)?;
        }
        let (d_pre, d_theta) = activation_vjp(
            &self.config,
            act,
            &fwd.codes,
            &d_codes,
            self.jump_thresholds.as_ref(),
            seeds.l0_weight,
        )?;
        let d_w_enc = d_pre.t_matmul(&cache.centered)?;
        let d_centered = d_pre.matmul(&self.w_enc)?;
        let d_b_enc = negated(&d_centered.sum_rows());

        let mut grads = vec![
            ("w_enc", d_w_enc),
            ("b_enc", Matrix::row_vector(&d_b_enc)),
            ("w_dec", d_w_dec),
            ("b_dec", Matrix::row_vector(&d_b_dec)),
        ];
        if let Some(dt) = d_theta {
            grads.push(("jump_threshold", dt));
        }
        Ok(Gradients(grads))
    }

    fn params(&self) -> Vec<(&'static str, &Matrix)> {
        let mut out = vec![
            ("w_enc", &self.w_enc),
            ("b_enc", &self.b_enc),
            ("w_dec", &self.w_dec),
            ("b_dec", &self.b_dec),
        ];
        if let Some(t) = &self.jump_thresholds {
            out.push(("jump_threshold", t));
        }
        if let Some(g) = &self.gated {
            out.push(("b_gate", &g.b_gate));
            out.push(("b_mag", &g.b_mag));
            out.push(("r_mag", &g.r_mag));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        let mut out = vec![
            ("w_enc", &mut self.w_enc),
            ("b_enc", &mut self.b_enc),
            ("w_dec", &mut self.w_dec),
            ("b_dec", &mut self.b_dec),
        ];
        if let Some(t) = &mut self.jump_thresholds {
            out.push(("jump_threshold", t));
        }
        if let Some(g) = &mut self.gated {
            out.push(("b_gate", &mut g.b_gate));
            out.push(("b_mag", &mut g.b_mag));
            out.push(("r_mag", &mut g.r_mag));
        }
        out
    }

    /// Unit-norm decoder columns; nonnegative JumpReLU thresholds.
    fn post_step(&mut self) {
        self.w_dec.normalize_columns();
        if let Some(t) = &mut self.jump_thresholds {
            for v in t.as_mut_slice() {
                *v = v.max(0.0);
            }
        }
    }

    fn dictionary(&self) -> Result<Matrix> {
        Ok(self.w_dec.clone())
    }
}
