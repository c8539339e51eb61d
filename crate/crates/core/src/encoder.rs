//! Sequence encoders over the flattened token sequence.
//!
//! The default backbone stacks bidirectional selective state-space layers:
//! each layer RMS-normalizes its input, runs a forward and a time-reversed
//! diagonal selective scan with separate parameters, and adds both outputs
//! to the residual stream. The attention backbone uses pre-norm transformer
//! blocks sized to match the SSM parameter count.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{normal_mat, Mat, ParamId, ParamSet, Tape, Var};
use crate::tokenization::{TokenIndex, TokenSequence};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backbone {
    BidirectionalSsm,
    Attention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub backbone: Backbone,
    pub n_layers: usize,
    pub model_dim: usize,
    pub state_dim: usize,
    /// Inner width of the SSM layers as a multiple of `model_dim`.
    pub expand: usize,
    /// Attention heads (attention backbone only).
    pub heads: usize,
    /// Feed-forward width of attention blocks; `None` picks the width whose
    /// parameter count matches the SSM layer with the same dimensions.
    pub ffn_dim: Option<usize>,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::BidirectionalSsm,
            n_layers: 8,
            model_dim: 64,
            state_dim: 16,
            expand: 2,
            heads: 4,
            ffn_dim: None,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    /// The deeper variant: 16 layers with state size 16.
    pub fn sixteen_layer() -> Self {
        Self {
            n_layers: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        if self.model_dim == 0 || self.state_dim == 0 || self.expand == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if self.backbone == Backbone::Attention && (self.heads == 0 || !self.model_dim.is_multiple_of(self.heads)) {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible into {} heads",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn inner_dim(&self) -> usize {
        self.expand * self.model_dim
    }

    /// Rank of the step-size projection.
    pub fn dt_rank(&self) -> usize {
        self.model_dim.div_ceil(16)
    }

    pub fn ssm_layer_params(&self) -> usize {
        let (d, di, r, s) = (self.model_dim, self.inner_dim(), self.dt_rank(), self.state_dim);
        let direction = 2 * d * di + di * r + r * di + di + 3 * di * s + di + di * d;
        d + 2 * direction
    }

    pub fn attention_layer_params(&self, ffn: usize) -> usize {
        let d = self.model_dim;
        4 * d + 4 * (d * d + d) + d * ffn + ffn + ffn * d + d
    }

    pub fn matched_ffn_dim(&self) -> usize {
        let d = self.model_dim;
        let fixed = self.attention_layer_params(0) as f64;
        let target = self.ssm_layer_params() as f64;
        ((target - fixed) / (2 * d + 1) as f64).round().max(1.0) as usize
    }

    pub fn ffn(&self) -> usize {
        self.ffn_dim.unwrap_or_else(|| self.matched_ffn_dim())
    }

    pub fn layer_params(&self) -> usize {
        match self.backbone {
            Backbone::BidirectionalSsm => self.ssm_layer_params(),
            Backbone::Attention => self.attention_layer_params(self.ffn()),
        }
    }

    /// Attention configuration with the same depth and width whose
    /// parameter count matches this one.
    pub fn matched_attention(&self) -> EncoderConfig {
        EncoderConfig {
            backbone: Backbone::Attention,
            ffn_dim: None,
            ..self.clone()
        }
    }
}

/// Exact trainable parameter count of an encoder built from `cfg`.
pub fn count_parameters(cfg: &EncoderConfig) -> usize {
    cfg.n_layers * cfg.layer_params()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentSequence {
    pub latents: Array2<f64>,
    pub index: TokenIndex,
}

#[derive(Clone, Debug)]
struct SsmDirection {
    w_in: ParamId,
    w_gate: ParamId,
    w_dt_down: ParamId,
    w_dt_up: ParamId,
    dt_bias: ParamId,
    w_b: ParamId,
    w_c: ParamId,
    a_log: ParamId,
    d_skip: ParamId,
    w_out: ParamId,
}

#[derive(Clone, Debug)]
struct SsmLayer {
    norm: ParamId,
    directions: [SsmDirection; 2],
}

#[derive(Clone, Debug)]
struct AttentionBlock {
    heads: usize,
    ln1: (ParamId, ParamId),
    q: (ParamId, ParamId),
    k: (ParamId, ParamId),
    v: (ParamId, ParamId),
    o: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
enum Layer {
    Ssm(SsmLayer),
    Attention(AttentionBlock),
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    layers: Vec<Layer>,
}

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl SsmDirection {
    fn register<R: Rng + ?Sized>(ps: &mut ParamSet, prefix: &str, cfg: &EncoderConfig, rng: &mut R) -> Self {
        let (d, di, r, s) = (cfg.model_dim, cfg.inner_dim(), cfg.dt_rank(), cfg.state_dim);
        let out_std = 1.0 / (di as f64).sqrt() / (2.0 * cfg.n_layers as f64).sqrt();
        let dt_bias = Mat::from_shape_simple_fn((1, di), || {
            let u: f64 = rng.random();
            let dt = (1e-3f64.ln() + u * (1e-1f64.ln() - 1e-3f64.ln())).exp();
            inverse_softplus(dt)
        });
        let a_log = Mat::from_shape_fn((di, s), |(_, j)| ((j + 1) as f64).ln());
        Self {
            w_in: ps.add(
                format!("{prefix}.w_in"),
                normal_mat(rng, d, di, 1.0 / (d as f64).sqrt()),
                true,
            ),
            w_gate: ps.add(
                format!("{prefix}.w_gate"),
                normal_mat(rng, d, di, 1.0 / (d as f64).sqrt()),
                true,
            ),
            w_dt_down: ps.add(
                format!("{prefix}.w_dt_down"),
                normal_mat(rng, di, r, 1.0 / (di as f64).sqrt()),
                true,
            ),
            w_dt_up: ps.add(
                format!("{prefix}.w_dt_up"),
                normal_mat(rng, r, di, 0.1 / (r as f64).sqrt()),
                true,
            ),
            dt_bias: ps.add(format!("{prefix}.dt_bias"), dt_bias, false),
            w_b: ps.add(
                format!("{prefix}.w_b"),
                normal_mat(rng, di, s, 1.0 / (di as f64).sqrt()),
                true,
            ),
            w_c: ps.add(
                format!("{prefix}.w_c"),
                normal_mat(rng, di, s, 1.0 / (di as f64).sqrt()),
                true,
            ),
            a_log: ps.add(format!("{prefix}.a_log"), a_log, false),
            d_skip: ps.add(format!("{prefix}.d_skip"), Mat::ones((1, di)), false),
            w_out: ps.add(format!("{prefix}.w_out"), normal_mat(rng, di, d, out_std), true),
        }
    }

    fn forward(&self, tape: &mut Tape, h: Var) -> Var {
        let u = tape.linear(h, self.w_in, None);
        let u = tape.silu(u);
        let gate = tape.linear(h, self.w_gate, None);
        let gate = tape.silu(gate);
        let dt_low = tape.linear(u, self.w_dt_down, None);
        let dt = tape.linear(dt_low, self.w_dt_up, Some(self.dt_bias));
        let delta = tape.softplus(dt);
        let b = tape.linear(u, self.w_b, None);
        let c = tape.linear(u, self.w_c, None);
        let a_log = tape.param(self.a_log);
        let d_skip = tape.param(self.d_skip);
        let y = tape.selective_scan(u, delta, a_log, b, c, d_skip);
        let y = tape.mul(y, gate);
        tape.linear(y, self.w_out, None)
    }

    fn mixing(&self) -> Vec<ParamId> {
        vec![
            self.w_in,
            self.w_gate,
            self.w_dt_down,
            self.w_dt_up,
            self.w_b,
            self.w_c,
            self.w_out,
            self.d_skip,
        ]
    }
}

impl SsmLayer {
    fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let h = tape.rms_norm_global(x, self.norm);
        let fwd = self.directions[0].forward(tape, h);
        let h_rev = tape.reverse_rows(h);
        let bwd = self.directions[1].forward(tape, h_rev);
        let bwd = tape.reverse_rows(bwd);
        let mixed = tape.add(fwd, bwd);
        tape.add(x, mixed)
    }
}

impl AttentionBlock {
    fn register<R: Rng + ?Sized>(ps: &mut ParamSet, prefix: &str, cfg: &EncoderConfig, rng: &mut R) -> Self {
        let d = cfg.model_dim;
        let m = cfg.ffn();
        let in_std = 1.0 / (d as f64).sqrt();
        let depth = (2.0 * cfg.n_layers as f64).sqrt();
        let mut lin = |name: &str, rows: usize, cols: usize, std: f64| {
            (
                ps.add(format!("{prefix}.{name}.w"), normal_mat(rng, rows, cols, std), true),
                ps.add(format!("{prefix}.{name}.b"), Mat::zeros((1, cols)), false),
            )
        };
        let q = lin("q", d, d, in_std);
        let k = lin("k", d, d, in_std);
        let v = lin("v", d, d, in_std);
        let o = lin("o", d, d, in_std / depth);
        let ff1 = lin("ff1", d, m, in_std);
        let ff2 = lin("ff2", m, d, 1.0 / (m as f64).sqrt() / depth);
        let mut norm = |name: &str| {
            (
                ps.add(format!("{prefix}.{name}.gain"), Mat::ones((1, d)), false),
                ps.add(format!("{prefix}.{name}.bias"), Mat::zeros((1, d)), false),
            )
        };
        let ln1 = norm("ln1");
        let ln2 = norm("ln2");
        Self {
            heads: cfg.heads,
            ln1,
            q,
            k,
            v,
            o,
            ln2,
            ff1,
            ff2,
        }
    }

    fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let h = tape.layer_norm(x, self.ln1.0, self.ln1.1);
        let q = tape.linear(h, self.q.0, Some(self.q.1));
        let k = tape.linear(h, self.k.0, Some(self.k.1));
        let v = tape.linear(h, self.v.0, Some(self.v.1));
        let a = tape.attention(q, k, v, self.heads);
        let a = tape.linear(a, self.o.0, Some(self.o.1));
        let x = tape.add(x, a);
        let h = tape.layer_norm(x, self.ln2.0, self.ln2.1);
        let f = tape.linear(h, self.ff1.0, Some(self.ff1.1));
        let f = tape.gelu(f);
        let f = tape.linear(f, self.ff2.0, Some(self.ff2.1));
        tape.add(x, f)
    }

    fn mixing(&self) -> Vec<ParamId> {
        [self.q, self.k, self.v, self.o, self.ff1, self.ff2]
            .iter()
            .flat_map(|&(w, b)| [w, b])
            .collect()
    }
}

impl Encoder {
    /// Register a freshly initialized encoder under the `encoder.` prefix.
    pub fn register(params: &mut ParamSet, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let layers = (0..cfg.n_layers)
            .map(|i| {
                let prefix = format!("encoder.layer{i}");
                match cfg.backbone {
                    Backbone::BidirectionalSsm => Layer::Ssm(SsmLayer {
                        norm: params.add(format!("{prefix}.norm"), Mat::ones((1, cfg.model_dim)), false),
                        directions: [
                            SsmDirection::register(params, &format!("{prefix}.fwd"), cfg, &mut rng),
                            SsmDirection::register(params, &format!("{prefix}.bwd"), cfg, &mut rng),
                        ],
                    }),
                    Backbone::Attention => Layer::Attention(AttentionBlock::register(params, &prefix, cfg, &mut rng)),
                }
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            layers,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        self.layers.iter().fold(x, |h, layer| match layer {
            Layer::Ssm(l) => l.forward(tape, h),
            Layer::Attention(b) => b.forward(tape, h),
        })
    }

    /// Contextualize a token sequence with the current parameter values.
    pub fn encode(&self, params: &ParamSet, tokens: &TokenSequence) -> Result<LatentSequence> {
        if tokens.embeddings.ncols() != self.cfg.model_dim {
            return Err(Error::Shape(format!(
                "tokens have dimension {}, encoder expects {}",
                tokens.embeddings.ncols(),
                self.cfg.model_dim
            )));
        }
        let mut tape = Tape::new(params);
        let x = tape.constant(tokens.embeddings.clone());
        let z = self.forward(&mut tape, x);
        Ok(LatentSequence {
            latents: tape.value(z).clone(),
            index: tokens.index,
        })
    }

    /// Parameters that move information between positions or channels. With
    /// all of them zero every layer reduces to its residual path.
    pub fn mixing_params(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .flat_map(|l| match l {
                Layer::Ssm(l) => l.directions.iter().flat_map(SsmDirection::mixing).collect::<Vec<_>>(),
                Layer::Attention(b) => b.mixing(),
            })
            .collect()
    }
}

/// Convenience wrapper around [`Encoder::encode`].
pub fn encode(tokens: &TokenSequence, encoder: &Encoder, params: &ParamSet) -> Result<LatentSequence> {
    encoder.encode(params, tokens)
}
