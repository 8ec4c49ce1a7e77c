//! Transformer encoder mapping a frame of `L` observations of dimension `D`
//! to a single latent vector.
//!
//! Tokens are projected to `model_dim`, offset by a sinusoidal position code,
//! passed through pre-norm self-attention / feed-forward blocks, normalized,
//! pooled over time and finally projected to `latent_dim`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Variance floor inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingMode {
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalEncoding {
    Sinusoidal,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub model_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub dropout: f64,
    pub pooling_mode: PoolingMode,
    pub dim_feedforward: usize,
    pub latent_dim: usize,
    pub positional_encoding: PositionalEncoding,
    /// Each token carries the current row followed by this many preceding
    /// rows of the frame (zeros before its start).
    pub token_lags: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 5,
            model_dim: 32,
            num_layers: 2,
            num_heads: 2,
            dropout: 0.0,
            pooling_mode: PoolingMode::Mean,
            dim_feedforward: 64,
            latent_dim: 8,
            positional_encoding: PositionalEncoding::Sinusoidal,
            token_lags: 0,
        }
    }
}

impl EncoderConfig {
    /// One of the four published encoder configurations (1-based). The
    /// latent size is not part of those presets and must be supplied.
    pub fn preset(index: u8, latent_dim: usize) -> Result<Self> {
        let (input_dim, model_dim, num_layers, num_heads, dropout, pooling_mode, dim_feedforward) = match index {
            1 => (32, 64, 4, 2, 0.1, PoolingMode::Mean, 128),
            2 => (64, 128, 6, 4, 0.2, PoolingMode::Sum, 256),
            3 => (32, 256, 8, 8, 0.3, PoolingMode::Mean, 512),
            4 => (128, 512, 12, 8, 0.15, PoolingMode::Mean, 1024),
            _ => return Err(Error::InvalidConfig(format!("unknown encoder preset {index} (expected 1-4)"))),
        };
        let cfg = Self {
            input_dim,
            model_dim,
            num_layers,
            num_heads,
            dropout,
            pooling_mode,
            dim_feedforward,
            latent_dim,
            positional_encoding: PositionalEncoding::Sinusoidal,
            token_lags: 0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("input_dim", self.input_dim),
            ("model_dim", self.model_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("dim_feedforward", self.dim_feedforward),
            ("latent_dim", self.latent_dim),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("encoder.{name} must be positive")));
            }
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::HeadDivisibility {
                model_dim: self.model_dim,
                num_heads: self.num_heads,
            });
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!(
                "encoder.dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Width of one token before projection.
    pub fn token_dim(&self) -> usize {
        self.input_dim * (self.token_lags + 1)
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    /// Shapes of every parameter tensor in canonical order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (d_in, m, ff, h, dh) = (
            self.token_dim(),
            self.model_dim,
            self.dim_feedforward,
            self.num_heads,
            self.head_dim(),
        );
        let mut out = vec![("in.weight".to_string(), vec![d_in, m]), ("in.bias".to_string(), vec![m])];
        for l in 0..self.num_layers {
            let p = |s: &str| format!("layer{l}.{s}");
            out.push((p("ln1.gamma"), vec![m]));
            out.push((p("ln1.beta"), vec![m]));
            for head in 0..h {
                for w in ["q", "k", "v"] {
                    out.push((p(&format!("head{head}.{w}.weight")), vec![m, dh]));
                    out.push((p(&format!("head{head}.{w}.bias")), vec![dh]));
                }
            }
            out.push((p("attn_out.weight"), vec![m, m]));
            out.push((p("attn_out.bias"), vec![m]));
            out.push((p("ln2.gamma"), vec![m]));
            out.push((p("ln2.beta"), vec![m]));
            out.push((p("ff1.weight"), vec![m, ff]));
            out.push((p("ff1.bias"), vec![ff]));
            out.push((p("ff2.weight"), vec![ff, m]));
            out.push((p("ff2.bias"), vec![m]));
        }
        out.push(("final_ln.gamma".to_string(), vec![m]));
        out.push(("final_ln.beta".to_string(), vec![m]));
        out.push(("out.weight".to_string(), vec![m, self.latent_dim]));
        out.push(("out.bias".to_string(), vec![self.latent_dim]));
        out
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    fn tensors_per_layer(&self) -> usize {
        2 + 6 * self.num_heads + 2 + 2 + 4
    }
}

/// Trainable encoder weights in the order given by [`EncoderConfig::layout`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl EncoderParams {
    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every tensor as a trainable leaf.
    pub fn on_tape<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.tensors.iter().map(|t| tape.param(t)).collect()
    }

    /// Records every tensor as a constant (no gradients).
    pub fn on_tape_frozen<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.tensors.iter().map(|t| tape.leaf(&without_grad(t))).collect()
    }

    /// Checks the arrays against the layout implied by `config`.
    pub fn check_layout(&self, config: &EncoderConfig) -> Result<()> {
        let layout = config.layout();
        if layout.len() != self.tensors.len() || self.names.len() != self.tensors.len() {
            return Err(Error::CorruptArray {
                name: "encoder".into(),
                reason: format!("expected {} tensors, found {}", layout.len(), self.tensors.len()),
            });
        }
        for ((name, shape), (n, t)) in layout.iter().zip(self.names.iter().zip(&self.tensors)) {
            if name != n || shape.as_slice() != t.shape() {
                return Err(Error::CorruptArray {
                    name: n.clone(),
                    reason: format!("expected `{name}` with shape {shape:?}, found shape {:?}", t.shape()),
                });
            }
        }
        Ok(())
    }
}

fn without_grad(t: &Tensor) -> Tensor {
    let mut c = t.clone();
    c.set_requires_grad(false);
    c
}

/// Draws fresh weights: linear maps uniform in ±1/√fan_in (weights and
/// biases alike), layer-norm gains 1 and offsets 0.
pub fn init_encoder(config: &EncoderConfig, seed: u64) -> Result<EncoderParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for (name, shape) in config.layout() {
        let n: usize = shape.iter().product();
        let data = if name.ends_with(".gamma") {
            vec![1.0; n]
        } else if name.ends_with(".beta") {
            vec![0.0; n]
        } else {
            let fan_in = if name.ends_with(".weight") {
                shape[0]
            } else {
                // bias of a linear map: fan-in is the preceding weight's rows
                bias_fan_in(config, &name)
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
        };
        tensors.push(Tensor::new(shape, data)?.with_grad());
        names.push(name);
    }
    Ok(EncoderParams { names, tensors })
}

fn bias_fan_in(config: &EncoderConfig, name: &str) -> usize {
    if name.starts_with("in.") {
        config.token_dim()
    } else if name.ends_with("ff2.bias") {
        config.dim_feedforward
    } else {
        config.model_dim
    }
}

/// Sinusoidal position code of shape `[len, dim]`.
pub fn sinusoidal_table(len: usize, dim: usize) -> Vec<f64> {
    let mut pe = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let k = (i / 2) as f64 * 2.0;
            let angle = pos as f64 / 10_000f64.powf(k / dim as f64);
            pe[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

/// Expands `[B, L, D]` rows into `[B, L, D·(lags+1)]` lagged tokens.
pub fn lagged_tokens(values: &[f64], len: usize, dim: usize, lags: usize) -> Vec<f64> {
    let width = dim * (lags + 1);
    let frames = values.len() / (len * dim);
    let mut out = vec![0.0; frames * len * width];
    for (frame, dst) in values.chunks(len * dim).zip(out.chunks_mut(len * width)) {
        for t in 0..len {
            for k in 0..=lags.min(t) {
                let src = &frame[(t - k) * dim..(t - k + 1) * dim];
                dst[t * width + k * dim..t * width + (k + 1) * dim].copy_from_slice(src);
            }
        }
    }
    out
}

/// How an [`encode_on_tape`] call treats dropout.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut ChaCha8Rng),
}

fn dropout<'t>(tape: &'t Tape, x: Var<'t>, p: f64, mode: &mut Mode<'_>) -> Result<Var<'t>> {
    match mode {
        Mode::Train(rng) if p > 0.0 => {
            let keep = 1.0 / (1.0 - p);
            let mask: Vec<f64> = (0..x.numel())
                .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
                .collect();
            Ok(x.mul(tape.constant(x.shape(), mask)?)?)
        }
        _ => Ok(x),
    }
}

fn affine_norm<'t>(x: Var<'t>, gamma: Var<'t>, beta: Var<'t>) -> Result<Var<'t>> {
    Ok(x.layer_norm(LAYER_NORM_EPS)?.mul(gamma)?.add(beta)?)
}

/// Runs the encoder on `input` of shape `[B, L, D]` using parameter handles
/// from [`EncoderParams::on_tape`]; returns `[B, latent_dim]`.
pub fn encode_on_tape<'t>(
    tape: &'t Tape,
    params: &[Var<'t>],
    config: &EncoderConfig,
    input: Var<'t>,
    mut mode: Mode<'_>,
) -> Result<Var<'t>> {
    let shape = input.shape();
    if shape.len() != 3 {
        return Err(Error::DimensionMismatch {
            what: "frame batch rank",
            expected: 3,
            got: shape.len(),
        });
    }
    if shape[2] != config.input_dim {
        return Err(Error::DimensionMismatch {
            what: "frame feature dimension",
            expected: config.input_dim,
            got: shape[2],
        });
    }
    let expected = config.layout().len();
    if params.len() != expected {
        return Err(Error::DimensionMismatch {
            what: "encoder parameter tensors",
            expected,
            got: params.len(),
        });
    }
    let (len, m) = (shape[1], config.model_dim);
    let scale = 1.0 / (config.head_dim() as f64).sqrt();

    let tokens = if config.token_lags == 0 {
        input
    } else {
        // lagged tokens are rebuilt as a constant: no gradient reaches the input
        let v = lagged_tokens(&input.value(), len, config.input_dim, config.token_lags);
        tape.constant(vec![shape[0], len, config.token_dim()], v)?
    };
    let mut x = tokens.matmul(params[0])?.add(params[1])?;
    if config.positional_encoding == PositionalEncoding::Sinusoidal {
        x = x.add(tape.constant(vec![len, m], sinusoidal_table(len, m))?)?;
    }
    let per_layer = config.tensors_per_layer();
    for layer in 0..config.num_layers {
        let p = &params[2 + layer * per_layer..2 + (layer + 1) * per_layer];
        let h = affine_norm(x, p[0], p[1])?;
        let mut heads = Vec::with_capacity(config.num_heads);
        for head in 0..config.num_heads {
            let w = &p[2 + 6 * head..2 + 6 * (head + 1)];
            let q = h.matmul(w[0])?.add(w[1])?;
            let k = h.matmul(w[2])?.add(w[3])?;
            let v = h.matmul(w[4])?.add(w[5])?;
            let att = q.matmul(k.transpose()?)?.scale(scale)?.softmax_rows()?;
            heads.push(att.matmul(v)?);
        }
        let rest = &p[2 + 6 * config.num_heads..];
        let cat = if heads.len() == 1 { heads[0] } else { tape.concat(&heads, 2)? };
        let attn = cat.matmul(rest[0])?.add(rest[1])?;
        x = x.add(dropout(tape, attn, config.dropout, &mut mode)?)?;
        let h2 = affine_norm(x, rest[2], rest[3])?;
        let ff = h2.matmul(rest[4])?.add(rest[5])?.relu()?.matmul(rest[6])?.add(rest[7])?;
        x = x.add(dropout(tape, ff, config.dropout, &mut mode)?)?;
    }
    let n = params.len();
    let x = affine_norm(x, params[n - 4], params[n - 3])?;
    let pooled = match config.pooling_mode {
        PoolingMode::Mean => x.mean_axis(1)?,
        PoolingMode::Sum => x.sum_axis(1)?,
    };
    Ok(pooled.matmul(params[n - 2])?.add(params[n - 1])?)
}

/// Eval-mode encoding of `batch` (row-major `[B, L, D]`) into `[B, latent_dim]`.
pub fn encode(batch: &[f64], frames: usize, params: &EncoderParams, config: &EncoderConfig) -> Result<Vec<f64>> {
    if frames == 0 {
        return Err(Error::EmptyBatch);
    }
    let per = batch.len() / frames;
    if per * frames != batch.len() || per % config.input_dim != 0 || per == 0 {
        return Err(Error::DimensionMismatch {
            what: "frame batch length",
            expected: frames * config.input_dim,
            got: batch.len(),
        });
    }
    let tape = Tape::new();
    let vars = params.on_tape_frozen(&tape);
    let input = tape.constant(vec![frames, per / config.input_dim, config.input_dim], batch.to_vec())?;
    Ok(encode_on_tape(&tape, &vars, config, input, Mode::Eval)?.value())
}

/// Diagonal Gaussian log-density of `z` after standardization by `(mu, sigma)`:
/// Σᵢ −½((zᵢ−μᵢ)/σᵢ)² − log σᵢ − ½ log 2π.
pub fn marginal_baseline_score(z: &[f64], mu: &[f64], sigma: &[f64]) -> Result<f64> {
    if z.len() != mu.len() || z.len() != sigma.len() {
        return Err(Error::DimensionMismatch {
            what: "baseline statistics",
            expected: z.len(),
            got: mu.len().min(sigma.len()),
        });
    }
    let mut s = 0.0;
    for i in 0..z.len() {
        if !(sigma[i] > 0.0) {
            return Err(Error::ZeroScale { index: i });
        }
        let t = (z[i] - mu[i]) / sigma[i];
        s += -0.5 * t * t - sigma[i].ln() - 0.5 * crate::special::LN_2PI;
    }
    Ok(s)
}
