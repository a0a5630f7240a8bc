//! Transformer encoder-decoder over raw magnitude frames.
//!
//! The feature width is the model width: no input embedding, no output
//! projection, no softmax head. Sinusoidal positions are added to the raw
//! magnitudes, the stack is post-norm, and the decoder output *is* the
//! predicted magnitude.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::seq::SpecialTokens;
use crate::tensor::Tensor;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    /// Inference cap on emitted frames; training stores the corpus maximum
    /// target length plus headroom here.
    pub max_decode_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 256,
            n_layers_enc: 6,
            n_layers_dec: 6,
            n_heads: 8,
            d_ff: 1024,
            dropout: 0.1,
            max_decode_len: 256,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || !self.d_model.is_multiple_of(2) {
            return Err(Error::Config {
                key: "d_model".into(),
                detail: format!("{} must be positive and even", self.d_model),
            });
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config {
                key: "n_heads".into(),
                detail: format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads),
            });
        }
        if self.n_layers_enc == 0 || self.n_layers_dec == 0 || self.d_ff == 0 {
            return Err(Error::Config {
                key: "layers".into(),
                detail: "layer counts and d_ff must be positive".into(),
            });
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config {
                key: "dropout".into(),
                detail: format!("{} outside [0, 1)", self.dropout),
            });
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// All trainable parameters plus everything a checkpoint carries: special
/// tokens, optimizer moments, the global step, and corpus statistics used
/// at inference time.
#[derive(Debug, Clone)]
pub struct ModelState<T> {
    pub config: ModelConfig,
    pub params: BTreeMap<String, Tensor<T>>,
    pub tokens: SpecialTokens<T>,
    pub opt_m: BTreeMap<String, Tensor<T>>,
    pub opt_v: BTreeMap<String, Tensor<T>>,
    pub step: u64,
    /// Mean unpadded target frame over the training corpus; anchors the
    /// default EOS stopping distance.
    pub mean_frame: Tensor<T>,
}

/// Parameter names in a fixed generation order: attention projections,
/// then the first norm, feed-forward, second norm (decoder layers add the
/// cross-attention block and a third norm).
fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, ParamKind)> {
    let d = cfg.d_model;
    let ff = cfg.d_ff;
    let mut specs = Vec::new();
    let attn = |specs: &mut Vec<(String, Vec<usize>, ParamKind)>, prefix: &str| {
        for w in ["wq", "wk", "wv", "wo"] {
            specs.push((format!("{prefix}.{w}"), vec![d, d], ParamKind::Weight));
        }
        for b in ["bq", "bk", "bv", "bo"] {
            specs.push((format!("{prefix}.{b}"), vec![d], ParamKind::Bias));
        }
    };
    let norm = |specs: &mut Vec<(String, Vec<usize>, ParamKind)>, prefix: &str| {
        specs.push((format!("{prefix}.g"), vec![d], ParamKind::Gain));
        specs.push((format!("{prefix}.b"), vec![d], ParamKind::Bias));
    };
    let ffn = |specs: &mut Vec<(String, Vec<usize>, ParamKind)>, prefix: &str| {
        specs.push((format!("{prefix}.w1"), vec![d, ff], ParamKind::Weight));
        specs.push((format!("{prefix}.b1"), vec![ff], ParamKind::Bias));
        specs.push((format!("{prefix}.w2"), vec![ff, d], ParamKind::Weight));
        specs.push((format!("{prefix}.b2"), vec![d], ParamKind::Bias));
    };
    for l in 0..cfg.n_layers_enc {
        attn(&mut specs, &format!("enc.{l}.self"));
        norm(&mut specs, &format!("enc.{l}.norm1"));
        ffn(&mut specs, &format!("enc.{l}.ffn"));
        norm(&mut specs, &format!("enc.{l}.norm2"));
    }
    for l in 0..cfg.n_layers_dec {
        attn(&mut specs, &format!("dec.{l}.self"));
        norm(&mut specs, &format!("dec.{l}.norm1"));
        attn(&mut specs, &format!("dec.{l}.cross"));
        norm(&mut specs, &format!("dec.{l}.norm2"));
        ffn(&mut specs, &format!("dec.{l}.ffn"));
        norm(&mut specs, &format!("dec.{l}.norm3"));
    }
    specs
}

enum ParamKind {
    Weight,
    Bias,
    Gain,
}

impl<T: Real> ModelState<T> {
    /// Fresh state: weights are Xavier-uniform on
    /// `±sqrt(6/(fan_in+fan_out))`, biases zero, norm gains one. Parameter
    /// draws happen in a fixed order from a stream derived from `seed`.
    pub fn init(config: ModelConfig, tokens: SpecialTokens<T>, seed: u64) -> Result<Self> {
        config.validate()?;
        if tokens.sos.numel() != config.d_model {
            return Err(Error::shape(
                "model_init",
                format!("tokens dim {} != d_model {}", tokens.sos.numel(), config.d_model),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for (name, shape, kind) in param_specs(&config) {
            let t = match kind {
                ParamKind::Weight => {
                    let fan_in = shape[0] as f64;
                    let fan_out = shape[1] as f64;
                    let bound = (6.0 / (fan_in + fan_out)).sqrt();
                    Tensor::uniform(
                        shape,
                        T::from_f64_c(-bound),
                        T::from_f64_c(bound),
                        &mut rng,
                    )
                }
                ParamKind::Bias => Tensor::zeros(shape),
                ParamKind::Gain => Tensor::full(shape, T::one()),
            };
            params.insert(name, t);
        }
        let mean_frame = Tensor::zeros(vec![config.d_model]);
        Ok(Self {
            config,
            params,
            tokens,
            opt_m: BTreeMap::new(),
            opt_v: BTreeMap::new(),
            step: 0,
            mean_frame,
        })
    }

    pub fn param(&self, name: &str) -> &Tensor<T> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn param_mut(&mut self, name: &str) -> &mut Tensor<T> {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Tensor::is_finite)
    }

    pub fn cast<U: Real>(&self) -> ModelState<U> {
        ModelState {
            config: self.config.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            tokens: SpecialTokens {
                sos: self.tokens.sos.cast(),
                eos: self.tokens.eos.cast(),
                rng_seed: self.tokens.rng_seed,
            },
            opt_m: self.opt_m.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            opt_v: self.opt_v.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            step: self.step,
            mean_frame: self.mean_frame.cast(),
        }
    }
}

/// Graph handles for every registered parameter.
pub struct ParamVars {
    map: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Var {
        *self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not registered"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.map.iter()
    }
}

/// Copies every parameter onto the graph as a leaf; `trainable` controls
/// gradient tracking.
pub fn register_params<T: Real>(
    g: &mut Graph<T>,
    state: &ModelState<T>,
    trainable: bool,
) -> ParamVars {
    let map = state
        .params
        .iter()
        .map(|(name, tensor)| (name.clone(), g.leaf(tensor.clone(), trainable)))
        .collect();
    ParamVars { map }
}

/// Sinusoidal positional encoding `(T, d_model)`:
/// `PE[t, 2i] = sin(t / 10000^(2i/d))`, `PE[t, 2i+1] = cos(...)`.
pub fn positional_encoding<T: Real>(t_len: usize, d_model: usize) -> Tensor<T> {
    Tensor::from_fn(vec![t_len, d_model], |idx| {
        let t = (idx / d_model) as f64;
        let i = idx % d_model;
        let pair = (i / 2) as f64;
        let angle = t / 10000f64.powf(2.0 * pair / d_model as f64);
        T::from_f64_c(if i.is_multiple_of(2) { angle.sin() } else { angle.cos() })
    })
}

fn linear<T: Real>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

/// Scaled dot-product attention with `n_heads` heads behind the `prefix`
/// projections. `biases` are added to the pre-softmax scores
/// (pad/causal masks); attention weights are dropped out when training.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention<T: Real>(
    g: &mut Graph<T>,
    params: &ParamVars,
    prefix: &str,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    biases: &[Var],
    cfg: &ModelConfig,
    training: bool,
    rng: &mut impl Rng,
) -> Result<Var> {
    let (b, t_q) = {
        let s = g.shape(q_in);
        (s[0], s[1])
    };
    let t_k = g.shape(k_in)[1];
    let d = cfg.d_model;
    let h = cfg.n_heads;
    let dh = cfg.head_dim();

    let q = linear(g, q_in, params.get(&format!("{prefix}.wq")), params.get(&format!("{prefix}.bq")))?;
    let k = linear(g, k_in, params.get(&format!("{prefix}.wk")), params.get(&format!("{prefix}.bk")))?;
    let v = linear(g, v_in, params.get(&format!("{prefix}.wv")), params.get(&format!("{prefix}.bv")))?;

    let qh = g.reshape(q, vec![b, t_q, h, dh])?;
    let qh = g.permute(qh, &[0, 2, 1, 3])?;
    let kh = g.reshape(k, vec![b, t_k, h, dh])?;
    let kh = g.permute(kh, &[0, 2, 3, 1])?;
    let vh = g.reshape(v, vec![b, t_k, h, dh])?;
    let vh = g.permute(vh, &[0, 2, 1, 3])?;

    let mut scores = g.matmul(qh, kh)?;
    scores = g.mul_scalar(scores, T::from_f64_c(1.0 / (dh as f64).sqrt()))?;
    for &bias in biases {
        scores = g.add(scores, bias)?;
    }
    let mut weights = g.softmax_lastdim(scores)?;
    weights = g.dropout(weights, cfg.dropout, training, rng)?;

    let ctx = g.matmul(weights, vh)?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, vec![b, t_q, d])?;
    linear(g, ctx, params.get(&format!("{prefix}.wo")), params.get(&format!("{prefix}.bo")))
}

fn feed_forward<T: Real>(
    g: &mut Graph<T>,
    params: &ParamVars,
    prefix: &str,
    x: Var,
    cfg: &ModelConfig,
    training: bool,
    rng: &mut impl Rng,
) -> Result<Var> {
    let inner = linear(g, x, params.get(&format!("{prefix}.w1")), params.get(&format!("{prefix}.b1")))?;
    let inner = g.relu(inner)?;
    let inner = g.dropout(inner, cfg.dropout, training, rng)?;
    linear(g, inner, params.get(&format!("{prefix}.w2")), params.get(&format!("{prefix}.b2")))
}

fn norm<T: Real>(g: &mut Graph<T>, params: &ParamVars, prefix: &str, x: Var) -> Result<Var> {
    g.layer_norm(
        x,
        params.get(&format!("{prefix}.g")),
        params.get(&format!("{prefix}.b")),
        T::from_f64_c(LAYER_NORM_EPS),
    )
}

fn add_positions<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    cfg: &ModelConfig,
    training: bool,
    rng: &mut impl Rng,
) -> Result<Var> {
    let t_len = g.shape(x)[1];
    let pe = g.constant(positional_encoding::<T>(t_len, cfg.d_model));
    let summed = g.add(x, pe)?;
    g.dropout(summed, cfg.dropout, training, rng)
}

/// Encoder stack: positions, then per layer self-attention and
/// feed-forward, each behind a residual and a post-norm.
pub fn encoder_forward<T: Real>(
    g: &mut Graph<T>,
    params: &ParamVars,
    src: Var,
    src_biases: &[Var],
    cfg: &ModelConfig,
    training: bool,
    rng: &mut impl Rng,
) -> Result<Var> {
    let mut x = add_positions(g, src, cfg, training, rng)?;
    for l in 0..cfg.n_layers_enc {
        let attn = multi_head_attention(
            g,
            params,
            &format!("enc.{l}.self"),
            x,
            x,
            x,
            src_biases,
            cfg,
            training,
            rng,
        )?;
        let res = g.add(x, attn)?;
        x = norm(g, params, &format!("enc.{l}.norm1"), res)?;
        let ff = feed_forward(g, params, &format!("enc.{l}.ffn"), x, cfg, training, rng)?;
        let res = g.add(x, ff)?;
        x = norm(g, params, &format!("enc.{l}.norm2"), res)?;
    }
    Ok(x)
}

/// Decoder stack: masked self-attention, cross-attention into the encoder
/// memory, feed-forward; residual + post-norm throughout. The output is
/// the predicted magnitude, width `d_model`.
#[allow(clippy::too_many_arguments)]
pub fn decoder_forward<T: Real>(
    g: &mut Graph<T>,
    params: &ParamVars,
    tgt_in: Var,
    memory: Var,
    self_biases: &[Var],
    cross_biases: &[Var],
    cfg: &ModelConfig,
    training: bool,
    rng: &mut impl Rng,
) -> Result<Var> {
    let mut x = add_positions(g, tgt_in, cfg, training, rng)?;
    for l in 0..cfg.n_layers_dec {
        let attn = multi_head_attention(
            g,
            params,
            &format!("dec.{l}.self"),
            x,
            x,
            x,
            self_biases,
            cfg,
            training,
            rng,
        )?;
        let res = g.add(x, attn)?;
        x = norm(g, params, &format!("dec.{l}.norm1"), res)?;

        let cross = multi_head_attention(
            g,
            params,
            &format!("dec.{l}.cross"),
            x,
            memory,
            memory,
            cross_biases,
            cfg,
            training,
            rng,
        )?;
        let res = g.add(x, cross)?;
        x = norm(g, params, &format!("dec.{l}.norm2"), res)?;

        let ff = feed_forward(g, params, &format!("dec.{l}.ffn"), x, cfg, training, rng)?;
        let res = g.add(x, ff)?;
        x = norm(g, params, &format!("dec.{l}.norm3"), res)?;
    }
    Ok(x)
}
