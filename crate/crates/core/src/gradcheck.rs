//! Central finite-difference verification of the reverse-mode engine, at
//! float64. Used by the test suite and exposed through the CLI as a
//! standalone verification harness.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::model::{
    decoder_forward, encoder_forward, register_params, ModelConfig, ModelState,
};
use crate::seq::{causal_bias, make_special_tokens};
use crate::tensor::Tensor;
use crate::train::{loss_final, LossMode};

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Per-op relative-error tolerance.
pub const OP_TOLERANCE: f64 = 1e-4;
/// End-to-end (tiny transformer loss) tolerance.
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

/// One checked item.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Full harness result; one outcome per op plus the end-to-end check.
#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub outcomes: Vec<CheckOutcome>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        !self.outcomes.is_empty() && self.outcomes.iter().all(|o| o.passed)
    }
}

/// Relative error with a floor so near-zero gradients compare sanely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Largest relative error across two matching gradient sets.
pub fn max_relative_error(analytic: &[Tensor<f64>], numeric: &[Tensor<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        for (&av, &nv) in a.data().iter().zip(n.data()) {
            worst = worst.max(relative_error(av, nv));
        }
    }
    worst
}

/// Analytic gradients of a scalar-valued graph function with respect to
/// every input.
pub fn analytic_gradients<F>(inputs: &[Tensor<f64>], f: &F) -> Result<Vec<Tensor<f64>>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    Ok(vars
        .iter()
        .map(|&v| g.grad(v).expect("tracked input"))
        .collect())
}

fn eval_loss<F>(inputs: &[Tensor<f64>], f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
    let loss = f(&mut g, &vars)?;
    Ok(g.value(loss).data()[0])
}

/// Central finite differences of the same function.
pub fn fd_gradients<F>(inputs: &[Tensor<f64>], f: &F, step: f64) -> Result<Vec<Tensor<f64>>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[i].shape().to_vec());
        for e in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[e] += step;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[e] -= step;
            let lp = eval_loss(&plus, f)?;
            let lm = eval_loss(&minus, f)?;
            grad.data_mut()[e] = (lp - lm) / (2.0 * step);
        }
        grads.push(grad);
    }
    Ok(grads)
}

/// Runs one named check: analytic vs central-difference gradients of a
/// scalar function of the inputs.
pub fn check_gradients<F>(name: &str, inputs: &[Tensor<f64>], tolerance: f64, f: F) -> CheckOutcome
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let outcome = (|| -> Result<f64> {
        let analytic = analytic_gradients(inputs, &f)?;
        let numeric = fd_gradients(inputs, &f, FD_STEP)?;
        Ok(max_relative_error(&analytic, &numeric))
    })();
    match outcome {
        Ok(max_rel_err) => CheckOutcome {
            name: name.to_string(),
            max_rel_err,
            tolerance,
            passed: max_rel_err <= tolerance,
        },
        Err(_) => CheckOutcome {
            name: name.to_string(),
            max_rel_err: f64::INFINITY,
            tolerance,
            passed: false,
        },
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), lo, hi, rng)
}

/// Random values bounded away from zero, for ops with a kink there.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let mag: f64 = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            mag
        } else {
            -mag
        }
    })
}

/// Reduces an arbitrary tensor to a scalar through a fixed random
/// projection, so every output element influences the loss.
fn project(g: &mut Graph<f64>, x: Var, proj: &Tensor<f64>) -> Result<Var> {
    let p = g.constant(proj.clone());
    let weighted = g.mul(x, p)?;
    g.sum_all(weighted)
}

/// Checks every autodiff op against central finite differences.
pub fn standard_op_suite(seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut outcomes = Vec::new();

    // matmul with a shared rank-2 rhs
    {
        let a = uniform(&[2, 3, 4], -1.0, 1.0, &mut rng);
        let b = uniform(&[4, 5], -1.0, 1.0, &mut rng);
        let proj = uniform(&[2, 3, 5], -1.0, 1.0, &mut rng);
        outcomes.push(check_gradients("matmul", &[a, b], OP_TOLERANCE, move |g, v| {
            let c = g.matmul(v[0], v[1])?;
            project(g, c, &proj)
        }));
    }
    // batched matmul
    {
        let a = uniform(&[2, 3, 4], -1.0, 1.0, &mut rng);
        let b = uniform(&[2, 4, 5], -1.0, 1.0, &mut rng);
        let proj = uniform(&[2, 3, 5], -1.0, 1.0, &mut rng);
        outcomes.push(check_gradients(
            "matmul_batched",
            &[a, b],
            OP_TOLERANCE,
            move |g, v| {
                let c = g.matmul(v[0], v[1])?;
                project(g, c, &proj)
            },
        ));
    }
    // add, same shape and broadcast
    {
        let a = uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let b = uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let proj = uniform(&[3, 4], -1.0, 1.0, &mut rng);
        outcomes.push(check_gradients("add", &[a, b], OP_TOLERANCE, move |g, v| {
            let c = g.add(v[0], v[1])?;
            project(g, c, &proj)
        }));
    }
    {
        let a = uniform(&[2, 3, 4], -1.0, 1.0, &mut rng);
        let bias = uniform(&[4], -1.0, 1.0, &mut rng);
        let proj = uniform(&[2, 3, 4], -1.0, 1.0, &mut rng);
        outcomes.push(check_gradients(
            "add_bias_broadcast",
            &[a, bias],
            OP_TOLERANCE,
            move |g, v| {
                let c = g.add(v[0], v[1])?;
                project(g, c, &proj)
            },
        ));
    }
    {
        let a = uniform(&[2, 2, 3, 4], -1.0, 1.0, &mut rng);
        let mask = uniform(&[2, 1, 1, 4], -1.0, 1.0, &mut rng);
        let proj = uniform(&[2, 2, 3, 4], -1.0, 1.0, &mut rng);
        outcomes.push(check_gradients(
            "add_mask_broadcast",
            &[a, mask],
            OP_TOLERANCE,
            move |g, v| {
                let c = g.add(v[0], v[1])?;
                project(g, c, &proj)
            },
        ));
    }
    // sub
    {
        let a = uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let b = uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let proj = uniform(&[3, 4], -1.0, 1.0, &mut rng);
        outcomes.push(check_gradients("sub", &[a, b], OP_TOLERANCE, move |g, v| {
            let c = g.sub(v[0], v[1])?;
            project(g, c, &proj)
        }));
    }
    // mul, same shape and broadcast
    {
        let a = uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let b = uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let proj = uniform(&[3, 4], -1.0, 1.0, &mut rng);
        outcomes.push(check_gradients("mul", &[a, b], OP_TOLERANCE, move |g, v| {
            let c = g.mul(v[0], v[1])?;
            project(g, c, &proj)
        }));
    }
    {
        let a = uniform(&[2, 3, 4], -1.0, 1.0, &mut rng);
        let m = uniform(&[3, 1], -1.0, 1.0, &mut rng);
        let proj = uniform(&[2, 3, 4], -1.0, 1.0, &mut rng);
        outcomes.push(check_gradients(
            "mul_broadcast",
            &[a, m],
            OP_TOLERANCE,
            move |g, v| {
                let c = g.mul(v[0], v[1])?;
                project(g, c, &proj)
            },
        ));
    }
    // mul_scalar
    {
        let a = uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let proj = uniform(&[3, 4], -1.0, 1.0, &mut rng);
        outcomes.push(check_gradients("mul_scalar", &[a], OP_TOLERANCE, move |g, v| {
            let c = g.mul_scalar(v[0], -1.7)?;
            project(g, c, &proj)
        }));
    }
    // relu and abs away from their kinks
    {
        let a = away_from_zero(&[4, 5], &mut rng);
        let proj = uniform(&[4, 5], -1.0, 1.0, &mut rng);
        outcomes.push(check_gradients("relu", &[a], OP_TOLERANCE, move |g, v| {
            let c = g.relu(v[0])?;
            project(g, c, &proj)
        }));
    }
    {
        let a = away_from_zero(&[4, 5], &mut rng);
        let proj = uniform(&[4, 5], -1.0, 1.0, &mut rng);
        outcomes.push(check_gradients("abs", &[a], OP_TOLERANCE, move |g, v| {
            let c = g.abs(v[0])?;
            project(g, c, &proj)
        }));
    }
    // square
    {
        let a = uniform(&[4, 5], -1.0, 1.0, &mut rng);
        let proj = uniform(&[4, 5], -1.0, 1.0, &mut rng);
        outcomes.push(check_gradients("square", &[a], OP_TOLERANCE, move |g, v| {
            let c = g.square(v[0])?;
            project(g, c, &proj)
        }));
    }
    // sum_all
    {
        let a = uniform(&[4, 5], -1.0, 1.0, &mut rng);
        outcomes.push(check_gradients("sum_all", &[a], OP_TOLERANCE, |g, v| {
            g.sum_all(v[0])
        }));
    }
    // softmax over the last dim
    {
        let a = uniform(&[3, 6], -2.0, 2.0, &mut rng);
        let proj = uniform(&[3, 6], -1.0, 1.0, &mut rng);
        outcomes.push(check_gradients(
            "softmax_lastdim",
            &[a],
            OP_TOLERANCE,
            move |g, v| {
                let c = g.softmax_lastdim(v[0])?;
                project(g, c, &proj)
            },
        ));
    }
    // layer_norm: input, gain, bias all checked
    {
        let x = uniform(&[3, 8], -1.0, 1.0, &mut rng);
        let gain = uniform(&[8], 0.5, 1.5, &mut rng);
        let bias = uniform(&[8], -0.5, 0.5, &mut rng);
        let proj = uniform(&[3, 8], -1.0, 1.0, &mut rng);
        outcomes.push(check_gradients(
            "layer_norm",
            &[x, gain, bias],
            OP_TOLERANCE,
            move |g, v| {
                let c = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
                project(g, c, &proj)
            },
        ));
    }
    // dropout with a deterministic mask (same seed on every evaluation)
    {
        let a = uniform(&[4, 5], -1.0, 1.0, &mut rng);
        let proj = uniform(&[4, 5], -1.0, 1.0, &mut rng);
        outcomes.push(check_gradients("dropout", &[a], OP_TOLERANCE, move |g, v| {
            let mut drop_rng = ChaCha8Rng::seed_from_u64(1234);
            let c = g.dropout(v[0], 0.3, true, &mut drop_rng)?;
            project(g, c, &proj)
        }));
    }
    // reshape and permute
    {
        let a = uniform(&[2, 3, 4], -1.0, 1.0, &mut rng);
        let proj = uniform(&[4, 6], -1.0, 1.0, &mut rng);
        outcomes.push(check_gradients("reshape", &[a], OP_TOLERANCE, move |g, v| {
            let c = g.reshape(v[0], vec![4, 6])?;
            project(g, c, &proj)
        }));
    }
    {
        let a = uniform(&[2, 3, 4], -1.0, 1.0, &mut rng);
        let proj = uniform(&[4, 2, 3], -1.0, 1.0, &mut rng);
        outcomes.push(check_gradients("permute", &[a], OP_TOLERANCE, move |g, v| {
            let c = g.permute(v[0], &[2, 0, 1])?;
            project(g, c, &proj)
        }));
    }

    GradCheckReport { outcomes }
}

/// Builds the tiny end-to-end fixture: a one-layer, two-head, width-8
/// model with a fixed random batch.
fn tiny_fixture(seed: u64) -> (ModelState<f64>, Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let cfg = ModelConfig {
        d_model: 8,
        n_layers_enc: 1,
        n_layers_dec: 1,
        n_heads: 2,
        d_ff: 16,
        dropout: 0.0,
        max_decode_len: 8,
    };
    let tokens = make_special_tokens(seed, 8);
    let state = ModelState::init(cfg, tokens, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let src = Tensor::uniform(vec![2, 4, 8], 0.0, 1.0, &mut rng);
    let dec_in = Tensor::uniform(vec![2, 4, 8], 0.0, 1.0, &mut rng);
    let dec_tgt = Tensor::uniform(vec![2, 4, 8], 0.0, 1.0, &mut rng);
    (state, src, dec_in, dec_tgt)
}

type NamedGrads = Vec<(String, Tensor<f64>)>;

fn tiny_loss(
    state: &ModelState<f64>,
    src: &Tensor<f64>,
    dec_in: &Tensor<f64>,
    dec_tgt: &Tensor<f64>,
    trainable: bool,
) -> Result<(f64, NamedGrads)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = Graph::new();
    let params = register_params(&mut g, state, trainable);
    let s = g.constant(src.clone());
    let d_in = g.constant(dec_in.clone());
    let d_tgt = g.constant(dec_tgt.clone());
    let cb = g.constant(causal_bias::<f64>(dec_in.shape()[1]));
    let memory = encoder_forward(&mut g, &params, s, &[], &state.config, false, &mut rng)?;
    let pred = decoder_forward(
        &mut g,
        &params,
        d_in,
        memory,
        &[cb],
        &[],
        &state.config,
        false,
        &mut rng,
    )?;
    let bundle = loss_final(&mut g, d_tgt, pred, None, LossMode::Normalized)?;
    g.backward(bundle.total)?;
    let loss = g.value(bundle.total).data()[0];
    let grads = if trainable {
        params
            .iter()
            .map(|(name, &var)| (name.clone(), g.grad(var).expect("tracked")))
            .collect()
    } else {
        Vec::new()
    };
    Ok((loss, grads))
}

/// End-to-end check: the composite teacher-forcing loss of the tiny model
/// against finite differences over every parameter.
pub fn end_to_end_check(seed: u64) -> CheckOutcome {
    let outcome = (|| -> Result<f64> {
        let (state, src, dec_in, dec_tgt) = tiny_fixture(seed);
        let (_, analytic) = tiny_loss(&state, &src, &dec_in, &dec_tgt, true)?;
        let mut worst = 0.0f64;
        for (name, grad) in &analytic {
            for e in 0..grad.numel() {
                let mut plus = state.clone();
                plus.param_mut(name).data_mut()[e] += FD_STEP;
                let mut minus = state.clone();
                minus.param_mut(name).data_mut()[e] -= FD_STEP;
                let (lp, _) = tiny_loss(&plus, &src, &dec_in, &dec_tgt, false)?;
                let (lm, _) = tiny_loss(&minus, &src, &dec_in, &dec_tgt, false)?;
                let numeric = (lp - lm) / (2.0 * FD_STEP);
                worst = worst.max(relative_error(grad.data()[e], numeric));
            }
        }
        Ok(worst)
    })();
    match outcome {
        Ok(max_rel_err) => CheckOutcome {
            name: "transformer_loss_end_to_end".into(),
            max_rel_err,
            tolerance: END_TO_END_TOLERANCE,
            passed: max_rel_err <= END_TO_END_TOLERANCE,
        },
        Err(_) => CheckOutcome {
            name: "transformer_loss_end_to_end".into(),
            max_rel_err: f64::INFINITY,
            tolerance: END_TO_END_TOLERANCE,
            passed: false,
        },
    }
}

/// The whole harness: each op, then the end-to-end model loss.
pub fn full_report(seed: u64) -> GradCheckReport {
    let mut report = standard_op_suite(seed);
    report.outcomes.push(end_to_end_check(seed));
    report
}
