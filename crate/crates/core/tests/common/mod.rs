//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use moce_core::moce::RoutingMode;
use moce_core::model::{batch_loss, upcycle_init, DenseModel, Example, Parameters};
use moce_core::rng::substream;
use moce_core::tensor::{
    finite_difference_gradient, max_relative_error, Activation, Tape, Tensor, Var,
};
use moce_core::{MoceModel, ModelConfig, Result};
use rand::Rng as _;

pub const FD_STEP: f64 = 1e-5;

pub const OPS: &[&str] = &[
    "matmul",
    "transpose",
    "add",
    "sub",
    "mul",
    "scale",
    "recip",
    "sum",
    "mean",
    "softmax",
    "causal_softmax",
    "gelu",
    "relu",
    "silu",
    "rms_norm",
    "gather_rows",
    "scatter_rows",
    "scale_rows",
    "column",
    "sum_rows",
    "reshape",
    "cross_entropy",
];

fn random(rng: &mut moce_core::rng::Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

/// Values bounded away from zero, for the reciprocal.
fn away_from_zero(rng: &mut moce_core::rng::Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m: f64 = rng.gen_range(0.5..2.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, v).unwrap()
}

/// Scalar objective `Σ out ⊙ w` with fixed, position-dependent weights.
fn contract(tape: &mut Tape, out: Var) -> Result<Var> {
    let t = tape.value(out);
    let w: Vec<f64> = (0..t.numel())
        .map(|i| (1.3 * i as f64 + 0.7).sin())
        .collect();
    let w = tape.constant(Tensor::new(t.shape(), w)?);
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// Largest relative error between taped and central-difference gradients over every input.
fn check(inputs: Vec<Tensor>, build: Build) -> f64 {
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs
            .iter()
            .map(|x| tape.leaf(x.clone().with_requires_grad(true)))
            .collect();
        let out = build(&mut tape, &vars)?;
        let loss = contract(&mut tape, out)?;
        tape.value(loss).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|x| tape.leaf(x.clone().with_requires_grad(true)))
        .collect();
    let out = build(&mut tape, &vars).unwrap();
    let loss = contract(&mut tape, out).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let numeric = finite_difference_gradient(
            |x| {
                let mut xs = inputs.clone();
                xs[i] = x.clone();
                eval(&xs)
            },
            &inputs[i],
            FD_STEP,
        )
        .unwrap();
        let analytic = grads
            .get(*v)
            .map_or_else(|| vec![0.0; numeric.numel()], <[f64]>::to_vec);
        worst = worst.max(max_relative_error(&analytic, numeric.data()));
    }
    worst
}

/// Gradient error of `op` on random inputs with shapes up to 8 × 8.
pub fn op_gradient_error(op: &str, seed: u64) -> f64 {
    let mut rng = substream(seed, op);
    let r = rng.gen_range(1..=8);
    let c = rng.gen_range(1..=8);
    let x = random(&mut rng, &[r, c]);
    match op {
        "matmul" => {
            let k = rng.gen_range(1..=8);
            let y = random(&mut rng, &[c, k]);
            check(vec![x, y], Box::new(|t, v| t.matmul(v[0], v[1])))
        }
        "transpose" => check(vec![x], Box::new(|t, v| t.transpose(v[0]))),
        "add" | "sub" | "mul" => {
            let y = random(&mut rng, &[r, c]);
            let op = op.to_string();
            check(
                vec![x, y],
                Box::new(move |t, v| match op.as_str() {
                    "add" => t.add(v[0], v[1]),
                    "sub" => t.sub(v[0], v[1]),
                    _ => t.mul(v[0], v[1]),
                }),
            )
        }
        "scale" => {
            let s = rng.gen_range(-3.0..3.0);
            check(vec![x], Box::new(move |t, v| Ok(t.scale(v[0], s))))
        }
        "recip" => check(
            vec![away_from_zero(&mut rng, &[r, c])],
            Box::new(|t, v| t.recip(v[0])),
        ),
        "sum" => check(vec![x], Box::new(|t, v| Ok(t.sum(v[0])))),
        "mean" => check(vec![x], Box::new(|t, v| Ok(t.mean(v[0])))),
        "softmax" => check(vec![x], Box::new(|t, v| t.softmax(v[0]))),
        "causal_softmax" => check(
            vec![random(&mut rng, &[r, r])],
            Box::new(|t, v| t.causal_softmax(v[0])),
        ),
        "gelu" => check(
            vec![x],
            Box::new(|t, v| Ok(t.activation(v[0], Activation::Gelu))),
        ),
        "relu" => check(
            vec![x],
            Box::new(|t, v| Ok(t.activation(v[0], Activation::Relu))),
        ),
        "silu" => check(
            vec![x],
            Box::new(|t, v| Ok(t.activation(v[0], Activation::Silu))),
        ),
        "rms_norm" => check(vec![x], Box::new(|t, v| Ok(t.rms_norm(v[0])))),
        "gather_rows" => {
            let idx: Vec<usize> = (0..rng.gen_range(1..=8))
                .map(|_| rng.gen_range(0..r))
                .collect();
            check(vec![x], Box::new(move |t, v| t.gather_rows(v[0], &idx)))
        }
        "scatter_rows" => {
            let total = rng.gen_range(1..=8);
            let idx: Vec<usize> = (0..r).map(|_| rng.gen_range(0..total)).collect();
            check(
                vec![x],
                Box::new(move |t, v| t.scatter_rows(v[0], &idx, total)),
            )
        }
        "scale_rows" => {
            let w = random(&mut rng, &[r]);
            check(vec![x, w], Box::new(|t, v| t.scale_rows(v[0], v[1])))
        }
        "column" => {
            let col = rng.gen_range(0..c);
            check(vec![x], Box::new(move |t, v| t.column(v[0], col)))
        }
        "sum_rows" => check(vec![x], Box::new(|t, v| t.sum_rows(v[0]))),
        "reshape" => check(vec![x], Box::new(move |t, v| t.reshape(v[0], &[c, r]))),
        "cross_entropy" => {
            let targets: Vec<usize> = (0..r).map(|_| rng.gen_range(0..c)).collect();
            let mut positions: Vec<usize> = (0..r).filter(|_| rng.gen_bool(0.6)).collect();
            if positions.is_empty() {
                positions.push(r - 1);
            }
            check(
                vec![x],
                Box::new(move |t, v| t.cross_entropy(v[0], &targets, &positions)),
            )
        }
        other => panic!("unknown op {other}"),
    }
}

pub fn micro_config(seed: u64) -> ModelConfig {
    let (mode, k, variant) = match seed % 4 {
        0 => (RoutingMode::TopK, 2, false),
        1 => (RoutingMode::TopK, 1, false),
        2 => (RoutingMode::Soft, 2, false),
        _ => (RoutingMode::TopK, 1, true),
    };
    ModelConfig {
        vocab_size: 11,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 8,
        max_seq_len: 6,
        rank: 3,
        n_groups: 2,
        n_experts: 2,
        k,
        mode,
        variant,
        freeze_attention: false,
        freeze_embeddings: false,
        seed,
        ..ModelConfig::default()
    }
}

/// Upcycled micro model with random adapter up-projections and routers so no path is trivially zero.
/// Every parameter, the frozen base included, is made differentiable.
pub fn micro_model(seed: u64) -> MoceModel {
    let cfg = micro_config(seed);
    let mut m = upcycle_init(&DenseModel::random(&cfg).unwrap(), &cfg).unwrap();
    let mut rng = substream(seed, "perturb");
    m.visit_params_mut(&mut |name, t| {
        if name.ends_with("w_up") || name.ends_with("router") {
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.gen_range(-0.5..0.5));
        }
        t.set_requires_grad(true);
    });
    m
}

pub fn micro_batch(seed: u64) -> Vec<Example> {
    let mut rng = substream(seed, "micro-batch");
    (0..2)
        .map(|g| {
            let len = rng.gen_range(3..=6);
            let seq: Vec<usize> = (0..=len).map(|_| rng.gen_range(0..11)).collect();
            Example {
                tokens: seq[..len].to_vec(),
                targets: seq[1..].to_vec(),
                positions: (len / 2..len).collect(),
                group: g,
            }
        })
        .collect()
}

/// Largest relative gradient error over every parameter of the micro model, balance loss included.
pub fn micro_model_gradient_error(seed: u64) -> f64 {
    let model = micro_model(seed);
    let batch = micro_batch(seed);
    let lambda = 0.1;
    let (mut tape, binder, loss, _) = batch_loss(&model, &batch, lambda).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut params = Vec::new();
    model.visit_params(&mut |n, t| params.push((n.to_string(), t.clone())));
    let mut worst = 0.0f64;
    let mut m = model.clone();
    for (name, value) in params {
        let numeric = finite_difference_gradient(
            |p| {
                m.visit_params_mut(&mut |n, t| {
                    if n == name {
                        t.data_mut().copy_from_slice(p.data());
                    }
                });
                Ok(batch_loss(&m, &batch, lambda)?.3.loss)
            },
            &value,
            FD_STEP,
        )
        .unwrap();
        m.visit_params_mut(&mut |n, t| {
            if n == name {
                t.data_mut().copy_from_slice(value.data());
            }
        });
        let analytic = binder
            .gradient(&grads, &name)
            .map_or_else(|| vec![0.0; numeric.numel()], <[f64]>::to_vec);
        worst = worst.max(max_relative_error(&analytic, numeric.data()));
    }
    worst
}
