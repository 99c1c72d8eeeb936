//! Toy decoder-only transformer with MoCE feed-forward layers, its dense base,
//! optimizer and checkpoints.

mod attention;
mod checkpoint;
mod config;
mod dense;
mod network;
mod optim;
mod train;

pub use attention::{Attention, AttentionHead};
pub use checkpoint::{
    decode_params, encode_params, load_params_into, Checkpoint, CLUSTERING_FILE, MANIFEST_FILE,
    PARAMS_FILE,
};
pub(crate) use config::parse_value;
pub use config::{ModelConfig, DEFAULT_MAX_SEQ_LEN, MODEL_CONFIG_KEYS};
pub use dense::{DenseBlock, DenseModel};
pub use network::{model_forward, upcycle_init, ForwardPass, MoceBlock, MoceModel};
pub use optim::Adam;
pub use train::{batch_loss, dense_train_step, train_step, Example, StepStats};

use std::collections::BTreeMap;

use crate::error::{MoceError, Result};
use crate::moce::GateTrace;
use crate::tensor::{self, Binder, Tape, Tensor, Var};

/// Named parameter traversal in a fixed order.
pub trait Parameters {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn n_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.numel());
        n
    }

    fn n_trainable(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| {
            if t.requires_grad() {
                n += t.numel()
            }
        });
        n
    }
}

pub(crate) fn embed_tokens(
    tape: &mut Tape,
    binder: &mut Binder,
    config: &ModelConfig,
    tok_emb: &Tensor,
    pos_emb: &Tensor,
    tokens: &[usize],
) -> Result<Var> {
    if tokens.is_empty() {
        return Err(MoceError::contract("empty token sequence"));
    }
    if tokens.len() > config.max_seq_len {
        return Err(MoceError::contract(format!(
            "sequence of {} tokens exceeds max_seq_len {}",
            tokens.len(),
            config.max_seq_len
        )));
    }
    let te = binder.bind(tape, "tok_emb", tok_emb);
    let pe = binder.bind(tape, "pos_emb", pos_emb);
    let x = tape.gather_rows(te, tokens).map_err(|_| {
        MoceError::contract(format!(
            "token id outside vocabulary of {}",
            config.vocab_size
        ))
    })?;
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let p = tape.gather_rows(pe, &positions)?;
    tape.add(x, p)
}

pub(crate) fn output_logits(
    tape: &mut Tape,
    binder: &mut Binder,
    w_out: &Tensor,
    r: Var,
) -> Result<Var> {
    let n = tape.rms_norm(r);
    let w = binder.bind(tape, "out", w_out);
    tape.matmul(n, w)
}

/// Mean negative log-likelihood of `targets[p]` under row `p` of `logits`, over `positions`.
pub fn lm_loss(logits: &Tensor, targets: &[usize], positions: &[usize]) -> Result<f64> {
    tensor::cross_entropy(logits, targets, positions).map(|(l, _)| l)
}

/// Taped balancing loss `Σ_routers N·Σᵢ fᵢ·Pᵢ` over every trace.
///
/// Traces sharing a key are pooled, so each router is scored over all tokens it
/// saw. `fᵢ` (top-1 fractions) enters as a constant; `Pᵢ` carries the gradient.
/// Returns `None` when there are no traces.
pub fn balance_loss_taped(tape: &mut Tape, traces: &[GateTrace]) -> Result<Option<Var>> {
    struct Pool {
        sums: Option<Var>,
        counts: Vec<f64>,
        tokens: usize,
    }
    let mut pools: BTreeMap<&str, Pool> = BTreeMap::new();
    for tr in traces {
        let n = tape.value(tr.gates).cols();
        let s = tape.sum_rows(tr.gates)?;
        let pool = pools.entry(tr.key.as_str()).or_insert_with(|| Pool {
            sums: None,
            counts: vec![0.0; n],
            tokens: 0,
        });
        if pool.counts.len() != n {
            return Err(MoceError::shape(format!(
                "router {} traced with differing expert counts",
                tr.key
            )));
        }
        pool.sums = Some(match pool.sums {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
        for &e in &tr.top1 {
            pool.counts[e] += 1.0;
        }
        pool.tokens += tr.top1.len();
    }
    let mut total: Option<Var> = None;
    for pool in pools.into_values() {
        let (Some(sums), t) = (pool.sums, pool.tokens as f64) else {
            continue;
        };
        let n = pool.counts.len();
        let f = tape.constant(Tensor::new(
            &[n, 1],
            pool.counts.iter().map(|c| c / t).collect(),
        )?);
        let dot = tape.matmul(sums, f)?;
        let l = tape.scale(dot, n as f64 / t);
        total = Some(match total {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
    }
    total.map(|v| tape.reshape(v, &[1])).transpose()
}
