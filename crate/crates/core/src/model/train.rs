use super::{balance_loss_taped, Adam, DenseModel, MoceModel};
use crate::error::{MoceError, Result};
use crate::moce::{load_balance_loss, RoutingRecord};
use crate::tensor::{Binder, Tape, Var};

/// One supervised sequence: model input, next-token targets, supervised rows and group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
    pub positions: Vec<usize>,
    pub group: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    /// `lm_loss + λ·balance_loss`, as differentiated.
    pub loss: f64,
    pub lm_loss: f64,
    /// Unscaled balancing loss summed over layers and routers.
    pub balance_loss: f64,
    pub grad_norm: f64,
    /// One record per layer, pooled over the batch.
    pub records: Vec<RoutingRecord>,
}

fn mean_of(tape: &mut Tape, terms: Vec<Var>) -> Result<Var> {
    let n = terms.len();
    let mut it = terms.into_iter();
    let mut acc = it
        .next()
        .ok_or_else(|| MoceError::contract("empty batch"))?;
    for v in it {
        acc = tape.add(acc, v)?;
    }
    Ok(tape.scale(acc, 1.0 / n as f64))
}

/// Builds the batch loss on a fresh tape without updating anything.
pub fn batch_loss(
    model: &MoceModel,
    batch: &[Example],
    lambda: f64,
) -> Result<(Tape, Binder, Var, StepStats)> {
    let mut tape = Tape::new();
    let mut binder = Binder::new();
    let mut ces = Vec::with_capacity(batch.len());
    let mut traces = Vec::new();
    let mut records: Vec<RoutingRecord> = Vec::new();
    for ex in batch {
        let pass = model.forward_taped(&mut tape, &mut binder, &ex.tokens, ex.group)?;
        ces.push(tape.cross_entropy(pass.logits, &ex.targets, &ex.positions)?);
        traces.extend(pass.traces);
        if records.is_empty() {
            records = pass.records;
        } else {
            for (acc, r) in records.iter_mut().zip(pass.records) {
                acc.extend(r);
            }
        }
    }
    let lm = mean_of(&mut tape, ces)?;
    let lm_value = tape.value(lm).item()?;
    // λ = 0 leaves the tape untouched so the trajectory equals pure LM training
    let loss = if lambda != 0.0 {
        match balance_loss_taped(&mut tape, &traces)? {
            Some(b) => {
                let b = tape.scale(b, lambda);
                tape.add(lm, b)?
            }
            None => lm,
        }
    } else {
        lm
    };
    let loss_value = tape.value(loss).item()?;
    let balance = records
        .iter()
        .filter(|r| !r.is_empty())
        .map(|r| load_balance_loss(r, 1.0))
        .sum();
    let stats = StepStats {
        loss: loss_value,
        lm_loss: lm_value,
        balance_loss: balance,
        grad_norm: 0.0,
        records,
    };
    Ok((tape, binder, loss, stats))
}

/// Forward, backward and one optimizer update over `batch`.
pub fn train_step(
    model: &mut MoceModel,
    opt: &mut Adam,
    batch: &[Example],
    lambda: f64,
) -> Result<StepStats> {
    let (mut tape, binder, loss, mut stats) = batch_loss(model, batch, lambda)?;
    if !stats.loss.is_finite() {
        return Err(MoceError::numeric(format!(
            "non-finite loss {}",
            stats.loss
        )));
    }
    let grads = tape.backward(loss)?;
    stats.grad_norm = opt.step(model, &binder, &grads)?;
    Ok(stats)
}

/// Next-token training step for the dense base; returns the mean loss.
pub fn dense_train_step(model: &mut DenseModel, opt: &mut Adam, batch: &[Example]) -> Result<f64> {
    let mut tape = Tape::new();
    let mut binder = Binder::new();
    let mut ces = Vec::with_capacity(batch.len());
    for ex in batch {
        let logits = model.forward_taped(&mut tape, &mut binder, &ex.tokens)?;
        ces.push(tape.cross_entropy(logits, &ex.targets, &ex.positions)?);
    }
    let loss = mean_of(&mut tape, ces)?;
    let value = tape.value(loss).item()?;
    if !value.is_finite() {
        return Err(MoceError::numeric(format!("non-finite dense loss {value}")));
    }
    let grads = tape.backward(loss)?;
    opt.step(model, &binder, &grads)?;
    Ok(value)
}
