use crate::error::{MoceError, Result};
use crate::rng::{normal_tensor, Rng};
use crate::tensor::{param_name, Binder, Tape, Tensor, Var};

/// One causal attention head; its output is projected straight back to `d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHead {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

/// Multi-head causal self-attention, `Σ_h softmax(Q_h K_hᵀ/√d_h) V_h W_o,h`.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    heads: Vec<AttentionHead>,
}

impl Attention {
    pub fn new(heads: Vec<AttentionHead>) -> Result<Self> {
        let Some(first) = heads.first() else {
            return Err(MoceError::shape("attention needs at least one head"));
        };
        let [d, dh] = *first.wq.shape() else {
            return Err(MoceError::shape("attention weights must be matrices"));
        };
        for h in &heads {
            if h.wq.shape() != [d, dh]
                || h.wk.shape() != [d, dh]
                || h.wv.shape() != [d, dh]
                || h.wo.shape() != [dh, d]
            {
                return Err(MoceError::shape(format!(
                    "attention head shapes differ from d={d}, d_head={dh}"
                )));
            }
        }
        Ok(Self { heads })
    }

    pub fn random(d_model: usize, n_heads: usize, rng: &mut Rng) -> Self {
        let dh = d_model / n_heads;
        let std = 1.0 / (d_model as f64).sqrt();
        let heads = (0..n_heads)
            .map(|_| AttentionHead {
                wq: normal_tensor(rng, &[d_model, dh], std),
                wk: normal_tensor(rng, &[d_model, dh], std),
                wv: normal_tensor(rng, &[d_model, dh], std),
                wo: normal_tensor(rng, &[dh, d_model], 1.0 / (dh as f64).sqrt()),
            })
            .collect();
        Self { heads }
    }

    pub fn heads(&self) -> &[AttentionHead] {
        &self.heads
    }

    pub fn d_model(&self) -> usize {
        self.heads[0].wq.shape()[0]
    }

    pub fn set_trainable(&mut self, on: bool) {
        self.visit_mut("", &mut |_, t| t.set_requires_grad(on));
    }

    pub fn forward_taped(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        prefix: &str,
        x: Var,
    ) -> Result<Var> {
        let dh = self.heads[0].wq.shape()[1];
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out: Option<Var> = None;
        for (i, h) in self.heads.iter().enumerate() {
            let hp = format!("{prefix}.h{i}");
            let wq = binder.bind(tape, &param_name(&hp, "wq"), &h.wq);
            let wk = binder.bind(tape, &param_name(&hp, "wk"), &h.wk);
            let wv = binder.bind(tape, &param_name(&hp, "wv"), &h.wv);
            let wo = binder.bind(tape, &param_name(&hp, "wo"), &h.wo);
            let q = tape.matmul(x, wq)?;
            let k = tape.matmul(x, wk)?;
            let v = tape.matmul(x, wv)?;
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.causal_softmax(scores)?;
            let ctx = tape.matmul(attn, v)?;
            let o = tape.matmul(ctx, wo)?;
            out = Some(match out {
                Some(acc) => tape.add(acc, o)?,
                None => o,
            });
        }
        Ok(out.expect("at least one head"))
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, h) in self.heads.iter().enumerate() {
            f(&format!("{prefix}.h{i}.wq"), &h.wq);
            f(&format!("{prefix}.h{i}.wk"), &h.wk);
            f(&format!("{prefix}.h{i}.wv"), &h.wv);
            f(&format!("{prefix}.h{i}.wo"), &h.wo);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, h) in self.heads.iter_mut().enumerate() {
            f(&format!("{prefix}.h{i}.wq"), &mut h.wq);
            f(&format!("{prefix}.h{i}.wk"), &mut h.wk);
            f(&format!("{prefix}.h{i}.wv"), &mut h.wv);
            f(&format!("{prefix}.h{i}.wo"), &mut h.wo);
        }
    }
}
