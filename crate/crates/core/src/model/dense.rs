use super::attention::Attention;
use super::{embed_tokens, output_logits, ModelConfig, Parameters};
use crate::error::Result;
use crate::moce::BaseFfn;
use crate::rng::{normal_tensor, substream};
use crate::tensor::{Binder, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct DenseBlock {
    pub attn: Attention,
    pub ffn: BaseFfn,
}

/// Pre-norm decoder-only transformer with ordinary feed-forward blocks.
///
/// Block: `h = r + Attn(norm r)`, `y = h + FFN(norm h)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseModel {
    config: ModelConfig,
    pub(crate) tok_emb: Tensor,
    pub(crate) pos_emb: Tensor,
    pub(crate) blocks: Vec<DenseBlock>,
    pub(crate) w_out: Tensor,
}

impl DenseModel {
    /// Random initialization from the `init` substream of `config.seed`. Every parameter is trainable.
    pub fn random(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(config.seed, "init");
        let d = config.d_model;
        let tok_emb = normal_tensor(&mut rng, &[config.vocab_size, d], 1.0);
        let pos_emb = normal_tensor(&mut rng, &[config.max_seq_len, d], 1.0);
        let blocks = (0..config.n_layers)
            .map(|_| {
                let attn = Attention::random(d, config.n_heads, &mut rng);
                let w1 = normal_tensor(&mut rng, &[d, config.d_ff], 1.0 / (d as f64).sqrt());
                let w2 = normal_tensor(
                    &mut rng,
                    &[config.d_ff, d],
                    1.0 / (config.d_ff as f64).sqrt(),
                );
                BaseFfn::new(w1, w2, config.activation).map(|ffn| DenseBlock { attn, ffn })
            })
            .collect::<Result<Vec<_>>>()?;
        let w_out = normal_tensor(&mut rng, &[d, config.vocab_size], 1.0 / (d as f64).sqrt());
        let mut model = Self {
            config: config.clone(),
            tok_emb,
            pos_emb,
            blocks,
            w_out,
        };
        model.visit_params_mut(&mut |_, t| t.set_requires_grad(true));
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[DenseBlock] {
        &self.blocks
    }

    pub fn forward_taped(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        tokens: &[usize],
    ) -> Result<Var> {
        let mut r = embed_tokens(
            tape,
            binder,
            &self.config,
            &self.tok_emb,
            &self.pos_emb,
            tokens,
        )?;
        for (l, b) in self.blocks.iter().enumerate() {
            let n = tape.rms_norm(r);
            let a = b
                .attn
                .forward_taped(tape, binder, &format!("b{l}.attn"), n)?;
            let h = tape.add(r, a)?;
            let n = tape.rms_norm(h);
            let f = b.ffn.forward_taped(tape, binder, &format!("b{l}.ffn"), n)?;
            r = tape.add(h, f)?;
        }
        output_logits(tape, binder, &self.w_out, r)
    }

    /// Logits `T × vocab` for one sequence.
    pub fn forward(&self, tokens: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let logits = self.forward_taped(&mut tape, &mut binder, tokens)?;
        Ok(tape.value(logits).clone())
    }
}

impl Parameters for DenseModel {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("tok_emb", &self.tok_emb);
        f("pos_emb", &self.pos_emb);
        for (l, b) in self.blocks.iter().enumerate() {
            b.attn.visit(&format!("b{l}.attn"), f);
            b.ffn.visit(&format!("b{l}.ffn"), f);
        }
        f("out", &self.w_out);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("tok_emb", &mut self.tok_emb);
        f("pos_emb", &mut self.pos_emb);
        for (l, b) in self.blocks.iter_mut().enumerate() {
            b.attn.visit_mut(&format!("b{l}.attn"), f);
            b.ffn.visit_mut(&format!("b{l}.ffn"), f);
        }
        f("out", &mut self.w_out);
    }
}
