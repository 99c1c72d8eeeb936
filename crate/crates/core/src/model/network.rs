use super::attention::Attention;
use super::dense::DenseModel;
use super::{embed_tokens, output_logits, ModelConfig, Parameters};
use crate::clustering::KMeansModel;
use crate::error::{MoceError, Result};
use crate::moce::{GateTrace, MoceLayer, RoutingRecord};
use crate::rng::substream;
use crate::tensor::{param_name, Binder, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct MoceBlock {
    pub attn: Attention,
    pub moce: MoceLayer,
}

/// Decoder-only transformer whose feed-forward sub-layers are MoCE layers.
///
/// Block: `h = r + Attn(norm r)`, `b = E(norm h)`, `x = h + b`, `y = MoCE(x, b)`.
/// With every `W_up = 0` and gate weights summing to one, `y = x` and the block
/// reproduces the dense block it was upcycled from.
#[derive(Debug, Clone, PartialEq)]
pub struct MoceModel {
    config: ModelConfig,
    tok_emb: Tensor,
    pos_emb: Tensor,
    blocks: Vec<MoceBlock>,
    w_out: Tensor,
    clustering: Option<KMeansModel>,
}

/// Taped forward result for one sequence.
#[derive(Debug)]
pub struct ForwardPass {
    pub logits: Var,
    /// One record per layer.
    pub records: Vec<RoutingRecord>,
    pub traces: Vec<GateTrace>,
}

/// Copies the dense base into a MoCE model: adapters get `W_up = 0` and small
/// random `W_down`, routers small random weights. Attention, embeddings and
/// base feed-forward blocks are copied and frozen according to `config`.
pub fn upcycle_init(dense: &DenseModel, config: &ModelConfig) -> Result<MoceModel> {
    config.validate()?;
    let dc = dense.config();
    let dims = [
        ("vocab_size", dc.vocab_size, config.vocab_size),
        ("d_model", dc.d_model, config.d_model),
        ("n_layers", dc.n_layers, config.n_layers),
        ("max_seq_len", dc.max_seq_len, config.max_seq_len),
    ];
    if let Some((name, a, b)) = dims.iter().find(|(_, a, b)| a != b) {
        return Err(MoceError::config(format!(
            "dense base has {name} = {a}, config asks for {b}"
        )));
    }
    let mut rng = substream(config.seed, "upcycle");
    let down_std = 1.0 / (config.d_model as f64).sqrt();
    let mut blocks = Vec::with_capacity(config.n_layers);
    for (l, b) in dense.blocks.iter().enumerate() {
        if b.attn.heads().len() != config.n_heads {
            return Err(MoceError::config(format!(
                "layer {l}: dense attention has {} heads, config asks for {}",
                b.attn.heads().len(),
                config.n_heads
            )));
        }
        if b.ffn.w1.shape() != [config.d_model, config.d_ff] {
            return Err(MoceError::config(format!(
                "layer {l}: dense feed-forward W1 is {:?}, config asks for {:?}",
                b.ffn.w1.shape(),
                [config.d_model, config.d_ff]
            )));
        }
        let mut ffn = b.ffn.clone();
        ffn.activation = config.activation;
        let moce = MoceLayer::upcycled(
            ffn,
            config.layer_config(),
            config.router_init_std,
            down_std,
            &mut rng,
        )
        .map_err(|e| MoceError::config(format!("layer {l}: {e}")))?;
        blocks.push(MoceBlock {
            attn: b.attn.clone(),
            moce,
        });
    }
    let mut model = MoceModel {
        config: config.clone(),
        tok_emb: dense.tok_emb.clone(),
        pos_emb: dense.pos_emb.clone(),
        blocks,
        w_out: dense.w_out.clone(),
        clustering: None,
    };
    model.apply_freeze();
    Ok(model)
}

impl MoceModel {
    /// Zero-valued model of the right shape, for loading parameters into.
    pub(crate) fn skeleton(config: &ModelConfig) -> Result<Self> {
        let mut dense = DenseModel::random(config)?;
        dense.visit_params_mut(&mut |_, t| t.data_mut().iter_mut().for_each(|v| *v = 0.0));
        let mut model = upcycle_init(&dense, config)?;
        model.visit_params_mut(&mut |_, t| t.data_mut().iter_mut().for_each(|v| *v = 0.0));
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[MoceBlock] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [MoceBlock] {
        &mut self.blocks
    }

    pub fn n_groups(&self) -> usize {
        self.config.n_groups
    }

    /// Sets `requires_grad` on every parameter from the freeze flags. Base feed-forward blocks stay frozen.
    pub fn apply_freeze(&mut self) {
        let attn = !self.config.freeze_attention;
        let emb = !self.config.freeze_embeddings;
        self.tok_emb.set_requires_grad(emb);
        self.pos_emb.set_requires_grad(emb);
        self.w_out.set_requires_grad(emb);
        for b in &mut self.blocks {
            b.attn.set_trainable(attn);
            b.moce.visit_mut("", &mut |name, t| {
                t.set_requires_grad(!name.starts_with(".base."))
            });
        }
    }

    pub fn set_freeze(&mut self, attention: bool, embeddings: bool) {
        self.config.freeze_attention = attention;
        self.config.freeze_embeddings = embeddings;
        self.apply_freeze();
    }

    /// Binds the sequence clustering model; its cluster count must equal the group count.
    pub fn bind_clustering(&mut self, kmeans: KMeansModel) -> Result<()> {
        if kmeans.k() != self.config.n_groups {
            return Err(MoceError::config(format!(
                "clustering model has {} clusters but the model has {} expert groups",
                kmeans.k(),
                self.config.n_groups
            )));
        }
        self.clustering = Some(kmeans);
        Ok(())
    }

    pub fn clustering(&self) -> Option<&KMeansModel> {
        self.clustering.as_ref()
    }

    /// Nearest-centroid group for a sequence embedding; group 0 when no clustering is bound.
    pub fn predict_group(&self, embedding: &[f64]) -> Result<usize> {
        match &self.clustering {
            Some(km) => km.predict(embedding),
            None => Ok(0),
        }
    }

    fn check_input(&self, tokens: &[usize], group: usize) -> Result<()> {
        if tokens.is_empty() {
            return Err(MoceError::contract("empty token sequence"));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(MoceError::contract(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(t) = tokens.iter().find(|t| **t >= self.config.vocab_size) {
            return Err(MoceError::contract(format!(
                "token id {t} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        if group >= self.config.n_groups {
            return Err(MoceError::contract(format!(
                "group {group} out of range for {} groups",
                self.config.n_groups
            )));
        }
        Ok(())
    }

    /// Causal forward of one sequence with every MoCE layer using `group`.
    pub fn forward_taped(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        tokens: &[usize],
        group: usize,
    ) -> Result<ForwardPass> {
        self.check_input(tokens, group)?;
        let mut records = Vec::with_capacity(self.blocks.len());
        let mut traces = Vec::new();
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
            let prefix = format!("b{l}.ffn");
            let base =
                b.moce
                    .base_ffn()
                    .forward_taped(tape, binder, &param_name(&prefix, "base"), n)?;
            let x = tape.add(h, base)?;
            let mut rec = RoutingRecord::new();
            r = b
                .moce
                .forward(tape, binder, &prefix, x, base, group, &mut rec, &mut traces)?;
            records.push(rec);
        }
        let logits = output_logits(tape, binder, &self.w_out, r)?;
        Ok(ForwardPass {
            logits,
            records,
            traces,
        })
    }

    /// Logits `T × vocab` and per-layer routing records.
    pub fn forward(&self, tokens: &[usize], group: usize) -> Result<(Tensor, Vec<RoutingRecord>)> {
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let pass = self.forward_taped(&mut tape, &mut binder, tokens, group)?;
        Ok((tape.value(pass.logits).clone(), pass.records))
    }
}

/// Untaped forward of one sequence through `model` with group `group`.
pub fn model_forward(
    model: &MoceModel,
    tokens: &[usize],
    group: usize,
) -> Result<(Tensor, Vec<RoutingRecord>)> {
    model.forward(tokens, group)
}

impl Parameters for MoceModel {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("tok_emb", &self.tok_emb);
        f("pos_emb", &self.pos_emb);
        for (l, b) in self.blocks.iter().enumerate() {
            b.attn.visit(&format!("b{l}.attn"), f);
            b.moce.visit(&format!("b{l}.ffn"), f);
        }
        f("out", &self.w_out);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("tok_emb", &mut self.tok_emb);
        f("pos_emb", &mut self.pos_emb);
        for (l, b) in self.blocks.iter_mut().enumerate() {
            b.attn.visit_mut(&format!("b{l}.attn"), f);
            b.moce.visit_mut(&format!("b{l}.ffn"), f);
        }
        f("out", &mut self.w_out);
    }
}
