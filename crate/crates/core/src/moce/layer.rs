use super::record::{RouterId, RoutingRecord, TokenRoute};
use super::routing::{argmax, top_k_indices};
use super::RoutingMode;
use crate::error::{MoceError, Result};
use crate::rng::{normal_tensor, Rng};
use crate::tensor::{self, param_name, Activation, Binder, Tape, Tensor, Var};

/// Residual bottleneck adapter `σ(E(x)·W_down)·W_up + x`.
///
/// `E(x)` is the output of the layer's shared base feed-forward block and is
/// computed once per token by the caller.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterExpert {
    w_down: Tensor,
    w_up: Tensor,
}

impl AdapterExpert {
    pub fn new(w_down: Tensor, w_up: Tensor) -> Result<Self> {
        match (w_down.shape(), w_up.shape()) {
            ([d, r], [r2, d2]) if r == r2 && d == d2 => Ok(Self { w_down, w_up }),
            (a, b) => Err(MoceError::shape(format!(
                "adapter needs W_down d×r and W_up r×d, got {a:?} and {b:?}"
            ))),
        }
    }

    /// Fresh adapter whose `W_up` is zero, so it starts as the identity on its residual input.
    pub fn upcycled(d_model: usize, rank: usize, down_std: f64, rng: &mut Rng) -> Self {
        Self {
            w_down: normal_tensor(rng, &[d_model, rank], down_std).with_requires_grad(true),
            w_up: Tensor::zeros(&[rank, d_model]).with_requires_grad(true),
        }
    }

    pub fn d_model(&self) -> usize {
        self.w_down.shape()[0]
    }

    pub fn rank(&self) -> usize {
        self.w_down.shape()[1]
    }

    pub fn w_down(&self) -> &Tensor {
        &self.w_down
    }

    pub fn w_up(&self) -> &Tensor {
        &self.w_up
    }

    pub fn w_down_mut(&mut self) -> &mut Tensor {
        &mut self.w_down
    }

    pub fn w_up_mut(&mut self) -> &mut Tensor {
        &mut self.w_up
    }

    /// Untaped forward over a single token `[d]` or a block of tokens `[T×d]`.
    pub fn forward(&self, base_out: &Tensor, x: &Tensor, act: Activation) -> Result<Tensor> {
        let d = self.d_model();
        if base_out.shape() != x.shape() || x.cols() != d {
            return Err(MoceError::shape(format!(
                "adapter of width {d} given base {:?} and input {:?}",
                base_out.shape(),
                x.shape()
            )));
        }
        let rows = x.rows();
        let base2 = base_out.reshape(&[rows, d])?;
        let hidden = tensor::map(&tensor::matmul(&base2, &self.w_down)?, |v| act.apply(v));
        let up = tensor::matmul(&hidden, &self.w_up)?;
        let out = tensor::zip_with(&up, &x.reshape(&[rows, d])?, "adapter residual", |a, b| {
            a + b
        })?;
        out.reshape(x.shape())
    }

    fn forward_taped(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        name: &str,
        base: Var,
        x: Var,
        act: Activation,
    ) -> Result<Var> {
        let wd = binder.bind(tape, &param_name(name, "w_down"), &self.w_down);
        let wu = binder.bind(tape, &param_name(name, "w_up"), &self.w_up);
        let h = tape.matmul(base, wd)?;
        let h = tape.activation(h, act);
        let o = tape.matmul(h, wu)?;
        tape.add(o, x)
    }
}

/// Dense two-matrix feed-forward block `act(u·W1)·W2`, frozen after upcycling.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseFfn {
    pub w1: Tensor,
    pub w2: Tensor,
    pub activation: Activation,
}

impl BaseFfn {
    pub fn new(w1: Tensor, w2: Tensor, activation: Activation) -> Result<Self> {
        match (w1.shape(), w2.shape()) {
            ([d, f], [f2, d2]) if f == f2 && d == d2 => Ok(Self { w1, w2, activation }),
            (a, b) => Err(MoceError::shape(format!(
                "feed-forward needs W1 d×f and W2 f×d, got {a:?} and {b:?}"
            ))),
        }
    }

    pub fn d_model(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn forward(&self, u: &Tensor) -> Result<Tensor> {
        let h = tensor::map(&tensor::matmul(u, &self.w1)?, |v| self.activation.apply(v));
        tensor::matmul(&h, &self.w2)
    }

    pub fn forward_taped(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        prefix: &str,
        u: Var,
    ) -> Result<Var> {
        let w1 = binder.bind(tape, &param_name(prefix, "w1"), &self.w1);
        let w2 = binder.bind(tape, &param_name(prefix, "w2"), &self.w2);
        let h = tape.matmul(u, w1)?;
        let h = tape.activation(h, self.activation);
        tape.matmul(h, w2)
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.w1.set_requires_grad(trainable);
        self.w2.set_requires_grad(trainable);
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.w1"), &self.w1);
        f(&format!("{prefix}.w2"), &self.w2);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.w1"), &mut self.w1);
        f(&format!("{prefix}.w2"), &mut self.w2);
    }
}

/// `N` adapter experts sharing one router `W_G ∈ ℝ^{d×N}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertGroup {
    experts: Vec<AdapterExpert>,
    router: Tensor,
}

impl ExpertGroup {
    pub fn new(experts: Vec<AdapterExpert>, router: Tensor) -> Result<Self> {
        let Some(first) = experts.first() else {
            return Err(MoceError::shape("expert group needs at least one expert"));
        };
        let d = first.d_model();
        if experts.iter().any(|e| e.d_model() != d) {
            return Err(MoceError::shape("experts of one group must share d_model"));
        }
        if router.shape() != [d, experts.len()] {
            return Err(MoceError::shape(format!(
                "router of shape {:?} for {} experts of width {d}",
                router.shape(),
                experts.len()
            )));
        }
        Ok(Self { experts, router })
    }

    pub fn upcycled(
        d_model: usize,
        n_experts: usize,
        rank: usize,
        router_std: f64,
        down_std: f64,
        rng: &mut Rng,
    ) -> Self {
        let router = normal_tensor(rng, &[d_model, n_experts], router_std).with_requires_grad(true);
        let experts = (0..n_experts)
            .map(|_| AdapterExpert::upcycled(d_model, rank, down_std, rng))
            .collect();
        Self { experts, router }
    }

    pub fn experts(&self) -> &[AdapterExpert] {
        &self.experts
    }

    pub fn experts_mut(&mut self) -> &mut [AdapterExpert] {
        &mut self.experts
    }

    pub fn router(&self) -> &Tensor {
        &self.router
    }

    pub fn router_mut(&mut self) -> &mut Tensor {
        &mut self.router
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.router"), &self.router);
        for (i, e) in self.experts.iter().enumerate() {
            f(&format!("{prefix}.e{i}.w_down"), &e.w_down);
            f(&format!("{prefix}.e{i}.w_up"), &e.w_up);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.router"), &mut self.router);
        for (i, e) in self.experts.iter_mut().enumerate() {
            f(&format!("{prefix}.e{i}.w_down"), &mut e.w_down);
            f(&format!("{prefix}.e{i}.w_up"), &mut e.w_up);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerConfig {
    pub n_groups: usize,
    pub n_experts: usize,
    pub rank: usize,
    pub k: usize,
    pub mode: RoutingMode,
    /// Rescale the surviving top-k weights to sum to one. Off by default.
    pub renormalize: bool,
    /// Add an always-active general group whose output is summed with the group path.
    pub variant: bool,
    pub activation: Activation,
    /// Multiplier on each path's combined adapter output.
    pub output_scale: f64,
}

impl Default for LayerConfig {
    fn default() -> Self {
        Self {
            n_groups: 1,
            n_experts: super::DEFAULT_EXPERTS_PER_GROUP,
            rank: super::DEFAULT_ADAPTER_RANK,
            k: super::DEFAULT_TOP_K,
            mode: RoutingMode::TopK,
            renormalize: false,
            variant: false,
            activation: Activation::Gelu,
            output_scale: 1.0,
        }
    }
}

impl LayerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_groups == 0 || self.n_experts == 0 || self.rank == 0 {
            return Err(MoceError::config(
                "groups, experts and adapter rank must all be positive",
            ));
        }
        if self.k == 0 || self.k > self.n_experts {
            return Err(MoceError::config(format!(
                "top-k of {} with {} experts per group",
                self.k, self.n_experts
            )));
        }
        if !self.output_scale.is_finite() {
            return Err(MoceError::config("output scale must be finite"));
        }
        Ok(())
    }

    /// Experts evaluated per token: `k` (or `N` in soft mode), doubled by the general path.
    pub fn active_experts_per_token(&self) -> usize {
        let per_path = match self.mode {
            RoutingMode::TopK => self.k,
            RoutingMode::Soft => self.n_experts,
        };
        if self.variant {
            2 * per_path
        } else {
            per_path
        }
    }
}

/// Gate activations of one router during a taped pass, kept for the balancing loss.
#[derive(Debug, Clone)]
pub struct GateTrace {
    /// Parameter name of the router weight; unique per layer and router.
    pub key: String,
    pub router: RouterId,
    /// `T × N` gate probabilities.
    pub gates: Var,
    /// Pre-truncation argmax expert per token.
    pub top1: Vec<usize>,
}

/// Mixture-of-clustered-experts feed-forward replacement.
#[derive(Debug, Clone, PartialEq)]
pub struct MoceLayer {
    groups: Vec<ExpertGroup>,
    general: Option<ExpertGroup>,
    base_ffn: BaseFfn,
    config: LayerConfig,
}

impl MoceLayer {
    pub fn new(
        groups: Vec<ExpertGroup>,
        general: Option<ExpertGroup>,
        base_ffn: BaseFfn,
        mut config: LayerConfig,
    ) -> Result<Self> {
        let Some(first) = groups.first() else {
            return Err(MoceError::config(
                "a MoCE layer needs at least one expert group",
            ));
        };
        let (n, d) = (first.n_experts(), first.experts[0].d_model());
        for g in groups.iter().chain(general.iter()) {
            if g.n_experts() != n || g.experts[0].d_model() != d {
                return Err(MoceError::config(
                    "all expert groups must share N and d_model",
                ));
            }
        }
        if base_ffn.d_model() != d {
            return Err(MoceError::config(
                "base feed-forward width differs from expert width",
            ));
        }
        config.n_groups = groups.len();
        config.n_experts = n;
        config.rank = first.experts[0].rank();
        config.variant = general.is_some();
        config.validate()?;
        Ok(Self {
            groups,
            general,
            base_ffn,
            config,
        })
    }

    /// Upcycles a dense feed-forward block: adapters start with `W_up = 0`.
    pub fn upcycled(
        base_ffn: BaseFfn,
        config: LayerConfig,
        router_std: f64,
        down_std: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        let d = base_ffn.d_model();
        let groups = (0..config.n_groups)
            .map(|_| {
                ExpertGroup::upcycled(d, config.n_experts, config.rank, router_std, down_std, rng)
            })
            .collect();
        let general = config.variant.then(|| {
            ExpertGroup::upcycled(d, config.n_experts, config.rank, router_std, down_std, rng)
        });
        let mut base_ffn = base_ffn;
        base_ffn.set_trainable(false);
        Self::new(groups, general, base_ffn, config)
    }

    pub fn config(&self) -> &LayerConfig {
        &self.config
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn groups(&self) -> &[ExpertGroup] {
        &self.groups
    }

    pub fn groups_mut(&mut self) -> &mut [ExpertGroup] {
        &mut self.groups
    }

    pub fn general(&self) -> Option<&ExpertGroup> {
        self.general.as_ref()
    }

    pub fn general_mut(&mut self) -> Option<&mut ExpertGroup> {
        self.general.as_mut()
    }

    pub fn base_ffn(&self) -> &BaseFfn {
        &self.base_ffn
    }

    pub fn set_mode(&mut self, mode: RoutingMode, k: usize) -> Result<()> {
        let mut cfg = self.config;
        cfg.mode = mode;
        cfg.k = k;
        cfg.validate()?;
        self.config = cfg;
        Ok(())
    }

    pub fn set_renormalize(&mut self, on: bool) {
        self.config.renormalize = on;
    }

    pub fn set_output_scale(&mut self, s: f64) {
        self.config.output_scale = s;
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.base_ffn.visit(&format!("{prefix}.base"), f);
        for (j, g) in self.groups.iter().enumerate() {
            g.visit(&format!("{prefix}.g{j}"), f);
        }
        if let Some(g) = &self.general {
            g.visit(&format!("{prefix}.gen"), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.base_ffn.visit_mut(&format!("{prefix}.base"), f);
        for (j, g) in self.groups.iter_mut().enumerate() {
            g.visit_mut(&format!("{prefix}.g{j}"), f);
        }
        if let Some(g) = &mut self.general {
            g.visit_mut(&format!("{prefix}.gen"), f);
        }
    }

    /// Configured forward: the group path, plus the general path when present.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        prefix: &str,
        x: Var,
        base: Var,
        group: usize,
        record: &mut RoutingRecord,
        traces: &mut Vec<GateTrace>,
    ) -> Result<Var> {
        let (mode, k) = (self.config.mode, self.config.k);
        let y = self.group_path(
            tape, binder, prefix, x, base, group, mode, k, record, traces,
        )?;
        if self.general.is_some() {
            let g = self.general_path(
                tape, binder, prefix, x, base, group, mode, k, record, traces,
            )?;
            tape.add(y, g)
        } else {
            Ok(y)
        }
    }

    /// `Σᵢ TopK(R^α(x)ᵢ, k)·A_i^{G_α}(x)` using only group `group`.
    #[allow(clippy::too_many_arguments)]
    pub fn group_path(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        prefix: &str,
        x: Var,
        base: Var,
        group: usize,
        mode: RoutingMode,
        k: usize,
        record: &mut RoutingRecord,
        traces: &mut Vec<GateTrace>,
    ) -> Result<Var> {
        let g = self.groups.get(group).ok_or_else(|| {
            MoceError::contract(format!(
                "group {group} out of range for {} groups",
                self.groups.len()
            ))
        })?;
        let p = format!("{prefix}.g{group}");
        self.route(
            tape,
            binder,
            &p,
            g,
            RouterId::Group(group),
            group,
            x,
            base,
            mode,
            k,
            record,
            traces,
        )
    }

    /// Same form as the group path over the general experts, for every sequence.
    #[allow(clippy::too_many_arguments)]
    pub fn general_path(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        prefix: &str,
        x: Var,
        base: Var,
        group: usize,
        mode: RoutingMode,
        k: usize,
        record: &mut RoutingRecord,
        traces: &mut Vec<GateTrace>,
    ) -> Result<Var> {
        let g = self
            .general
            .as_ref()
            .ok_or_else(|| MoceError::config("variant forward requires a general expert group"))?;
        let p = param_name(prefix, "gen");
        self.route(
            tape,
            binder,
            &p,
            g,
            RouterId::General,
            group,
            x,
            base,
            mode,
            k,
            record,
            traces,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn route(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        prefix: &str,
        g: &ExpertGroup,
        router_id: RouterId,
        seq_group: usize,
        x: Var,
        base: Var,
        mode: RoutingMode,
        k: usize,
        record: &mut RoutingRecord,
        traces: &mut Vec<GateTrace>,
    ) -> Result<Var> {
        let n = g.n_experts();
        let xv = tape.value(x);
        let &[t, d] = xv.shape() else {
            return Err(MoceError::shape(format!(
                "layer input must be T×d, got {:?}",
                xv.shape()
            )));
        };
        if tape.value(base).shape() != [t, d] {
            return Err(MoceError::shape(format!(
                "base output {:?} does not match layer input {:?}",
                tape.value(base).shape(),
                [t, d]
            )));
        }
        let active = match mode {
            RoutingMode::TopK => k,
            RoutingMode::Soft => n,
        };
        if active == 0 || active > n {
            return Err(MoceError::contract(format!(
                "top-k with k = {k} over {n} experts"
            )));
        }

        let router_name = param_name(prefix, "router");
        let wg = binder.bind(tape, &router_name, &g.router);
        let logits = tape.matmul(x, wg)?;
        let gates = tape.softmax(logits)?;

        let gv = tape.value(gates).clone();
        let mut rows_per_expert = vec![Vec::new(); n];
        let mut mask = vec![0.0; t * n];
        let mut top1 = Vec::with_capacity(t);
        for tok in 0..t {
            let probs = gv.row(tok);
            let selected = top_k_indices(probs, active)?;
            for &e in &selected {
                rows_per_expert[e].push(tok);
                mask[tok * n + e] = 1.0;
            }
            top1.push(argmax(probs));
            record.push(TokenRoute {
                token: tok,
                group: seq_group,
                router: router_id,
                weights: selected.iter().map(|&e| probs[e]).collect(),
                selected,
                probs: probs.to_vec(),
            });
        }
        for rows in &mut rows_per_expert {
            rows.sort_unstable();
        }
        traces.push(GateTrace {
            key: router_name,
            router: router_id,
            gates,
            top1,
        });

        // selection mask is a constant: gradients reach the gate only at selected positions
        let mut weights = if active < n {
            let m = tape.constant(Tensor::new(&[t, n], mask)?);
            tape.mul(gates, m)?
        } else {
            gates
        };
        if self.config.renormalize && active < n {
            let ones = tape.constant(Tensor::filled(&[n, 1], 1.0));
            let sums = tape.matmul(weights, ones)?;
            let inv = tape.recip(sums)?;
            weights = tape.scale_rows(weights, inv)?;
        }

        let mut out: Option<Var> = None;
        for (e, rows) in rows_per_expert.iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            record.add_evaluations(rows.len());
            let w = tape.column(weights, e)?;
            let full = rows.len() == t;
            let (xs, bs, ws) = if full {
                (x, base, w)
            } else {
                (
                    tape.gather_rows(x, rows)?,
                    tape.gather_rows(base, rows)?,
                    tape.gather_rows(w, rows)?,
                )
            };
            let a = g.experts[e].forward_taped(
                tape,
                binder,
                &format!("{prefix}.e{e}"),
                bs,
                xs,
                self.config.activation,
            )?;
            let scaled = tape.scale_rows(a, ws)?;
            let placed = if full {
                scaled
            } else {
                tape.scatter_rows(scaled, rows, t)?
            };
            out = Some(match out {
                Some(acc) => tape.add(acc, placed)?,
                None => placed,
            });
        }
        let out = out.expect("every token selects at least one expert");
        if self.config.output_scale != 1.0 {
            Ok(tape.scale(out, self.config.output_scale))
        } else {
            Ok(out)
        }
    }
}

fn as_tokens(t: &Tensor) -> Result<Tensor> {
    match t.shape() {
        [d] => t.reshape(&[1, *d]),
        [_, _] => Ok(t.clone()),
        s => Err(MoceError::shape(format!(
            "token block must be [d] or [T×d], got {s:?}"
        ))),
    }
}

fn untaped(
    x: &Tensor,
    base_out: &Tensor,
    f: impl FnOnce(&mut Tape, &mut Binder, Var, Var, &mut Vec<GateTrace>) -> Result<Var>,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let mut binder = Binder::new();
    let mut traces = Vec::new();
    let xv = tape.constant(as_tokens(x)?);
    let bv = tape.constant(as_tokens(base_out)?);
    let y = f(&mut tape, &mut binder, xv, bv, &mut traces)?;
    tape.value(y).reshape(x.shape())
}

/// Top-k group path with the layer's `k`, evaluated without gradient tracking.
pub fn moce_layer_forward(
    layer: &MoceLayer,
    x: &Tensor,
    base_out: &Tensor,
    group: usize,
    record: &mut RoutingRecord,
) -> Result<Tensor> {
    untaped(x, base_out, |tape, binder, xv, bv, traces| {
        layer.group_path(
            tape,
            binder,
            "moce",
            xv,
            bv,
            group,
            RoutingMode::TopK,
            layer.config.k,
            record,
            traces,
        )
    })
}

/// Group path weighting all `N` experts by the gate.
pub fn soft_merge_forward(
    layer: &MoceLayer,
    x: &Tensor,
    base_out: &Tensor,
    group: usize,
    record: &mut RoutingRecord,
) -> Result<Tensor> {
    untaped(x, base_out, |tape, binder, xv, bv, traces| {
        layer.group_path(
            tape,
            binder,
            "moce",
            xv,
            bv,
            group,
            RoutingMode::Soft,
            layer.config.k,
            record,
            traces,
        )
    })
}

/// Group path plus general path, each in the layer's configured mode.
pub fn moce_variant_forward(
    layer: &MoceLayer,
    x: &Tensor,
    base_out: &Tensor,
    group: usize,
    record: &mut RoutingRecord,
) -> Result<Tensor> {
    if layer.general.is_none() {
        return Err(MoceError::config(
            "variant forward requires a general expert group",
        ));
    }
    untaped(x, base_out, |tape, binder, xv, bv, traces| {
        layer.forward(tape, binder, "moce", xv, bv, group, record, traces)
    })
}
