//! Dual-stage routed adapter layer.
//!
//! A [`MoceLayer`] holds `M` expert groups of `N` adapter experts, each group
//! with its own router. The sequence-level group index is chosen outside the
//! layer (by the clustering model); inside the layer only that group's router
//! and experts run, and each token is sent to its top-k experts or, in soft
//! mode, to all experts weighted by the gate.

mod layer;
mod record;
mod routing;

pub use layer::{
    moce_layer_forward, moce_variant_forward, soft_merge_forward, AdapterExpert, BaseFfn,
    ExpertGroup, GateTrace, LayerConfig, MoceLayer,
};
pub use record::{load_balance_loss, RouterId, RouterStats, RoutingRecord, TokenRoute};
pub use routing::{argmax, gate, router_logits, top_k_indices, top_k_select};

use crate::error::{MoceError, Result};

pub const DEFAULT_ADAPTER_RANK: usize = 64;
pub const DEFAULT_TOP_K: usize = 2;
pub const DEFAULT_EXPERTS_PER_GROUP: usize = 4;
pub const DEFAULT_BALANCE_COEF: f64 = 0.01;

/// How token-level weights are formed from the group gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RoutingMode {
    /// Keep the `k` largest gate values, zero the rest.
    #[default]
    TopK,
    /// Weight every expert of the group by its gate value.
    Soft,
}

impl RoutingMode {
    pub fn name(self) -> &'static str {
        match self {
            RoutingMode::TopK => "topk",
            RoutingMode::Soft => "soft",
        }
    }
}

impl std::str::FromStr for RoutingMode {
    type Err = MoceError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "topk" => Ok(RoutingMode::TopK),
            "soft" => Ok(RoutingMode::Soft),
            other => Err(MoceError::config(format!("unknown routing mode '{other}'"))),
        }
    }
}
