use std::collections::HashMap;
use std::fmt::Write as _;

use serde::Serialize;

use super::config::RunConfig;
use super::dataset::InstructionRecord;
use super::pipeline::{heldout_loss, train_on_records};
use crate::error::{MoceError, Result};
use crate::moce::RoutingMode;

/// Token-level routing of one ablation row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenRouting {
    Top1,
    Top2,
    Soft,
}

impl TokenRouting {
    pub const ALL: [TokenRouting; 3] = [TokenRouting::Top1, TokenRouting::Top2, TokenRouting::Soft];

    pub fn name(self) -> &'static str {
        match self {
            TokenRouting::Top1 => "top1",
            TokenRouting::Top2 => "top2",
            TokenRouting::Soft => "soft",
        }
    }
}

/// Sequence-level setting of one ablation row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Staging {
    /// Clustered groups and token routing inside the group.
    DualStage,
    /// One group for every sequence.
    NoClustering,
    /// One expert per group.
    NoTokenRouting,
}

impl Staging {
    pub const ALL: [Staging; 3] = [
        Staging::DualStage,
        Staging::NoClustering,
        Staging::NoTokenRouting,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Staging::DualStage => "dual_stage",
            Staging::NoClustering => "no_clustering",
            Staging::NoTokenRouting => "no_token_routing",
        }
    }
}

/// One row of the comparison table: a configuration and its per-seed held-out losses.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    /// `routing` for the strategy grid, `scaling` for the expert-count sweep.
    pub table: String,
    pub routing: TokenRouting,
    pub staging: Staging,
    pub n_groups: usize,
    pub n_experts: usize,
    pub k: usize,
    /// Experts evaluated per token per layer, measured during training.
    pub active_experts_per_token: f64,
    pub heldout_loss: Vec<f64>,
}

impl AblationRow {
    pub fn label(&self) -> String {
        if self.table == "scaling" {
            format!(
                "{} experts ({}*{})",
                self.n_groups * self.n_experts,
                self.n_groups,
                self.n_experts
            )
        } else {
            format!("{} / {}", self.routing.name(), self.staging.name())
        }
    }

    pub fn mean_loss(&self) -> f64 {
        self.heldout_loss.iter().sum::<f64>() / self.heldout_loss.len() as f64
    }
}

/// Results of [`ablation_run`]: 9 routing rows then 3 scaling rows.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(
        &self,
        table: &str,
        routing: TokenRouting,
        staging: Staging,
        n_experts: Option<usize>,
    ) -> Option<&AblationRow> {
        self.rows.iter().find(|r| {
            r.table == table
                && r.routing == routing
                && r.staging == staging
                && n_experts.is_none_or(|n| r.n_experts == n)
        })
    }

    fn grid(&self, staging: Staging) -> &AblationRow {
        self.row("routing", TokenRouting::Top2, staging, None)
            .expect("grid row")
    }

    /// Seeds on which top-2 dual-stage routing has held-out loss no higher than both top-2 single-stage rows.
    pub fn dual_stage_wins(&self) -> usize {
        let dual = self.grid(Staging::DualStage);
        let a = self.grid(Staging::NoClustering);
        let b = self.grid(Staging::NoTokenRouting);
        (0..self.seeds.len())
            .filter(|&s| {
                dual.heldout_loss[s] <= a.heldout_loss[s]
                    && dual.heldout_loss[s] <= b.heldout_loss[s]
            })
            .count()
    }

    /// Scaling rows by increasing expert count.
    pub fn scaling(&self) -> Vec<&AblationRow> {
        let mut rows: Vec<&AblationRow> =
            self.rows.iter().filter(|r| r.table == "scaling").collect();
        rows.sort_by_key(|r| r.n_experts);
        rows
    }

    /// Mean and standard error of the paired per-seed loss change from `from` to `to`.
    pub fn paired_change(from: &AblationRow, to: &AblationRow) -> (f64, f64) {
        let d: Vec<f64> = to
            .heldout_loss
            .iter()
            .zip(&from.heldout_loss)
            .map(|(b, a)| b - a)
            .collect();
        let n = d.len() as f64;
        let mean = d.iter().sum::<f64>() / n;
        if d.len() < 2 {
            return (mean, 0.0);
        }
        let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, (var / n).sqrt())
    }

    /// Whether each step up in expert count raises mean held-out loss by at most two paired standard errors.
    pub fn scaling_within_noise(&self) -> bool {
        self.scaling().windows(2).all(|w| {
            let (mean, se) = Self::paired_change(w[0], w[1]);
            mean <= 2.0 * se
        })
    }

    /// Header `table,label,routing,staging,groups,experts,k,active_experts,mean_loss,seed_<s>...`.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("table,label,routing,staging,groups,experts,k,active_experts,mean_loss");
        for s in &self.seeds {
            write!(out, ",seed_{s}").expect("write to string");
        }
        out.push('\n');
        for r in &self.rows {
            write!(
                out,
                "{},{},{},{},{},{},{},{:?},{:?}",
                r.table,
                r.label(),
                r.routing.name(),
                r.staging.name(),
                r.n_groups,
                r.n_experts,
                r.k,
                r.active_experts_per_token,
                r.mean_loss()
            )
            .expect("write to string");
            for l in &r.heldout_loss {
                write!(out, ",{l:?}").expect("write to string");
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ablation table serialize")
    }
}

fn variant_config(
    base: &RunConfig,
    routing: TokenRouting,
    staging: Staging,
    n_experts: usize,
) -> RunConfig {
    let mut cfg = base.clone();
    cfg.model.n_experts = n_experts;
    cfg.model.variant = false;
    let (mode, k) = match routing {
        TokenRouting::Top1 => (RoutingMode::TopK, 1),
        TokenRouting::Top2 => (RoutingMode::TopK, 2),
        TokenRouting::Soft => (RoutingMode::Soft, n_experts),
    };
    cfg.model.mode = mode;
    cfg.model.k = k.min(n_experts);
    cfg.no_clustering = false;
    cfg.no_token_routing = false;
    match staging {
        Staging::DualStage => {}
        Staging::NoClustering => {
            cfg.no_clustering = true;
            cfg.k_max = None;
            cfg.groups = None;
        }
        Staging::NoTokenRouting => {
            cfg.no_token_routing = true;
            cfg.model.k = 1;
        }
    }
    cfg
}

/// Runs the routing grid {top-1, top-2, soft} × {dual-stage, no clustering, no token routing}
/// and the top-2 dual-stage expert-count sweep N = 1, 2, 4, each over every seed.
///
/// Rows whose effective model configuration coincides are trained once.
pub fn ablation_run(
    base: &RunConfig,
    train: &[InstructionRecord],
    heldout: &[InstructionRecord],
    seeds: &[u64],
) -> Result<AblationTable> {
    base.validate()?;
    if seeds.is_empty() {
        return Err(MoceError::config("ablation needs at least one seed"));
    }
    let mut specs: Vec<(&str, TokenRouting, Staging, usize)> = Vec::new();
    for routing in TokenRouting::ALL {
        for staging in Staging::ALL {
            specs.push(("routing", routing, staging, base.model.n_experts));
        }
    }
    for n in [1, 2, 4] {
        specs.push(("scaling", TokenRouting::Top2, Staging::DualStage, n));
    }

    let mut cache: HashMap<String, (f64, Vec<f64>)> = HashMap::new();
    let mut rows = Vec::with_capacity(specs.len());
    for (table, routing, staging, n) in specs {
        let cfg = variant_config(base, routing, staging, n);
        cfg.validate()?;
        let key = cfg.to_text();
        if !cache.contains_key(&key) {
            let mut losses = Vec::with_capacity(seeds.len());
            let mut active = 0.0;
            for &seed in seeds {
                let mut c = cfg.clone();
                c.seed = seed;
                c.model.seed = seed;
                let out = train_on_records(&c, train, None)?;
                active = out.metrics.measured_active_experts;
                losses.push(heldout_loss(&out.checkpoint, &out.vocab, heldout)?);
                log::info!(
                    "ablation {table} {} {} N={n} seed {seed}: {:.4}",
                    routing.name(),
                    staging.name(),
                    losses[losses.len() - 1]
                );
            }
            cache.insert(key.clone(), (active, losses));
        }
        let (active, losses) = cache[&key].clone();
        let groups = if cfg.no_clustering {
            1
        } else {
            cfg.groups.unwrap_or(0)
        };
        let m = cfg.effective_model(groups, 0);
        rows.push(AblationRow {
            table: table.to_string(),
            routing,
            staging,
            n_groups: m.n_groups,
            n_experts: m.n_experts,
            k: m.k,
            active_experts_per_token: active,
            heldout_loss: losses,
        });
    }
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        rows,
    })
}
