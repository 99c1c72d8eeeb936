use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::moce::{RouterId, RoutingRecord};

/// One optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub lm_loss: f64,
    pub balance_loss: f64,
    pub grad_norm: f64,
    pub tokens: usize,
    /// Largest top-1 load fraction over all routers of the batch.
    pub max_load: f64,
}

/// Top-1 load and mean gate probability of one router, pooled over many tokens.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RouterLoad {
    pub layer: usize,
    pub router: String,
    pub tokens: usize,
    pub load_fractions: Vec<f64>,
    pub mean_probs: Vec<f64>,
}

impl RouterLoad {
    pub fn max_load(&self) -> f64 {
        self.load_fractions.iter().cloned().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Default)]
struct RouterSums {
    tokens: usize,
    top1: Vec<usize>,
    probs: Vec<f64>,
}

/// Running routing totals over many per-layer records.
#[derive(Debug, Clone, Default)]
pub struct RouteAccumulator {
    routers: BTreeMap<(usize, RouterId), RouterSums>,
    group_tokens: BTreeMap<usize, usize>,
    evaluations: usize,
    routed_tokens: usize,
    tokens: usize,
}

impl RouteAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds the records of one forward pass (or one batch), one record per layer.
    pub fn add(&mut self, records: &[RoutingRecord]) {
        for (layer, rec) in records.iter().enumerate() {
            self.evaluations += rec.expert_evaluations();
            for r in rec.routes() {
                let s = self.routers.entry((layer, r.router)).or_default();
                if s.top1.is_empty() {
                    s.top1 = vec![0; r.probs.len()];
                    s.probs = vec![0.0; r.probs.len()];
                }
                s.tokens += 1;
                s.top1[r.top1()] += 1;
                s.probs.iter_mut().zip(&r.probs).for_each(|(a, p)| *a += p);
                if matches!(r.router, RouterId::Group(_)) {
                    self.routed_tokens += 1;
                    if layer == 0 {
                        *self.group_tokens.entry(r.group).or_default() += 1;
                        self.tokens += 1;
                    }
                }
            }
        }
    }

    pub fn total_tokens(&self) -> usize {
        self.tokens
    }

    pub fn group_token_counts(&self) -> BTreeMap<usize, usize> {
        self.group_tokens.clone()
    }

    /// Experts evaluated per token per layer, as measured.
    pub fn active_experts_per_token(&self) -> f64 {
        if self.routed_tokens == 0 {
            0.0
        } else {
            self.evaluations as f64 / self.routed_tokens as f64
        }
    }

    pub fn router_loads(&self) -> Vec<RouterLoad> {
        self.routers
            .iter()
            .map(|((layer, id), s)| RouterLoad {
                layer: *layer,
                router: id.to_string(),
                tokens: s.tokens,
                load_fractions: s.top1.iter().map(|c| *c as f64 / s.tokens as f64).collect(),
                mean_probs: s.probs.iter().map(|p| p / s.tokens as f64).collect(),
            })
            .collect()
    }

    /// Largest top-1 load fraction over every router.
    pub fn max_load(&self) -> f64 {
        self.router_loads()
            .iter()
            .map(RouterLoad::max_load)
            .fold(0.0, f64::max)
    }
}

/// Held-out generation and likelihood results.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalMetrics {
    pub records: usize,
    pub exact_match: f64,
    /// Token-weighted mean negative log-likelihood of responses.
    pub mean_loss: f64,
    pub perplexity: f64,
    /// Records per predicted group.
    pub group_counts: Vec<usize>,
}

impl EvalMetrics {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("eval metrics serialize")
    }
}

/// Everything a training run reports.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub steps: Vec<StepMetrics>,
    pub total_tokens: usize,
    pub group_token_counts: BTreeMap<usize, usize>,
    pub routers: Vec<RouterLoad>,
    pub configured_active_experts: usize,
    pub measured_active_experts: f64,
    pub eval: Option<EvalMetrics>,
}

impl MetricsReport {
    pub fn initial_loss(&self) -> Option<f64> {
        self.steps.first().map(|s| s.lm_loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.lm_loss)
    }

    /// One JSON object per step.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&serde_json::to_string(s).expect("metrics serialize"));
            out.push('\n');
        }
        out
    }

    /// `metric,value` rows.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        let mut row = |k: &str, v: String| writeln!(out, "{k},{v}").expect("write to string");
        row("steps", self.steps.len().to_string());
        if let (Some(a), Some(b)) = (self.initial_loss(), self.final_loss()) {
            row("initial_loss", format!("{a:?}"));
            row("final_loss", format!("{b:?}"));
        }
        row("total_tokens", self.total_tokens.to_string());
        row(
            "configured_active_experts",
            self.configured_active_experts.to_string(),
        );
        row(
            "measured_active_experts",
            format!("{:?}", self.measured_active_experts),
        );
        for (g, n) in &self.group_token_counts {
            row(&format!("group_tokens.{g}"), n.to_string());
        }
        for r in &self.routers {
            for (i, f) in r.load_fractions.iter().enumerate() {
                row(
                    &format!("load.layer{}.{}.expert{i}", r.layer, r.router),
                    format!("{f:?}"),
                );
            }
        }
        if let Some(e) = &self.eval {
            row("eval.records", e.records.to_string());
            row("eval.exact_match", format!("{:?}", e.exact_match));
            row("eval.mean_loss", format!("{:?}", e.mean_loss));
            row("eval.perplexity", format!("{:?}", e.perplexity));
        }
        out
    }
}
