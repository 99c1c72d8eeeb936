use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

/// Which gate produced a routing decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum RouterId {
    Group(usize),
    General,
}

impl std::fmt::Display for RouterId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RouterId::Group(g) => write!(f, "group{g}"),
            RouterId::General => f.write_str("general"),
        }
    }
}

/// Routing decision for one token at one router.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenRoute {
    pub token: usize,
    /// Sequence-level group in force for the token.
    pub group: usize,
    pub router: RouterId,
    /// Selected experts, highest gate first.
    pub selected: Vec<usize>,
    /// Unmodified gate values at `selected`.
    pub weights: Vec<f64>,
    /// Full gate distribution.
    pub probs: Vec<f64>,
}

impl TokenRoute {
    /// Expert with the highest gate value before truncation.
    pub fn top1(&self) -> usize {
        super::routing::argmax(&self.probs)
    }
}

/// Per-router aggregate over the tokens a router saw.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RouterStats {
    pub tokens: usize,
    /// `f_i`: fraction of tokens whose top-1 expert is `i`.
    pub load_fractions: Vec<f64>,
    /// `P_i`: mean gate probability of expert `i`.
    pub mean_probs: Vec<f64>,
}

impl RouterStats {
    pub fn n_experts(&self) -> usize {
        self.load_fractions.len()
    }

    /// `N · Σᵢ fᵢ·Pᵢ`. Equals 1 for perfectly uniform routing and approaches `N` under collapse.
    pub fn balance_loss(&self) -> f64 {
        let n = self.n_experts() as f64;
        n * self
            .load_fractions
            .iter()
            .zip(&self.mean_probs)
            .map(|(f, p)| f * p)
            .sum::<f64>()
    }

    pub fn max_load(&self) -> f64 {
        self.load_fractions.iter().copied().fold(0.0, f64::max)
    }
}

/// Log of every routing decision made during a forward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoutingRecord {
    routes: Vec<TokenRoute>,
    expert_evaluations: usize,
}

impl RoutingRecord {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, route: TokenRoute) {
        self.routes.push(route);
    }

    pub fn routes(&self) -> &[TokenRoute] {
        &self.routes
    }

    pub fn is_empty(&self) -> bool {
        self.routes.is_empty()
    }

    /// Number of (token, expert) adapter evaluations actually computed.
    pub fn expert_evaluations(&self) -> usize {
        self.expert_evaluations
    }

    pub(crate) fn add_evaluations(&mut self, n: usize) {
        self.expert_evaluations += n;
    }

    pub fn extend(&mut self, other: RoutingRecord) {
        self.routes.extend(other.routes);
        self.expert_evaluations += other.expert_evaluations;
    }

    pub fn router_stats(&self) -> BTreeMap<RouterId, RouterStats> {
        let mut acc: BTreeMap<RouterId, (usize, Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for r in &self.routes {
            let n = r.probs.len();
            let entry = acc
                .entry(r.router)
                .or_insert_with(|| (0, vec![0.0; n], vec![0.0; n]));
            entry.0 += 1;
            entry.1[r.top1()] += 1.0;
            entry.2.iter_mut().zip(&r.probs).for_each(|(a, p)| *a += p);
        }
        acc.into_iter()
            .map(|(id, (tokens, counts, probs))| {
                let t = tokens as f64;
                (
                    id,
                    RouterStats {
                        tokens,
                        load_fractions: counts.into_iter().map(|c| c / t).collect(),
                        mean_probs: probs.into_iter().map(|p| p / t).collect(),
                    },
                )
            })
            .collect()
    }

    /// Distinct tokens per sequence-level group.
    pub fn group_token_counts(&self) -> BTreeMap<usize, usize> {
        let mut seen = std::collections::BTreeSet::new();
        let mut counts = BTreeMap::new();
        for r in &self.routes {
            if seen.insert((r.token, r.group)) {
                *counts.entry(r.group).or_insert(0) += 1;
            }
        }
        counts
    }

    /// CSV with header `token_idx,group,expert,weight`, one row per selected expert.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("token_idx,group,expert,weight\n");
        for r in &self.routes {
            let group = match r.router {
                RouterId::Group(g) => g.to_string(),
                RouterId::General => "general".to_string(),
            };
            for (e, w) in r.selected.iter().zip(&r.weights) {
                writeln!(out, "{},{group},{e},{w:e}", r.token).expect("write to string");
            }
        }
        out
    }
}

/// `λ · Σ_routers N·Σᵢ fᵢ·Pᵢ` over every router present in `record`.
///
/// An empty record contributes nothing.
pub fn load_balance_loss(record: &RoutingRecord, lambda: f64) -> f64 {
    if record.is_empty() {
        log::warn!("load-balancing loss over an empty routing record; router unused");
        return 0.0;
    }
    lambda
        * record
            .router_stats()
            .values()
            .map(RouterStats::balance_loss)
            .sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn route(token: usize, probs: Vec<f64>) -> TokenRoute {
        let top = super::super::routing::argmax(&probs);
        TokenRoute {
            token,
            group: 0,
            router: RouterId::Group(0),
            selected: vec![top],
            weights: vec![probs[top]],
            probs,
        }
    }

    #[test]
    fn uniform_routing_loss_is_one() {
        let mut rec = RoutingRecord::new();
        for t in 0..4 {
            let mut probs = vec![0.25; 4];
            // make token t's argmax expert t without changing the mean
            probs[t] += 1e-9;
            probs[(t + 1) % 4] -= 1e-9;
            rec.push(route(t, probs));
        }
        let stats = rec.router_stats();
        let s = &stats[&RouterId::Group(0)];
        assert_eq!(s.load_fractions, vec![0.25; 4]);
        assert!((s.balance_loss() - 1.0).abs() < 1e-9);
        assert!((load_balance_loss(&rec, 0.01) - 0.01).abs() < 1e-11);
    }

    #[test]
    fn collapsed_routing_loss_is_n() {
        let mut rec = RoutingRecord::new();
        for t in 0..8 {
            rec.push(route(t, vec![1.0, 0.0, 0.0, 0.0]));
        }
        assert!((load_balance_loss(&rec, 1.0) - 4.0).abs() < 1e-9);
    }

    #[test]
    fn single_expert_loss_is_one() {
        let mut rec = RoutingRecord::new();
        rec.push(route(0, vec![1.0]));
        rec.push(route(1, vec![1.0]));
        assert_eq!(load_balance_loss(&rec, 1.0), 1.0);
    }

    #[test]
    fn empty_record_loss_is_zero() {
        assert_eq!(load_balance_loss(&RoutingRecord::new(), 0.01), 0.0);
    }

    #[test]
    fn csv_rows_per_selected_expert() {
        let mut rec = RoutingRecord::new();
        rec.push(TokenRoute {
            token: 3,
            group: 1,
            router: RouterId::Group(1),
            selected: vec![2, 0],
            weights: vec![0.5, 0.25],
            probs: vec![0.25, 0.25, 0.5],
        });
        assert_eq!(
            rec.to_csv(),
            "token_idx,group,expert,weight\n3,1,2,5e-1\n3,1,0,2.5e-1\n"
        );
    }
}
