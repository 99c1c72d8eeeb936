//! Acceptance checks, one PASS/FAIL line per criterion.

mod common;

use std::fs;
use std::process::ExitCode;
use std::time::Instant;

use common::{micro_model_gradient_error, op_gradient_error, OPS};
use moce_core::clustering::{elbow_select, kmeans_fit, KMeansModel, KMeansOptions};
use moce_core::harness::{
    ablation_run, evaluate, planted_blobs, route_stats, skewed_corpus, train_on_records,
    two_dialect_split, RunConfig,
};
use moce_core::moce::{
    gate, load_balance_loss, moce_layer_forward, moce_variant_forward, soft_merge_forward,
    top_k_select, AdapterExpert, BaseFfn, ExpertGroup, LayerConfig, MoceLayer, RouterId,
    RoutingRecord, TokenRoute,
};
use moce_core::model::{
    decode_params, encode_params, upcycle_init, Checkpoint, DenseModel, Parameters, PARAMS_FILE,
};
use moce_core::rng::{normal_tensor, substream};
use moce_core::tensor::{Activation, Binder, Tape, Tensor};
use moce_core::{ModelConfig, RoutingMode};
use rand::Rng as _;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst_op = (0.0f64, "", 0);
    for op in OPS {
        for seed in 0..100 {
            let e = op_gradient_error(op, seed);
            if e > worst_op.0 {
                worst_op = (e, op, seed);
            }
        }
    }
    let mut worst_model = (0.0f64, 0);
    for seed in 0..100 {
        let e = micro_model_gradient_error(seed);
        if e > worst_model.0 {
            worst_model = (e, seed);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst_op.0 < 1e-6 && worst_model.0 < 1e-4 && secs < 60.0,
        format!(
            "{} ops x 100 seeds worst {:.1e} ({} seed {}) < 1e-6; micro model x 100 seeds worst {:.1e} (seed {}) < 1e-4; {secs:.1} s < 60 s",
            OPS.len(),
            worst_op.0,
            worst_op.1,
            worst_op.2,
            worst_model.0,
            worst_model.1
        ),
    )
}

fn random_layer(seed: u64, n: usize, k: usize, mode: RoutingMode, variant: bool) -> MoceLayer {
    let (d, r, groups) = (6, 3, 3);
    let mut rng = substream(seed, "acceptance-layer");
    let group = |rng: &mut moce_core::rng::Rng| {
        let experts = (0..n)
            .map(|_| {
                AdapterExpert::new(
                    normal_tensor(rng, &[d, r], 0.7),
                    normal_tensor(rng, &[r, d], 0.7),
                )
                .unwrap()
            })
            .collect();
        ExpertGroup::new(experts, normal_tensor(rng, &[d, n], 1.0)).unwrap()
    };
    let gs = (0..groups).map(|_| group(&mut rng)).collect();
    let general = variant.then(|| group(&mut rng));
    let base = BaseFfn::new(
        normal_tensor(&mut rng, &[d, 8], 0.5),
        normal_tensor(&mut rng, &[8, d], 0.5),
        Activation::Gelu,
    )
    .unwrap();
    let cfg = LayerConfig {
        n_groups: groups,
        n_experts: n,
        rank: r,
        k,
        mode,
        variant,
        ..LayerConfig::default()
    };
    MoceLayer::new(gs, general, base, cfg).unwrap()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn routing_invariants() -> Outcome {
    let mut rng = substream(2, "acceptance-routing");
    // gate sums to one
    let mut gate_err = 0.0f64;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=16);
        let scale = [1.0, 10.0, 300.0][rng.gen_range(0..3)];
        let h = Tensor::vector((0..n).map(|_| scale * rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let g = gate(&h).unwrap();
        gate_err = gate_err.max((g.data().iter().sum::<f64>() - 1.0).abs());
    }
    // top-k against a brute-force oracle, with ties made common by coarse values
    let mut topk_ok = true;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=8);
        let k = rng.gen_range(1..=n);
        let w: Vec<f64> = (0..n)
            .map(|_| f64::from(rng.gen_range(1..5u8)) / 4.0)
            .collect();
        let got = top_k_select(&Tensor::vector(w.clone()).unwrap(), k).unwrap();
        let mut order: Vec<usize> = (0..n).collect();
        // stable sort keeps lower indices first among equal weights
        order.sort_by(|a, b| w[*b].partial_cmp(&w[*a]).unwrap());
        let mut want = vec![0.0; n];
        for &i in &order[..k] {
            want[i] = w[i];
        }
        let nonzeros = got.data().iter().filter(|v| **v != 0.0).count();
        topk_ok &= got.data() == want.as_slice() && nonzeros == k;
    }
    // soft merge is top-k with k = N; the variant is the sum of both paths
    let mut soft_err = 0.0f64;
    let mut variant_err = 0.0f64;
    for seed in 0..20 {
        let n = 1 + (seed as usize % 4);
        let x = normal_tensor(&mut rng, &[5, 6], 1.0);
        let layer = random_layer(seed, n, n, RoutingMode::TopK, false);
        let base = layer.base_ffn().forward(&x).unwrap();
        let g = seed as usize % 3;
        let a = moce_layer_forward(&layer, &x, &base, g, &mut RoutingRecord::new()).unwrap();
        let b = soft_merge_forward(&layer, &x, &base, g, &mut RoutingRecord::new()).unwrap();
        soft_err = soft_err.max(max_abs_diff(&a, &b));

        let k = 1 + (seed as usize % n);
        let layer = random_layer(seed, n, k, RoutingMode::TopK, true);
        let full = moce_variant_forward(&layer, &x, &base, g, &mut RoutingRecord::new()).unwrap();
        let group_only =
            moce_layer_forward(&layer, &x, &base, g, &mut RoutingRecord::new()).unwrap();
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let (xv, bv) = (tape.constant(x.clone()), tape.constant(base.clone()));
        let general = layer
            .general_path(
                &mut tape,
                &mut binder,
                "l",
                xv,
                bv,
                g,
                RoutingMode::TopK,
                k,
                &mut RoutingRecord::new(),
                &mut Vec::new(),
            )
            .unwrap();
        let sum: Vec<f64> = group_only
            .data()
            .iter()
            .zip(tape.value(general).data())
            .map(|(a, b)| a + b)
            .collect();
        variant_err = variant_err.max(max_abs_diff(
            &full,
            &Tensor::new(full.shape(), sum).unwrap(),
        ));
    }
    // inactive groups get no gradient through a full model
    let cfg = ModelConfig {
        vocab_size: 11,
        d_model: 8,
        n_heads: 2,
        d_ff: 8,
        max_seq_len: 8,
        rank: 3,
        n_groups: 3,
        n_experts: 2,
        ..ModelConfig::default()
    };
    let mut model = upcycle_init(&DenseModel::random(&cfg).unwrap(), &cfg).unwrap();
    model.visit_params_mut(&mut |name, t| {
        if name.ends_with("w_up") {
            t.data_mut().iter_mut().for_each(|v| *v = 0.3);
        }
    });
    let mut inactive_nonzero = 0usize;
    let mut active_nonzero = 0usize;
    for g in 0..3 {
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let pass = model
            .forward_taped(&mut tape, &mut binder, &[1, 4, 2, 7, 3], g)
            .unwrap();
        let loss = tape
            .cross_entropy(pass.logits, &[4, 2, 7, 3, 9], &[1, 2, 3, 4])
            .unwrap();
        let grads = tape.backward(loss).unwrap();
        model.visit_params(&mut |name, _| {
            let nonzero = binder
                .gradient(&grads, name)
                .is_some_and(|gr| gr.iter().any(|v| *v != 0.0));
            let in_group = (0..3).find(|j| name.contains(&format!(".g{j}.")));
            match in_group {
                Some(j) if j != g && nonzero => inactive_nonzero += 1,
                Some(j) if j == g && nonzero => active_nonzero += 1,
                _ => {}
            }
        });
    }
    let pass = gate_err < 1e-12
        && topk_ok
        && soft_err < 1e-12
        && variant_err < 1e-12
        && inactive_nonzero == 0
        && active_nonzero > 0;
    outcome(
        pass,
        format!(
            "gate sum err {gate_err:.1e}; top-k oracle {}; soft vs top-k(N) {soft_err:.1e}; variant vs paths {variant_err:.1e}; inactive-group params with gradient {inactive_nonzero}",
            if topk_ok { "match" } else { "MISMATCH" }
        ),
    )
}

fn upcycling_identity() -> Outcome {
    let base_cfg = ModelConfig {
        vocab_size: 40,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 24,
        rank: 8,
        n_groups: 3,
        n_experts: 4,
        ..ModelConfig::default()
    };
    let settings = [
        ("soft", RoutingMode::Soft, 4, false),
        ("top-k k=N", RoutingMode::TopK, 4, false),
        ("top-2 renormalized", RoutingMode::TopK, 2, true),
    ];
    let mut rng = substream(3, "acceptance-upcycle");
    let mut parts = Vec::new();
    let mut pass = true;
    for (name, mode, k, renormalize) in settings {
        let cfg = ModelConfig {
            mode,
            k,
            renormalize,
            ..base_cfg.clone()
        };
        let dense = DenseModel::random(&cfg).unwrap();
        let moce = upcycle_init(&dense, &cfg).unwrap();
        let mut worst = 0.0f64;
        for _ in 0..50 {
            let len = rng.gen_range(1..=cfg.max_seq_len);
            let tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(0..cfg.vocab_size)).collect();
            let group = rng.gen_range(0..cfg.n_groups);
            let a = dense.forward(&tokens).unwrap();
            let (b, _) = moce.forward(&tokens, group).unwrap();
            worst = worst.max(max_abs_diff(&a, &b));
        }
        pass &= worst < 1e-9;
        parts.push(format!("{name} {worst:.1e}"));
    }
    outcome(
        pass,
        format!(
            "max |logit diff| over 50 sequences: {} (< 1e-9)",
            parts.join(", ")
        ),
    )
}

fn brute_force_sse(points: &[Vec<f64>]) -> f64 {
    let n = points.len();
    let mut best = f64::INFINITY;
    // point 0 always in cluster 0; both clusters non-empty
    for mask in 0..(1u32 << (n - 1)) {
        let labels: Vec<usize> = (0..n)
            .map(|i| {
                if i == 0 {
                    0
                } else {
                    ((mask >> (i - 1)) & 1) as usize
                }
            })
            .collect();
        if labels.iter().all(|l| *l == 0) {
            continue;
        }
        let mut total = 0.0;
        for c in 0..2 {
            let members: Vec<&Vec<f64>> = points
                .iter()
                .zip(&labels)
                .filter(|(_, l)| **l == c)
                .map(|(p, _)| p)
                .collect();
            let m = members.len() as f64;
            let centroid: Vec<f64> = (0..2)
                .map(|d| members.iter().map(|p| p[d]).sum::<f64>() / m)
                .collect();
            total += members
                .iter()
                .map(|p| (p[0] - centroid[0]).powi(2) + (p[1] - centroid[1]).powi(2))
                .sum::<f64>();
        }
        best = best.min(total);
    }
    best
}

fn is_non_increasing(history: &[f64]) -> bool {
    history
        .windows(2)
        .all(|w| w[1] <= w[0] + 1e-12 * w[0].abs().max(1.0))
}

fn kmeans_oracle() -> Outcome {
    let mut optimal = 0;
    let mut monotone = 0;
    let mut runs = 0;
    for seed in 0..10u64 {
        let mut rng = substream(seed, "acceptance-kmeans");
        let points: Vec<Vec<f64>> = (0..6)
            .map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let (model, _) = kmeans_fit(&points, 2, seed, KMeansOptions::default()).unwrap();
        if (model.final_sse() - brute_force_sse(&points)).abs() <= 1e-9 {
            optimal += 1;
        }
        runs += 1;
        monotone += usize::from(is_non_increasing(model.sse_history()));
    }
    // monotonicity on larger instances as well
    for seed in 0..100u64 {
        let mut rng = substream(seed, "acceptance-kmeans-large");
        let k = rng.gen_range(2..=8);
        let points: Vec<Vec<f64>> = (0..60)
            .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let (model, _) = kmeans_fit(&points, k, seed, KMeansOptions::default()).unwrap();
        runs += 1;
        monotone += usize::from(is_non_increasing(model.sse_history()));
    }
    outcome(
        optimal >= 8 && monotone == runs,
        format!("exhaustive optimum reached {optimal}/10 (>= 8); SSE non-increasing in {monotone}/{runs} runs"),
    )
}

pub const BLOB_DIM: usize = 64;

fn elbow_recovery() -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for k in [3, 4] {
        let hits = (0..10u64)
            .filter(|&seed| {
                let b = planted_blobs(k, 200, BLOB_DIM, 10.0, seed);
                elbow_select(&b.points, 8, seed).unwrap().selected_k == k
            })
            .count();
        pass &= hits >= 9;
        parts.push(format!("k={k}: {hits}/10"));
    }
    outcome(
        pass,
        format!(
            "planted k recovered ({}, need >= 9/10 each; dim {BLOB_DIM}, k_max 8)",
            parts.join(", ")
        ),
    )
}

fn route(token: usize, probs: Vec<f64>, top: usize) -> TokenRoute {
    TokenRoute {
        token,
        group: 0,
        router: RouterId::Group(0),
        selected: vec![top],
        weights: vec![probs[top]],
        probs,
    }
}

fn skew_config() -> RunConfig {
    RunConfig::parse(
        "groups = 1\nd_model = 16\nn_heads = 2\nd_ff = 32\nrank = 8\nn_layers = 2\nsteps = 100\nbatch_size = 8\nlr = 0.01\nembed_dim = 16\nmax_seq_len = 16\n",
    )
    .unwrap()
}

fn load_balancing() -> Outcome {
    let n = 4;
    let mut uniform = RoutingRecord::new();
    for t in 0..8 {
        uniform.push(route(t, vec![0.25; n], t % n));
    }
    let mut collapsed = RoutingRecord::new();
    for t in 0..8 {
        collapsed.push(route(t, vec![1.0, 0.0, 0.0, 0.0], 0));
    }
    let lu = load_balance_loss(&uniform, 1.0);
    let lc = load_balance_loss(&collapsed, 1.0);
    let formula_ok = (lu - 1.0).abs() < 1e-9 && (lc - n as f64).abs() < 1e-9;

    let mut lower = 0;
    let mut pairs = Vec::new();
    for seed in 0..5u64 {
        let train = skewed_corpus(400, 6, 0.8, seed);
        let mut loads = [0.0; 2];
        for (i, lambda) in [0.0, 0.01].into_iter().enumerate() {
            let mut cfg = skew_config();
            cfg.set("seed", &seed.to_string()).unwrap();
            cfg.lambda = lambda;
            let out = train_on_records(&cfg, &train, None).unwrap();
            let stats =
                route_stats(&out.checkpoint, &out.vocab, &train, "skewed", None, None).unwrap();
            loads[i] = stats
                .routers
                .iter()
                .map(|r| r.max_load())
                .fold(0.0, f64::max);
        }
        lower += usize::from(loads[1] < loads[0]);
        pairs.push(format!("{:.2}->{:.2}", loads[0], loads[1]));
    }
    outcome(
        formula_ok && lower >= 4,
        format!(
            "uniform loss {lu:.12}, collapsed loss {lc:.12} (N = {n}); max load lambda 0 -> 0.01: {} lower in {lower}/5 (>= 4)",
            pairs.join(" ")
        ),
    )
}

fn dialect_config() -> RunConfig {
    RunConfig::parse(
        "groups = 2\nd_model = 32\nn_heads = 2\nd_ff = 64\nrank = 16\nn_layers = 2\nsteps = 300\nbatch_size = 16\nlr = 0.01\nembed_dim = 64\nmax_seq_len = 16\nseed = 1\n",
    )
    .unwrap()
}

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let (train, test) = two_dialect_split(2000, 200, 4, 7);
    let cfg = dialect_config();
    let out = train_on_records(&cfg, &train, None).unwrap();
    let eval = evaluate(&out.checkpoint, &out.vocab, &test, None, 8).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let (first, last) = (
        out.metrics.initial_loss().unwrap(),
        out.metrics.final_loss().unwrap(),
    );
    outcome(
        last <= 0.5 * first && eval.exact_match >= 0.9 && secs < 300.0,
        format!(
            "train loss {first:.3} -> {last:.3} (<= 0.5x); held-out exact match {:.3} on {} unseen prompts (>= 0.9); {secs:.1} s (< 300 s)",
            eval.exact_match, eval.records
        ),
    )
}

fn ablation_directionality() -> Outcome {
    let (train, test) = two_dialect_split(1000, 200, 4, 11);
    let mut cfg = dialect_config();
    cfg.steps = Some(150);
    let table = ablation_run(&cfg, &train, &test, &[1, 2, 3, 4, 5]).unwrap();
    let wins = table.dual_stage_wins();
    let scaling = table.scaling();
    let deltas: Vec<String> = scaling
        .windows(2)
        .map(|w| {
            let (m, se) = moce_core::harness::AblationTable::paired_change(w[0], w[1]);
            format!(
                "N={}->{}: {m:+.3} (2 SE {:.3})",
                w[0].n_experts,
                w[1].n_experts,
                2.0 * se
            )
        })
        .collect();
    let routing_rows = table.rows.iter().filter(|r| r.table == "routing").count();
    let structure = table.rows.len() == 12 && routing_rows == 9 && scaling.len() == 3;
    outcome(
        wins >= 3 && table.scaling_within_noise() && structure,
        format!(
            "dual-stage <= both single-stage rows in {wins}/5 seeds (>= 3); scaling {}; {} rows ({routing_rows} routing + {} scaling)",
            deltas.join(", "),
            table.rows.len(),
            scaling.len()
        ),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = two_dialect_split(200, 0, 4, 3);
    let mut cfg = dialect_config();
    cfg.steps = Some(20);
    let runs: Vec<_> = (0..2)
        .map(|i| {
            let out = train_on_records(&cfg, &train, None).unwrap();
            let d = dir.path().join(format!("run{i}"));
            out.write(&d, &cfg).unwrap();
            d
        })
        .collect();
    let read = |p: std::path::PathBuf| fs::read(p).unwrap();
    let files = [
        "checkpoint/params.bin",
        "checkpoint/manifest.txt",
        "checkpoint/kmeans.txt",
        "metrics.jsonl",
        "summary.csv",
    ];
    let identical = files
        .iter()
        .all(|f| read(runs[0].join(f)) == read(runs[1].join(f)));

    let ck_dir = runs[0].join("checkpoint");
    let ck = Checkpoint::load(&ck_dir).unwrap();
    let bytes = read(ck_dir.join(PARAMS_FILE));
    let reencoded = encode_params(&ck.model) == bytes;
    let decoded = decode_params(&bytes).unwrap();
    let mut same_values = true;
    ck.model.visit_params(&mut |name, t| {
        same_values &= decoded
            .iter()
            .find(|(n, _)| n == name)
            .is_some_and(|(_, v)| {
                v.shape() == t.shape()
                    && v.data()
                        .iter()
                        .zip(t.data())
                        .all(|(a, b)| a.to_bits() == b.to_bits())
            });
    });

    let km = ck.model.clustering().unwrap();
    let path = dir.path().join("k.txt");
    km.save(&path).unwrap();
    let back = KMeansModel::load(&path).unwrap();
    let centroid_err = km
        .centroids()
        .iter()
        .flatten()
        .zip(back.centroids().iter().flatten())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    outcome(
        identical && reencoded && same_values && centroid_err <= 1e-9,
        format!(
            "repeat run files identical: {identical}; checkpoint round trip bit-exact: {}; clustering round trip max centroid diff {centroid_err:.1e} (<= 1e-9)",
            reencoded && same_values
        ),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("gradient suite", gradient_suite),
        ("routing invariants", routing_invariants),
        ("upcycling identity", upcycling_identity),
        ("k-means oracle", kmeans_oracle),
        ("elbow recovery", elbow_recovery),
        ("load balancing", load_balancing),
        ("end-to-end toy training", end_to_end),
        ("ablation directionality", ablation_directionality),
        ("determinism and persistence", determinism),
    ];
    let filter: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty() && !filter.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let o = check();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!(
            "[{n}] {verdict} {name}: {} [{:.1} s]",
            o.detail,
            start.elapsed().as_secs_f64()
        );
        failed += usize::from(!o.pass);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
