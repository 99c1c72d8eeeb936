use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::RngCore;
use rayon::prelude::*;
use serde::Serialize;

use super::config::{EmbedField, EmbeddingSource, RunConfig};
use super::dataset::{ingest_dataset, InstructionRecord};
use super::metrics::{EvalMetrics, MetricsReport, RouteAccumulator, RouterLoad, StepMetrics};
use super::tokenizer::Vocab;
use crate::clustering::{
    elbow_select, kmeans_best_of, ElbowReport, KMeansModel, KMeansOptions, ELBOW_RESTARTS,
};
use crate::embedding::{embed_text, load_embeddings, EmbeddingSet};
use crate::error::{MoceError, Result};
use crate::model::{
    dense_train_step, lm_loss, train_step, upcycle_init, Adam, Checkpoint, DenseModel, Example,
    MoceModel,
};
use crate::rng::substream;

pub const VOCAB_FILE: &str = "vocab.txt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const ELBOW_FILE: &str = "elbow.csv";
pub const CONFIG_FILE: &str = "run.cfg";
pub const CHECKPOINT_DIR: &str = "checkpoint";

/// How sequence embeddings are produced; stored with a checkpoint so evaluation embeds identically.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedSettings {
    pub source: EmbeddingSource,
    pub dim: usize,
    pub seed: u64,
    pub field: EmbedField,
}

impl EmbedSettings {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            source: cfg.embedding_source,
            ..Self::toy(cfg.embed_dim, cfg.seed, cfg.embed_field)
        }
    }

    /// Built-in embedder with its hash seed drawn from master seed `seed`, as a run with that seed would.
    pub fn toy(dim: usize, seed: u64, field: EmbedField) -> Self {
        Self {
            source: EmbeddingSource::Toy,
            dim,
            seed: substream(seed, "embedder").next_u64(),
            field,
        }
    }

    fn to_meta(&self, meta: &mut BTreeMap<String, String>) {
        let source = match self.source {
            EmbeddingSource::Toy => "toy",
            EmbeddingSource::File => "file",
        };
        let field = match self.field {
            EmbedField::Instruction => "instruction",
            EmbedField::InstructionResponse => "instruction_response",
        };
        meta.insert("embedding_source".into(), source.into());
        meta.insert("embed_dim".into(), self.dim.to_string());
        meta.insert("embed_seed".into(), self.seed.to_string());
        meta.insert("embed_field".into(), field.into());
    }

    pub fn from_meta(meta: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            meta.get(k).ok_or_else(|| {
                MoceError::format("checkpoint manifest", format!("missing meta.{k}"))
            })
        };
        let bad = |k: &str| MoceError::format("checkpoint manifest", format!("bad meta.{k}"));
        Ok(Self {
            source: match get("embedding_source")?.as_str() {
                "toy" => EmbeddingSource::Toy,
                "file" => EmbeddingSource::File,
                _ => return Err(bad("embedding_source")),
            },
            dim: get("embed_dim")?.parse().map_err(|_| bad("embed_dim"))?,
            seed: get("embed_seed")?.parse().map_err(|_| bad("embed_seed"))?,
            field: match get("embed_field")?.as_str() {
                "instruction" => EmbedField::Instruction,
                "instruction_response" => EmbedField::InstructionResponse,
                _ => return Err(bad("embed_field")),
            },
        })
    }

    fn text(&self, r: &InstructionRecord) -> String {
        match self.field {
            EmbedField::Instruction => r.instruction.clone(),
            EmbedField::InstructionResponse => format!("{} {}", r.instruction, r.response),
        }
    }

    /// Toy embeddings of `records`, or `file` checked against them.
    pub fn embed(
        &self,
        records: &[InstructionRecord],
        file: Option<&EmbeddingSet>,
    ) -> Result<EmbeddingSet> {
        match (self.source, file) {
            (EmbeddingSource::File, Some(set)) => {
                if set.len() != records.len() {
                    return Err(MoceError::format(
                        "embedding file",
                        format!("{} rows for {} records", set.len(), records.len()),
                    ));
                }
                Ok(set.clone())
            }
            (EmbeddingSource::File, None) => Err(MoceError::config(
                "file embeddings requested but no embedding file given",
            )),
            (EmbeddingSource::Toy, _) => {
                let embs = records
                    .iter()
                    .map(|r| {
                        let id: String =
                            r.id.chars()
                                .map(|c| if c.is_whitespace() { '_' } else { c })
                                .collect();
                        embed_text(&self.text(r), self.dim, self.seed).map(|e| e.with_source_id(id))
                    })
                    .collect::<Result<Vec<_>>>()?;
                EmbeddingSet::new(self.dim, embs)
            }
        }
    }
}

/// Everything produced by a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub vocab: Vocab,
    pub embeddings: EmbeddingSet,
    pub kmeans: KMeansModel,
    pub elbow: Option<ElbowReport>,
    /// Cluster of every training record.
    pub labels: Vec<usize>,
    pub metrics: MetricsReport,
}

impl TrainOutcome {
    pub fn model(&self) -> &MoceModel {
        &self.checkpoint.model
    }

    /// Writes checkpoint, vocabulary, metrics and (when fitted) the elbow report under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, cfg: &RunConfig) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| MoceError::io(dir, e))?;
        let ck = dir.join(CHECKPOINT_DIR);
        self.checkpoint.save(&ck)?;
        self.vocab.save(ck.join(VOCAB_FILE))?;
        let write = |name: &str, text: String| {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| MoceError::io(&p, e))
        };
        write(METRICS_FILE, self.metrics.to_jsonl())?;
        write(SUMMARY_FILE, self.metrics.summary_csv())?;
        write(CONFIG_FILE, cfg.to_text())?;
        if let Some(e) = &self.elbow {
            write(ELBOW_FILE, e.to_csv())?;
        }
        Ok(())
    }
}

/// Fits the sequence clustering for `cfg`: a fixed `groups`, an elbow search up to `k_max`, or a single cluster.
pub fn fit_clustering(
    cfg: &RunConfig,
    embeddings: &EmbeddingSet,
) -> Result<(KMeansModel, Vec<usize>, Option<ElbowReport>)> {
    let points = embeddings.embeddings();
    let seed = substream(cfg.seed, "clustering").next_u64();
    let (k, elbow) = if cfg.no_clustering {
        (1, None)
    } else if let Some(k_max) = cfg.k_max {
        if points.len() < k_max {
            return Err(MoceError::setup(format!(
                "elbow search to k = {k_max} needs at least that many sequences, got {}",
                points.len()
            )));
        }
        let report = elbow_select(points, k_max, seed)?;
        (report.selected_k, Some(report))
    } else {
        (cfg.groups.expect("validated"), None)
    };
    let distinct: HashSet<Vec<u64>> = points
        .iter()
        .map(|e| e.vector().iter().map(|v| v.to_bits()).collect())
        .collect();
    if distinct.len() < k {
        return Err(MoceError::setup(format!(
            "{k} clusters requested but only {} distinct sequence embeddings exist",
            distinct.len()
        )));
    }
    let (model, assignment) =
        kmeans_best_of(points, k, seed, ELBOW_RESTARTS, KMeansOptions::default())?;
    Ok((model, assignment.labels().to_vec(), elbow))
}

fn batch_max_load(records: &[crate::moce::RoutingRecord]) -> f64 {
    let mut acc = RouteAccumulator::new();
    acc.add(records);
    acc.max_load()
}

/// Trains on in-memory records: embed, cluster, upcycle, train.
pub fn train_on_records(
    cfg: &RunConfig,
    records: &[InstructionRecord],
    file_embeddings: Option<&EmbeddingSet>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(MoceError::contract("training set is empty"));
    }
    let vocab = Vocab::build(records);
    let settings = EmbedSettings::from_config(cfg);
    let embeddings = settings.embed(records, file_embeddings)?;
    let (kmeans, labels, elbow) = fit_clustering(cfg, &embeddings)?;

    let model_cfg = cfg.effective_model(kmeans.k(), vocab.len());
    model_cfg.validate()?;
    let examples: Vec<Example> = records
        .iter()
        .zip(&labels)
        .map(|(r, &g)| vocab.example(r, g))
        .collect();
    if let Some((r, ex)) = records
        .iter()
        .zip(&examples)
        .find(|(_, ex)| ex.tokens.len() > model_cfg.max_seq_len)
    {
        return Err(MoceError::contract(format!(
            "record {} needs {} positions, max_seq_len is {}",
            r.id,
            ex.tokens.len(),
            model_cfg.max_seq_len
        )));
    }

    let mut dense = DenseModel::random(&model_cfg)?;
    if cfg.base_pretrain_steps > 0 {
        let mut opt = Adam::new(cfg.base_lr).with_clip_norm(cfg.clip_norm);
        let mut order = BatchOrder::new(
            examples.len(),
            cfg.batch_size,
            substream(cfg.seed, "base-data"),
        );
        for step in 0..cfg.base_pretrain_steps {
            let batch: Vec<Example> = order
                .next_batch()
                .iter()
                .map(|&i| examples[i].clone())
                .collect();
            dense_train_step(&mut dense, &mut opt, &batch)
                .map_err(|e| at_step("base pretraining", step, e))?;
        }
    }
    let mut model = upcycle_init(&dense, &model_cfg)?;
    model.bind_clustering(kmeans.clone())?;

    let total_steps = cfg
        .steps
        .unwrap_or_else(|| cfg.epochs * examples.len().div_ceil(cfg.batch_size));
    let mut opt = Adam::new(cfg.lr).with_clip_norm(cfg.clip_norm);
    let mut order = BatchOrder::new(examples.len(), cfg.batch_size, substream(cfg.seed, "data"));
    let mut acc = RouteAccumulator::new();
    let mut steps = Vec::with_capacity(total_steps);
    for step in 0..total_steps {
        // per-group micro-batches: sequences of one group sit together
        let mut idx = order.next_batch();
        idx.sort_by_key(|&i| (examples[i].group, i));
        let batch: Vec<Example> = idx.iter().map(|&i| examples[i].clone()).collect();
        let stats = train_step(&mut model, &mut opt, &batch, cfg.lambda)
            .map_err(|e| at_step("training", step, e))?;
        let tokens = batch.iter().map(|e| e.tokens.len()).sum();
        acc.add(&stats.records);
        steps.push(StepMetrics {
            step,
            loss: stats.loss,
            lm_loss: stats.lm_loss,
            balance_loss: stats.balance_loss,
            grad_norm: stats.grad_norm,
            tokens,
            max_load: batch_max_load(&stats.records),
        });
        log::debug!("step {step}: loss {:.4}", stats.loss);
    }

    let metrics = MetricsReport {
        steps,
        total_tokens: acc.total_tokens(),
        group_token_counts: acc.group_token_counts(),
        routers: acc.router_loads(),
        configured_active_experts: model_cfg.layer_config().active_experts_per_token(),
        measured_active_experts: acc.active_experts_per_token(),
        eval: None,
    };
    let mut checkpoint = Checkpoint::new(model, total_steps as u64);
    settings.to_meta(&mut checkpoint.meta);
    checkpoint.meta.insert("vocab".into(), VOCAB_FILE.into());
    Ok(TrainOutcome {
        checkpoint,
        vocab,
        embeddings,
        kmeans,
        elbow,
        labels,
        metrics,
    })
}

fn at_step(phase: &str, step: usize, e: MoceError) -> MoceError {
    match e {
        MoceError::Numeric(m) => MoceError::numeric(format!("{phase} step {step}: {m}")),
        other => other,
    }
}

/// Reshuffled-per-epoch batch order.
struct BatchOrder {
    perm: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: crate::rng::Rng,
}

impl BatchOrder {
    fn new(n: usize, batch: usize, rng: crate::rng::Rng) -> Self {
        Self {
            perm: (0..n).collect(),
            pos: n,
            batch: batch.min(n),
            rng,
        }
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.pos == self.perm.len() {
                self.perm.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.perm[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Reads the training set named by `cfg`, trains, and writes results to `out_dir` when set.
pub fn pipeline_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let path = cfg
        .train_data
        .as_ref()
        .ok_or_else(|| MoceError::config("train_data is not set"))?;
    let records = ingest_dataset(path)?;
    let file = match (&cfg.embedding_source, &cfg.embedding_file) {
        (EmbeddingSource::File, Some(p)) => Some(load_embeddings(p)?),
        _ => None,
    };
    let mut outcome = train_on_records(cfg, &records, file.as_ref())?;
    if let Some(eval_path) = &cfg.eval_data {
        let eval_records = ingest_dataset(eval_path)?;
        let eval = evaluate(
            &outcome.checkpoint,
            &outcome.vocab,
            &eval_records,
            None,
            cfg.max_new_tokens,
        )?;
        outcome.metrics.eval = Some(eval);
    }
    if let Some(dir) = &cfg.out_dir {
        outcome.write(dir, cfg)?;
    }
    Ok(outcome)
}

/// Loads a checkpoint directory written by [`pipeline_train`] together with its vocabulary.
pub fn load_trained(dir: impl AsRef<Path>) -> Result<(Checkpoint, Vocab)> {
    let dir = dir.as_ref();
    let ck = Checkpoint::load(dir)?;
    let vocab_file = ck
        .meta
        .get("vocab")
        .cloned()
        .unwrap_or_else(|| VOCAB_FILE.into());
    let vocab = Vocab::load(dir.join(vocab_file))?;
    if vocab.len() != ck.model.config().vocab_size {
        return Err(MoceError::format(
            "checkpoint",
            format!(
                "vocabulary has {} entries, model expects {}",
                vocab.len(),
                ck.model.config().vocab_size
            ),
        ));
    }
    Ok((ck, vocab))
}

/// Group of every record, from the checkpoint's bound clustering model (or `clustering` when given).
pub fn predict_groups(
    ck: &Checkpoint,
    records: &[InstructionRecord],
    file_embeddings: Option<&EmbeddingSet>,
    clustering: Option<&KMeansModel>,
) -> Result<Vec<usize>> {
    let m = ck.model.n_groups();
    if let Some(km) = clustering {
        if km.k() != m {
            return Err(MoceError::config(format!(
                "clustering model has {} clusters but the checkpoint has {m} expert groups",
                km.k()
            )));
        }
    }
    let settings = EmbedSettings::from_meta(&ck.meta)?;
    let embs = settings.embed(records, file_embeddings)?;
    let km = clustering.or(ck.model.clustering());
    embs.iter()
        .map(|e| match km {
            Some(km) => km.predict(e.vector()),
            None => Ok(0),
        })
        .collect()
}

/// Greedy continuation of `prompt` until `<eos>`, `max_new` tokens, or the context limit.
pub fn greedy_decode(
    model: &MoceModel,
    vocab: &Vocab,
    prompt: &[usize],
    group: usize,
    max_new: usize,
) -> Result<Vec<usize>> {
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < max_new && seq.len() < model.config().max_seq_len {
        let (logits, _) = model.forward(&seq, group)?;
        let last = logits.row(logits.rows() - 1);
        let next = crate::moce::argmax(last);
        if next == vocab.eos() {
            break;
        }
        out.push(next);
        seq.push(next);
    }
    Ok(out)
}

struct RecordEval {
    group: usize,
    nll: f64,
    tokens: usize,
    exact: bool,
}

/// Exact match under greedy decoding and teacher-forced perplexity.
///
/// The group is predicted once per prompt and held for the whole generation.
pub fn evaluate(
    ck: &Checkpoint,
    vocab: &Vocab,
    records: &[InstructionRecord],
    file_embeddings: Option<&EmbeddingSet>,
    max_new_tokens: usize,
) -> Result<EvalMetrics> {
    if records.is_empty() {
        return Err(MoceError::contract("evaluation set is empty"));
    }
    let groups = predict_groups(ck, records, file_embeddings, None)?;
    let model = &ck.model;
    let per: Vec<RecordEval> = records
        .par_iter()
        .zip(&groups)
        .map(|(r, &g)| {
            let ex = vocab.example(r, g);
            let (logits, _) = model.forward(&ex.tokens, g)?;
            let nll = lm_loss(&logits, &ex.targets, &ex.positions)? * ex.positions.len() as f64;
            let want = vocab.encode(&r.response);
            let got = greedy_decode(
                model,
                vocab,
                &vocab.prompt(&r.instruction),
                g,
                max_new_tokens.max(want.len() + 1),
            )?;
            Ok(RecordEval {
                group: g,
                nll,
                tokens: ex.positions.len(),
                exact: got == want,
            })
        })
        .collect::<Result<_>>()?;
    let tokens: usize = per.iter().map(|p| p.tokens).sum();
    let nll: f64 = per.iter().map(|p| p.nll).sum();
    let mean_loss = nll / tokens as f64;
    let mut group_counts = vec![0; model.n_groups()];
    for p in &per {
        group_counts[p.group] += 1;
    }
    Ok(EvalMetrics {
        records: records.len(),
        exact_match: per.iter().filter(|p| p.exact).count() as f64 / records.len() as f64,
        mean_loss,
        perplexity: mean_loss.exp(),
        group_counts,
    })
}

/// Teacher-forced mean response NLL per token, without decoding.
pub fn heldout_loss(ck: &Checkpoint, vocab: &Vocab, records: &[InstructionRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(MoceError::contract("evaluation set is empty"));
    }
    let groups = predict_groups(ck, records, None, None)?;
    let per: Vec<(f64, usize)> = records
        .par_iter()
        .zip(&groups)
        .map(|(r, &g)| {
            let ex = vocab.example(r, g);
            let (logits, _) = ck.model.forward(&ex.tokens, g)?;
            Ok((
                lm_loss(&logits, &ex.targets, &ex.positions)? * ex.positions.len() as f64,
                ex.positions.len(),
            ))
        })
        .collect::<Result<_>>()?;
    let (nll, n) = per.iter().fold((0.0, 0), |(a, b), (x, y)| (a + x, b + y));
    Ok(nll / n as f64)
}

/// Cluster histogram and expert usage over a dataset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RouteStats {
    pub dataset: String,
    pub records: usize,
    pub total_tokens: usize,
    pub cluster_counts: Vec<usize>,
    pub cluster_fractions: Vec<f64>,
    pub group_token_counts: BTreeMap<usize, usize>,
    pub routers: Vec<RouterLoad>,
    pub active_experts_per_token: f64,
}

impl RouteStats {
    /// Rows `kind,layer,router,index,value`; `kind` is `cluster_count`, `cluster_fraction`, `load_fraction` or `mean_prob`.
    pub fn to_csv(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::from("kind,layer,router,index,value\n");
        for (c, n) in self.cluster_counts.iter().enumerate() {
            writeln!(out, "cluster_count,,,{c},{n}").expect("write to string");
        }
        for (c, f) in self.cluster_fractions.iter().enumerate() {
            writeln!(out, "cluster_fraction,,,{c},{f:?}").expect("write to string");
        }
        for r in &self.routers {
            for (i, f) in r.load_fractions.iter().enumerate() {
                writeln!(out, "load_fraction,{},{},{i},{f:?}", r.layer, r.router)
                    .expect("write to string");
            }
            for (i, p) in r.mean_probs.iter().enumerate() {
                writeln!(out, "mean_prob,{},{},{i},{p:?}", r.layer, r.router)
                    .expect("write to string");
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("route stats serialize")
    }
}

/// Predicted-cluster histogram and per-router loads for `records`, merged in dataset order.
pub fn route_stats(
    ck: &Checkpoint,
    vocab: &Vocab,
    records: &[InstructionRecord],
    dataset: &str,
    file_embeddings: Option<&EmbeddingSet>,
    clustering: Option<&KMeansModel>,
) -> Result<RouteStats> {
    if records.is_empty() {
        return Err(MoceError::contract("dataset is empty"));
    }
    let groups = predict_groups(ck, records, file_embeddings, clustering)?;
    let per = records
        .par_iter()
        .zip(&groups)
        .map(|(r, &g)| {
            ck.model
                .forward(&vocab.example(r, g).tokens, g)
                .map(|(_, recs)| recs)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut acc = RouteAccumulator::new();
    for recs in &per {
        acc.add(recs);
    }
    let mut cluster_counts = vec![0; ck.model.n_groups()];
    for &g in &groups {
        cluster_counts[g] += 1;
    }
    Ok(RouteStats {
        dataset: dataset.to_string(),
        records: records.len(),
        total_tokens: acc.total_tokens(),
        cluster_fractions: cluster_counts
            .iter()
            .map(|c| *c as f64 / records.len() as f64)
            .collect(),
        cluster_counts,
        group_token_counts: acc.group_token_counts(),
        routers: acc.router_loads(),
        active_experts_per_token: acc.active_experts_per_token(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::corpus::{two_dialect_split, vocabulary_blob_corpus};
    use crate::model::batch_loss;

    fn tiny(groups: usize, steps: usize) -> RunConfig {
        let mut cfg = RunConfig::parse(&format!(
            "groups = {groups}\nd_model = 8\nn_heads = 2\nd_ff = 16\nrank = 4\nn_layers = 1\nsteps = {steps}\nbatch_size = 4\nembed_dim = 64\nlr = 0.01\nmax_seq_len = 24\n"
        ))
        .unwrap();
        cfg.set("seed", "5").unwrap();
        cfg
    }

    #[test]
    fn tokens_follow_the_sequence_cluster() {
        let (train, _) = two_dialect_split(24, 0, 6, 1);
        let out = train_on_records(&tiny(2, 1), &train, None).unwrap();
        let km = out.model().clustering().unwrap();
        for (r, e) in train.iter().zip(out.embeddings.iter()) {
            let g = km.predict(e.vector()).unwrap();
            let ex = out.vocab.example(r, g);
            let (_, recs) = out.model().forward(&ex.tokens, g).unwrap();
            assert!(recs
                .iter()
                .flat_map(|rec| rec.routes())
                .all(|t| t.group == g));
        }
        // the two dialects use disjoint words, so they never share a cluster
        for (r, &l) in train.iter().zip(&out.labels) {
            let same = train
                .iter()
                .zip(&out.labels)
                .filter(|(q, _)| q.source == r.source)
                .all(|(_, &m)| m == l);
            assert!(same);
        }
    }

    #[test]
    fn batch_loss_does_not_depend_on_batch_order() {
        let (train, _) = two_dialect_split(12, 0, 3, 2);
        let out = train_on_records(&tiny(2, 3), &train, None).unwrap();
        let ex: Vec<Example> = train
            .iter()
            .zip(&out.labels)
            .map(|(r, &g)| out.vocab.example(r, g))
            .collect();
        let mut grouped = ex.clone();
        grouped.sort_by_key(|e| e.group);
        let singles: Vec<f64> = ex
            .iter()
            .map(|e| {
                batch_loss(out.model(), std::slice::from_ref(e), 0.0)
                    .unwrap()
                    .3
                    .lm_loss
            })
            .collect();
        let mut grouped_singles: Vec<f64> = grouped
            .iter()
            .map(|e| {
                batch_loss(out.model(), std::slice::from_ref(e), 0.0)
                    .unwrap()
                    .3
                    .lm_loss
            })
            .collect();
        let mut sorted = singles.clone();
        sorted.sort_by(f64::total_cmp);
        grouped_singles.sort_by(f64::total_cmp);
        assert_eq!(sorted, grouped_singles);
        let shuffled = batch_loss(out.model(), &ex, 0.0).unwrap().3.lm_loss;
        let by_group = batch_loss(out.model(), &grouped, 0.0).unwrap().3.lm_loss;
        let mean = singles.iter().sum::<f64>() / singles.len() as f64;
        assert!((shuffled - by_group).abs() < 1e-12);
        assert!((shuffled - mean).abs() < 1e-12);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let (train, test) = two_dialect_split(20, 5, 3, 3);
        let mut cfg = tiny(2, 4);
        let a = train_on_records(&cfg, &train, None).unwrap();
        let b = train_on_records(&cfg, &train, None).unwrap();
        assert_eq!(a.metrics.to_jsonl(), b.metrics.to_jsonl());
        assert_eq!(a.metrics.summary_csv(), b.metrics.summary_csv());
        assert_eq!(
            crate::model::encode_params(a.model()),
            crate::model::encode_params(b.model())
        );
        assert_eq!(
            evaluate(&a.checkpoint, &a.vocab, &test, None, 8).unwrap(),
            evaluate(&b.checkpoint, &b.vocab, &test, None, 8).unwrap()
        );
        cfg.set("seed", "6").unwrap();
        let c = train_on_records(&cfg, &train, None).unwrap();
        assert_ne!(a.metrics.to_jsonl(), c.metrics.to_jsonl());
    }

    #[test]
    fn route_stats_histograms_follow_blobs() {
        let train = vocabulary_blob_corpus(40, &[0, 1], 6, 1);
        let out = train_on_records(&tiny(2, 2), &train, None).unwrap();
        let one = vocabulary_blob_corpus(30, &[0], 6, 2);
        let rs = route_stats(&out.checkpoint, &out.vocab, &one, "one", None, None).unwrap();
        assert_eq!(rs.cluster_counts.iter().sum::<usize>(), 30);
        assert!(rs.cluster_fractions.iter().cloned().fold(0.0, f64::max) >= 0.95);
        let mix = vocabulary_blob_corpus(30, &[0, 1], 6, 3);
        let rs = route_stats(&out.checkpoint, &out.vocab, &mix, "mix", None, None).unwrap();
        assert_eq!(rs.cluster_counts.iter().sum::<usize>(), 30);
        assert!(
            rs.cluster_fractions.iter().all(|f| *f >= 0.4),
            "{:?}",
            rs.cluster_fractions
        );
        assert_eq!(
            rs.group_token_counts.values().sum::<usize>(),
            rs.total_tokens
        );
        for r in &rs.routers {
            assert!((r.load_fractions.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert_eq!(rs.active_experts_per_token, 2.0);
        assert!(rs
            .to_csv()
            .starts_with("kind,layer,router,index,value\ncluster_count,,,0,"));
        assert!(rs.to_json().contains("\"cluster_fractions\""));
    }

    #[test]
    fn setup_and_contract_errors() {
        let (train, _) = two_dialect_split(10, 0, 3, 4);
        let mut dup = vec![train[0].clone(); 6];
        dup.iter_mut()
            .enumerate()
            .for_each(|(i, r)| r.id = i.to_string());
        assert!(matches!(
            train_on_records(&tiny(2, 1), &dup, None),
            Err(MoceError::Setup(_))
        ));
        assert!(matches!(
            train_on_records(&tiny(2, 1), &[], None),
            Err(MoceError::Contract(_))
        ));
        let out = train_on_records(&tiny(2, 1), &train, None).unwrap();
        assert!(matches!(
            evaluate(&out.checkpoint, &out.vocab, &[], None, 4),
            Err(MoceError::Contract(_))
        ));
        let wrong = KMeansModel::from_centroids(vec![vec![0.0; 32]; 3], 0).unwrap();
        assert!(matches!(
            route_stats(&out.checkpoint, &out.vocab, &train, "t", None, Some(&wrong)),
            Err(MoceError::Config(_))
        ));
        let mut cfg = tiny(2, 1);
        cfg.embedding_source = EmbeddingSource::File;
        cfg.embedding_file = Some("unused".into());
        let short = out.embeddings.clone();
        assert!(matches!(
            train_on_records(&cfg, &train[..5], Some(&short)),
            Err(MoceError::Format { .. })
        ));
        assert!(train_on_records(&cfg, &train, Some(&short)).is_ok());
    }

    #[test]
    fn pipeline_writes_and_reloads_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let (train, test) = two_dialect_split(16, 4, 3, 5);
        crate::harness::dataset::write_dataset(dir.path().join("train.jsonl"), &train).unwrap();
        crate::harness::dataset::write_dataset(dir.path().join("test.jsonl"), &test).unwrap();
        let mut cfg = tiny(2, 2);
        cfg.groups = None;
        cfg.k_max = Some(4);
        cfg.train_data = Some(dir.path().join("train.jsonl"));
        cfg.eval_data = Some(dir.path().join("test.jsonl"));
        cfg.out_dir = Some(dir.path().join("run"));
        let out = pipeline_train(&cfg).unwrap();
        assert!(out.metrics.eval.is_some());
        let run = dir.path().join("run");
        for f in [METRICS_FILE, SUMMARY_FILE, ELBOW_FILE, CONFIG_FILE] {
            assert!(run.join(f).exists(), "{f}");
        }
        assert_eq!(
            fs::read_to_string(run.join(METRICS_FILE))
                .unwrap()
                .lines()
                .count(),
            2
        );
        assert_eq!(RunConfig::load(run.join(CONFIG_FILE)).unwrap(), cfg);
        let (ck, vocab) = load_trained(run.join(CHECKPOINT_DIR)).unwrap();
        assert_eq!(vocab, out.vocab);
        assert_eq!(
            crate::model::encode_params(&ck.model),
            crate::model::encode_params(out.model())
        );
        assert_eq!(
            evaluate(&ck, &vocab, &test, None, 8).unwrap(),
            out.metrics.eval.unwrap()
        );
    }
}
