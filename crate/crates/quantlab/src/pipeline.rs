//! End-to-end pipelines behind the command-line interface: dataset
//! generation, index building, training, evaluation with the leakage guard,
//! ablation sweeps, theory verification, and paired run comparison.
//!
//! Every run directory receives the resolved configuration, dataset/split
//! hashes, and the seed, so runs can be reproduced bit-identically. Primary
//! outputs never contain wall-clock times; timing goes to stderr and the
//! ablation throughput columns only.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    self, ids_hash, sha256_hex, Dataset, RawRecord, SplitAssignment, SplitManifest, SplitName,
    StratifyKey, SyntheticSpec, TruthTable, Vocab,
};
use crate::distributions::{
    interpolate_quantiles, OutcomeSet, QuantileGrid, QuantileVector, Space,
};
use crate::error::{Error, Result};
use crate::losses::{density_from_quantile_slope, LossKind};
use crate::metrics::{self, EvalCase, MetricReport, SignificanceReport};
use crate::model::{
    build_sequence, predict, train, Arch, ModelConfig, ModelParams, TrainInstance,
};
use crate::monotonic::MonotoneMode;
use crate::retrieval::{
    assert_no_leakage, build_index, neighbor_context, EmbeddingIndex, NeighborContext,
    TokenProjector,
};
use crate::theory::{self, TheoryConfig};

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

fn default_fractions() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataSection {
    pub dataset: PathBuf,
    #[serde(default)]
    pub truth: Option<PathBuf>,
    pub splits: PathBuf,
    #[serde(default)]
    pub ood_dataset: Option<PathBuf>,
    #[serde(default = "default_min_outcomes")]
    pub min_outcomes: usize,
}

fn default_min_outcomes() -> usize {
    4
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalSection {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_embed_seed")]
    pub seed: u64,
    pub index: PathBuf,
    #[serde(default = "default_title_tokens")]
    pub title_tokens: usize,
    #[serde(default)]
    pub ood_pool: bool,
}

fn default_k() -> usize {
    8
}
fn default_dim() -> usize {
    256
}
fn default_embed_seed() -> u64 {
    91
}
fn default_title_tokens() -> usize {
    4
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSection {
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_ff")]
    pub ff_dim: usize,
    /// Number of uniform quantile levels (9 -> 0.1..0.9, 99 -> 0.01..0.99).
    #[serde(default = "default_q")]
    pub q: usize,
    #[serde(default = "default_arch")]
    pub arch: String,
    #[serde(default = "default_max_len")]
    pub max_seq_len: usize,
}

fn default_embed_dim() -> usize {
    64
}
fn default_layers() -> usize {
    2
}
fn default_heads() -> usize {
    4
}
fn default_ff() -> usize {
    256
}
fn default_q() -> usize {
    9
}
fn default_arch() -> String {
    "qt".into()
}
fn default_max_len() -> usize {
    192
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSection {
    #[serde(default = "default_loss")]
    pub loss: String,
    #[serde(default = "default_monotone")]
    pub monotone: String,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub variance_weighted: bool,
}

fn default_loss() -> String {
    "l1w".into()
}
fn default_monotone() -> String {
    "postprocess".into()
}
fn default_lr() -> f64 {
    1e-3
}
fn default_epochs() -> usize {
    2
}
fn default_batch() -> usize {
    32
}
fn default_seed() -> u64 {
    42
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSection {
    #[serde(default = "default_split")]
    pub split: String,
    /// Optional inference-time override of the monotone mode.
    #[serde(default)]
    pub monotone: Option<String>,
}

fn default_split() -> String {
    "test".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: DataSection,
    pub retrieval: RetrievalSection,
    pub model: ModelSection,
    pub train: TrainSection,
    #[serde(default = "default_eval_section")]
    pub eval: EvalSection,
}

fn default_eval_section() -> EvalSection {
    EvalSection { split: default_split(), monotone: None }
}

impl RunConfig {
    pub fn from_toml_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(toml::from_str(&text)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn model_config(&self, vocab: &Vocab) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            vocab_size: vocab.len(),
            embed_dim: self.model.embed_dim,
            layers: self.model.layers,
            heads: self.model.heads,
            ff_dim: self.model.ff_dim,
            levels: QuantileGrid::uniform(self.model.q).levels().to_vec(),
            arch: Arch::parse(&self.model.arch)?,
            monotone: MonotoneMode::parse(&self.train.monotone)?,
            loss: LossKind::parse(&self.train.loss)?,
            lr: self.train.lr,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            seed: self.train.seed,
            max_seq_len: self.model.max_seq_len,
            neighbor_title_tokens: self.retrieval.title_tokens,
            k_neighbors: self.retrieval.k,
            variance_weighted: self.train.variance_weighted,
            vocab_hash: vocab.hash(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

// ---------------------------------------------------------------------------
// Split file on disk
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitFile {
    pub manifest: SplitManifest,
    pub assignments: SplitAssignment,
}

pub fn write_if_allowed(path: &Path, bytes: &[u8], overwrite: bool) -> Result<()> {
    if path.exists() && !overwrite {
        return Err(Error::WouldClobber(path.display().to_string()));
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenSummary {
    pub count: usize,
    pub ood_count: usize,
    pub dataset_hash: String,
    pub truth_hash: String,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Extra generation settings carried inside the synthetic spec file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenSpecFile {
    #[serde(flatten)]
    pub spec: SyntheticSpec,
    #[serde(default = "default_fractions")]
    pub fractions: [f64; 3],
    #[serde(default)]
    pub split_seed: Option<u64>,
    #[serde(default)]
    pub holdout_group: Option<String>,
}

pub fn cmd_gen_data(spec_path: &Path, out_dir: &Path, overwrite: bool) -> Result<GenSummary> {
    let text = std::fs::read_to_string(spec_path)?;
    let genspec: GenSpecFile = toml::from_str(&text)?;
    genspec.spec.validate()?;
    let (full, truth) = data::generate(&genspec.spec)?;

    let (main, ood) = match &genspec.holdout_group {
        Some(g) => data::holdout_group(&full, g)?,
        None => (full, Dataset::default()),
    };

    let dataset_jsonl = main.to_jsonl()?;
    let truth_jsonl = truth.to_jsonl()?;
    let dataset_hash = sha256_hex(dataset_jsonl.as_bytes());
    let truth_hash = sha256_hex(truth_jsonl.as_bytes());

    let split_seed = genspec.split_seed.unwrap_or(genspec.spec.seed ^ 0x5117);
    let assignments = data::split(&main, genspec.fractions, StratifyKey::Group, split_seed)?;
    let manifest = SplitManifest::build(&assignments, &dataset_hash, split_seed, genspec.fractions);
    let split_file = SplitFile { manifest, assignments };

    write_if_allowed(&out_dir.join("dataset.jsonl"), dataset_jsonl.as_bytes(), overwrite)?;
    write_if_allowed(&out_dir.join("truth.jsonl"), truth_jsonl.as_bytes(), overwrite)?;
    write_if_allowed(
        &out_dir.join("splits.json"),
        serde_json::to_string_pretty(&split_file)?.as_bytes(),
        overwrite,
    )?;
    if !ood.is_empty() {
        write_if_allowed(&out_dir.join("ood.jsonl"), ood.to_jsonl()?.as_bytes(), overwrite)?;
    }
    write_if_allowed(&out_dir.join("gen_spec_resolved.toml"), text.as_bytes(), overwrite)?;

    Ok(GenSummary {
        count: main.len(),
        ood_count: ood.len(),
        dataset_hash,
        truth_hash,
        train: split_file_counts(&split_file).0,
        val: split_file_counts(&split_file).1,
        test: split_file_counts(&split_file).2,
    })
}

fn split_file_counts(s: &SplitFile) -> (usize, usize, usize) {
    (s.assignments.train.len(), s.assignments.val.len(), s.assignments.test.len())
}

// ---------------------------------------------------------------------------
// Loading helpers
// ---------------------------------------------------------------------------

pub struct LoadedData {
    pub dataset: Dataset,
    pub truth: Option<TruthTable>,
    pub splits: SplitFile,
    pub ood: Option<Dataset>,
}

pub fn load_data(cfg: &RunConfig) -> Result<LoadedData> {
    let report = data::ingest_path(&cfg.data.dataset, cfg.data.min_outcomes)?;
    let dataset = report.dataset;
    let truth = match &cfg.data.truth {
        Some(p) if p.exists() => {
            let text = std::fs::read_to_string(p)?;
            let mut records = Vec::new();
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                records.push(serde_json::from_str(line)?);
            }
            Some(TruthTable { records })
        }
        _ => None,
    };
    let splits: SplitFile = serde_json::from_str(&std::fs::read_to_string(&cfg.data.splits)?)?;
    let ood = match &cfg.data.ood_dataset {
        Some(p) if p.exists() => Some(data::ingest_path(p, cfg.data.min_outcomes)?.dataset),
        _ => None,
    };
    Ok(LoadedData { dataset, truth, splits, ood })
}

fn records_for_split<'a>(d: &'a LoadedData, which: &str) -> Result<Vec<&'a RawRecord>> {
    if which == "ood" {
        let ood = d
            .ood
            .as_ref()
            .ok_or_else(|| Error::Config("no ood dataset configured".into()))?;
        return Ok(ood.records.iter().collect());
    }
    let name = SplitName::parse(which)?;
    let ids = d.splits.assignments.ids(name);
    let by_id: BTreeMap<&str, &RawRecord> =
        d.dataset.records.iter().map(|r| (r.id.as_str(), r)).collect();
    ids.iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::Config(format!("split id {id} missing from dataset")))
        })
        .collect()
}

pub fn train_vocab(d: &LoadedData) -> Result<Vocab> {
    let train_records = records_for_split(d, "train")?;
    Ok(Vocab::build(train_records.iter().map(|r| r.text.as_str())))
}

// ---------------------------------------------------------------------------
// build-index
// ---------------------------------------------------------------------------

pub fn cmd_build_index(cfg: &RunConfig, overwrite: bool) -> Result<usize> {
    let d = load_data(cfg)?;
    let vocab = train_vocab(&d)?;
    let train_records = records_for_split(&d, "train")?;
    if cfg.retrieval.index.exists() && !overwrite {
        return Err(Error::WouldClobber(cfg.retrieval.index.display().to_string()));
    }
    let idx = build_index(
        &train_records,
        &vocab,
        cfg.retrieval.dim,
        cfg.retrieval.seed,
        &d.splits.manifest.train_ids_hash,
    )?;
    if let Some(dir) = cfg.retrieval.index.parent() {
        std::fs::create_dir_all(dir)?;
    }
    idx.save(&cfg.retrieval.index)?;
    Ok(idx.len())
}

// ---------------------------------------------------------------------------
// Instance preparation (sequences + targets + neighbors)
// ---------------------------------------------------------------------------

struct NeighborSource<'a> {
    index: &'a EmbeddingIndex,
    pool_records: BTreeMap<&'a str, &'a RawRecord>,
}

fn retrieve_neighbors(
    src: &NeighborSource,
    projector_table: &[Vec<f64>],
    vocab: &Vocab,
    rec: &RawRecord,
    k: usize,
    title_tokens: usize,
) -> Result<Vec<NeighborContext>> {
    let tokens = vocab.encode(&rec.text);
    if tokens.is_empty() {
        return Err(Error::EmptyText);
    }
    // mean-pool the precomputed token vectors, normalize (mirrors embed())
    let dim = projector_table[0].len();
    let mut acc = vec![0.0f64; dim];
    for &t in &tokens {
        let row = &projector_table[t.min(projector_table.len() - 1)];
        for (a, x) in acc.iter_mut().zip(row) {
            *a += x;
        }
    }
    let n = tokens.len() as f64;
    for a in acc.iter_mut() {
        *a /= n;
    }
    let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
    let query: Vec<f32> = acc.iter().map(|x| (x / norm) as f32).collect();

    let hits = src.index.topk(&query, k, rec.group.as_deref(), Some(&rec.id))?;
    hits.into_iter()
        .map(|(id, sim)| {
            let nb_rec = src
                .pool_records
                .get(id.as_str())
                .ok_or_else(|| Error::Config(format!("index id {id} missing from pool records")))?;
            neighbor_context(nb_rec, vocab, sim, title_tokens)
        })
        .collect()
}

fn precompute_token_table(vocab_len: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut projector = TokenProjector::new(dim, seed);
    // embed() normalizes per instance; here we only need raw token vectors,
    // so reuse the projector's internal generator via single-token pooling
    (0..vocab_len)
        .map(|t| {
            let v = projector.embed(&[t]).expect("single token embeds");
            // undo normalization is unnecessary: direction is what matters,
            // but mean-pooling must use the raw vectors, so regenerate them
            let _ = v;
            raw_token_vector(dim, seed, t)
        })
        .collect()
}

fn raw_token_vector(dim: usize, seed: u64, token: usize) -> Vec<f64> {
    use rand::SeedableRng;
    use rand_distr::Distribution;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(token as u64 + 1);
    (0..dim).map(|_| rand_distr::StandardNormal.sample(&mut rng)).collect()
}

/// Builds model-ready instances for a record list.
#[allow(clippy::too_many_arguments)]
fn prepare_instances(
    records: &[&RawRecord],
    vocab: &Vocab,
    mcfg: &ModelConfig,
    neighbors: Option<&NeighborSource>,
    dim: usize,
    embed_seed: u64,
    k: usize,
    title_tokens: usize,
) -> Result<Vec<TrainInstance>> {
    let table = if neighbors.is_some() && k > 0 {
        precompute_token_table(vocab.len(), dim, embed_seed)
    } else {
        Vec::new()
    };
    let grid = mcfg.grid();
    records
        .par_iter()
        .map(|rec| {
            let tokens = vocab.encode(&rec.text);
            let nbs = match (neighbors, k) {
                (Some(src), k) if k > 0 => {
                    retrieve_neighbors(src, &table, vocab, rec, k, title_tokens)?
                }
                _ => Vec::new(),
            };
            let seq = build_sequence(&tokens, &nbs, mcfg)?;
            let log_outcomes = OutcomeSet::new(rec.outcomes.clone())?.to_log()?;
            let target = interpolate_quantiles(&log_outcomes, &grid, Space::Log);
            let median_log = log_outcomes.median();
            let weights = if mcfg.variance_weighted {
                Some(clamped_variance_weights(rec.outcomes.len(), &target)?)
            } else {
                None
            };
            Ok(TrainInstance {
                id: rec.id.clone(),
                seq,
                target,
                median_log,
                m: rec.outcomes.len(),
                weights,
            })
        })
        .collect()
}

/// Inverse-variance weights from the target quantile slope, with the density
/// capped at 100x its median so flat empirical segments stay finite.
fn clamped_variance_weights(m: usize, target: &QuantileVector) -> Result<Vec<f64>> {
    let slope_density = match density_from_quantile_slope(target) {
        Ok(d) => d,
        Err(_) => {
            // flat segments: fall back to uniform weights
            return Ok(vec![1.0; target.len()]);
        }
    };
    let mut sorted = slope_density.clone();
    sorted.sort_by(f64::total_cmp);
    let med = sorted[sorted.len() / 2].max(1e-12);
    let capped: Vec<f64> = slope_density.iter().map(|f| f.min(100.0 * med)).collect();
    crate::losses::apply_variance_weights(m, &target.grid, &capped)
}

// ---------------------------------------------------------------------------
// cmd_train
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub dataset_hash: String,
    pub train_ids_hash: String,
    pub vocab_hash: String,
    pub n_params: usize,
}

pub fn cmd_train(cfg: &RunConfig, out_dir: &Path, overwrite: bool) -> Result<RunSummary> {
    let d = load_data(cfg)?;
    let vocab = train_vocab(&d)?;
    let mcfg = cfg.model_config(&vocab)?;

    let train_records = records_for_split(&d, "train")?;
    let val_records = records_for_split(&d, "val")?;

    let index_store;
    let neighbor_src = if cfg.retrieval.k > 0 {
        index_store = EmbeddingIndex::load(&cfg.retrieval.index)?;
        // the training pool must never contain validation or test ids
        let mut eval_ids = d.splits.assignments.val.clone();
        eval_ids.extend(d.splits.assignments.test.iter().cloned());
        assert_no_leakage(&index_store, &eval_ids)?;
        let pool_records: BTreeMap<&str, &RawRecord> =
            train_records.iter().map(|r| (r.id.as_str(), *r)).collect();
        Some(NeighborSource { index: &index_store, pool_records })
    } else {
        None
    };

    let train_set = prepare_instances(
        &train_records,
        &vocab,
        &mcfg,
        neighbor_src.as_ref(),
        cfg.retrieval.dim,
        cfg.retrieval.seed,
        cfg.retrieval.k,
        cfg.retrieval.title_tokens,
    )?;
    let val_set = prepare_instances(
        &val_records,
        &vocab,
        &mcfg,
        neighbor_src.as_ref(),
        cfg.retrieval.dim,
        cfg.retrieval.seed,
        cfg.retrieval.k,
        cfg.retrieval.title_tokens,
    )?;

    let ckpt_path = out_dir.join("checkpoint.bin");
    if ckpt_path.exists() && !overwrite {
        return Err(Error::WouldClobber(ckpt_path.display().to_string()));
    }
    let (params, log) = train(&train_set, &val_set, &mcfg)?;
    eprintln!("trained {} parameters", params.n_params());

    std::fs::create_dir_all(out_dir)?;
    params.save(&mcfg, &ckpt_path)?;
    let mut log_text = String::new();
    for row in &log {
        log_text.push_str(&serde_json::to_string(row)?);
        log_text.push('\n');
    }
    write_if_allowed(&out_dir.join("train_log.jsonl"), log_text.as_bytes(), true)?;
    write_if_allowed(&out_dir.join("resolved_config.toml"), cfg.to_toml().as_bytes(), true)?;
    let summary = RunSummary {
        seed: cfg.train.seed,
        dataset_hash: d.splits.manifest.dataset_hash.clone(),
        train_ids_hash: d.splits.manifest.train_ids_hash.clone(),
        vocab_hash: vocab.hash(),
        n_params: params.n_params(),
    };
    write_if_allowed(
        &out_dir.join("run_summary.json"),
        serde_json::to_string_pretty(&summary)?.as_bytes(),
        true,
    )?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// cmd_eval
// ---------------------------------------------------------------------------

fn reference_forecast(d: &LoadedData, grid: &QuantileGrid) -> Result<QuantileVector> {
    let train_records = records_for_split(d, "train")?;
    let mut pooled = Vec::new();
    for r in &train_records {
        pooled.extend_from_slice(&r.outcomes);
    }
    let set = OutcomeSet::new(pooled)?;
    Ok(interpolate_quantiles(&set, grid, Space::Original))
}

fn truth_targets(
    d: &LoadedData,
    records: &[&RawRecord],
    grid: &QuantileGrid,
) -> Result<Vec<QuantileVector>> {
    match &d.truth {
        Some(tt) => {
            let by_id = tt.by_id();
            records
                .iter()
                .map(|r| {
                    let tr = by_id
                        .get(r.id.as_str())
                        .ok_or_else(|| Error::Config(format!("no ground truth for id {}", r.id)))?;
                    QuantileVector::new(grid.clone(), tr.quantiles_on(grid), Space::Original)
                })
                .collect()
        }
        None => records
            .iter()
            .map(|r| {
                let o = OutcomeSet::new(r.outcomes.clone())?;
                Ok(interpolate_quantiles(&o, grid, Space::Original))
            })
            .collect(),
    }
}

pub struct EvalOutput {
    pub report: MetricReport,
    pub per_instance: Vec<(String, f64)>,
    /// Mean forward throughput, instances per second (not written to
    /// deterministic outputs).
    pub infer_per_s: f64,
}

pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    out_dir: &Path,
    overwrite: bool,
) -> Result<EvalOutput> {
    let d = load_data(cfg)?;
    let vocab = train_vocab(&d)?;
    let (mut mcfg, params) = ModelParams::load(checkpoint)?;
    if !mcfg.vocab_hash.is_empty() && mcfg.vocab_hash != vocab.hash() {
        return Err(Error::Config("checkpoint vocabulary does not match the dataset".into()));
    }
    if let Some(mode) = &cfg.eval.monotone {
        mcfg.monotone = MonotoneMode::parse(mode)?;
    }

    let which = cfg.eval.split.as_str();
    let records = records_for_split(&d, which)?;
    let eval_ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();

    // retrieval pool: training index, or (explicitly) the OOD set itself
    let index_store;
    let ood_index_store;
    let neighbor_src = if mcfg.k_neighbors > 0 {
        if cfg.retrieval.ood_pool {
            if which != "ood" {
                return Err(Error::Config("--ood-pool only applies to the ood split".into()));
            }
            eprintln!(
                "warning: --ood-pool builds the retrieval pool from the evaluation set itself; \
                 the train-only rule is intentionally relaxed"
            );
            let ood_records: Vec<&RawRecord> = records.clone();
            ood_index_store = build_index(
                &ood_records,
                &vocab,
                cfg.retrieval.dim,
                cfg.retrieval.seed,
                &ids_hash(&eval_ids),
            )?;
            let pool_records: BTreeMap<&str, &RawRecord> =
                records.iter().map(|r| (r.id.as_str(), *r)).collect();
            Some(NeighborSource { index: &ood_index_store, pool_records })
        } else {
            index_store = EmbeddingIndex::load(&cfg.retrieval.index)?;
            // leakage guard: abort when any evaluation id is in the pool
            assert_no_leakage(&index_store, &eval_ids)?;
            let train_records = records_for_split(&d, "train")?;
            let pool_records: BTreeMap<&str, &RawRecord> =
                train_records.iter().map(|r| (r.id.as_str(), *r)).collect();
            Some(NeighborSource { index: &index_store, pool_records })
        }
    } else {
        None
    };

    let instances = prepare_instances(
        &records,
        &vocab,
        &mcfg,
        neighbor_src.as_ref(),
        cfg.retrieval.dim,
        cfg.retrieval.seed,
        mcfg.k_neighbors,
        mcfg.neighbor_title_tokens,
    )?;

    let grid = mcfg.grid();
    let targets = truth_targets(&d, &records, &grid)?;
    let t0 = Instant::now();
    let preds: Result<Vec<QuantileVector>> =
        instances.par_iter().map(|inst| predict(&params, &inst.seq, &mcfg)).collect();
    let preds = preds?;
    let infer_per_s = instances.len() as f64 / t0.elapsed().as_secs_f64().max(1e-9);

    let cases: Vec<EvalCase> = records
        .iter()
        .zip(preds.iter())
        .zip(targets.iter())
        .map(|((r, p), t)| EvalCase {
            id: r.id.clone(),
            pred: p.clone(),
            target: t.clone(),
            outcomes: r.outcomes.clone(),
        })
        .collect();
    let reference = reference_forecast(&d, &grid)?;
    let report = metrics::evaluate_all(&cases, &reference)?;

    let per_instance: Result<Vec<(String, f64)>> = cases
        .iter()
        .map(|c| Ok((c.id.clone(), metrics::per_instance_avg_mape(&c.pred, &c.target)?)))
        .collect();
    let per_instance = per_instance?;

    std::fs::create_dir_all(out_dir)?;
    write_if_allowed(&out_dir.join("metrics.txt"), report.to_flat_block().as_bytes(), overwrite)?;
    let csv = format!("{}\n{}\n", MetricReport::csv_header(), report.csv_row());
    write_if_allowed(&out_dir.join("metrics.csv"), csv.as_bytes(), overwrite)?;
    write_if_allowed(
        &out_dir.join("report.json"),
        serde_json::to_string_pretty(&report)?.as_bytes(),
        overwrite,
    )?;
    let mut pi = String::from("id,avg_mape\n");
    for (id, v) in &per_instance {
        pi.push_str(&format!("{id},{v}\n"));
    }
    write_if_allowed(&out_dir.join("per_instance_mape.csv"), pi.as_bytes(), overwrite)?;
    write_if_allowed(&out_dir.join("resolved_config.toml"), cfg.to_toml().as_bytes(), true)?;

    Ok(EvalOutput { report, per_instance, infer_per_s })
}

// ---------------------------------------------------------------------------
// cmd_ablate
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub avg_mape: f64,
    pub crpss: f64,
    pub rciw95: f64,
    pub runtime_s: f64,
    pub tokens_per_example: f64,
    pub train_samples_per_s: f64,
    pub infer_samples_per_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    Loss,
    Neighbors,
    Monotone,
}

impl AblationAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "loss" => Ok(AblationAxis::Loss),
            "neighbors" => Ok(AblationAxis::Neighbors),
            "monotone" => Ok(AblationAxis::Monotone),
            other => Err(Error::Config(format!(
                "unknown ablation axis {other:?} (expected loss|neighbors|monotone)"
            ))),
        }
    }
}

/// Trains and evaluates one configuration in a subdirectory; returns the
/// metric report plus throughput measurements.
fn run_one(cfg: &RunConfig, out_dir: &Path, setting: &str) -> Result<AblationRow> {
    let run_dir = out_dir.join(setting.replace([' ', '='], "_"));
    let t0 = Instant::now();
    cmd_train(cfg, &run_dir, true)?;
    let train_elapsed = t0.elapsed().as_secs_f64();
    let eval_out = cmd_eval(cfg, &run_dir.join("checkpoint.bin"), &run_dir.join("eval"), true)?;

    // tokens per example measured on the training split
    let d = load_data(cfg)?;
    let vocab = train_vocab(&d)?;
    let mcfg = cfg.model_config(&vocab)?;
    let train_records = records_for_split(&d, "train")?;
    let n_train = train_records.len();
    let sample: Vec<&RawRecord> = train_records.into_iter().take(64).collect();
    let probe_src;
    let idx_store;
    let tokens_per_example = {
        let neighbor_src = if cfg.retrieval.k > 0 {
            idx_store = EmbeddingIndex::load(&cfg.retrieval.index)?;
            let d2 = load_data(cfg)?;
            let _ = d2;
            let pool = records_for_split(&d, "train")?;
            let pool_records: BTreeMap<&str, &RawRecord> =
                pool.iter().map(|r| (r.id.as_str(), *r)).collect();
            probe_src = NeighborSource { index: &idx_store, pool_records };
            Some(&probe_src)
        } else {
            None
        };
        let insts = prepare_instances(
            &sample,
            &vocab,
            &mcfg,
            neighbor_src,
            cfg.retrieval.dim,
            cfg.retrieval.seed,
            cfg.retrieval.k,
            cfg.retrieval.title_tokens,
        )?;
        insts.iter().map(|i| i.seq.len() as f64).sum::<f64>() / insts.len().max(1) as f64
    };

    let train_samples = (n_train * cfg.train.epochs) as f64;
    Ok(AblationRow {
        setting: setting.to_string(),
        avg_mape: eval_out.report.avg_mape,
        crpss: eval_out.report.crpss,
        rciw95: eval_out.report.rciw.iter().find(|(c, _)| *c == 95).map(|(_, v)| *v).unwrap_or(f64::NAN),
        runtime_s: train_elapsed,
        tokens_per_example,
        train_samples_per_s: train_samples / train_elapsed.max(1e-9),
        infer_samples_per_s: eval_out.infer_per_s,
    })
}

pub fn ablation_table(rows: &[AblationRow], axis: AblationAxis) -> (String, String) {
    let mut aligned = format!(
        "{:<24} {:>10} {:>10} {:>10} {:>10}",
        "setting", "avg_mape", "crpss", "rciw95", "runtime_s"
    );
    if axis == AblationAxis::Neighbors {
        aligned.push_str(&format!(
            " {:>10} {:>12} {:>12}",
            "tokens/ex", "train_sps", "infer_sps"
        ));
    }
    aligned.push('\n');
    for r in rows {
        aligned.push_str(&format!(
            "{:<24} {:>10.4} {:>10.4} {:>10.4} {:>10.2}",
            r.setting, r.avg_mape, r.crpss, r.rciw95, r.runtime_s
        ));
        if axis == AblationAxis::Neighbors {
            aligned.push_str(&format!(
                " {:>10.1} {:>12.2} {:>12.2}",
                r.tokens_per_example, r.train_samples_per_s, r.infer_samples_per_s
            ));
        }
        aligned.push('\n');
    }
    let mut csv = String::from(
        "setting,avg_mape,crpss,rciw95,runtime_s,tokens_per_example,train_samples_per_s,infer_samples_per_s\n",
    );
    for r in rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.setting,
            r.avg_mape,
            r.crpss,
            r.rciw95,
            r.runtime_s,
            r.tokens_per_example,
            r.train_samples_per_s,
            r.infer_samples_per_s
        ));
    }
    (aligned, csv)
}

pub fn cmd_ablate(cfg: &RunConfig, axis: AblationAxis, out_dir: &Path) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    match axis {
        AblationAxis::Loss => {
            for loss in LossKind::ALL {
                let mut c = cfg.clone();
                c.train.loss = loss.name().to_string();
                rows.push(run_one(&c, out_dir, &format!("loss={}", loss.name()))?);
            }
        }
        AblationAxis::Neighbors => {
            for k in [0usize, 2, 4, 8, 16] {
                let mut c = cfg.clone();
                c.retrieval.k = k;
                // room for the neighbor blocks plus query and quantile tokens
                c.model.max_seq_len =
                    k * (10 + c.retrieval.title_tokens) + 48 + c.model.q;
                rows.push(run_one(&c, out_dir, &format!("k={k}"))?);
            }
        }
        AblationAxis::Monotone => {
            for mode in MonotoneMode::ALL {
                let mut c = cfg.clone();
                c.train.monotone = mode.name().to_string();
                c.eval.monotone = Some(mode.name().to_string());
                rows.push(run_one(&c, out_dir, &format!("monotone={}", mode.name()))?);
            }
        }
    }
    let (aligned, csv) = ablation_table(&rows, axis);
    std::fs::create_dir_all(out_dir)?;
    write_if_allowed(&out_dir.join("table.txt"), aligned.as_bytes(), true)?;
    write_if_allowed(&out_dir.join("table.csv"), csv.as_bytes(), true)?;
    Ok(rows)
}

// ---------------------------------------------------------------------------
// cmd_verify_theory
// ---------------------------------------------------------------------------

pub fn cmd_verify_theory(seed: u64, reps: usize, out_dir: &Path, overwrite: bool) -> Result<bool> {
    let report = theory::run_battery(&TheoryConfig { seed, reps })?;
    std::fs::create_dir_all(out_dir)?;
    write_if_allowed(
        &out_dir.join("theory_report.txt"),
        report.to_aligned_text().as_bytes(),
        overwrite,
    )?;
    write_if_allowed(&out_dir.join("theory_report.csv"), report.to_csv().as_bytes(), overwrite)?;
    Ok(report.all_pass())
}

// ---------------------------------------------------------------------------
// cmd_compare
// ---------------------------------------------------------------------------

pub fn read_per_instance_csv(path: &Path) -> Result<Vec<(String, f64)>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 && line.starts_with("id,") {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let (id, v) = line
            .split_once(',')
            .ok_or_else(|| Error::MalformedRecord { line: i + 1, msg: "expected id,value".into() })?;
        let value: f64 = v
            .trim()
            .parse()
            .map_err(|e| Error::MalformedRecord { line: i + 1, msg: format!("bad value: {e}") })?;
        out.push((id.to_string(), value));
    }
    Ok(out)
}

/// Paired comparison of two per-instance average-MAPE files.
pub fn cmd_compare(report_a: &Path, report_b: &Path) -> Result<SignificanceReport> {
    let a = read_per_instance_csv(report_a)?;
    let b = read_per_instance_csv(report_b)?;
    if a.len() != b.len() {
        return Err(Error::InstanceMismatch(format!("{} vs {} instances", a.len(), b.len())));
    }
    let bmap: BTreeMap<&str, f64> = b.iter().map(|(id, v)| (id.as_str(), *v)).collect();
    let mut xs = Vec::with_capacity(a.len());
    let mut ys = Vec::with_capacity(a.len());
    for (id, va) in &a {
        let vb = bmap
            .get(id.as_str())
            .ok_or_else(|| Error::InstanceMismatch(format!("id {id} missing from second report")))?;
        xs.push(*va);
        ys.push(*vb);
    }
    metrics::paired_t_test(&xs, &ys)
}

pub fn significance_table(rep: &SignificanceReport) -> (String, String) {
    let aligned = format!(
        "{:>12} {:>12} {:>12} {:>10} {:>12}\n{:>12.6} {:>12.6} {:>12.6} {:>10.4} {:>12.6e}\n",
        "delta", "ci_lo", "ci_hi", "t", "p", rep.delta, rep.ci95.0, rep.ci95.1, rep.t_stat, rep.p_value
    );
    let csv = format!(
        "delta,ci_lo,ci_hi,t,p\n{},{},{},{},{}\n",
        rep.delta, rep.ci95.0, rep.ci95.1, rep.t_stat, rep.p_value
    );
    (aligned, csv)
}
