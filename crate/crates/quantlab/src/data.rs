//! Dataset handling: synthetic benchmark generation with closed-form ground
//! truth, JSONL ingestion, stratified splitting, group holdout, and the word
//! vocabulary shared by the model and the retrieval embedder.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Read};
#[allow(unused_imports)]
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::distributions::QuantileGrid;
use crate::error::{Error, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

/// One dataset record as stored on disk (newline-delimited JSON).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RawRecord {
    pub id: String,
    pub text: String,
    pub outcomes: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub records: Vec<RawRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn by_id(&self, id: &str) -> Option<&RawRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Closed-form conditional law for a synthetic instance: lognormal with the
/// stated (mu, sigma), so `Q*(τ) = exp(mu + sigma·Φ⁻¹(τ))`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TruthRecord {
    pub id: String,
    pub mu: f64,
    pub sigma: f64,
    /// The nine representative quantiles, for inspection.
    pub quantiles: Vec<f64>,
}

impl TruthRecord {
    /// Exact ground-truth quantiles on an arbitrary grid, original units.
    pub fn quantiles_on(&self, grid: &QuantileGrid) -> Vec<f64> {
        let n = Normal::new(0.0, 1.0).unwrap();
        grid.levels().iter().map(|&t| (self.mu + self.sigma * n.inverse_cdf(t)).exp()).collect()
    }
}

#[derive(Debug, Clone, Default)]
pub struct TruthTable {
    pub records: Vec<TruthRecord>,
}

impl TruthTable {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn by_id(&self) -> BTreeMap<&str, &TruthRecord> {
        self.records.iter().map(|r| (r.id.as_str(), r)).collect()
    }
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CategoricalFeature {
    pub name: String,
    pub levels: Vec<String>,
    pub mu_offsets: Vec<f64>,
    #[serde(default)]
    pub sigma_offsets: Vec<f64>,
    /// Marks the feature used as the retrieval/holdout group key.
    #[serde(default)]
    pub group_key: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NumericFeature {
    pub name: String,
    pub mu_coeff: f64,
    #[serde(default)]
    pub sigma_coeff: f64,
    /// Rendered text bins over the latent uniform(0,1) value. Rendering is
    /// deterministic but lossy: only the bin word reaches the text.
    pub bins: Vec<String>,
}

/// A high-cardinality categorical nested inside a parent categorical (e.g.
/// streets within a city). Levels are named `{parent}_{i}` and their offsets
/// are drawn once, deterministically, from the spec seed, so the conditional
/// law stays a fixed linear function of the features.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NestedFeature {
    pub name: String,
    pub parent: String,
    pub per_parent: usize,
    pub mu_spread: f64,
    #[serde(default)]
    pub sigma_spread: f64,
}

impl NestedFeature {
    /// Offset of level `i` under parent level `p`, uniform on ±spread.
    pub fn offsets(&self, spec_seed: u64, parent_idx: usize, level_idx: usize) -> (f64, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(spec_seed ^ 0x6e65_7374);
        rng.set_stream((parent_idx * self.per_parent + level_idx) as u64 + 1);
        let u: f64 = rng.gen_range(0.0..1.0);
        let v: f64 = rng.gen_range(0.0..1.0);
        (self.mu_spread * (2.0 * u - 1.0), self.sigma_spread * (2.0 * v - 1.0))
    }

    pub fn level_word(&self, parent_level: &str, level_idx: usize) -> String {
        format!("{parent_level}_{level_idx:03}")
    }
}

/// Schema + coefficients of the synthetic benchmark. The conditional law is
/// lognormal with mu(x) and sigma(x) linear in the features, so log-space
/// targets are exactly normal.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub name: String,
    pub count: usize,
    pub seed: u64,
    pub min_outcomes: usize,
    pub max_outcomes: usize,
    pub mu_base: f64,
    pub sigma_base: f64,
    #[serde(default = "default_sigma_floor")]
    pub sigma_floor: f64,
    pub title_template: String,
    pub body_template: String,
    #[serde(default)]
    pub categorical: Vec<CategoricalFeature>,
    #[serde(default)]
    pub numeric: Vec<NumericFeature>,
    #[serde(default)]
    pub nested: Vec<NestedFeature>,
}

fn default_sigma_floor() -> f64 {
    0.02
}

impl SyntheticSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: SyntheticSpec = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("synthetic count must be positive".into()));
        }
        if self.min_outcomes < 1 || self.max_outcomes < self.min_outcomes {
            return Err(Error::Config("invalid outcome-count range".into()));
        }
        for c in &self.categorical {
            if c.levels.is_empty() || c.mu_offsets.len() != c.levels.len() {
                return Err(Error::Config(format!("categorical {} has mismatched offsets", c.name)));
            }
            if !c.sigma_offsets.is_empty() && c.sigma_offsets.len() != c.levels.len() {
                return Err(Error::Config(format!("categorical {} sigma offsets mismatched", c.name)));
            }
        }
        for n in &self.numeric {
            if n.bins.is_empty() {
                return Err(Error::Config(format!("numeric {} needs at least one bin", n.name)));
            }
        }
        for n in &self.nested {
            if n.per_parent == 0 {
                return Err(Error::Config(format!("nested {} needs per_parent >= 1", n.name)));
            }
            if !self.categorical.iter().any(|c| c.name == n.parent) {
                return Err(Error::Config(format!(
                    "nested {} references unknown parent {}",
                    n.name, n.parent
                )));
            }
        }
        // sigma must stay positive over the whole feature range
        let mut worst = self.sigma_base;
        for c in &self.categorical {
            let min_off =
                c.sigma_offsets.iter().copied().fold(0.0f64, f64::min);
            worst += min_off;
        }
        for n in &self.numeric {
            worst += n.sigma_coeff.min(0.0);
        }
        if worst <= 0.0 && worst < self.sigma_floor {
            // the floor still rescues it; only reject a non-positive floor
            if self.sigma_floor <= 0.0 {
                return Err(Error::Config("sigma can reach zero and sigma_floor is non-positive".into()));
            }
        }
        Ok(())
    }

    pub fn group_feature(&self) -> Option<&CategoricalFeature> {
        self.categorical.iter().find(|c| c.group_key)
    }
}

fn record_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Generates the dataset and its closed-form ground truth. Per-record RNG
/// streams make generation order-independent and reproducible.
pub fn generate(spec: &SyntheticSpec) -> Result<(Dataset, TruthTable)> {
    spec.validate()?;
    let rep_grid = QuantileGrid::representative();
    let mut records = Vec::with_capacity(spec.count);
    let mut truths = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let mut rng = record_rng(spec.seed, i);
        let mut mu = spec.mu_base;
        let mut sigma = spec.sigma_base;
        let mut group = None;
        let mut substitutions: BTreeMap<&str, String> = BTreeMap::new();
        let mut cat_choice: BTreeMap<&str, usize> = BTreeMap::new();
        for c in &spec.categorical {
            let li = rng.gen_range(0..c.levels.len());
            mu += c.mu_offsets[li];
            if !c.sigma_offsets.is_empty() {
                sigma += c.sigma_offsets[li];
            }
            if c.group_key {
                group = Some(c.levels[li].clone());
            }
            substitutions.insert(c.name.as_str(), c.levels[li].clone());
            cat_choice.insert(c.name.as_str(), li);
        }
        for nf in &spec.nested {
            let parent_idx = cat_choice[nf.parent.as_str()];
            let parent_level = &substitutions[nf.parent.as_str()].clone();
            let li = rng.gen_range(0..nf.per_parent);
            let (dmu, dsigma) = nf.offsets(spec.seed, parent_idx, li);
            mu += dmu;
            sigma += dsigma;
            substitutions.insert(nf.name.as_str(), nf.level_word(parent_level, li));
        }
        for n in &spec.numeric {
            let u: f64 = rng.gen_range(0.0..1.0);
            mu += n.mu_coeff * u;
            sigma += n.sigma_coeff * u;
            let bin = ((u * n.bins.len() as f64) as usize).min(n.bins.len() - 1);
            substitutions.insert(n.name.as_str(), n.bins[bin].clone());
        }
        sigma = sigma.max(spec.sigma_floor);

        let render = |template: &str| -> String {
            let mut out = template.to_string();
            for (k, v) in &substitutions {
                out = out.replace(&format!("{{{k}}}"), v);
            }
            out
        };
        let title = render(&spec.title_template);
        let body = render(&spec.body_template);
        let text = if body.is_empty() { title.clone() } else { format!("{title} {body}") };

        let m = rng.gen_range(spec.min_outcomes..=spec.max_outcomes);
        let outcomes: Vec<f64> = (0..m)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (mu + sigma * z).exp()
            })
            .collect();

        let id = format!("syn-{i:06}");
        let n01 = Normal::new(0.0, 1.0).unwrap();
        let quantiles =
            rep_grid.levels().iter().map(|&t| (mu + sigma * n01.inverse_cdf(t)).exp()).collect();
        truths.push(TruthRecord { id: id.clone(), mu, sigma, quantiles });
        records.push(RawRecord { id, text, outcomes, group });
    }
    Ok((Dataset { records }, TruthTable { records: truths }))
}

// ---------------------------------------------------------------------------
// Ingestion
// ---------------------------------------------------------------------------

#[derive(Debug, Default)]
pub struct IngestReport {
    pub dataset: Dataset,
    /// Records dropped for having fewer than the minimum outcome count.
    pub dropped_small: usize,
    /// (line number, reason) for unparseable or invalid lines.
    pub malformed: Vec<(usize, String)>,
    pub input_lines: usize,
}

/// Reads newline-delimited records, dropping instances with fewer than
/// `min_outcomes` observations and rejecting non-positive outcomes.
pub fn ingest<R: Read>(reader: R, min_outcomes: usize) -> Result<IngestReport> {
    let buf = BufReader::new(reader);
    let mut report = IngestReport::default();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    for (lineno, line) in buf.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        report.input_lines += 1;
        let rec: RawRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                report.malformed.push((lineno + 1, e.to_string()));
                continue;
            }
        };
        if !seen.insert(rec.id.clone()) {
            return Err(Error::DuplicateId(rec.id));
        }
        if let Some(bad) = rec.outcomes.iter().find(|&&y| !(y > 0.0) || !y.is_finite()) {
            report.malformed.push((lineno + 1, format!("non-positive outcome {bad}")));
            continue;
        }
        if rec.outcomes.len() < min_outcomes {
            report.dropped_small += 1;
            continue;
        }
        report.dataset.records.push(rec);
    }
    Ok(report)
}

pub fn ingest_path(path: &Path, min_outcomes: usize) -> Result<IngestReport> {
    ingest(std::fs::File::open(path)?, min_outcomes)
}

// ---------------------------------------------------------------------------
// Splitting and holdout
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StratifyKey {
    /// Stratify by the record's group field.
    Group,
    /// Stratify by outcome-median quantile bucket.
    MedianBucket,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            other => Err(Error::UnknownSplit(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub warnings: Vec<String>,
}

impl SplitAssignment {
    pub fn ids(&self, which: SplitName) -> &[String] {
        match which {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }
}

/// Split manifest: enough to re-check assignments and drive the leakage guard.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitManifest {
    pub dataset_hash: String,
    pub seed: u64,
    pub fractions: [f64; 3],
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    pub train_ids_hash: String,
    pub val_ids_hash: String,
    pub test_ids_hash: String,
}

pub fn ids_hash(ids: &[String]) -> String {
    sha256_hex(ids.join("\n").as_bytes())
}

impl SplitManifest {
    pub fn build(assign: &SplitAssignment, dataset_hash: &str, seed: u64, fractions: [f64; 3]) -> Self {
        SplitManifest {
            dataset_hash: dataset_hash.to_string(),
            seed,
            fractions,
            train_count: assign.train.len(),
            val_count: assign.val.len(),
            test_count: assign.test.len(),
            train_ids_hash: ids_hash(&assign.train),
            val_ids_hash: ids_hash(&assign.val),
            test_ids_hash: ids_hash(&assign.test),
        }
    }
}

fn stratum_of(rec: &RawRecord, key: StratifyKey, buckets: &BTreeMap<String, usize>) -> String {
    match key {
        StratifyKey::Group => rec.group.clone().unwrap_or_else(|| "<none>".to_string()),
        StratifyKey::MedianBucket => format!("bucket{}", buckets.get(&rec.id).copied().unwrap_or(0)),
    }
}

/// Largest-remainder apportionment of `n` into three parts.
fn apportion(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let raw: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut rem: usize = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).partial_cmp(&(raw[a] - raw[a].floor())).unwrap().then(a.cmp(&b)));
    for &i in &order {
        if rem == 0 {
            break;
        }
        counts[i] += 1;
        rem -= 1;
    }
    [counts[0], counts[1], counts[2]]
}

/// Stratified proportional split; deterministic under the seed. Strata with
/// fewer than 3 records fall back to the global pool with a warning.
pub fn split(
    dataset: &Dataset,
    fractions: [f64; 3],
    key: StratifyKey,
    seed: u64,
) -> Result<SplitAssignment> {
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 || fractions.iter().any(|&f| f < 0.0) {
        return Err(Error::BadFractions(fractions.to_vec()));
    }

    // median buckets (quintiles of the outcome medians) when requested
    let buckets: BTreeMap<String, usize> = if key == StratifyKey::MedianBucket {
        let mut meds: Vec<(String, f64)> = dataset
            .records
            .iter()
            .map(|r| {
                let mut v = r.outcomes.clone();
                v.sort_by(f64::total_cmp);
                (r.id.clone(), crate::distributions::interpolate_at(&v, 0.5))
            })
            .collect();
        meds.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        let n = meds.len().max(1);
        meds.iter()
            .enumerate()
            .map(|(rank, (id, _))| (id.clone(), rank * 5 / n))
            .collect()
    } else {
        BTreeMap::new()
    };

    let mut strata: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for rec in &dataset.records {
        strata.entry(stratum_of(rec, key, &buckets)).or_default().push(rec.id.clone());
    }

    let mut warnings = Vec::new();
    let mut global: Vec<String> = Vec::new();
    let mut assign = SplitAssignment { train: vec![], val: vec![], test: vec![], warnings: vec![] };
    for (name, ids) in &strata {
        if ids.len() < 3 {
            warnings.push(format!("stratum {name:?} has {} records; assigned globally", ids.len()));
            global.extend(ids.iter().cloned());
            continue;
        }
        let mut ids = ids.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ u64::from_le_bytes(
            sha256_hex(name.as_bytes()).as_bytes()[..8].try_into().unwrap(),
        ));
        shuffle(&mut ids, &mut rng);
        let [tr, va, _te] = apportion(ids.len(), fractions);
        assign.train.extend(ids[..tr].iter().cloned());
        assign.val.extend(ids[tr..tr + va].iter().cloned());
        assign.test.extend(ids[tr + va..].iter().cloned());
    }
    if !global.is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x61_6c_6c);
        shuffle(&mut global, &mut rng);
        let [tr, va, _te] = apportion(global.len(), fractions);
        assign.train.extend(global[..tr].iter().cloned());
        assign.val.extend(global[tr..tr + va].iter().cloned());
        assign.test.extend(global[tr + va..].iter().cloned());
    }
    assign.train.sort();
    assign.val.sort();
    assign.test.sort();
    assign.warnings = warnings;
    Ok(assign)
}

fn shuffle(ids: &mut [String], rng: &mut ChaCha8Rng) {
    // Fisher-Yates with the portable RNG
    for i in (1..ids.len()).rev() {
        let j = rng.gen_range(0..=i);
        ids.swap(i, j);
    }
}

/// Removes every record of `group` and returns (main, ood) datasets.
pub fn holdout_group(dataset: &Dataset, group: &str) -> Result<(Dataset, Dataset)> {
    if !dataset.records.iter().any(|r| r.group.as_deref() == Some(group)) {
        return Err(Error::UnknownGroup(group.to_string()));
    }
    let mut main = Dataset::default();
    let mut ood = Dataset::default();
    for r in &dataset.records {
        if r.group.as_deref() == Some(group) {
            ood.records.push(r.clone());
        } else {
            main.records.push(r.clone());
        }
    }
    Ok((main, ood))
}

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

pub const PAD: usize = 0;
pub const SEP: usize = 1;
pub const NBR: usize = 2;
pub const UNK: usize = 3;
/// Nine numeric-slot tokens, one per representative percentile.
pub const QSLOT_BASE: usize = 4;
pub const N_QSLOTS: usize = 9;
pub const FIRST_WORD_ID: usize = QSLOT_BASE + N_QSLOTS;

/// Deterministic whitespace-token vocabulary built from the training split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    words: BTreeMap<String, usize>,
}

impl Vocab {
    pub fn build<'a>(texts: impl Iterator<Item = &'a str>) -> Self {
        let mut unique: BTreeSet<String> = BTreeSet::new();
        for t in texts {
            for w in t.split_whitespace() {
                unique.insert(w.to_string());
            }
        }
        let words = unique.into_iter().enumerate().map(|(i, w)| (w, FIRST_WORD_ID + i)).collect();
        Vocab { words }
    }

    pub fn len(&self) -> usize {
        FIRST_WORD_ID + self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.words.get(w).copied().unwrap_or(UNK)).collect()
    }

    pub fn hash(&self) -> String {
        let joined: String = self.words.keys().cloned().collect::<Vec<_>>().join("\n");
        sha256_hex(joined.as_bytes())
    }
}
