//! Dense-embedding neighbor retrieval over the training pool.
//!
//! The embedder is a seeded random-projection bag-of-tokens map: every token
//! id owns a fixed Gaussian vector derived from the embedding seed, instance
//! vectors are mean-pooled and l2-normalized. Retrieval is an exact scan,
//! optionally restricted to the query's group, with the query itself excluded.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{RawRecord, Vocab};
use crate::distributions::{interpolate_quantiles, OutcomeSet, QuantileGrid, Space};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"QLIX";
const VERSION: u32 = 1;
const ID_BYTES: usize = 32;
const GROUP_BYTES: usize = 24;

/// Per-token projection vectors, derived lazily from the embedding seed.
pub struct TokenProjector {
    dim: usize,
    seed: u64,
    cache: HashMap<usize, Vec<f64>>,
}

impl TokenProjector {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed, cache: HashMap::new() }
    }

    fn token_vector(&mut self, token: usize) -> &[f64] {
        let (dim, seed) = (self.dim, self.seed);
        self.cache.entry(token).or_insert_with(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(token as u64 + 1);
            (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
        })
    }

    /// Mean-pooled, l2-normalized embedding of a token sequence.
    pub fn embed(&mut self, tokens: &[usize]) -> Result<Vec<f32>> {
        if tokens.is_empty() {
            return Err(Error::EmptyText);
        }
        let mut acc = vec![0.0f64; self.dim];
        for &t in tokens {
            let v = self.token_vector(t);
            for (a, x) in acc.iter_mut().zip(v) {
                *a += x;
            }
        }
        let n = tokens.len() as f64;
        for a in acc.iter_mut() {
            *a /= n;
        }
        let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::EmptyText);
        }
        Ok(acc.iter().map(|x| (x / norm) as f32).collect())
    }
}

/// Cosine similarity with a deterministic sequential reduction.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        acc += (*x as f64) * (*y as f64);
    }
    acc
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub id: String,
    pub group: Option<String>,
    pub vector: Vec<f32>,
}

/// Exact-scan embedding index over the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    pub dim: usize,
    pub seed: u64,
    /// Hash of the training id list this index was built from.
    pub split_hash: String,
    pub entries: Vec<IndexEntry>,
}

/// A retrieved neighbor's payload: similarity, title tokens, and its nine
/// representative empirical quantiles in log space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NeighborContext {
    pub id: String,
    pub similarity: f64,
    pub title_tokens: Vec<usize>,
    pub quantiles_log: Vec<f64>,
}

impl EmbeddingIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains_id(&self, id: &str) -> bool {
        self.entries.iter().any(|e| e.id == id)
    }

    /// Top-K ids by descending cosine similarity, ties by ascending id.
    /// The query's own id is excluded; `group` restricts the pool.
    pub fn topk(
        &self,
        query: &[f32],
        k: usize,
        group: Option<&str>,
        exclude_id: Option<&str>,
    ) -> Result<Vec<(String, f64)>> {
        let mut scored: Vec<(&IndexEntry, f64)> = Vec::new();
        for e in &self.entries {
            if let Some(g) = group {
                if e.group.as_deref() != Some(g) {
                    continue;
                }
            }
            if Some(e.id.as_str()) == exclude_id {
                continue;
            }
            scored.push((e, cosine(query, &e.vector)));
        }
        if scored.is_empty() {
            return Err(Error::EmptyPool(group.map(|s| s.to_string())));
        }
        if k > scored.len() {
            return Err(Error::PoolTooSmall { k, pool: scored.len() });
        }
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.id.cmp(&b.0.id)));
        Ok(scored[..k].iter().map(|(e, s)| (e.id.clone(), *s)).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        if self.split_hash.len() != 64 {
            return Err(Error::IndexFormat("split hash must be 64 hex chars".into()));
        }
        buf.extend_from_slice(self.split_hash.as_bytes());
        for e in &self.entries {
            buf.extend_from_slice(&fixed_bytes::<ID_BYTES>(&e.id)?);
            buf.extend_from_slice(&fixed_bytes::<GROUP_BYTES>(e.group.as_deref().unwrap_or(""))?);
            for v in &e.vector {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, buf)?;
        let manifest = format!(
            "version {VERSION}\ndim {}\nseed {}\ncount {}\nsplit_hash {}\n",
            self.dim,
            self.seed,
            self.entries.len(),
            self.split_hash
        );
        std::fs::write(manifest_path(path), manifest)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::open(path)?;
        let mut buf = Vec::new();
        file.read_to_end(&mut buf)?;
        let mut off = 0usize;
        let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
            if *off + n > buf.len() {
                return Err(Error::IndexFormat("truncated index file".into()));
            }
            let s = &buf[*off..*off + n];
            *off += n;
            Ok(s)
        };
        if take(&mut off, 4)? != MAGIC {
            return Err(Error::IndexFormat("bad magic".into()));
        }
        let version = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::IndexFormat(format!("unsupported version {version}")));
        }
        let dim = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        let seed = u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap());
        let count = u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()) as usize;
        let split_hash = String::from_utf8(take(&mut off, 64)?.to_vec())
            .map_err(|_| Error::IndexFormat("bad split hash".into()))?;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let id = unfixed(take(&mut off, ID_BYTES)?);
            let group_s = unfixed(take(&mut off, GROUP_BYTES)?);
            let group = if group_s.is_empty() { None } else { Some(group_s) };
            let raw = take(&mut off, dim * 4)?;
            let vector = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entries.push(IndexEntry { id, group, vector });
        }
        Ok(EmbeddingIndex { dim, seed, split_hash, entries })
    }
}

pub fn manifest_path(index_path: &Path) -> std::path::PathBuf {
    let mut p = index_path.as_os_str().to_owned();
    p.push(".manifest.txt");
    std::path::PathBuf::from(p)
}

fn fixed_bytes<const N: usize>(s: &str) -> Result<[u8; N]> {
    let b = s.as_bytes();
    if b.len() > N {
        return Err(Error::IndexFormat(format!("field {s:?} exceeds {N} bytes")));
    }
    let mut out = [0u8; N];
    out[..b.len()].copy_from_slice(b);
    Ok(out)
}

fn unfixed(b: &[u8]) -> String {
    let end = b.iter().position(|&c| c == 0).unwrap_or(b.len());
    String::from_utf8_lossy(&b[..end]).into_owned()
}

/// Embeds every record of the training pool into an exact-scan index.
pub fn build_index(
    records: &[&RawRecord],
    vocab: &Vocab,
    dim: usize,
    seed: u64,
    split_hash: &str,
) -> Result<EmbeddingIndex> {
    let mut projector = TokenProjector::new(dim, seed);
    let mut seen = std::collections::BTreeSet::new();
    let mut entries = Vec::with_capacity(records.len());
    for rec in records {
        if !seen.insert(rec.id.clone()) {
            return Err(Error::DuplicateId(rec.id.clone()));
        }
        let tokens = vocab.encode(&rec.text);
        let vector = projector.embed(&tokens)?;
        entries.push(IndexEntry { id: rec.id.clone(), group: rec.group.clone(), vector });
    }
    Ok(EmbeddingIndex { dim, seed, split_hash: split_hash.to_string(), entries })
}

/// Builds the neighbor payload for a retrieved record: its first
/// `title_len` tokens and nine representative quantiles of its log outcomes.
pub fn neighbor_context(
    rec: &RawRecord,
    vocab: &Vocab,
    similarity: f64,
    title_len: usize,
) -> Result<NeighborContext> {
    let tokens = vocab.encode(&rec.text);
    let title_tokens = tokens.into_iter().take(title_len).collect();
    let outcomes = OutcomeSet::new(rec.outcomes.clone())?.to_log()?;
    let q = interpolate_quantiles(&outcomes, &QuantileGrid::representative(), Space::Log);
    Ok(NeighborContext { id: rec.id.clone(), similarity, title_tokens, quantiles_log: q.values })
}

/// Aborts evaluation when any evaluation id is present in the retrieval pool.
pub fn assert_no_leakage(index: &EmbeddingIndex, eval_ids: &[String]) -> Result<()> {
    let pool: std::collections::BTreeSet<&str> = index.entries.iter().map(|e| e.id.as_str()).collect();
    let mut leaked: Vec<&String> = eval_ids.iter().filter(|id| pool.contains(id.as_str())).collect();
    leaked.sort();
    if let Some(first) = leaked.first() {
        return Err(Error::Leakage { count: leaked.len(), first: (*first).clone() });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rec(id: &str, text: &str, group: &str) -> RawRecord {
        RawRecord {
            id: id.into(),
            text: text.into(),
            outcomes: vec![10.0, 20.0, 30.0, 40.0],
            group: Some(group.into()),
        }
    }

    fn small_vocab() -> Vocab {
        Vocab::build(
            ["luxe plain loft villa arden bexley tiny roomy grand alpha beta gamma delta"].into_iter(),
        )
    }

    #[test]
    fn embed_deterministic_unit_norm() {
        let v = small_vocab();
        let mut p = TokenProjector::new(64, 9);
        let a = p.embed(&v.encode("luxe loft arden")).unwrap();
        let b = p.embed(&v.encode("luxe loft arden")).unwrap();
        assert_eq!(a, b);
        let norm: f64 = a.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        assert!((cosine(&a, &b) - 1.0).abs() < 1e-6);
        assert!(p.embed(&[]).is_err());
    }

    #[test]
    fn disjoint_token_sets_have_small_similarity() {
        // concentration under random projection; tolerate a few outliers
        let dim = 256;
        let mut p = TokenProjector::new(dim, 3);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(44);
        let mut ok = 0;
        for _ in 0..100 {
            let a: Vec<usize> = (0..6).map(|_| rng.gen_range(100..5000)).collect();
            let b: Vec<usize> = a.iter().map(|t| t + 5000).collect();
            let va = p.embed(&a).unwrap();
            let vb = p.embed(&b).unwrap();
            if cosine(&va, &vb).abs() < 0.3 {
                ok += 1;
            }
        }
        assert!(ok >= 95, "only {ok}/100 pairs under 0.3");
    }

    #[test]
    fn similarity_symmetric() {
        let mut p = TokenProjector::new(128, 5);
        let v = small_vocab();
        let a = p.embed(&v.encode("alpha beta")).unwrap();
        let b = p.embed(&v.encode("gamma delta beta")).unwrap();
        assert!((cosine(&a, &b) - cosine(&b, &a)).abs() < 1e-9);
    }

    fn build_small() -> (EmbeddingIndex, Vocab, Vec<RawRecord>) {
        let vocab = small_vocab();
        let records = vec![
            rec("r0", "luxe loft arden", "arden"),
            rec("r1", "plain villa arden", "arden"),
            rec("r2", "luxe loft arden", "arden"),
            rec("r3", "plain loft bexley", "bexley"),
            rec("r4", "luxe villa bexley", "bexley"),
        ];
        let refs: Vec<&RawRecord> = records.iter().collect();
        let idx = build_index(&refs, &vocab, 64, 17, &crate::data::sha256_hex(b"train")).unwrap();
        (idx, vocab, records)
    }

    #[test]
    fn duplicate_text_retrieved_first_with_similarity_one() {
        let (idx, vocab, records) = build_small();
        let mut p = TokenProjector::new(64, 17);
        let q = p.embed(&vocab.encode(&records[0].text)).unwrap();
        // query r0: its duplicate r2 must come first with similarity ~1
        let top = idx.topk(&q, 1, Some("arden"), Some("r0")).unwrap();
        assert_eq!(top[0].0, "r2");
        assert!((top[0].1 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn topk_matches_brute_force_and_restricts_group() {
        let (idx, vocab, _) = build_small();
        let mut p = TokenProjector::new(64, 17);
        for text in ["luxe loft", "plain villa", "grand roomy tiny"] {
            let q = p.embed(&vocab.encode(text)).unwrap();
            let got = idx.topk(&q, 2, Some("bexley"), None).unwrap();
            // brute force oracle over the same pool
            let mut scored: Vec<(String, f64)> = idx
                .entries
                .iter()
                .filter(|e| e.group.as_deref() == Some("bexley"))
                .map(|e| (e.id.clone(), cosine(&q, &e.vector)))
                .collect();
            scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            assert_eq!(got, scored[..2].to_vec());
            assert!(got.iter().all(|(id, _)| id.starts_with("r3") || id.starts_with("r4")));
        }
    }

    #[test]
    fn topk_error_paths() {
        let (idx, vocab, _) = build_small();
        let mut p = TokenProjector::new(64, 17);
        let q = p.embed(&vocab.encode("luxe")).unwrap();
        assert!(matches!(idx.topk(&q, 1, Some("nowhere"), None), Err(Error::EmptyPool(_))));
        assert!(matches!(idx.topk(&q, 9, Some("arden"), None), Err(Error::PoolTooSmall { .. })));
    }

    #[test]
    fn save_load_round_trip_bit_exact() {
        let (idx, vocab, _) = build_small();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pool.qlix");
        idx.save(&path).unwrap();
        let loaded = EmbeddingIndex::load(&path).unwrap();
        assert_eq!(idx, loaded);
        assert!(manifest_path(&path).exists());
        let manifest = std::fs::read_to_string(manifest_path(&path)).unwrap();
        assert!(manifest.contains(&idx.split_hash));

        // identical topk for random queries
        let mut p = TokenProjector::new(64, 17);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let toks: Vec<usize> = (0..4).map(|_| rng.gen_range(13..25)).collect();
            let q = p.embed(&toks).unwrap();
            assert_eq!(
                idx.topk(&q, 2, None, None).unwrap(),
                loaded.topk(&q, 2, None, None).unwrap()
            );
        }
        let _ = vocab;
    }

    #[test]
    fn neighbor_context_payload() {
        let vocab = small_vocab();
        let r = rec("n0", "luxe loft arden tiny roomy grand", "arden");
        let ctx = neighbor_context(&r, &vocab, 0.87, 4).unwrap();
        assert_eq!(ctx.title_tokens.len(), 4);
        assert_eq!(ctx.quantiles_log.len(), 9);
        assert!(ctx.quantiles_log.windows(2).all(|w| w[0] <= w[1]));
        // log of the outcome range brackets the payload
        assert!(ctx.quantiles_log[0] >= (10.0f64).ln() - 1e-12);
        assert!(ctx.quantiles_log[8] <= (40.0f64).ln() + 1e-12);
    }

    #[test]
    fn leakage_guard_detects_eval_ids() {
        let (idx, _, _) = build_small();
        assert!(assert_no_leakage(&idx, &["zz".to_string()]).is_ok());
        let err = assert_no_leakage(&idx, &["zz".to_string(), "r1".to_string(), "r3".to_string()]);
        match err {
            Err(Error::Leakage { count, first }) => {
                assert_eq!(count, 2);
                assert_eq!(first, "r1");
            }
            other => panic!("expected leakage, got {other:?}"),
        }
    }

    #[test]
    fn build_rejects_duplicate_ids() {
        let vocab = small_vocab();
        let a = rec("same", "luxe loft", "g");
        let b = rec("same", "plain villa", "g");
        let refs = vec![&a, &b];
        assert!(matches!(
            build_index(&refs, &vocab, 32, 1, &crate::data::sha256_hex(b"x")),
            Err(Error::DuplicateId(_))
        ));
    }
}
