//! Embeddings and exact top-k cosine retrieval over the few-shot support set.
//!
//! The index is a flat scan: every stored unit vector is scored against the
//! query, and the best `k` are kept. Ties on score go to the smaller
//! example id, so results do not depend on insertion order.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::http::Endpoint;
use crate::model::{normalize, tokens, EventMention};

pub const DEFAULT_K: usize = 10;
pub const DEFAULT_DIMENSION: usize = 384;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

/// A labelled support-set item that can be shown to the model as an example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FewShotExample {
    pub example_id: String,
    pub text: String,
    pub gold_events: Vec<EventMention>,
    pub split: Split,
}

/// An L2-normalised embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    /// Normalises `values` to unit length. Zero (or non-finite) input is rejected.
    pub fn normalized(values: Vec<f32>) -> Result<Self> {
        let norm = values.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::ZeroVector);
        }
        Ok(EmbeddingVector(values.into_iter().map(|v| (f64::from(v) / norm) as f32).collect()))
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    /// Dot product accumulated in f64, clamped to [-1, 1]. Equals cosine similarity for unit vectors.
    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(&a, &b)| f64::from(a) * f64::from(b))
            .sum::<f64>()
            .clamp(-1.0, 1.0)
            + 0.0 // folds -0.0 into 0.0 so ties compare equal
    }
}

pub trait EmbeddingProvider: Send + Sync {
    fn provider_id(&self) -> String;

    /// Raw (not necessarily normalised) vectors, one per input text.
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>>;
}

pub fn embed(text: &str, provider: &dyn EmbeddingProvider) -> Result<EmbeddingVector> {
    let mut out = provider.embed_batch(&[text.to_string()])?;
    match out.pop() {
        Some(v) if out.is_empty() => EmbeddingVector::normalized(v),
        _ => Err(Error::Provider {
            provider: provider.provider_id(),
            message: "expected exactly one vector".into(),
        }),
    }
}

/// Offline embedder: each token of the normalised text is hashed into one of
/// `dimension` buckets with a hash-derived sign.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dimension: usize,
}

impl HashingEmbedder {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        HashingEmbedder { dimension }
    }

    fn vector(&self, text: &str) -> Vec<f32> {
        let mut v = vec![0f32; self.dimension];
        for token in tokens(&normalize(text)) {
            let h = fnv1a(token.as_bytes());
            let slot = (h % self.dimension as u64) as usize;
            v[slot] += if h >> 63 == 0 { 1.0 } else { -1.0 };
        }
        v
    }
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_DIMENSION)
    }
}

impl EmbeddingProvider for HashingEmbedder {
    fn provider_id(&self) -> String {
        format!("hash:{}", self.dimension)
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        Ok(texts.iter().map(|t| self.vector(t)).collect())
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Remote embedder speaking `{"texts": [..]}` → `{"vectors": [[..]]}`.
#[derive(Debug, Clone)]
pub struct RemoteEmbedder {
    endpoint: Endpoint,
    batch_size: usize,
}

impl RemoteEmbedder {
    pub fn new(endpoint: Endpoint, batch_size: usize) -> Self {
        RemoteEmbedder {
            endpoint,
            batch_size: batch_size.max(1),
        }
    }
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f32>>,
}

impl EmbeddingProvider for RemoteEmbedder {
    fn provider_id(&self) -> String {
        format!("remote:{}", self.endpoint.url)
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.batch_size) {
            let value = self.endpoint.post_json(&self.provider_id(), &json!({ "texts": chunk }))?;
            let resp: EmbedResponse = serde_json::from_value(value).map_err(|e| Error::Provider {
                provider: self.provider_id(),
                message: format!("malformed embedding response: {e}"),
            })?;
            if resp.vectors.len() != chunk.len() {
                return Err(Error::Provider {
                    provider: self.provider_id(),
                    message: format!("asked for {} vectors, got {}", chunk.len(), resp.vectors.len()),
                });
            }
            out.extend(resp.vectors);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexItem {
    pub example: FewShotExample,
    pub vector: EmbeddingVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub example_id: String,
    pub score: f64,
}

/// Immutable flat index over the support set, stored in ascending id order.
#[derive(Debug, Clone)]
pub struct SupportIndex {
    dimension: usize,
    items: Vec<IndexItem>,
}

impl SupportIndex {
    /// Embeds every example and builds the index.
    pub fn build(examples: Vec<FewShotExample>, provider: &dyn EmbeddingProvider) -> Result<Self> {
        let texts: Vec<String> = examples.iter().map(|e| e.text.clone()).collect();
        let raw = provider.embed_batch(&texts)?;
        if raw.len() != examples.len() {
            return Err(Error::Index(format!(
                "provider returned {} vectors for {} examples",
                raw.len(),
                examples.len()
            )));
        }
        let pairs = examples
            .into_iter()
            .zip(raw)
            .map(|(ex, v)| {
                match EmbeddingVector::normalized(v) {
                    Ok(vector) => Ok((ex, vector)),
                    Err(_) => Err(Error::Index(format!("example {} embeds to a zero vector", ex.example_id))),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_pairs(pairs)
    }

    pub fn from_pairs(pairs: Vec<(FewShotExample, EmbeddingVector)>) -> Result<Self> {
        let Some(dimension) = pairs.first().map(|(_, v)| v.dimension()) else {
            return Err(Error::Index("the support set is empty".into()));
        };
        let mut seen = HashSet::new();
        let mut items = Vec::with_capacity(pairs.len());
        for (example, vector) in pairs {
            if example.split != Split::Train {
                return Err(Error::Index(format!(
                    "example {} is not from the training split",
                    example.example_id
                )));
            }
            if vector.dimension() != dimension {
                return Err(Error::Dimension {
                    expected: dimension,
                    actual: vector.dimension(),
                });
            }
            if !seen.insert(example.example_id.clone()) {
                return Err(Error::DuplicateId(example.example_id));
            }
            items.push(IndexItem { example, vector });
        }
        items.sort_by(|a, b| a.example.example_id.cmp(&b.example.example_id));
        Ok(SupportIndex { dimension, items })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[IndexItem] {
        &self.items
    }

    pub fn example(&self, id: &str) -> Option<&FewShotExample> {
        self.items
            .binary_search_by(|it| it.example.example_id.as_str().cmp(id))
            .ok()
            .map(|i| &self.items[i].example)
    }

    pub fn search(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<Hit>> {
        self.search_filtered(query, k, |_| true)
    }

    /// Top-k among the examples accepted by `keep`.
    pub fn search_filtered(
        &self,
        query: &EmbeddingVector,
        k: usize,
        keep: impl Fn(&FewShotExample) -> bool,
    ) -> Result<Vec<Hit>> {
        if k == 0 {
            return Err(Error::Contract("search needs k >= 1".into()));
        }
        if query.dimension() != self.dimension {
            return Err(Error::Dimension {
                expected: self.dimension,
                actual: query.dimension(),
            });
        }
        // Max-heap whose top is the worst of the current best k.
        let mut heap: BinaryHeap<Ranked<'_>> = BinaryHeap::with_capacity(k + 1);
        for item in self.items.iter().filter(|it| keep(&it.example)) {
            let candidate = Ranked {
                score: query.cosine(&item.vector),
                id: &item.example.example_id,
            };
            if heap.len() < k {
                heap.push(candidate);
            } else if let Some(worst) = heap.peek() {
                if candidate < *worst {
                    heap.pop();
                    heap.push(candidate);
                }
            }
        }
        Ok(heap
            .into_sorted_vec()
            .into_iter()
            .map(|r| Hit {
                example_id: r.id.to_string(),
                score: r.score,
            })
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = PersistedIndex {
            dimension: self.dimension,
            items: self
                .items
                .iter()
                .map(|it| PersistedItem {
                    id: it.example.example_id.clone(),
                    vector: it.vector.0.clone(),
                })
                .collect(),
        };
        let text = serde_json::to_string(&file).expect("serializable");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Reattaches persisted vectors to examples by id. Every example must have a stored vector.
    pub fn load(path: &Path, examples: Vec<FewShotExample>) -> Result<Self> {
        let mut vectors = load_vectors(path)?;
        let mut pairs = Vec::with_capacity(examples.len());
        for ex in examples {
            let Some(v) = vectors.remove(&ex.example_id) else {
                return Err(Error::Index(format!("no stored vector for example {}", ex.example_id)));
            };
            pairs.push((ex, EmbeddingVector(v)));
        }
        Self::from_pairs(pairs)
    }
}

#[derive(Serialize, Deserialize)]
struct PersistedItem {
    id: String,
    vector: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct PersistedIndex {
    dimension: usize,
    items: Vec<PersistedItem>,
}

/// Reads an index file as an id → vector map, checking the dimension header.
pub fn load_vectors(path: &Path) -> Result<std::collections::HashMap<String, Vec<f32>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: PersistedIndex = serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e))?;
    let mut out = std::collections::HashMap::with_capacity(file.items.len());
    for item in file.items {
        if item.vector.len() != file.dimension {
            return Err(Error::Dimension {
                expected: file.dimension,
                actual: item.vector.len(),
            });
        }
        if out.insert(item.id.clone(), item.vector).is_some() {
            return Err(Error::DuplicateId(item.id));
        }
    }
    Ok(out)
}

/// Orders so that "greater" means "ranks lower": lower score, then larger id.
#[derive(Debug)]
struct Ranked<'a> {
    score: f64,
    id: &'a str,
}

impl Ord for Ranked<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then_with(|| self.id.cmp(other.id))
    }
}

impl PartialOrd for Ranked<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Ranked<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Ranked<'_> {}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn ex(id: &str, text: &str) -> FewShotExample {
        FewShotExample {
            example_id: id.into(),
            text: text.into(),
            gold_events: vec![],
            split: Split::Train,
        }
    }

    fn unit(v: Vec<f32>) -> EmbeddingVector {
        EmbeddingVector::normalized(v).unwrap()
    }

    /// Independent oracle: score everything, full sort, truncate.
    fn brute_force(index: &SupportIndex, q: &EmbeddingVector, k: usize) -> Vec<(String, f64)> {
        let mut all: Vec<(String, f64)> = index
            .items()
            .iter()
            .map(|it| {
                let mut dot = 0f64;
                for i in 0..q.dimension() {
                    dot += f64::from(q.values()[i]) * f64::from(it.vector.values()[i]);
                }
                (it.example.example_id.clone(), dot.clamp(-1.0, 1.0))
            })
            .collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    #[test]
    fn hashing_embedder_is_deterministic_and_unit_norm() {
        let e = HashingEmbedder::default();
        let mut rng = rand::rngs::StdRng::seed_from_u64(7);
        for _ in 0..100 {
            let len = rng.gen_range(1..40);
            let s: String = (0..len).map(|_| rng.gen_range(b'a'..=b'z') as char).collect();
            let a = embed(&s, &e).unwrap();
            let b = embed(&s, &e).unwrap();
            assert_eq!(a, b);
            let norm: f64 = a.values().iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
            assert!((a.cosine(&a) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_text_is_a_zero_vector() {
        assert!(matches!(embed("", &HashingEmbedder::default()), Err(Error::ZeroVector)));
        assert!(matches!(EmbeddingVector::normalized(vec![0.0; 3]), Err(Error::ZeroVector)));
    }

    #[test]
    fn build_index_checks() {
        let e = HashingEmbedder::new(16);
        let idx = SupportIndex::build(vec![ex("a", "x y"), ex("b", "y z"), ex("c", "z")], &e).unwrap();
        assert_eq!((idx.len(), idx.dimension()), (3, 16));
        assert!(matches!(
            SupportIndex::build(vec![ex("a", "x"), ex("a", "y")], &e),
            Err(Error::DuplicateId(_))
        ));
        assert!(matches!(SupportIndex::build(vec![], &e), Err(Error::Index(_))));
        let mut dev = ex("d", "x");
        dev.split = Split::Dev;
        assert!(matches!(SupportIndex::build(vec![dev], &e), Err(Error::Index(_))));
        let mixed = vec![(ex("a", ""), unit(vec![1.0, 0.0])), (ex("b", ""), unit(vec![1.0, 0.0, 0.0]))];
        assert!(matches!(SupportIndex::from_pairs(mixed), Err(Error::Dimension { .. })));
    }

    #[test]
    fn self_match_ranks_first() {
        let e = HashingEmbedder::default();
        let idx = SupportIndex::build(
            vec![ex("a", "troops moved to the border"), ex("b", "the election was held"), ex("c", "a man died")],
            &e,
        )
        .unwrap();
        let hits = idx.search(&embed("the election was held", &e).unwrap(), 10).unwrap();
        assert_eq!(hits.len(), 3);
        assert_eq!(hits[0].example_id, "b");
        assert!((hits[0].score - 1.0).abs() < 1e-6);
        assert!(hits.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn query_dimension_must_match() {
        let idx = SupportIndex::from_pairs(vec![(ex("a", ""), unit(vec![1.0, 0.0]))]).unwrap();
        assert!(matches!(idx.search(&unit(vec![1.0, 0.0, 0.0]), 1), Err(Error::Dimension { .. })));
        assert!(idx.search(&unit(vec![1.0, 0.0]), 0).is_err());
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let pairs = ["d", "b", "c", "a"].iter().map(|id| (ex(id, ""), unit(vec![1.0, 1.0]))).collect();
        let idx = SupportIndex::from_pairs(pairs).unwrap();
        let ids: Vec<_> = idx.search(&unit(vec![1.0, 1.0]), 3).unwrap().into_iter().map(|h| h.example_id).collect();
        assert_eq!(ids, ["a", "b", "c"]);
    }

    #[test]
    fn filtered_search() {
        let e = HashingEmbedder::new(32);
        let idx = SupportIndex::build(vec![ex("a", "x"), ex("b", "x y"), ex("c", "y")], &e).unwrap();
        let hits = idx.search_filtered(&embed("x", &e).unwrap(), 5, |ex| ex.example_id != "a").unwrap();
        assert_eq!(hits.iter().map(|h| h.example_id.as_str()).collect::<Vec<_>>(), ["b", "c"]);
    }

    #[test]
    fn matches_brute_force_on_random_vectors() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(11);
        let dim = 24;
        let pairs: Vec<_> = (0..500)
            .map(|i| {
                let v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                (ex(&format!("e{i:04}"), ""), unit(v))
            })
            .collect();
        let idx = SupportIndex::from_pairs(pairs).unwrap();
        for _ in 0..20 {
            let q = unit((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let got: Vec<_> = idx.search(&q, 10).unwrap().into_iter().map(|h| (h.example_id, h.score)).collect();
            assert_eq!(got, brute_force(&idx, &q, 10));
        }
    }

    proptest! {
        #[test]
        fn insertion_order_does_not_matter(
            raw in proptest::collection::vec(proptest::collection::vec(-3i8..=3, 3), 1..25),
            query in proptest::collection::vec(-3i8..=3, 3),
            k in 1usize..30,
            seed in any::<u64>(),
        ) {
            // Small integer coordinates produce plenty of exact ties.
            let to_unit = |v: &[i8]| EmbeddingVector::normalized(v.iter().map(|&x| f32::from(x)).collect());
            let Ok(q) = to_unit(&query) else { return Ok(()) };
            let mut pairs: Vec<_> = raw
                .iter()
                .enumerate()
                .filter_map(|(i, v)| to_unit(v).ok().map(|u| (ex(&format!("id{i:02}"), ""), u)))
                .collect();
            prop_assume!(!pairs.is_empty());
            let forward = SupportIndex::from_pairs(pairs.clone()).unwrap();
            let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
            for i in (1..pairs.len()).rev() {
                pairs.swap(i, rng.gen_range(0..=i));
            }
            let shuffled = SupportIndex::from_pairs(pairs).unwrap();
            let a = forward.search(&q, k).unwrap();
            prop_assert_eq!(&a, &shuffled.search(&q, k).unwrap());
            prop_assert_eq!(a.len(), k.min(forward.len()));
            prop_assert!(a.iter().all(|h| (-1.0 - 1e-9..=1.0 + 1e-9).contains(&h.score)));
            let oracle: Vec<_> = brute_force(&forward, &q, k);
            let got: Vec<_> = a.into_iter().map(|h| (h.example_id, h.score)).collect();
            prop_assert_eq!(got, oracle);
        }
    }

    #[test]
    fn persistence_round_trips_bit_exactly() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(3);
        let pairs: Vec<_> = (0..50)
            .map(|i| (ex(&format!("e{i}"), ""), unit((0..17).map(|_| rng.gen_range(-1.0f32..1.0)).collect())))
            .collect();
        let idx = SupportIndex::from_pairs(pairs.clone()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.json");
        idx.save(&path).unwrap();
        let back = SupportIndex::load(&path, pairs.into_iter().map(|(e, _)| e).collect()).unwrap();
        for (a, b) in idx.items().iter().zip(back.items()) {
            let bits = |v: &EmbeddingVector| v.values().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.vector), bits(&b.vector));
        }
    }

    #[test]
    fn remote_embedder_uses_batched_wire_format() {
        let (url, log) = crate::http::testing::serve(vec![
            (200, r#"{"vectors":[[1,0],[0,2]]}"#.into()),
            (200, r#"{"vectors":[[3,4]]}"#.into()),
        ]);
        let e = RemoteEmbedder::new(Endpoint::new(url), 2);
        let out = e.embed_batch(&["a".into(), "b".into(), "c".into()]).unwrap();
        assert_eq!(out, vec![vec![1.0, 0.0], vec![0.0, 2.0], vec![3.0, 4.0]]);
        let reqs = log.lock().unwrap();
        assert_eq!(reqs[0].body, r#"{"texts":["a","b"]}"#);
        assert_eq!(reqs[1].body, r#"{"texts":["c"]}"#);
    }
}
