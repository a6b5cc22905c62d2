//! Text representations for class names.
//!
//! The model only needs a stable target direction per class (for the
//! text-guided token loss) and a small word vector per class (for the
//! category cue). [`HashTextProvider`] produces both offline from a seed;
//! [`TableTextProvider`] reads externally computed vectors from
//! `name<TAB>v1,v2,...` files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const PROMPT_PREFIX: &str = "A photo of a ";

/// Maximum |cosine| tolerated between the text vectors of two vocabulary entries.
pub const MAX_VOCAB_COSINE: f64 = 0.3;

/// Name of the human class as seen by the text side.
pub const HUMAN_CLASS: &str = "human";

pub fn prompt(class_name: &str) -> Result<String> {
    if class_name.trim().is_empty() {
        return Err(Error::EmptyName);
    }
    Ok(format!("{PROMPT_PREFIX}{class_name}"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub vector: Vec<f64>,
    pub source_prompt: String,
}

pub trait TextProvider: Send + Sync {
    /// Unit-norm sentence embedding of a prompt.
    fn embed(&self, prompt: &str) -> Result<TextEmbedding>;
    /// Unit-norm word vector of a bare class name.
    fn word_vector(&self, class_name: &str) -> Result<Vec<f64>>;
    fn text_dim(&self) -> usize;
    fn word_dim(&self) -> usize;
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Deterministic Gaussian direction keyed by (seed, domain, key, attempt).
fn hashed_direction(seed: u64, domain: &str, key: &str, attempt: u32, dim: usize) -> Vec<f64> {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(domain.as_bytes());
    h.update([0u8]);
    h.update(attempt.to_le_bytes());
    h.update(key.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(bytes);
    normalize((0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
}

/// Offline provider: seeded hash of the string to a random unit vector.
/// Vectors of the vocabulary supplied at construction are re-drawn until
/// every pair has |cosine| below [`MAX_VOCAB_COSINE`]; strings outside the
/// vocabulary are hashed on demand.
#[derive(Debug, Clone)]
pub struct HashTextProvider {
    seed: u64,
    text_dim: usize,
    word_dim: usize,
    prompts: BTreeMap<String, Vec<f64>>,
    words: BTreeMap<String, Vec<f64>>,
}

impl HashTextProvider {
    pub fn new(seed: u64, text_dim: usize, word_dim: usize, vocabulary: &[String]) -> Result<Self> {
        let mut names: Vec<String> = vocabulary.to_vec();
        if !names.iter().any(|n| n == HUMAN_CLASS) {
            names.push(HUMAN_CLASS.to_string());
        }
        let mut prompts = BTreeMap::new();
        let mut words = BTreeMap::new();
        let prompt_keys = names.iter().map(|n| prompt(n)).collect::<Result<Vec<_>>>()?;
        let place = |keys: &[String], domain: &str, dim: usize, out: &mut BTreeMap<String, Vec<f64>>| -> Result<()> {
            let mut accepted: Vec<Vec<f64>> = Vec::new();
            for key in keys {
                let mut attempt = 0;
                let v = loop {
                    let v = hashed_direction(seed, domain, key, attempt, dim);
                    if accepted.iter().all(|a| cosine(a, &v).abs() < MAX_VOCAB_COSINE) {
                        break v;
                    }
                    attempt += 1;
                    if attempt > 10_000 {
                        return Err(Error::Provider(format!(
                            "cannot place `{key}` in {dim} dimensions below |cos| {MAX_VOCAB_COSINE}"
                        )));
                    }
                };
                accepted.push(v.clone());
                out.insert(key.clone(), v);
            }
            Ok(())
        };
        place(&prompt_keys, "sentence", text_dim, &mut prompts)?;
        place(&names, "word", word_dim, &mut words)?;
        Ok(HashTextProvider {
            seed,
            text_dim,
            word_dim,
            prompts,
            words,
        })
    }
}

impl TextProvider for HashTextProvider {
    fn embed(&self, prompt: &str) -> Result<TextEmbedding> {
        let vector = self
            .prompts
            .get(prompt)
            .cloned()
            .unwrap_or_else(|| hashed_direction(self.seed, "sentence", prompt, 0, self.text_dim));
        Ok(TextEmbedding {
            vector,
            source_prompt: prompt.to_string(),
        })
    }

    fn word_vector(&self, class_name: &str) -> Result<Vec<f64>> {
        if class_name.trim().is_empty() {
            return Err(Error::EmptyName);
        }
        Ok(self
            .words
            .get(class_name)
            .cloned()
            .unwrap_or_else(|| hashed_direction(self.seed, "word", class_name, 0, self.word_dim)))
    }

    fn text_dim(&self) -> usize {
        self.text_dim
    }

    fn word_dim(&self) -> usize {
        self.word_dim
    }
}

/// `name -> vector` table read from `name<TAB>v1,v2,...` lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub entries: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn parse(text: &str, dim: usize) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record = i + 1;
            let fail = |message: String| Error::Format { record, message };
            let (name, values) = line
                .split_once('\t')
                .ok_or_else(|| fail("expected `name<TAB>values`".into()))?;
            if name.is_empty() {
                return Err(fail("empty name".into()));
            }
            let v = values
                .split(',')
                .map(|s| s.trim().parse::<f64>().map_err(|e| fail(format!("`{s}`: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            if v.len() != dim {
                return Err(fail(format!("`{name}` has {} values, expected {dim}", v.len())));
            }
            if v.iter().all(|x| *x == 0.0) {
                return Err(fail(format!("`{name}` is the zero vector")));
            }
            entries.insert(name.to_string(), v);
        }
        Ok(EmbeddingTable { dim, entries })
    }

    pub fn load(path: &Path, dim: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, dim)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, v) in &self.entries {
            let values: Vec<String> = v.iter().map(|x| format!("{x:?}")).collect();
            let _ = writeln!(out, "{name}\t{}", values.join(","));
        }
        out
    }
}

/// Provider backed by two tables: sentence vectors keyed by prompt (or by
/// bare class name) and word vectors keyed by class name.
#[derive(Debug, Clone)]
pub struct TableTextProvider {
    pub sentences: EmbeddingTable,
    pub words: EmbeddingTable,
}

impl TextProvider for TableTextProvider {
    fn embed(&self, prompt: &str) -> Result<TextEmbedding> {
        let noun = prompt.strip_prefix(PROMPT_PREFIX).unwrap_or(prompt);
        let v = self
            .sentences
            .entries
            .get(prompt)
            .or_else(|| self.sentences.entries.get(noun))
            .ok_or_else(|| Error::Provider(format!("no sentence vector for `{prompt}`")))?;
        Ok(TextEmbedding {
            vector: normalize(v.clone()),
            source_prompt: prompt.to_string(),
        })
    }

    fn word_vector(&self, class_name: &str) -> Result<Vec<f64>> {
        if class_name.trim().is_empty() {
            return Err(Error::EmptyName);
        }
        self.words
            .entries
            .get(class_name)
            .map(|v| normalize(v.clone()))
            .ok_or_else(|| Error::Provider(format!("no word vector for `{class_name}`")))
    }

    fn text_dim(&self) -> usize {
        self.sentences.dim
    }

    fn word_dim(&self) -> usize {
        self.words.dim
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vec<String> {
        ["ball", "cup", "kite", "bench", "umbrella"].map(String::from).to_vec()
    }

    #[test]
    fn prompt_template() {
        assert_eq!(prompt("bicycle").unwrap(), "A photo of a bicycle");
        assert_eq!(prompt("human").unwrap(), "A photo of a human");
        assert!(matches!(prompt(""), Err(Error::EmptyName)));
    }

    #[test]
    fn embeddings_deterministic_and_unit() {
        let p = HashTextProvider::new(7, 512, 64, &vocab()).unwrap();
        let q = HashTextProvider::new(7, 512, 64, &vocab()).unwrap();
        for s in ["A photo of a cup", "anything at all", "A photo of a zebra"] {
            let a = p.embed(s).unwrap();
            assert_eq!(a, q.embed(s).unwrap());
            let n: f64 = a.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
            assert_eq!(a.source_prompt, s);
        }
        let w = p.word_vector("cup").unwrap();
        assert_eq!(w.len(), 64);
        assert!((w.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(w, q.word_vector("cup").unwrap());
    }

    #[test]
    fn vocabulary_gram_matrix_is_near_orthogonal() {
        let p = HashTextProvider::new(7, 512, 64, &vocab()).unwrap();
        let vs: Vec<Vec<f64>> = vocab().iter().map(|n| p.embed(&prompt(n).unwrap()).unwrap().vector).collect();
        let mut max = 0.0f64;
        for i in 0..vs.len() {
            for j in (i + 1)..vs.len() {
                max = max.max(cosine(&vs[i], &vs[j]).abs());
            }
        }
        assert!(max < MAX_VOCAB_COSINE, "max |cos| {max}");
    }

    #[test]
    fn word_vectors_distinct() {
        let p = HashTextProvider::new(7, 512, 64, &vocab()).unwrap();
        let ws: Vec<Vec<f64>> = vocab().iter().map(|n| p.word_vector(n).unwrap()).collect();
        for i in 0..ws.len() {
            for j in (i + 1)..ws.len() {
                assert_ne!(ws[i], ws[j]);
            }
        }
    }

    #[test]
    fn different_seed_different_vectors() {
        let a = HashTextProvider::new(1, 32, 8, &vocab()).unwrap();
        let b = HashTextProvider::new(2, 32, 8, &vocab()).unwrap();
        assert_ne!(a.word_vector("cup").unwrap(), b.word_vector("cup").unwrap());
    }

    #[test]
    fn table_parse_and_lookup() {
        let text = "cup\t1,0,0\nA photo of a cup\t0,2,0\nball\t0,0,3\n";
        let t = EmbeddingTable::parse(text, 3).unwrap();
        let provider = TableTextProvider {
            sentences: t.clone(),
            words: t.clone(),
        };
        assert_eq!(provider.embed("A photo of a cup").unwrap().vector, vec![0.0, 1.0, 0.0]);
        assert_eq!(provider.embed("A photo of a ball").unwrap().vector, vec![0.0, 0.0, 1.0]);
        assert_eq!(provider.word_vector("cup").unwrap(), vec![1.0, 0.0, 0.0]);
        assert!(matches!(provider.word_vector("kite"), Err(Error::Provider(_))));
        assert_eq!(EmbeddingTable::parse(&t.to_text(), 3).unwrap(), t);
    }

    #[test]
    fn table_rejects_bad_records() {
        assert!(matches!(
            EmbeddingTable::parse("cup\t1,0\n", 3),
            Err(Error::Format { record: 1, .. })
        ));
        assert!(matches!(
            EmbeddingTable::parse("cup\t1,0,0\nball 1,2,3\n", 3),
            Err(Error::Format { record: 2, .. })
        ));
        assert!(matches!(
            EmbeddingTable::parse("cup\t1,x,0\n", 3),
            Err(Error::Format { record: 1, .. })
        ));
    }
}
