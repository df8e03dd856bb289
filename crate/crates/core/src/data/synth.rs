//! Synthetic languages: disjoint byte alphabets, each with its own sparse
//! bigram chain.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Document, Role};

/// Successor probabilities for every symbol, most likely first.
const SUCCESSOR_PROBS: [f64; 3] = [0.6, 0.3, 0.1];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthLanguage {
    pub lang: String,
    pub role: Role,
    /// ASCII symbols; alphabets of different languages should be disjoint.
    pub alphabet: String,
    /// Seeds the bigram table, so two languages with different seeds have
    /// different statistics even over the same alphabet size.
    pub chain_seed: u64,
    pub doc_len: usize,
}

impl SynthLanguage {
    /// For each symbol index, its successors and their probabilities.
    pub fn transitions(&self) -> Vec<Vec<(usize, f64)>> {
        let n = self.alphabet.len();
        let mut rng = ChaCha8Rng::seed_from_u64(self.chain_seed);
        (0..n)
            .map(|_| {
                let k = SUCCESSOR_PROBS.len().min(n);
                sample(&mut rng, n, k).into_iter().zip(SUCCESSOR_PROBS).collect()
            })
            .collect()
    }

    /// `n` documents of `doc_len` symbols each.
    pub fn generate(&self, n: usize, seed: u64) -> Vec<Document> {
        let symbols = self.alphabet.as_bytes();
        let table = self.transitions();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ self.chain_seed.rotate_left(17));
        (0..n)
            .map(|_| {
                let mut text = Vec::with_capacity(self.doc_len);
                let mut cur = rng.random_range(0..symbols.len());
                for _ in 0..self.doc_len {
                    text.push(symbols[cur]);
                    let u: f64 = rng.random();
                    let succ = &table[cur];
                    let mut acc = 0.0;
                    cur = succ.last().expect("non-empty alphabet").0;
                    for &(next, p) in succ {
                        acc += p;
                        if u < acc {
                            cur = next;
                            break;
                        }
                    }
                }
                Document::new(text, self.lang.clone(), self.role)
            })
            .collect()
    }

    /// Same alphabet and role, different bigram chain.
    pub fn dialect(&self, chain_seed: u64) -> SynthLanguage {
        SynthLanguage {
            chain_seed,
            ..self.clone()
        }
    }

    /// Entropy rate of the chain in nats. Every row shares the same
    /// successor distribution, so this is the floor on per-symbol loss.
    pub fn entropy_rate(&self) -> f64 {
        SUCCESSOR_PROBS.iter().map(|p| -p * p.ln()).sum()
    }
}

/// The bilingual (optionally trilingual) synthetic setup.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub languages: Vec<SynthLanguage>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            languages: vec![
                SynthLanguage {
                    lang: "orig".into(),
                    role: Role::Original,
                    alphabet: "abcdefghijklmnop".into(),
                    chain_seed: 101,
                    doc_len: 255,
                },
                SynthLanguage {
                    lang: "expd".into(),
                    role: Role::Expanded,
                    alphabet: "ABCDEFGHIJKLMNOP".into(),
                    chain_seed: 202,
                    doc_len: 255,
                },
            ],
        }
    }
}

impl SynthConfig {
    /// Adds a third, original-role language that review data never
    /// contains.
    pub fn with_held_out_language(mut self) -> Self {
        self.languages.push(SynthLanguage {
            lang: "ood".into(),
            role: Role::Original,
            alphabet: "0123456789!#$%&*".into(),
            chain_seed: 303,
            doc_len: 255,
        });
        self
    }

    /// First language with the original role.
    pub fn original(&self) -> &SynthLanguage {
        self.languages
            .iter()
            .find(|l| l.role == Role::Original)
            .expect("synthetic setup has an original language")
    }

    /// First language with the expanded role.
    pub fn expanded(&self) -> &SynthLanguage {
        self.languages
            .iter()
            .find(|l| l.role == Role::Expanded)
            .expect("synthetic setup has an expanded language")
    }
}
