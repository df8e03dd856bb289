use std::collections::VecDeque;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{tokenize, Document, Role, EOD, PAD};
use crate::error::{Error, Result};

/// Per-token language tag. `Original` tokens are the ones the LPR loss
/// supervises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenTag {
    Original,
    Expanded,
    Pad,
}

impl From<Role> for TokenTag {
    fn from(r: Role) -> Self {
        match r {
            Role::Original => TokenTag::Original,
            Role::Expanded => TokenTag::Expanded,
        }
    }
}

/// One fixed-length row of packed documents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedSequence {
    pub ids: Vec<usize>,
    pub tags: Vec<TokenTag>,
}

/// Concatenate documents (each followed by [`EOD`], tagged with its
/// document's role) and cut into rows of `seq_len`. The final row is padded.
pub fn pack_sequences(docs: &[Document], seq_len: usize) -> Vec<PackedSequence> {
    let mut out = Vec::new();
    let mut cur = PackedSequence {
        ids: Vec::with_capacity(seq_len),
        tags: Vec::with_capacity(seq_len),
    };
    for doc in docs {
        let tag = TokenTag::from(doc.role);
        for id in tokenize(doc).into_iter().chain(std::iter::once(EOD)) {
            cur.ids.push(id);
            cur.tags.push(tag);
            if cur.ids.len() == seq_len {
                out.push(std::mem::replace(
                    &mut cur,
                    PackedSequence {
                        ids: Vec::with_capacity(seq_len),
                        tags: Vec::with_capacity(seq_len),
                    },
                ));
            }
        }
    }
    if !cur.ids.is_empty() {
        cur.ids.resize(seq_len, PAD);
        cur.tags.resize(seq_len, TokenTag::Pad);
        out.push(cur);
    }
    out
}

/// `batch x seq` token ids with per-token tags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedBatch {
    pub token_ids: Array2<usize>,
    pub tags: Array2<TokenTag>,
}

impl TaggedBatch {
    pub fn from_sequences(rows: &[PackedSequence]) -> Self {
        let seq = rows.first().map_or(0, |r| r.ids.len());
        let ids = Array2::from_shape_fn((rows.len(), seq), |(b, t)| rows[b].ids[t]);
        let tags = Array2::from_shape_fn((rows.len(), seq), |(b, t)| rows[b].tags[t]);
        Self { token_ids: ids, tags }
    }

    pub fn batch_size(&self) -> usize {
        self.token_ids.nrows()
    }

    pub fn seq_len(&self) -> usize {
        self.token_ids.ncols()
    }

    pub fn flat_ids(&self) -> Vec<usize> {
        self.token_ids.iter().copied().collect()
    }

    pub fn flat_tags(&self) -> Vec<TokenTag> {
        self.tags.iter().copied().collect()
    }

    /// True at non-pad positions, flattened row-major.
    pub fn active(&self) -> Vec<bool> {
        self.tags.iter().map(|&t| t != TokenTag::Pad).collect()
    }

    pub fn pad_mask(&self) -> Array2<bool> {
        self.tags.mapv(|t| t == TokenTag::Pad)
    }

    pub fn count(&self, tag: TokenTag) -> usize {
        self.tags.iter().filter(|&&t| t == tag).count()
    }

    /// Next-token target for every position, `None` where the position or
    /// its successor is padding or the row ends.
    pub fn targets(&self) -> Vec<Option<usize>> {
        let (b, s) = self.token_ids.dim();
        let mut out = Vec::with_capacity(b * s);
        for r in 0..b {
            for t in 0..s {
                let ok = t + 1 < s && self.tags[[r, t]] != TokenTag::Pad && self.tags[[r, t + 1]] != TokenTag::Pad;
                out.push(ok.then(|| self.token_ids[[r, t + 1]]));
            }
        }
        out
    }
}

/// Endless, seeded stream of training batches. Each epoch reshuffles the
/// document order (unless built `ordered`) and repacks.
#[derive(Debug, Clone)]
pub struct BatchStream {
    docs: Vec<Document>,
    seq_len: usize,
    batch_size: usize,
    seed: u64,
    shuffle: bool,
    epoch: u64,
    pending: VecDeque<PackedSequence>,
}

/// Training stream over `docs`. Deterministic for a fixed seed.
pub fn build_batches(docs: &[Document], seq_len: usize, batch_size: usize, seed: u64) -> Result<BatchStream> {
    if seq_len == 0 || batch_size == 0 {
        return Err(Error::Config(
            "sequence length and batch size must be at least 1".into(),
        ));
    }
    if docs.is_empty() {
        return Err(Error::Data("no documents to batch".into()));
    }
    Ok(BatchStream {
        docs: docs.to_vec(),
        seq_len,
        batch_size,
        seed,
        shuffle: true,
        epoch: 0,
        pending: VecDeque::new(),
    })
}

impl BatchStream {
    /// Keep the given document order in every epoch.
    pub fn ordered(mut self) -> Self {
        self.shuffle = false;
        self
    }

    pub fn epochs_started(&self) -> u64 {
        self.epoch
    }

    fn refill(&mut self) {
        let mut docs = self.docs.clone();
        if self.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(self.epoch);
            docs.shuffle(&mut rng);
        }
        self.pending.extend(pack_sequences(&docs, self.seq_len));
        self.epoch += 1;
    }
}

impl Iterator for BatchStream {
    type Item = TaggedBatch;

    fn next(&mut self) -> Option<TaggedBatch> {
        while self.pending.len() < self.batch_size {
            self.refill();
        }
        let rows: Vec<PackedSequence> = self.pending.drain(..self.batch_size).collect();
        Some(TaggedBatch::from_sequences(&rows))
    }
}

/// One ordered pass over `docs`; the last batch may be short.
pub fn eval_batches(docs: &[Document], seq_len: usize, batch_size: usize) -> Vec<TaggedBatch> {
    pack_sequences(docs, seq_len)
        .chunks(batch_size.max(1))
        .map(TaggedBatch::from_sequences)
        .collect()
}
