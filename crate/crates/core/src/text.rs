//! Deterministic toy text encoder and the event/action caption split.
//!
//! Each whitespace token is mapped to a standard-normal vector seeded by a
//! hash of the full text, the token and its position. Salting with the full
//! text makes captions that differ anywhere produce unrelated embeddings.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::action::{render_action_text, CameraToken, HumanToken};
use crate::error::Result;
use crate::tensor::Tensor;

/// `[length, d_text]`; rows past the last token are zero.
pub fn embed_text_toy(text: &str, d_text: usize, length: usize) -> Tensor {
    let digest = Sha256::digest(text.as_bytes());
    let mut out = Tensor::zeros(&[length, d_text]);
    for (pos, token) in text.split_whitespace().take(length).enumerate() {
        let mut h = Sha256::new();
        h.update(digest);
        h.update((token.len() as u64).to_le_bytes());
        h.update(token.as_bytes());
        h.update((pos as u64).to_le_bytes());
        let seed: [u8; 32] = h.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(seed);
        for v in out.row_mut(pos) {
            *v = StandardNormal.sample(&mut rng);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    pub event_part: Tensor,
    pub action_part: Tensor,
    pub combined: Tensor,
}

impl TextEmbedding {
    pub fn new(event_part: Tensor, action_part: Tensor) -> Result<Self> {
        let combined = Tensor::concat_rows(&[&event_part, &action_part])?;
        Ok(Self {
            event_part,
            action_part,
            combined,
        })
    }

    pub fn len(&self) -> usize {
        self.combined.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.combined.rows() == 0
    }
}

/// Memoized action-sentence embeddings keyed by canonical text.
#[derive(Clone, Debug)]
pub struct ActionEmbeddingCache {
    d_text: usize,
    length: usize,
    map: HashMap<String, Tensor>,
    hits: u64,
    misses: u64,
}

impl ActionEmbeddingCache {
    pub fn new(d_text: usize, length: usize) -> Self {
        Self {
            d_text,
            length,
            map: HashMap::new(),
            hits: 0,
            misses: 0,
        }
    }

    pub fn d_text(&self) -> usize {
        self.d_text
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn lookup(&mut self, human: HumanToken, camera: CameraToken) -> Tensor {
        let key = render_action_text(human, camera);
        if let Some(t) = self.map.get(&key) {
            self.hits += 1;
            return t.clone();
        }
        self.misses += 1;
        let t = embed_text_toy(&key, self.d_text, self.length);
        self.map.insert(key, t.clone());
        t
    }

    /// Embeds every vocabulary pair.
    pub fn prewarm(&mut self) {
        for h in HumanToken::ALL {
            for c in CameraToken::ALL {
                let key = render_action_text(h, c);
                if !self.map.contains_key(&key) {
                    self.misses += 1;
                    let t = embed_text_toy(&key, self.d_text, self.length);
                    self.map.insert(key, t);
                }
            }
        }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn hits(&self) -> u64 {
        self.hits
    }

    /// Number of embeddings actually computed.
    pub fn misses(&self) -> u64 {
        self.misses
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn get(&self, key: &str) -> Option<&Tensor> {
        self.map.get(key)
    }
}

/// Fresh event embedding followed by one cached block per action pair.
pub fn build_text_embedding(
    event: &str,
    event_len: usize,
    actions: &[(HumanToken, CameraToken)],
    cache: &mut ActionEmbeddingCache,
) -> Result<TextEmbedding> {
    let event_part = embed_text_toy(event, cache.d_text, event_len);
    build_with_event(event_part, actions, cache)
}

/// As [`build_text_embedding`] with an event embedding computed earlier.
pub fn build_with_event(
    event_part: Tensor,
    actions: &[(HumanToken, CameraToken)],
    cache: &mut ActionEmbeddingCache,
) -> Result<TextEmbedding> {
    let blocks: Vec<Tensor> = actions.iter().map(|&(h, c)| cache.lookup(h, c)).collect();
    let action_part = if blocks.is_empty() {
        Tensor::zeros(&[0, cache.d_text])
    } else {
        Tensor::concat_rows(&blocks.iter().collect::<Vec<_>>())?
    };
    TextEmbedding::new(event_part, action_part)
}
