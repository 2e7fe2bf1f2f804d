use super::{EmbedError, EmbeddingProvider};

pub const DEFAULT_DIM: usize = 256;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Desk-scale stand-in for an LLM embedder: signed-hash bag of character
/// 3-grams over case-folded text with boundary markers, L2-normalised.
#[derive(Debug, Clone)]
pub struct LocalProvider {
    dim: usize,
    id: String,
}

impl LocalProvider {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self {
            dim,
            id: format!("local-trigram-{dim}"),
        }
    }

    pub fn embed_text(&self, text: &str) -> Vec<f64> {
        let folded: Vec<char> = std::iter::once('\u{2}')
            .chain(text.trim().to_lowercase().chars())
            .chain(std::iter::once('\u{3}'))
            .collect();
        let mut v = vec![0.0; self.dim];
        let mut buf = [0u8; 12];
        for w in folded.windows(3) {
            let mut n = 0;
            for c in w {
                n += c.encode_utf8(&mut buf[n..]).len();
            }
            let h = fnv1a(&buf[..n]);
            let bucket = (h % self.dim as u64) as usize;
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[bucket] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            // every trigram cancelled against a colliding one
            v[(fnv1a(text.as_bytes()) % self.dim as u64) as usize] = 1.0;
            return v;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        v
    }
}

impl EmbeddingProvider for LocalProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn template(&self) -> &str {
        super::TEMPLATE_PLACEHOLDER
    }

    fn embed_uncached(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        if text.trim().is_empty() {
            return Err(EmbedError::EmptyText);
        }
        Ok(self.embed_text(text))
    }
}
