//! Word embedding followed by one self-attentive block: single-head dot
//! product attention, residual with dropout, and a layer-normalized
//! feed-forward map. The same block fuses utterance vectors later on.
//!
//! Padding never enters the computation: only the real prefix of an
//! utterance is embedded, which is equivalent to masking padded keys with
//! `-inf` logits and dropping padded rows from every later pooling.

use rand::Rng;

use crate::corpus::{Utterance, PAD_ID};
use crate::error::{Error, Result};
use crate::numerics::{Affine, Graph, LayerNorm, ParamId, ParamStore, Tensor, Var};

/// Expected norm of a freshly initialized word embedding.
pub const EMBEDDING_INIT_SCALE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionConfig {
    /// Divide logits by `sqrt(d)`. Off by default: the logits are raw dot products.
    pub scaled: bool,
    pub dropout: f64,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig { scaled: false, dropout: 0.1 }
    }
}

/// Self-attention with residual, dropout and a normalized feed-forward map.
///
/// ```text
/// S     = (X Wq + bq)(X Wk)^T
/// alpha = softmax over each row of S
/// h_hat = dropout(X + alpha (X Wv + bv))
/// H     = LN(relu(h_hat W1 + b1) W2 + b2)
/// ```
#[derive(Clone, Copy, Debug)]
pub struct AttentionBlock {
    query: Affine,
    key: ParamId,
    value: Affine,
    ffn_in: Affine,
    ffn_out: Affine,
    norm: LayerNorm,
    config: AttentionConfig,
    dim: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    /// `n x d` contextualized rows.
    pub out: Var,
    /// `n x n` attention weights; row `j` is the distribution of query `j`.
    pub alpha: Var,
}

impl AttentionBlock {
    pub fn register(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        config: AttentionConfig,
        rng: &mut impl Rng,
    ) -> Self {
        AttentionBlock {
            query: Affine::register(store, &format!("{name}.query"), dim, dim, rng),
            // a key bias shifts every logit of a row equally, which softmax ignores
            key: store.add_xavier(format!("{name}.key.weight"), &[dim, dim], dim, dim, rng),
            value: Affine::register(store, &format!("{name}.value"), dim, dim, rng),
            ffn_in: Affine::register(store, &format!("{name}.ffn_in"), dim, dim, rng),
            ffn_out: Affine::register(store, &format!("{name}.ffn_out"), dim, dim, rng),
            norm: LayerNorm::register(store, &format!("{name}.norm"), dim),
            config,
            dim,
        }
    }

    pub fn config(&self) -> AttentionConfig {
        self.config
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<AttentionOutput> {
        let shape = g.value(x).shape();
        if shape.len() != 2 || shape[1] != self.dim || shape[0] == 0 {
            return Err(Error::dim(format!(
                "attention block of width {} got {shape:?}",
                self.dim
            )));
        }
        let q = self.query.forward(g, store, x)?;
        let wk = g.param(store, self.key);
        let k = g.matmul(x, wk)?;
        let v = self.value.forward(g, store, x)?;
        let mut logits = g.matmul_nt(q, k)?;
        if self.config.scaled {
            logits = g.scale(logits, 1.0 / (self.dim as f64).sqrt());
        }
        let alpha = g.softmax_rows(logits)?;
        let beta = g.matmul(alpha, v)?;
        let residual = g.add(x, beta)?;
        let h_hat = g.dropout(residual, self.config.dropout);
        let inner = self.ffn_in.forward(g, store, h_hat)?;
        let inner = g.relu(inner);
        let outer = self.ffn_out.forward(g, store, inner)?;
        let out = self.norm.forward(g, store, outer)?;
        Ok(AttentionOutput { out, alpha })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct UtteranceEncoder {
    embedding: ParamId,
    attention: AttentionBlock,
    vocab_size: usize,
    dim: usize,
}

/// Hidden states of the real tokens of one utterance.
#[derive(Clone, Copy, Debug)]
pub struct UtteranceRepr {
    /// `n x d` with `n` the number of real tokens.
    pub h: Var,
    /// `n x n` word attention.
    pub alpha: Var,
    pub len: usize,
}

impl UtteranceEncoder {
    pub fn register(
        store: &mut ParamStore,
        vocab_size: usize,
        dim: usize,
        config: AttentionConfig,
        rng: &mut impl Rng,
    ) -> Self {
        // embeddings of norm about 0.1: the normalized block downstream does
        // not care about scale, so learned directions dominate sooner
        let embedding = store.add_uniform(
            "utterance.embedding",
            &[vocab_size, dim],
            EMBEDDING_INIT_SCALE * (3.0 / dim as f64).sqrt(),
            rng,
        );
        UtteranceEncoder {
            embedding,
            attention: AttentionBlock::register(store, "utterance.attn", dim, config, rng),
            vocab_size,
            dim,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embedding(&self) -> ParamId {
        self.embedding
    }

    /// Encode the real tokens of `utt`; `None` for an all-pad utterance.
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        utt: &Utterance,
    ) -> Result<Option<UtteranceRepr>> {
        utt.validate()?;
        let ids = utt.real_ids();
        if ids.is_empty() {
            return Ok(None);
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.vocab_size || id == PAD_ID) {
            return Err(Error::dim(format!(
                "token id {bad} invalid for a vocabulary of {}",
                self.vocab_size
            )));
        }
        let table = g.param(store, self.embedding);
        let x = g.embedding(table, ids)?;
        let AttentionOutput { out, alpha } = self.attention.forward(g, store, x)?;
        Ok(Some(UtteranceRepr { h: out, alpha, len: ids.len() }))
    }
}

/// Expand `n x n` attention over real tokens to `t_x x t_x`, with zero rows
/// and columns at padded positions.
pub fn padded_attention(alpha: &Tensor, t_x: usize) -> Vec<Vec<f64>> {
    let n = alpha.rows();
    (0..t_x)
        .map(|j| {
            (0..t_x)
                .map(|k| if j < n && k < n { alpha.at(j, k) } else { 0.0 })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(vocab: usize, dim: usize) -> (ParamStore, UtteranceEncoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = UtteranceEncoder::register(
            &mut store,
            vocab,
            dim,
            AttentionConfig { scaled: false, dropout: 0.0 },
            &mut rng,
        );
        (store, enc)
    }

    fn utt(ids: &[usize], t_x: usize) -> Utterance {
        Utterance::from_ids(ids, t_x)
    }

    #[test]
    fn single_token_attends_to_itself() {
        let (store, enc) = setup(10, 6);
        let mut g = Graph::new();
        let r = enc.encode(&mut g, &store, &utt(&[4], 5)).unwrap().unwrap();
        assert_eq!(g.value(r.alpha).data(), &[1.0]);
        assert_eq!(g.value(r.h).shape(), &[1, 6]);
    }

    #[test]
    fn equal_embeddings_attend_uniformly() {
        let (mut store, enc) = setup(10, 6);
        let table = store.value_mut(enc.embedding());
        let first: Vec<f64> = table.row(2).to_vec();
        for id in 3..6 {
            table.data_mut()[id * 6..(id + 1) * 6].copy_from_slice(&first);
        }
        let mut g = Graph::new();
        let r = enc.encode(&mut g, &store, &utt(&[2, 3, 4, 5], 7)).unwrap().unwrap();
        for a in g.value(r.alpha).data() {
            assert!((a - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn permuting_tokens_permutes_rows() {
        let (store, enc) = setup(12, 6);
        let mut g = Graph::new();
        let a = enc.encode(&mut g, &store, &utt(&[2, 7, 9, 4], 6)).unwrap().unwrap();
        let b = enc.encode(&mut g, &store, &utt(&[9, 4, 2, 7], 6)).unwrap().unwrap();
        let (ha, hb) = (g.value(a.h), g.value(b.h));
        for (i, j) in [(0, 2), (1, 3), (2, 0), (3, 1)] {
            for (x, y) in ha.row(i).iter().zip(hb.row(j)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let (store, enc) = setup(30, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let n = rng.random_range(1..=6);
            let ids: Vec<usize> = (0..n).map(|_| rng.random_range(2..30)).collect();
            let mut g = Graph::new();
            let r = enc.encode(&mut g, &store, &utt(&ids, 6)).unwrap().unwrap();
            let full = padded_attention(g.value(r.alpha), 6);
            for (j, row) in full.iter().enumerate() {
                let s: f64 = row.iter().sum();
                if j < n {
                    assert!((s - 1.0).abs() < 1e-6);
                    assert!(row[n..].iter().all(|&a| a == 0.0));
                } else {
                    assert_eq!(s, 0.0);
                }
            }
        }
    }

    #[test]
    fn pad_embedding_does_not_leak() {
        let (mut store, enc) = setup(10, 6);
        let u = utt(&[3, 5], 5);
        let mut g = Graph::new();
        let h = enc.encode(&mut g, &store, &u).unwrap().unwrap().h;
        let before = g.value(h).clone();
        store.value_mut(enc.embedding()).data_mut()[..6].fill(9.0);
        let mut g = Graph::new();
        let h = enc.encode(&mut g, &store, &u).unwrap().unwrap().h;
        let after = g.value(h).clone();
        assert_eq!(before, after);
    }

    #[test]
    fn empty_and_invalid_utterances() {
        let (store, enc) = setup(10, 6);
        let mut g = Graph::new();
        assert!(enc.encode(&mut g, &store, &utt(&[], 5)).unwrap().is_none());
        assert!(enc.encode(&mut g, &store, &utt(&[11], 5)).is_err());
    }

    #[test]
    fn scaled_attention_divides_logits() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let plain = AttentionBlock::register(&mut store, "a", 4, AttentionConfig { scaled: false, dropout: 0.0 }, &mut rng);
        let scaled = AttentionBlock { config: AttentionConfig { scaled: true, dropout: 0.0 }, ..plain };
        let x = Tensor::matrix(3, 4, (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x);
        let a = plain.forward(&mut g, &store, xv).unwrap();
        let b = scaled.forward(&mut g, &store, xv).unwrap();
        let q = g.value(a.alpha).clone();
        let (qa, qb) = (q.row(0), g.value(b.alpha).row(0));
        // halving the logits (sqrt 4 = 2) flattens the distribution
        let spread = |r: &[f64]| r.iter().cloned().fold(f64::MIN, f64::max) - r.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread(qb) <= spread(qa));
    }

    #[test]
    fn encoder_gradients_match_differences() {
        let (mut store, enc) = setup(8, 4);
        let u = utt(&[2, 5, 3], 5);
        let report = grad_check(&mut store, 1e-5, |s| {
            let mut g = Graph::new();
            let r = enc.encode(&mut g, s, &u)?.unwrap();
            let w = g.constant(Tensor::matrix(3, 4, (0..12).map(|i| (i as f64).cos()).collect())?);
            let y = g.mul(r.h, w)?;
            let loss = g.sum(y);
            Ok((g, loss))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
