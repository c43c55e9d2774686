//! Fusion of per-utterance interaction vectors into one matching score.
//!
//! A GRU reads the `Q2` sequence for short-range order, the shared attention
//! block reads it for long-range dependencies, the two are merged with
//! squared difference and product, and a second GRU reduces the merged
//! sequence to the final state scored by a sigmoid head.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Affine, Graph, GruCell, ParamStore, Tensor, Var};
use crate::utterance_encoder::{AttentionBlock, AttentionConfig};

#[derive(Clone, Copy, Debug)]
pub struct Fusion {
    rnn: Option<GruCell>,
    attention: AttentionBlock,
    submulti: Affine,
    predict_rnn: GruCell,
    head: Affine,
    dim: usize,
}

#[derive(Clone, Debug)]
pub struct FusionVars {
    /// `n x d` GRU states (zeros when the branch is ablated).
    pub g: Var,
    /// `n x d` self-attention outputs.
    pub g_hat: Var,
    /// `n x n` attention over utterance positions.
    pub alpha: Var,
    /// `n x d` merged sequence.
    pub g_bar: Var,
    pub g_tilde_last: Var,
    /// Pre-sigmoid `1 x 1`.
    pub logit: Var,
    /// `1 x 1` in `(0, 1)`.
    pub score: Var,
}

impl Fusion {
    pub fn register(
        store: &mut ParamStore,
        dim: usize,
        use_rnn: bool,
        config: AttentionConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let rnn = use_rnn.then(|| GruCell::register(store, "fusion.rnn", dim, dim, rng));
        Fusion {
            rnn,
            attention: AttentionBlock::register(store, "fusion.attn", dim, config, rng),
            submulti: Affine::register(store, "fusion.submulti", 2 * dim, dim, rng),
            predict_rnn: GruCell::register(store, "fusion.predict_rnn", dim, dim, rng),
            head: Affine::register(store, "fusion.head", dim, 1, rng),
            dim,
        }
    }

    pub fn has_rnn(&self) -> bool {
        self.rnn.is_some()
    }

    pub fn rnn(&self) -> Option<GruCell> {
        self.rnn
    }

    pub fn predict_rnn(&self) -> GruCell {
        self.predict_rnn
    }

    pub fn submulti_affine(&self) -> Affine {
        self.submulti
    }

    pub fn head(&self) -> Affine {
        self.head
    }

    /// GRU states over `q2`, starting from zero; zeros when ablated.
    pub fn fuse_rnn(&self, g: &mut Graph, store: &ParamStore, q2: &[Var]) -> Result<Var> {
        if q2.is_empty() {
            return Err(Error::dim("fusion over an empty utterance sequence"));
        }
        match &self.rnn {
            Some(cell) => {
                let states = cell.run(g, store, q2)?;
                g.stack_rows(&states)
            }
            None => Ok(g.constant(Tensor::zeros(&[q2.len(), self.dim]))),
        }
    }

    /// `relu(FC([(g_hat - g)^2 ; g_hat * g]))` row by row.
    pub fn submulti(&self, g: &mut Graph, store: &ParamStore, states: Var, g_hat: Var) -> Result<Var> {
        let diff = g.sub(g_hat, states)?;
        let sq = g.mul(diff, diff)?;
        let prod = g.mul(g_hat, states)?;
        let cat = g.concat_cols(&[sq, prod])?;
        let pre = self.submulti.forward(g, store, cat)?;
        Ok(g.relu(pre))
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, q2: &[Var]) -> Result<FusionVars> {
        let states = self.fuse_rnn(g, store, q2)?;
        let seq = g.stack_rows(q2)?;
        let att = self.attention.forward(g, store, seq)?;
        let g_bar = self.submulti(g, store, states, att.out)?;
        let rows = (0..q2.len())
            .map(|i| g.row(g_bar, i))
            .collect::<Result<Vec<_>>>()?;
        let tilde = self.predict_rnn.run(g, store, &rows)?;
        let g_tilde_last = *tilde.last().expect("non-empty sequence");
        let logit = self.head.forward(g, store, g_tilde_last)?;
        let score = g.sigmoid(logit);
        Ok(FusionVars {
            g: states,
            g_hat: att.out,
            alpha: att.alpha,
            g_bar,
            g_tilde_last,
            logit,
            score,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const NO_DROPOUT: AttentionConfig = AttentionConfig { scaled: false, dropout: 0.0 };

    fn module(dim: usize, use_rnn: bool) -> (ParamStore, Fusion) {
        let mut store = ParamStore::new();
        let f = Fusion::register(&mut store, dim, use_rnn, NO_DROPOUT, &mut ChaCha8Rng::seed_from_u64(9));
        (store, f)
    }

    fn seq(g: &mut Graph, rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Var> {
        (0..n)
            .map(|_| g.constant(Tensor::matrix(1, d, (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()))
            .collect()
    }

    #[test]
    fn empty_sequence_is_an_error() {
        let (store, f) = module(3, true);
        let mut g = Graph::new();
        assert!(f.forward(&mut g, &store, &[]).is_err());
    }

    #[test]
    fn rnn_is_causal() {
        let (store, f) = module(4, true);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let mut a = seq(&mut g, &mut rng, 4, 4);
        let sa = f.fuse_rnn(&mut g, &store, &a).unwrap();
        a[2] = g.constant(Tensor::filled(&[1, 4], 5.0));
        let sb = f.fuse_rnn(&mut g, &store, &a).unwrap();
        let (ta, tb) = (g.value(sa), g.value(sb));
        for i in 0..2 {
            assert_eq!(ta.row(i), tb.row(i));
        }
        assert_ne!(ta.row(2), tb.row(2));
    }

    #[test]
    fn single_step_is_one_cell_application() {
        let (store, f) = module(3, true);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new();
        let q = seq(&mut g, &mut rng, 1, 3);
        let states = f.fuse_rnn(&mut g, &store, &q).unwrap();
        let zero = g.constant(Tensor::zeros(&[1, 3]));
        let direct = f.rnn().unwrap().step(&mut g, &store, q[0], zero).unwrap();
        assert_eq!(g.value(states).data(), g.value(direct).data());
    }

    #[test]
    fn identical_inputs_give_identical_attention_outputs() {
        let (store, f) = module(3, true);
        let mut g = Graph::new();
        let v = g.constant(Tensor::matrix(1, 3, vec![0.3, -0.2, 0.9]).unwrap());
        let out = f.forward(&mut g, &store, &[v, v, v]).unwrap();
        let gh = g.value(out.g_hat);
        for i in 1..3 {
            assert_eq!(gh.row(0), gh.row(i));
        }
        for a in g.value(out.alpha).data() {
            assert!((a - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn submulti_with_equal_branches_drops_difference() {
        let (mut store, f) = module(2, true);
        let w = store.value(f.submulti.weight).clone();
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 2, vec![0.5, -1.5]).unwrap());
        let out = f.submulti(&mut g, &store, x, x).unwrap();
        let input = [0.0, 0.0, 0.25, 2.25];
        for c in 0..2 {
            let pre: f64 = (0..4).map(|i| input[i] * w.at(i, c)).sum();
            assert_eq!(g.value(out).data()[c], pre.max(0.0));
        }
        store.value_mut(f.submulti.weight).data_mut().fill(0.0);
        store.value_mut(f.submulti.bias).data_mut().copy_from_slice(&[0.7, -0.4]);
        let mut g = Graph::new();
        let y = g.constant(Tensor::matrix(1, 2, vec![3.0, 1.0]).unwrap());
        let out = f.submulti(&mut g, &store, x, y).unwrap();
        assert_eq!(g.value(out).data(), &[0.7, 0.0]);
    }

    #[test]
    fn zero_head_scores_one_half() {
        let (mut store, f) = module(3, true);
        store.value_mut(f.head.weight).data_mut().fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let q = seq(&mut g, &mut rng, 2, 3);
        let out = f.forward(&mut g, &store, &q).unwrap();
        assert_eq!(g.value(out.score).item(), 0.5);
    }

    #[test]
    fn ablated_rnn_uses_zero_states() {
        let (store, f) = module(3, false);
        assert!(store.names().all(|n| !n.starts_with("fusion.rnn")));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::new();
        let q = seq(&mut g, &mut rng, 3, 3);
        let out = f.forward(&mut g, &store, &q).unwrap();
        assert!(g.value(out.g).data().iter().all(|&v| v == 0.0));
        let s = g.value(out.score).item();
        assert!(s > 0.0 && s < 1.0);
    }

    #[test]
    fn fusion_gradients_match_differences() {
        for use_rnn in [true, false] {
            let (mut store, f) = module(3, use_rnn);
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let data: Vec<Tensor> = (0..3)
                .map(|_| Tensor::matrix(1, 3, (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
                .collect();
            let report = grad_check(&mut store, 1e-5, |s| {
                let mut g = Graph::new();
                let q: Vec<Var> = data.iter().map(|t| g.constant(t.clone())).collect();
                let out = f.forward(&mut g, s, &q)?;
                Ok((g, out.logit))
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{report:?}");
        }
    }
}
