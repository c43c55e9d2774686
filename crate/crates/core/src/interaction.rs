//! Deep interaction between a sticker grid and one utterance.
//!
//! ```text
//! M[k][j] = w . [O_k ; h_j ; O_k * h_j]
//! tau_u   = column maxima of M          tau_s = row maxima of M
//! l       = sum_j tau_u[j] h_j          r     = sum_k tau_s[k] O_k
//! Q1      = FC([x ; y ; x * y ; x + y]) with x = O_flat, y = r
//! Q2      = FC([Q1 ; l])
//! ```

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Affine, Graph, ParamId, ParamStore, Tensor, Var};
use crate::sticker_encoder::StickerRepr;
use crate::utterance_encoder::UtteranceRepr;

#[derive(Clone, Copy, Debug)]
pub struct Interaction {
    relation: ParamId,
    integrate: Affine,
    combine: Affine,
    normalize_tau: bool,
    dim: usize,
}

/// Graph nodes of one sticker/utterance interaction. `m`, `tau_u` and
/// `tau_s` are absent for an all-pad utterance, whose `l` and `r` are zero.
#[derive(Clone, Copy, Debug)]
pub struct InteractionVars {
    /// `p^2 x n`.
    pub m: Option<Var>,
    /// `1 x n`.
    pub tau_u: Option<Var>,
    /// `p^2 x 1`.
    pub tau_s: Option<Var>,
    pub l: Var,
    pub r: Var,
    pub q1: Var,
    pub q2: Var,
}

impl Interaction {
    pub fn register(store: &mut ParamStore, dim: usize, normalize_tau: bool, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (3 * dim + 1) as f64).sqrt();
        Interaction {
            relation: store.add_uniform("interaction.relation", &[3, dim], bound, rng),
            integrate: Affine::register(store, "interaction.integrate", 4 * dim, dim, rng),
            combine: Affine::register(store, "interaction.combine", 2 * dim, dim, rng),
            normalize_tau,
            dim,
        }
    }

    pub fn relation(&self) -> ParamId {
        self.relation
    }

    pub fn integrate_affine(&self) -> Affine {
        self.integrate
    }

    pub fn combine_affine(&self) -> Affine {
        self.combine
    }

    /// `M = (O * w3) h^T + 1 (h w2^T)^T + (O w1^T) 1^T`, shape `p^2 x n`.
    pub fn relation_matrix(&self, g: &mut Graph, store: &ParamStore, grid: Var, h: Var) -> Result<Var> {
        let (go, gh) = (g.value(grid), g.value(h));
        if go.cols() != self.dim || gh.cols() != self.dim {
            return Err(Error::dim(format!(
                "relation of width {} between {:?} and {:?}",
                self.dim,
                go.shape(),
                gh.shape()
            )));
        }
        let w = g.param(store, self.relation);
        let w1 = g.row(w, 0)?;
        let w2 = g.row(w, 1)?;
        let w3 = g.row(w, 2)?;
        let ow3 = g.mul_row(grid, w3)?;
        let pair = g.matmul_nt(ow3, h)?;
        let word = g.matmul_nt(w2, h)?;
        let unit = g.matmul_nt(grid, w1)?;
        let m = g.add_row(pair, word)?;
        g.add_col(m, unit)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        sticker: &StickerRepr,
        utterance: Option<&UtteranceRepr>,
    ) -> Result<InteractionVars> {
        let (m, tau_u, tau_s, l, r) = match utterance {
            Some(u) => {
                let m = self.relation_matrix(g, store, sticker.grid, u.h)?;
                let mut tau_u = g.max_over_rows(m)?;
                let tau_s = g.max_over_cols(m)?;
                let mut tau_s_row = g.transpose(tau_s);
                if self.normalize_tau {
                    tau_u = g.softmax_rows(tau_u)?;
                    tau_s_row = g.softmax_rows(tau_s_row)?;
                }
                let l = g.matmul(tau_u, u.h)?;
                let r = g.matmul(tau_s_row, sticker.grid)?;
                let tau_s = if self.normalize_tau { g.transpose(tau_s_row) } else { tau_s };
                (Some(m), Some(tau_u), Some(tau_s), l, r)
            }
            None => {
                let zero = g.constant(Tensor::zeros(&[1, self.dim]));
                (None, None, None, zero, zero)
            }
        };
        let q1 = self.integrate(g, store, sticker.flat, r)?;
        let q2 = self.combine(g, store, q1, l)?;
        Ok(InteractionVars { m, tau_u, tau_s, l, r, q1, q2 })
    }

    /// `FC([x ; y ; x * y ; x + y])`.
    pub fn integrate(&self, g: &mut Graph, store: &ParamStore, x: Var, y: Var) -> Result<Var> {
        let prod = g.mul(x, y)?;
        let sum = g.add(x, y)?;
        let cat = g.concat_cols(&[x, y, prod, sum])?;
        self.integrate.forward(g, store, cat)
    }

    /// `FC([q1 ; l])`.
    pub fn combine(&self, g: &mut Graph, store: &ParamStore, q1: Var, l: Var) -> Result<Var> {
        let cat = g.concat_cols(&[q1, l])?;
        self.combine.forward(g, store, cat)
    }
}

/// Replacement for the interaction network when it is ablated:
/// `Q2 = FC([O_flat ; mean_j h_j])`, with a zero mean for an all-pad utterance.
#[derive(Clone, Copy, Debug)]
pub struct InteractionBypass {
    affine: Affine,
    dim: usize,
}

impl InteractionBypass {
    pub fn register(store: &mut ParamStore, dim: usize, rng: &mut impl Rng) -> Self {
        InteractionBypass {
            affine: Affine::register(store, "din_bypass", 2 * dim, dim, rng),
            dim,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        sticker: &StickerRepr,
        utterance: Option<&UtteranceRepr>,
    ) -> Result<Var> {
        let mean = match utterance {
            Some(u) => g.mean_rows(u.h)?,
            None => g.constant(Tensor::zeros(&[1, self.dim])),
        };
        let cat = g.concat_cols(&[sticker.flat, mean])?;
        self.affine.forward(g, store, cat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn repr(g: &mut Graph, grid: Tensor, h: Tensor) -> (StickerRepr, UtteranceRepr) {
        let n = h.rows();
        let mean: Vec<f64> = (0..grid.cols())
            .map(|c| (0..grid.rows()).map(|r| grid.at(r, c)).sum::<f64>() / grid.rows() as f64)
            .collect();
        let s = StickerRepr {
            flat: g.constant(Tensor::matrix(1, grid.cols(), mean).unwrap()),
            grid: g.constant(grid),
        };
        let u = UtteranceRepr {
            h: g.constant(h),
            alpha: g.constant(Tensor::zeros(&[n, n])),
            len: n,
        };
        (s, u)
    }

    fn module(dim: usize, seed: u64) -> (ParamStore, Interaction) {
        let mut store = ParamStore::new();
        let m = Interaction::register(&mut store, dim, false, &mut ChaCha8Rng::seed_from_u64(seed));
        (store, m)
    }

    #[test]
    fn zero_relation_gives_zero_matrix() {
        let (mut store, m) = module(3, 0);
        store.value_mut(m.relation()).data_mut().fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let (s, u) = repr(&mut g, random(&mut rng, 4, 3), random(&mut rng, 5, 3));
        let mv = m.relation_matrix(&mut g, &store, s.grid, u.h).unwrap();
        assert!(g.value(mv).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn all_ones_gives_three_d() {
        let d = 5;
        let (mut store, m) = module(d, 0);
        store.value_mut(m.relation()).data_mut().fill(1.0);
        let mut g = Graph::new();
        let (s, u) = repr(&mut g, Tensor::filled(&[1, d], 1.0), Tensor::filled(&[1, d], 1.0));
        let mv = m.relation_matrix(&mut g, &store, s.grid, u.h).unwrap();
        assert_eq!(g.value(mv).data(), &[3.0 * d as f64]);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let (store, m) = module(3, 0);
        let mut g = Graph::new();
        let (s, u) = repr(&mut g, Tensor::zeros(&[4, 3]), Tensor::zeros(&[2, 4]));
        assert!(m.relation_matrix(&mut g, &store, s.grid, u.h).is_err());
    }

    #[test]
    fn single_unit_single_word_has_no_pooling_effect() {
        let (store, m) = module(4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let (s, u) = repr(&mut g, random(&mut rng, 1, 4), random(&mut rng, 1, 4));
        let v = m.forward(&mut g, &store, &s, Some(&u)).unwrap();
        let mval = g.value(v.m.unwrap()).item();
        assert_eq!(g.value(v.tau_u.unwrap()).item(), mval);
        assert_eq!(g.value(v.tau_s.unwrap()).item(), mval);
        let (h, o) = (g.value(u.h).row(0).to_vec(), g.value(s.grid).row(0).to_vec());
        for (a, b) in g.value(v.l).data().iter().zip(&h) {
            assert_eq!(*a, mval * b);
        }
        for (a, b) in g.value(v.r).data().iter().zip(&o) {
            assert_eq!(*a, mval * b);
        }
    }

    #[test]
    fn dominant_column_sets_every_row_max() {
        let (store, m) = module(2, 0);
        let mut g = Graph::new();
        let mut data = vec![0.0; 3 * 4];
        for k in 0..3 {
            data[k * 4 + 2] = 10.0 + k as f64;
        }
        let mv = g.constant(Tensor::matrix(3, 4, data).unwrap());
        let tau_s = g.max_over_cols(mv).unwrap();
        assert_eq!(g.value(tau_s).data(), &[10.0, 11.0, 12.0]);
        let _ = (store, m);
    }

    #[test]
    fn empty_utterance_zeroes_l_and_r() {
        let (store, m) = module(3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::new();
        let (s, _) = repr(&mut g, random(&mut rng, 4, 3), random(&mut rng, 1, 3));
        let v = m.forward(&mut g, &store, &s, None).unwrap();
        assert!(v.m.is_none());
        assert!(g.value(v.l).data().iter().all(|&x| x == 0.0));
        assert!(g.value(v.r).data().iter().all(|&x| x == 0.0));
        assert!(g.value(v.q2).is_finite());
    }

    #[test]
    fn normalized_tau_sums_to_one() {
        let mut store = ParamStore::new();
        let m = Interaction::register(&mut store, 3, true, &mut ChaCha8Rng::seed_from_u64(2));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let (s, u) = repr(&mut g, random(&mut rng, 4, 3), random(&mut rng, 6, 3));
        let v = m.forward(&mut g, &store, &s, Some(&u)).unwrap();
        let su: f64 = g.value(v.tau_u.unwrap()).data().iter().sum();
        let ss: f64 = g.value(v.tau_s.unwrap()).data().iter().sum();
        assert!((su - 1.0).abs() < 1e-12 && (ss - 1.0).abs() < 1e-12);
        assert_eq!(g.value(v.tau_s.unwrap()).shape(), &[4, 1]);
    }

    #[test]
    fn interaction_gradients_match_differences() {
        let (mut store, m) = module(3, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (grid, h) = (random(&mut rng, 4, 3), random(&mut rng, 5, 3));
        let report = grad_check(&mut store, 1e-5, |st| {
            let mut g = Graph::new();
            let (s, u) = repr(&mut g, grid.clone(), h.clone());
            let v = m.forward(&mut g, st, &s, Some(&u))?;
            let sq = g.mul(v.q2, v.q2)?;
            let loss = g.sum(sq);
            Ok((g, loss))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn bypass_uses_mean_of_words() {
        let mut store = ParamStore::new();
        let b = InteractionBypass::register(&mut store, 2, &mut ChaCha8Rng::seed_from_u64(0));
        let mut g = Graph::new();
        let (s, u) = repr(
            &mut g,
            Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap(),
            Tensor::matrix(2, 2, vec![1.0, 3.0, 3.0, 5.0]).unwrap(),
        );
        let q2 = b.forward(&mut g, &store, &s, Some(&u)).unwrap();
        let w = store.value(b.affine.weight);
        let input = [1.0, 2.0, 2.0, 4.0];
        for c in 0..2 {
            let oracle: f64 = (0..4).map(|i| input[i] * w.at(i, c)).sum();
            assert!((g.value(q2).data()[c] - oracle).abs() < 1e-12);
        }
    }
}
