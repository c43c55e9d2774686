//! Finite-difference checks for every differentiable graph operation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Result;

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Grad-check `sum(op(params) * probe)` where `probe` is a fixed random tensor.
fn check<F>(shapes: &[&[usize]], op: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| store.add(format!("p{i}"), random_tensor(s, &mut rng)))
        .collect();
    let probe_seed = rng.random::<u64>();
    let report = grad_check(&mut store, 1e-6, |s| {
        let mut g = Graph::training(ChaCha8Rng::seed_from_u64(3));
        let vars: Vec<Var> = ids.iter().map(|id| g.param(s, *id)).collect();
        let out = op(&mut g, &vars)?;
        let probe = random_tensor(g.value(out).shape(), &mut ChaCha8Rng::seed_from_u64(probe_seed));
        let probe = g.constant(probe);
        let weighted = g.mul(out, probe)?;
        let loss = g.sum(weighted);
        Ok((g, loss))
    })
    .unwrap();
    report.max_rel_error
}

macro_rules! grad_test {
    ($name:ident, $shapes:expr, $op:expr) => {
        #[test]
        fn $name() {
            let err = check($shapes, $op);
            assert!(err < 1e-6, "relative error {err}");
        }
    };
}

grad_test!(matmul, &[&[3, 4], &[4, 2]], |g, v| g.matmul(v[0], v[1]));
grad_test!(matmul_nt, &[&[3, 4], &[5, 4]], |g, v| g.matmul_nt(v[0], v[1]));
grad_test!(transpose, &[&[3, 4]], |g, v| Ok(g.transpose(v[0])));
grad_test!(add, &[&[2, 3], &[2, 3]], |g, v| g.add(v[0], v[1]));
grad_test!(sub, &[&[2, 3], &[2, 3]], |g, v| g.sub(v[0], v[1]));
grad_test!(mul, &[&[2, 3], &[2, 3]], |g, v| g.mul(v[0], v[1]));
grad_test!(add_row, &[&[4, 3], &[3]], |g, v| g.add_row(v[0], v[1]));
grad_test!(add_col, &[&[4, 3], &[4, 1]], |g, v| g.add_col(v[0], v[1]));
grad_test!(mul_row, &[&[4, 3], &[3]], |g, v| g.mul_row(v[0], v[1]));
grad_test!(scale_and_shift, &[&[2, 2]], |g, v| {
    let s = g.scale(v[0], -2.5);
    Ok(g.add_scalar(s, 0.7))
});
grad_test!(sigmoid, &[&[3, 3]], |g, v| Ok(g.sigmoid(v[0])));
grad_test!(tanh, &[&[3, 3]], |g, v| Ok(g.tanh(v[0])));
grad_test!(relu, &[&[3, 3]], |g, v| Ok(g.relu(v[0])));
grad_test!(softmax_rows, &[&[3, 5]], |g, v| g.softmax_rows(v[0]));
grad_test!(layer_norm_rows, &[&[3, 5], &[5], &[5]], |g, v| g.layer_norm_rows(v[0], v[1], v[2], 1e-6));
grad_test!(concat_cols, &[&[2, 3], &[2, 1], &[2, 4]], |g, v| g.concat_cols(v));
grad_test!(stack_rows, &[&[1, 3], &[3], &[1, 3]], |g, v| g.stack_rows(v));
grad_test!(row, &[&[4, 3]], |g, v| g.row(v[0], 2));
grad_test!(max_over_rows, &[&[4, 5]], |g, v| g.max_over_rows(v[0]));
grad_test!(max_over_cols, &[&[4, 5]], |g, v| g.max_over_cols(v[0]));
grad_test!(mean_rows, &[&[4, 5]], |g, v| g.mean_rows(v[0]));
grad_test!(embedding, &[&[6, 3]], |g, v| g.embedding(v[0], &[4, 0, 4, 2]));
grad_test!(conv2d, &[&[2, 7, 6], &[3, 2, 3, 3], &[3]], |g, v| g.conv2d(v[0], v[1], v[2], 2, 1));
grad_test!(conv2d_no_pad, &[&[1, 5, 5], &[2, 1, 2, 2], &[2]], |g, v| g.conv2d(v[0], v[1], v[2], 1, 0));
grad_test!(adaptive_avg_pool, &[&[2, 7, 5]], |g, v| g.adaptive_avg_pool(v[0], 3));
grad_test!(reshape, &[&[2, 6]], |g, v| g.reshape(v[0], &[3, 4]));
grad_test!(dropout, &[&[4, 4]], |g, v| Ok(g.dropout(v[0], 0.3)));
grad_test!(cross_entropy, &[&[1, 5]], |g, v| g.cross_entropy(v[0], 3));

#[test]
fn gru_step_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let cell = GruCell::register(&mut store, "gru", 3, 4, &mut rng);
    let x = random_tensor(&[1, 3], &mut rng).reshaped(&[1, 3]).unwrap();
    let h0 = random_tensor(&[1, 4], &mut rng);
    let report = grad_check(&mut store, 1e-6, |s| {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let hv = g.constant(h0.clone());
        let h1 = cell.step(&mut g, s, xv, hv)?;
        let h2 = cell.step(&mut g, s, xv, h1)?;
        let loss = g.sum(h2);
        Ok((g, loss))
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn max_ties_route_to_lowest_index() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::matrix(2, 3, vec![1.0, 5.0, 5.0, 1.0, 2.0, 0.0]).unwrap());
    let m = g.max_over_cols(x).unwrap();
    let loss = g.sum(m);
    let grads = g.backward_all(loss).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
}

#[test]
fn dropout_is_identity_in_eval_mode() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![1.0, 2.0]));
    assert_eq!(g.dropout(x, 0.5), x);
}
