//! Shared neural building blocks: affine maps, layer normalization, GRU cell.

use rand::Rng;

use super::graph::{Graph, Var};
use super::kernels;
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Variance epsilon for every layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Softmax of a single row of logits.
pub fn softmax_row(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::dim("softmax of an empty vector"));
    }
    Ok(kernels::softmax(logits))
}

/// Layer normalization of `x` with an elementwise gain and bias.
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Result<Vec<f64>> {
    if x.len() < 2 {
        return Err(Error::dim("layer_norm needs at least two values"));
    }
    if gain.len() != x.len() || bias.len() != x.len() {
        return Err(Error::dim(format!(
            "layer_norm: input {}, gain {}, bias {}",
            x.len(),
            gain.len(),
            bias.len()
        )));
    }
    let (n, _) = kernels::normalize(x, LAYER_NORM_EPS);
    Ok(n.iter()
        .zip(gain)
        .zip(bias)
        .map(|((v, g), b)| v * g + b)
        .collect())
}

pub fn sigmoid(x: f64) -> f64 {
    kernels::sigmoid(x)
}

/// `y = x W + b` applied row-wise.
#[derive(Clone, Copy, Debug)]
pub struct Affine {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Affine {
    pub fn register(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add_xavier(format!("{name}.weight"), &[d_in, d_out], d_in, d_out, rng);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]));
        Affine { weight, bias }
    }

    /// Look up an already registered affine map by name.
    pub fn find(store: &ParamStore, name: &str) -> Option<Self> {
        Some(Affine {
            weight: store.id(&format!("{name}.weight"))?,
            bias: store.id(&format!("{name}.bias"))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let xw = g.matmul(x, w)?;
        g.add_row(xw, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn register(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::filled(&[dim], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm_rows(x, gain, bias, LAYER_NORM_EPS)
    }
}

/// Gated recurrent unit with reset, update and candidate gates.
///
/// ```text
/// z  = sigmoid(x Wz + h Uz + bz)
/// r  = sigmoid(x Wr + h Ur + br)
/// n  = tanh(x Wn + (r * h) Un + bn)
/// h' = (1 - z) * n + z * h
/// ```
#[derive(Clone, Copy, Debug)]
pub struct GruCell {
    gates: [(ParamId, ParamId, ParamId); 3],
    pub d_in: usize,
    pub d_h: usize,
}

const GATE_NAMES: [&str; 3] = ["update", "reset", "candidate"];

impl GruCell {
    pub fn register(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_h: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let gates = GATE_NAMES.map(|gate| {
            let w = store.add_xavier(format!("{name}.{gate}.input"), &[d_in, d_h], d_in, d_h, rng);
            let u = store.add_xavier(format!("{name}.{gate}.hidden"), &[d_h, d_h], d_h, d_h, rng);
            let b = store.add(format!("{name}.{gate}.bias"), Tensor::zeros(&[d_h]));
            (w, u, b)
        });
        GruCell { gates, d_in, d_h }
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.gates.iter().flat_map(|(w, u, b)| [*w, *u, *b])
    }

    /// One recurrence step on `1 x d_in` input and `1 x d_h` state.
    pub fn step(&self, g: &mut Graph, store: &ParamStore, x: Var, h: Var) -> Result<Var> {
        if g.value(x).len() != self.d_in || g.value(h).len() != self.d_h {
            return Err(Error::dim(format!(
                "gru_cell: input {:?} and state {:?} for a {}->{} cell",
                g.value(x).shape(),
                g.value(h).shape(),
                self.d_in,
                self.d_h
            )));
        }
        let pre = |g: &mut Graph, gate: usize, hidden: Var| -> Result<Var> {
            let (w, u, b) = self.gates[gate];
            let (w, u, b) = (g.param(store, w), g.param(store, u), g.param(store, b));
            let xw = g.matmul(x, w)?;
            let hu = g.matmul(hidden, u)?;
            let s = g.add(xw, hu)?;
            g.add_row(s, b)
        };
        let z_pre = pre(g, 0, h)?;
        let z = g.sigmoid(z_pre);
        let r_pre = pre(g, 1, h)?;
        let r = g.sigmoid(r_pre);
        let rh = g.mul(r, h)?;
        let n_pre = pre(g, 2, rh)?;
        let n = g.tanh(n_pre);
        // (1 - z) * n + z * h  ==  n + z * (h - n)
        let h_minus_n = g.sub(h, n)?;
        let gated = g.mul(z, h_minus_n)?;
        g.add(n, gated)
    }

    /// Run over the rows of `seq` from a zero state, returning every state.
    pub fn run(&self, g: &mut Graph, store: &ParamStore, seq: &[Var]) -> Result<Vec<Var>> {
        if seq.is_empty() {
            return Err(Error::dim("recurrence over an empty sequence"));
        }
        let mut h = g.constant(Tensor::zeros(&[1, self.d_h]));
        let mut states = Vec::with_capacity(seq.len());
        for &x in seq {
            h = self.step(g, store, x, h)?;
            states.push(h);
        }
        Ok(states)
    }
}
