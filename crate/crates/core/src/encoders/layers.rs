use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::numerics::{Matrix, ParamId, ParamStore, Tape, Var};

const LN_EPS: f64 = 1e-5;

/// Parameters of a [`ParamStore`] bound to a tape for one forward pass.
#[derive(Clone, Copy)]
pub struct Bound<'a> {
    pub tape: &'a Tape,
    pub vars: &'a [Var],
}

impl<'a> Bound<'a> {
    pub fn new(tape: &'a Tape, vars: &'a [Var]) -> Self {
        Self { tape, vars }
    }

    #[inline]
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

pub(crate) fn normal(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let dist = Normal::new(0.0, std).expect("valid std");
    Matrix::from_fn(rows, cols, |_, _| dist.sample(rng))
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / (input + output) as f64).sqrt();
        Self {
            weight: store.add(format!("{name}.weight"), normal(rng, input, output, std)),
            bias: Some(store.add(format!("{name}.bias"), Matrix::zeros(1, output))),
        }
    }

    pub fn without_bias(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / (input + output) as f64).sqrt();
        Self {
            weight: store.add(format!("{name}.weight"), normal(rng, input, output, std)),
            bias: None,
        }
    }

    pub fn forward(&self, b: Bound, x: Var) -> Var {
        let t = b.tape;
        let y = t.matmul(x, b.var(self.weight));
        match self.bias {
            Some(bias) => t.add_row(y, b.var(bias)),
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Matrix::filled(1, dim, 1.0)),
            bias: store.add(format!("{name}.bias"), Matrix::zeros(1, dim)),
        }
    }

    pub fn forward(&self, b: Bound, x: Var) -> Var {
        let t = b.tape;
        let z = t.standardize_rows(x, LN_EPS);
        t.add_row(t.mul_row(z, b.var(self.gain)), b.var(self.bias))
    }
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    heads: usize,
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let hidden = ((dim as f64) * mlp_ratio).round().max(1.0) as usize;
        Self {
            heads,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            q: Linear::new(store, &format!("{name}.attn.q"), dim, dim, rng),
            // A key bias shifts each attention row uniformly and cancels in the softmax.
            k: Linear::without_bias(store, &format!("{name}.attn.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.attn.v"), dim, dim, rng),
            o: Linear::new(store, &format!("{name}.attn.o"), dim, dim, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), dim, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), hidden, dim, rng),
        }
    }

    pub fn forward(&self, b: Bound, x: Var) -> Var {
        let t = b.tape;
        let (_, dim) = t.shape(x);
        let dh = dim / self.heads;
        let h = self.ln1.forward(b, x);
        let q = self.q.forward(b, h);
        let k = self.k.forward(b, h);
        let v = self.v.forward(b, h);
        let scale = 1.0 / (dh as f64).sqrt();
        let heads: Vec<Var> = (0..self.heads)
            .map(|i| {
                let (s, e) = (i * dh, (i + 1) * dh);
                let (qh, kh, vh) = (t.slice_cols(q, s, e), t.slice_cols(k, s, e), t.slice_cols(v, s, e));
                let att = t.softmax_rows(t.scale(t.matmul_nt(qh, kh), scale));
                t.matmul(att, vh)
            })
            .collect();
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            t.concat_cols(&heads)
        };
        let x = t.add(x, self.o.forward(b, merged));
        let h = self.ln2.forward(b, x);
        let m = self.fc2.forward(b, t.gelu(self.fc1.forward(b, h)));
        t.add(x, m)
    }
}
