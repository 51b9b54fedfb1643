//! Small fully connected networks with hand-written backprop.
//!
//! Inputs are either dense matrices or batches of binary feature rows given
//! by their active indices; the first layer of a sparse batch is a sum of
//! weight rows, which keeps wide one-hot grids cheap.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::features::Active;

#[derive(Clone, Copy, Debug)]
pub enum Input<'a> {
    Dense(ArrayView2<'a, f64>),
    Sparse { dim: usize, rows: &'a [Active] },
}

impl Input<'_> {
    pub fn batch_size(&self) -> usize {
        match self {
            Input::Dense(x) => x.nrows(),
            Input::Sparse { rows, .. } => rows.len(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Input::Dense(x) => x.ncols(),
            Input::Sparse { dim, .. } => *dim,
        }
    }
}

/// `y = x W + b` with `W` stored `in x out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero bias.
    pub fn new<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((fan_in, fan_out), || rng.gen_range(-bound..bound));
        Self {
            weight,
            bias: Array1::zeros(fan_out),
        }
    }

    fn forward(&self, x: &Input<'_>) -> Array2<f64> {
        let mut out = match x {
            Input::Dense(x) => x.dot(&self.weight),
            Input::Sparse { rows, .. } => {
                let mut out = Array2::zeros((rows.len(), self.weight.ncols()));
                for (mut o, row) in out.outer_iter_mut().zip(rows.iter()) {
                    for &k in row {
                        o += &self.weight.row(k as usize);
                    }
                }
                out
            }
        };
        out += &self.bias;
        out
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

/// Linear layers with SiLU between them and a linear output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

/// Pre-activations of every hidden layer, kept for the backward pass.
pub struct MlpCache {
    pre: Vec<Array2<f64>>,
}

#[derive(Clone, Debug)]
pub struct MlpGrads {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl MlpGrads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            layers: mlp
                .layers
                .iter()
                .map(|l| (Array2::zeros(l.weight.raw_dim()), Array1::zeros(l.bias.raw_dim())))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            *w += ow;
            *b += ob;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|(w, b)| w.iter().all(|v| v.is_finite()) && b.iter().all(|v| v.is_finite()))
    }
}

impl Mlp {
    /// `sizes = [input, hidden..., output]`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        Self {
            layers: sizes.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect(),
        }
    }

    pub fn zero_last_layer(&mut self) {
        if let Some(last) = self.layers.last_mut() {
            last.weight.fill(0.0);
            last.bias.fill(0.0);
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.ncols())
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn forward(&self, x: &Input<'_>) -> Array2<f64> {
        self.forward_cached(x).0
    }

    pub fn forward_cached(&self, x: &Input<'_>) -> (Array2<f64>, MlpCache) {
        debug_assert_eq!(x.dim(), self.input_dim());
        let mut pre = Vec::with_capacity(self.layers.len().saturating_sub(1));
        let mut h = self.layers[0].forward(x);
        for layer in &self.layers[1..] {
            let act = h.mapv(silu);
            pre.push(h);
            h = layer.forward(&Input::Dense(act.view()));
        }
        (h, MlpCache { pre })
    }

    /// Gradients of `sum(grad_out * output)` with respect to every parameter.
    pub fn backward(&self, x: &Input<'_>, cache: &MlpCache, grad_out: &Array2<f64>) -> MlpGrads {
        let n = self.layers.len();
        let mut grads: Vec<(Array2<f64>, Array1<f64>)> = Vec::with_capacity(n);
        let mut g = grad_out.clone();
        for l in (0..n).rev() {
            let layer = &self.layers[l];
            let db = g.sum_axis(Axis(0));
            let dw = if l == 0 {
                match x {
                    Input::Dense(x) => x.t().dot(&g),
                    Input::Sparse { rows, .. } => {
                        let mut dw = Array2::zeros(layer.weight.raw_dim());
                        for (gi, row) in g.outer_iter().zip(rows.iter()) {
                            for &k in row {
                                let mut r = dw.row_mut(k as usize);
                                r += &gi;
                            }
                        }
                        dw
                    }
                }
            } else {
                let act = cache.pre[l - 1].mapv(silu);
                act.t().dot(&g)
            };
            grads.push((dw, db));
            if l > 0 {
                let mut gin = g.dot(&layer.weight.t());
                Zip::from(&mut gin).and(&cache.pre[l - 1]).for_each(|gv, &z| *gv *= silu_grad(z));
                g = gin;
            }
        }
        grads.reverse();
        MlpGrads { layers: grads }
    }

    /// Visits every scalar parameter in a fixed order.
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().all(|v| v.is_finite()) && l.bias.iter().all(|v| v.is_finite()))
    }
}

impl MlpGrads {
    /// Same order as [`Mlp::params_mut`].
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers.iter().flat_map(|(w, b)| w.iter().chain(b.iter()).copied())
    }
}

/// Adaptive moment estimation.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: MlpGrads,
    v: MlpGrads,
}

impl Adam {
    pub fn new(mlp: &Mlp, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: MlpGrads::zeros_like(mlp),
            v: MlpGrads::zeros_like(mlp),
        }
    }

    pub fn step(&mut self, mlp: &mut Mlp, grads: &MlpGrads) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let step = self.lr * c2.sqrt() / c1;
        let eps = self.eps * c2.sqrt();
        for (((layer, (gw, gb)), (mw, mb)), (vw, vb)) in mlp
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(self.m.layers.iter_mut())
            .zip(self.v.layers.iter_mut())
        {
            Zip::from(&mut layer.weight).and(gw).and(mw).and(vw).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step * *m / (v.sqrt() + eps);
            });
            Zip::from(&mut layer.bias).and(gb).and(mb).and(vb).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step * *m / (v.sqrt() + eps);
            });
        }
    }
}
