//! Dense layers, batch normalization, MLP stacks and segment max-pooling
//! over a flat parameter array.
//!
//! Weights live in one `Vec<f64>`; layers hold offsets into it. Running
//! normalization statistics live in a second array that training updates
//! but the optimizer never touches.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; caches everything backward needs.
    Train,
    /// Running statistics.
    Eval,
}

/// Hands out offsets into the parameter and statistics arrays.
#[derive(Debug, Default, Clone)]
pub struct Arena {
    pub params: usize,
    pub stats: usize,
}

impl Arena {
    fn param(&mut self, n: usize) -> usize {
        let o = self.params;
        self.params += n;
        o
    }

    fn stat(&mut self, n: usize) -> usize {
        let o = self.stats;
        self.stats += n;
        o
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub input: usize,
    pub output: usize,
    w: usize,
    b: usize,
}

impl Dense {
    fn new(arena: &mut Arena, input: usize, output: usize) -> Self {
        let w = arena.param(input * output);
        let b = arena.param(output);
        Dense { input, output, w, b }
    }

    fn weights<'a>(&self, p: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.input, self.output), &p[self.w..self.w + self.input * self.output])
            .expect("weight slice matches its shape")
    }

    fn bias<'a>(&self, p: &'a [f64]) -> ArrayView1<'a, f64> {
        ArrayView1::from(&p[self.b..self.b + self.output])
    }

    fn forward(&self, p: &[f64], x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weights(p)) + &self.bias(p)
    }

    /// Accumulates weight and bias gradients, returns the input gradient.
    fn backward(&self, p: &[f64], x: &Array2<f64>, dy: &Array2<f64>, grad: &mut [f64]) -> Array2<f64> {
        let gw = x.t().dot(dy);
        for (g, v) in grad[self.w..self.w + self.input * self.output].iter_mut().zip(gw.iter()) {
            *g += v;
        }
        let gb = dy.sum_axis(Axis(0));
        for (g, v) in grad[self.b..self.b + self.output].iter_mut().zip(gb.iter()) {
            *g += v;
        }
        dy.dot(&self.weights(p).t())
    }

    fn init(&self, p: &mut [f64], rng: &mut impl Rng) {
        let scale = (2.0 / self.input.max(1) as f64).sqrt();
        for v in &mut p[self.w..self.w + self.input * self.output] {
            let z: f64 = rng.sample(StandardNormal);
            *v = scale * z;
        }
        p[self.b..self.b + self.output].fill(0.0);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub dim: usize,
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

impl BatchNorm {
    fn new(arena: &mut Arena, dim: usize) -> Self {
        BatchNorm {
            dim,
            gamma: arena.param(dim),
            beta: arena.param(dim),
            mean: arena.stat(dim),
            var: arena.stat(dim),
        }
    }

    fn init(&self, p: &mut [f64], stats: &mut [f64]) {
        p[self.gamma..self.gamma + self.dim].fill(1.0);
        p[self.beta..self.beta + self.dim].fill(0.0);
        stats[self.mean..self.mean + self.dim].fill(0.0);
        stats[self.var..self.var + self.dim].fill(1.0);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub dense: Dense,
    pub norm: Option<BatchNorm>,
    pub relu: bool,
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Array2<f64>,
    /// Normalized pre-activation and the per-channel inverse std (train only).
    xhat: Option<(Array2<f64>, Array1<f64>)>,
    batch_stats: Option<(Array1<f64>, Array1<f64>)>,
    /// Output before the ReLU (after normalization).
    pre_relu: Array2<f64>,
    output: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    layers: Vec<LayerCache>,
}

impl MlpCache {
    pub fn output(&self, layer: usize) -> &Array2<f64> {
        &self.layers[layer].output
    }

    pub fn last(&self) -> &Array2<f64> {
        &self.layers[self.layers.len() - 1].output
    }
}

/// A stack of `Dense → [BatchNorm] → [ReLU]` layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub input: usize,
    pub layers: Vec<Layer>,
}

impl Mlp {
    /// Every layer gets normalization (if `batch_norm`) and ReLU, except the
    /// last one when `linear_last` is set.
    pub fn new(arena: &mut Arena, input: usize, widths: &[usize], batch_norm: bool, linear_last: bool) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut d = input;
        for (i, &w) in widths.iter().enumerate() {
            let plain = linear_last && i + 1 == widths.len();
            let dense = Dense::new(arena, d, w);
            let norm = (batch_norm && !plain).then(|| BatchNorm::new(arena, w));
            layers.push(Layer {
                dense,
                norm,
                relu: !plain,
            });
            d = w;
        }
        Mlp { input, layers }
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(self.input, |l| l.dense.output)
    }

    pub fn init(&self, p: &mut [f64], stats: &mut [f64], rng: &mut impl Rng) {
        for l in &self.layers {
            l.dense.init(p, rng);
            if let Some(n) = &l.norm {
                n.init(p, stats);
            }
        }
    }

    pub fn forward(&self, p: &[f64], stats: &[f64], x: Array2<f64>, mode: Mode) -> MlpCache {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut input = x;
        for l in &self.layers {
            let z = l.dense.forward(p, &input);
            let (normed, xhat, batch_stats) = match (&l.norm, mode) {
                (None, _) => (z, None, None),
                (Some(n), Mode::Train) => {
                    let rows = z.nrows().max(1) as f64;
                    let mean = z.sum_axis(Axis(0)) / rows;
                    let centered = &z - &mean;
                    let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / rows;
                    let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
                    let xhat = &centered * &inv_std;
                    let y = &xhat * &ArrayView1::from(&p[n.gamma..n.gamma + n.dim])
                        + &ArrayView1::from(&p[n.beta..n.beta + n.dim]);
                    (y, Some((xhat, inv_std)), Some((mean, var)))
                }
                (Some(n), Mode::Eval) => {
                    let mean = ArrayView1::from(&stats[n.mean..n.mean + n.dim]);
                    let inv_std = ArrayView1::from(&stats[n.var..n.var + n.dim]).mapv(|v| 1.0 / (v + BN_EPS).sqrt());
                    let y = (&z - &mean) * &inv_std * &ArrayView1::from(&p[n.gamma..n.gamma + n.dim])
                        + &ArrayView1::from(&p[n.beta..n.beta + n.dim]);
                    (y, None, None)
                }
            };
            let output = if l.relu { normed.mapv(|v| v.max(0.0)) } else { normed.clone() };
            let keep_input = if mode == Mode::Train { input } else { Array2::zeros((0, 0)) };
            caches.push(LayerCache {
                input: keep_input,
                xhat,
                batch_stats,
                pre_relu: if mode == Mode::Train { normed } else { Array2::zeros((0, 0)) },
                output: output.clone(),
            });
            input = output;
        }
        if self.layers.is_empty() {
            caches.push(LayerCache {
                input: Array2::zeros((0, 0)),
                xhat: None,
                batch_stats: None,
                pre_relu: Array2::zeros((0, 0)),
                output: input,
            });
        }
        MlpCache { layers: caches }
    }

    /// Backpropagates `dy` from the last layer plus extra gradients `taps`
    /// arriving at intermediate layer outputs. Returns the input gradient.
    pub fn backward(
        &self,
        p: &[f64],
        cache: &MlpCache,
        dy: Array2<f64>,
        taps: &[(usize, &Array2<f64>)],
        grad: &mut [f64],
    ) -> Array2<f64> {
        if self.layers.is_empty() {
            return dy;
        }
        let mut d = dy;
        for (i, l) in self.layers.iter().enumerate().rev() {
            for (t, g) in taps {
                if *t == i {
                    d += *g;
                }
            }
            let c = &cache.layers[i];
            if l.relu {
                d.zip_mut_with(&c.pre_relu, |g, &z| {
                    if z <= 0.0 {
                        *g = 0.0
                    }
                });
            }
            if let Some(n) = &l.norm {
                let (xhat, inv_std) = c.xhat.as_ref().expect("backward requires a training-mode forward");
                let gamma = ArrayView1::from(&p[n.gamma..n.gamma + n.dim]);
                let dgamma = (&d * xhat).sum_axis(Axis(0));
                let dbeta = d.sum_axis(Axis(0));
                for (k, (gg, gb)) in dgamma.iter().zip(dbeta.iter()).enumerate() {
                    grad[n.gamma + k] += gg;
                    grad[n.beta + k] += gb;
                }
                let rows = d.nrows().max(1) as f64;
                let dxhat = &d * &gamma;
                let sum_dxhat = dxhat.sum_axis(Axis(0));
                let sum_dxhat_xhat = (&dxhat * xhat).sum_axis(Axis(0));
                d = (&dxhat * rows - &sum_dxhat - &(xhat * &sum_dxhat_xhat)) * &(inv_std / rows);
            }
            d = l.dense.backward(p, &c.input, &d, grad);
        }
        d
    }

    /// Folds the batch statistics of a training forward into the running ones.
    pub fn update_stats(&self, cache: &MlpCache, stats: &mut [f64]) {
        for (l, c) in self.layers.iter().zip(&cache.layers) {
            if let (Some(n), Some((mean, var))) = (&l.norm, &c.batch_stats) {
                for k in 0..n.dim {
                    let m = &mut stats[n.mean + k];
                    *m = (1.0 - BN_MOMENTUM) * *m + BN_MOMENTUM * mean[k];
                    let v = &mut stats[n.var + k];
                    *v = (1.0 - BN_MOMENTUM) * *v + BN_MOMENTUM * var[k];
                }
            }
        }
    }
}

/// Per-segment channel-wise max. `offsets` has one more entry than there
/// are segments; an empty segment pools to zeros. Returns the winning row
/// per `(segment, channel)`.
pub fn max_pool(x: &Array2<f64>, offsets: &[usize]) -> (Array2<f64>, Vec<usize>) {
    let b = offsets.len().saturating_sub(1);
    let d = x.ncols();
    let mut out = Array2::zeros((b, d));
    let mut arg = vec![usize::MAX; b * d];
    for s in 0..b {
        let (lo, hi) = (offsets[s], offsets[s + 1]);
        if lo == hi {
            continue;
        }
        let block = x.slice(s![lo..hi, ..]);
        for c in 0..d {
            let mut best = lo;
            let mut v = block[(0, c)];
            for r in 1..hi - lo {
                if block[(r, c)] > v {
                    v = block[(r, c)];
                    best = lo + r;
                }
            }
            out[(s, c)] = v;
            arg[s * d + c] = best;
        }
    }
    (out, arg)
}

/// Routes pooled gradients back to the winning rows.
pub fn max_pool_backward(dy: &Array2<f64>, arg: &[usize], rows: usize) -> Array2<f64> {
    let d = dy.ncols();
    let mut dx = Array2::zeros((rows, d));
    for s in 0..dy.nrows() {
        for c in 0..d {
            let r = arg[s * d + c];
            if r != usize::MAX {
                dx[(r, c)] += dy[(s, c)];
            }
        }
    }
    dx
}

/// Repeats row `s` of `pooled` over the rows of segment `s`.
pub fn broadcast_segments(pooled: &Array2<f64>, offsets: &[usize]) -> Array2<f64> {
    let n = offsets.last().copied().unwrap_or(0);
    let mut out = Array2::zeros((n, pooled.ncols()));
    for s in 0..pooled.nrows() {
        for r in offsets[s]..offsets[s + 1] {
            out.row_mut(r).assign(&pooled.row(s));
        }
    }
    out
}

/// Sums rows of each segment (adjoint of [`broadcast_segments`]).
pub fn sum_segments(x: &Array2<f64>, offsets: &[usize]) -> Array2<f64> {
    let b = offsets.len().saturating_sub(1);
    let mut out = Array2::zeros((b, x.ncols()));
    for s in 0..b {
        if offsets[s + 1] > offsets[s] {
            out.row_mut(s).assign(&x.slice(s![offsets[s]..offsets[s + 1], ..]).sum_axis(Axis(0)));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(batch_norm: bool) -> (Mlp, Vec<f64>, Vec<f64>) {
        let mut arena = Arena::default();
        let mlp = Mlp::new(&mut arena, 3, &[5, 4, 2], batch_norm, true);
        let mut p = vec![0.0; arena.params];
        let mut s = vec![0.0; arena.stats];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        mlp.init(&mut p, &mut s, &mut rng);
        for v in p.iter_mut() {
            *v += 0.1 * rng.random::<f64>();
        }
        (mlp, p, s)
    }

    fn input() -> Array2<f64> {
        Array2::from_shape_vec((4, 3), vec![0.3, -1.2, 0.5, 1.1, 0.2, -0.7, -0.4, 0.9, 1.3, 0.8, -0.6, 0.1]).unwrap()
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        for bn in [false, true] {
            let (mlp, p, s) = toy(bn);
            let x = input();
            let weights = Array2::from_shape_fn((4, 2), |(i, j)| 0.3 + 0.1 * i as f64 - 0.2 * j as f64);
            let loss = |p: &[f64]| (mlp.forward(p, &s, x.clone(), Mode::Train).last() * &weights).sum();
            let cache = mlp.forward(&p, &s, x.clone(), Mode::Train);
            let mut g = vec![0.0; p.len()];
            mlp.backward(&p, &cache, weights.clone(), &[], &mut g);
            for i in 0..p.len() {
                let (mut a, mut b) = (p.clone(), p.clone());
                a[i] += 1e-5;
                b[i] -= 1e-5;
                let fd = (loss(&a) - loss(&b)) / 2e-5;
                assert!((fd - g[i]).abs() <= 1e-6 + 1e-4 * fd.abs(), "bn={bn} param {i}: fd {fd} analytic {}", g[i]);
            }
        }
    }

    #[test]
    fn pooling_selects_segment_maxima() {
        let x = Array2::from_shape_vec((3, 2), vec![1.0, 5.0, 3.0, 2.0, -1.0, 0.0]).unwrap();
        let (y, arg) = max_pool(&x, &[0, 2, 2, 3]);
        assert_eq!(y.row(0).to_vec(), vec![3.0, 5.0]);
        assert_eq!(y.row(1).to_vec(), vec![0.0, 0.0]);
        assert_eq!(y.row(2).to_vec(), vec![-1.0, 0.0]);
        assert_eq!(arg, vec![1, 0, usize::MAX, usize::MAX, 2, 2]);
        let dx = max_pool_backward(&Array2::ones((3, 2)), &arg, 3);
        assert_eq!(dx.row(0).to_vec(), vec![0.0, 1.0]);
        assert_eq!(dx.row(1).to_vec(), vec![1.0, 0.0]);
    }
}
