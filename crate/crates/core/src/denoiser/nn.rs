//! Minimal layers with hand-written reverse passes. Activations are row
//! matrices (one token per row); every layer owns ids into a [`ParamStore`].

use ndarray::{s, Array2, Axis};
use rand::Rng;

/// A learnable tensor and its gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Array2<f64>,
    pub grad: Array2<f64>,
}

/// Ordered collection of parameters. The version counter changes whenever
/// values are mutated, so stale forward caches can be detected.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    version: u64,
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Init {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, fan-in = rows.
    FanIn,
    /// Uniform in `[-a, a]`.
    Uniform(f64),
    Zeros,
    Ones,
}

impl ParamStore {
    pub(crate) fn add<R: Rng>(&mut self, name: &str, rows: usize, cols: usize, init: Init, rng: &mut R) -> usize {
        let value = match init {
            Init::FanIn => {
                let a = 1.0 / (rows as f64).sqrt();
                Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-a..a))
            }
            Init::Uniform(a) => Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-a..a)),
            Init::Zeros => Array2::zeros((rows, cols)),
            Init::Ones => Array2::ones((rows, cols)),
        };
        self.params.push(Param { name: name.to_string(), grad: Array2::zeros((rows, cols)), value });
        self.params.len() - 1
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn value(&self, id: usize) -> &Array2<f64> {
        &self.params[id].value
    }

    pub(crate) fn grad_mut(&mut self, id: usize) -> &mut Array2<f64> {
        &mut self.params[id].grad
    }

    /// Mutable access to every parameter; bumps the version.
    pub fn params_mut(&mut self) -> &mut [Param] {
        self.version += 1;
        &mut self.params
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn grad_norm(&self) -> f64 {
        self.params.iter().map(|p| p.grad.iter().map(|g| g * g).sum::<f64>()).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Linear {
    pub w: usize,
    pub b: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let w = store.add(&format!("{name}.w"), fan_in, fan_out, Init::FanIn, rng);
        let b = store.add(&format!("{name}.b"), 1, fan_out, Init::Zeros, rng);
        Self { w, b }
    }

    pub fn forward(&self, store: &ParamStore, x: &Array2<f64>) -> Array2<f64> {
        x.dot(store.value(self.w)) + store.value(self.b)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&self, store: &mut ParamStore, x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
        let dw = x.t().dot(dy);
        *store.grad_mut(self.w) += &dw;
        *store.grad_mut(self.b) += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        dy.dot(&store.value(self.w).t())
    }
}

pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct LayerNorm {
    pub g: usize,
    pub b: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct LnCache {
    xhat: Array2<f64>,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Self {
        let g = store.add(&format!("{name}.g"), 1, d, Init::Ones, rng);
        let b = store.add(&format!("{name}.b"), 1, d, Init::Zeros, rng);
        Self { g, b }
    }

    pub fn forward(&self, store: &ParamStore, x: &Array2<f64>) -> (Array2<f64>, LnCache) {
        let d = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let y = &xhat * store.value(self.g) + store.value(self.b);
        (y, LnCache { xhat, inv_std })
    }

    pub fn backward(&self, store: &mut ParamStore, cache: &LnCache, dy: &Array2<f64>) -> Array2<f64> {
        *store.grad_mut(self.g) += &(dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
        *store.grad_mut(self.b) += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dxhat = dy * store.value(self.g);
        let d = dy.ncols() as f64;
        let mut dx = Array2::zeros(dy.raw_dim());
        for (r, (mut out, (gh, xh))) in dx
            .rows_mut()
            .into_iter()
            .zip(dxhat.rows().into_iter().zip(cache.xhat.rows()))
            .enumerate()
        {
            let mean_g = gh.sum() / d;
            let mean_gx = gh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d;
            for ((o, &g), &x) in out.iter_mut().zip(gh).zip(xh) {
                *o = cache.inv_std[r] * (g - mean_g - x * mean_gx);
            }
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Linear, GELU, Linear.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

#[derive(Debug, Clone)]
pub(crate) struct MlpCache {
    x: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

impl Mlp {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            l1: Linear::new(store, &format!("{name}.fc1"), d_in, hidden, rng),
            l2: Linear::new(store, &format!("{name}.fc2"), hidden, d_out, rng),
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Array2<f64>) -> (Array2<f64>, MlpCache) {
        let pre = self.l1.forward(store, x);
        let act = pre.mapv(gelu);
        let y = self.l2.forward(store, &act);
        (y, MlpCache { x: x.clone(), pre, act })
    }

    pub fn backward(&self, store: &mut ParamStore, cache: &MlpCache, dy: &Array2<f64>) -> Array2<f64> {
        let dact = self.l2.backward(store, &cache.act, dy);
        let dpre = dact * &cache.pre.mapv(gelu_grad);
        self.l1.backward(store, &cache.x, &dpre)
    }
}

/// Row-wise softmax.
pub(crate) fn softmax_rows(s: &Array2<f64>) -> Array2<f64> {
    let mut p = s.clone();
    for mut row in p.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    p
}

/// Backward through a row-wise softmax given its output `p`.
pub(crate) fn softmax_rows_backward(p: &Array2<f64>, dp: &Array2<f64>) -> Array2<f64> {
    let mut ds = p * dp;
    for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
        let dot = row.sum();
        for (v, &pv) in row.iter_mut().zip(prow) {
            *v -= pv * dot;
        }
    }
    ds
}

/// Multi-head attention with separately projected keys and values, so the
/// key/value projection of a shared memory can be computed once and reused
/// by many queries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

/// Projected keys and values of a memory.
#[derive(Debug, Clone)]
pub(crate) struct KeyValues {
    pub keys_in: Array2<f64>,
    pub values_in: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct AttnCache {
    xq: Array2<f64>,
    q: Array2<f64>,
    pub probs: Vec<Array2<f64>>,
    concat: Array2<f64>,
}

impl Attention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, rng),
            heads,
        }
    }

    pub fn project(&self, store: &ParamStore, keys_in: Array2<f64>, values_in: Array2<f64>) -> KeyValues {
        let k = self.k.forward(store, &keys_in);
        let v = self.v.forward(store, &values_in);
        KeyValues { keys_in, values_in, k, v }
    }

    pub fn attend(&self, store: &ParamStore, xq: &Array2<f64>, kv: &KeyValues) -> (Array2<f64>, AttnCache) {
        let q = self.q.forward(store, xq);
        let d = q.ncols();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut concat = Array2::zeros((q.nrows(), d));
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let scores = q.slice(cols).dot(&kv.k.slice(cols).t()) * scale;
            let p = softmax_rows(&scores);
            concat.slice_mut(cols).assign(&p.dot(&kv.v.slice(cols)));
            probs.push(p);
        }
        let out = self.o.forward(store, &concat);
        (out, AttnCache { xq: xq.clone(), q, probs, concat })
    }

    /// Returns the query gradient; key/value gradients are added to `dk`, `dv`.
    pub fn attend_backward(
        &self,
        store: &mut ParamStore,
        cache: &AttnCache,
        kv: &KeyValues,
        dout: &Array2<f64>,
        dk: &mut Array2<f64>,
        dv: &mut Array2<f64>,
    ) -> Array2<f64> {
        let dconcat = self.o.backward(store, &cache.concat, dout);
        let d = cache.q.ncols();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Array2::zeros(cache.q.raw_dim());
        for (h, p) in cache.probs.iter().enumerate() {
            let cols = s![.., h * dh..(h + 1) * dh];
            let do_h = dconcat.slice(cols);
            let dp = do_h.dot(&kv.v.slice(cols).t());
            {
                let mut dv_h = dv.slice_mut(cols);
                dv_h += &p.t().dot(&do_h);
            }
            let ds = softmax_rows_backward(p, &dp) * scale;
            dq.slice_mut(cols).assign(&ds.dot(&kv.k.slice(cols)));
            let mut dk_h = dk.slice_mut(cols);
            dk_h += &ds.t().dot(&cache.q.slice(cols));
        }
        self.q.backward(store, &cache.xq, &dq)
    }

    /// Backward through the key/value projections; returns the gradients of
    /// the memory key and value inputs.
    pub fn project_backward(
        &self,
        store: &mut ParamStore,
        kv: &KeyValues,
        dk: &Array2<f64>,
        dv: &Array2<f64>,
    ) -> (Array2<f64>, Array2<f64>) {
        (self.k.backward(store, &kv.keys_in, dk), self.v.backward(store, &kv.values_in, dv))
    }
}
