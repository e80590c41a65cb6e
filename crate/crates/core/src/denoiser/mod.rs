//! The conditional denoiser: trajectory encoder, grid pooling along the noisy
//! trajectory, a three-stage cross-attention decoder over agents, map and the
//! mode's anchor, and a regression head. Backpropagation is written by hand.

pub mod embed;
pub mod nn;

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::diffusion::CleanPredictor;
use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};
use crate::scene::Scene;
use crate::trajectory::{cumulative_sum, Trajectory};

pub use embed::{sine_embed, sine_embed_2d, FeatureGrid, SceneInputs};
use embed::{row_matrix, waypoint_embedding, AGENT_FEATURES, GRID_CHANNELS, MAP_FEATURES};
pub use nn::{Param, ParamStore};
use nn::{softmax_rows, softmax_rows_backward, AttnCache, Attention, Init, KeyValues, LayerNorm, Linear, LnCache, Mlp, MlpCache};

/// Network shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub d: usize,
    pub heads: usize,
    pub horizon: usize,
    pub modes: usize,
    /// Meters per normalized unit.
    pub scale: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self { d: 64, heads: 4, horizon: 6, modes: 6, scale: 30.0 }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d % 4 != 0 {
            return Err(Error::InvalidDim(self.d, "embedding dimension must be a positive multiple of 4"));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::InvalidDim(self.d, "embedding dimension must divide evenly into heads"));
        }
        if self.horizon == 0 || self.modes == 0 {
            return Err(Error::Config("horizon and modes must be positive".into()));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::InvalidScale(self.scale));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Layers {
    pe: Linear,
    enc_attn: Attention,
    enc_ln: LayerNorm,
    enc_ffn: Mlp,
    time: Linear,
    grid: Linear,
    pool_alpha: Linear,
    pool_mlp: Mlp,
    agent_embed: Linear,
    map_embed: Linear,
    nav_embed: Linear,
    queries: usize,
    dec_agent: Attention,
    dec_map: Attention,
    dec_nav: Attention,
    out_ln: LayerNorm,
    out_ffn: Mlp,
    head: Mlp,
}

impl Layers {
    fn build<R: rand::Rng>(cfg: &DenoiserConfig, store: &mut ParamStore, rng: &mut R) -> Self {
        let (d, h, t) = (cfg.d, cfg.heads, cfg.horizon);
        Self {
            pe: Linear::new(store, "enc.pe", d, d, rng),
            enc_attn: Attention::new(store, "enc.attn", d, h, rng),
            enc_ln: LayerNorm::new(store, "enc.ln", d, rng),
            enc_ffn: Mlp::new(store, "enc.ffn", d, 2 * d, d, rng),
            time: Linear::new(store, "time", d, d, rng),
            grid: Linear::new(store, "pool.grid", GRID_CHANNELS, d, rng),
            pool_alpha: Linear::new(store, "pool.alpha", d, t, rng),
            pool_mlp: Mlp::new(store, "pool.mlp", d, 2 * d, d, rng),
            agent_embed: Linear::new(store, "tokens.agent", AGENT_FEATURES, d, rng),
            map_embed: Linear::new(store, "tokens.map", MAP_FEATURES, d, rng),
            nav_embed: Linear::new(store, "tokens.nav", d, d, rng),
            queries: store.add("dec.queries", cfg.modes, d, Init::Uniform(1.0), rng),
            dec_agent: Attention::new(store, "dec.agent", d, h, rng),
            dec_map: Attention::new(store, "dec.map", d, h, rng),
            dec_nav: Attention::new(store, "dec.nav", d, h, rng),
            out_ln: LayerNorm::new(store, "dec.out_ln", d, rng),
            out_ffn: Mlp::new(store, "dec.out_ffn", d, 2 * d, d, rng),
            head: Mlp::new(store, "head", d, d, 2 * t, rng),
        }
    }
}

/// Parameter-dependent scene memory: projected agent, map and anchor tokens.
#[derive(Debug, Clone)]
pub struct SceneContext {
    version: u64,
    inputs_agent: Array2<f64>,
    inputs_map: Array2<f64>,
    agent_kv: KeyValues,
    map_kv: Option<KeyValues>,
    nav_inputs: Vec<Array2<f64>>,
    nav_kv: Vec<KeyValues>,
    grid: FeatureGrid,
}

/// Forward-pass notes surfaced for diagnostics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ForwardNotes {
    /// Waypoints whose grid sample was clamped onto the border.
    pub clamped_samples: usize,
    /// Decoder stages skipped because their memory was empty.
    pub skipped_blocks: usize,
}

#[derive(Debug, Clone)]
struct EncCache {
    emb: Array2<f64>,
    h0: Array2<f64>,
    self_kv: KeyValues,
    self_attn: AttnCache,
    ln: LnCache,
    ffn: MlpCache,
}

#[derive(Debug, Clone)]
struct PoolCache {
    f_inst: Array2<f64>,
    grid_in: Array2<f64>,
    grid_feat: Array2<f64>,
    alpha: Array2<f64>,
    mlp: MlpCache,
}

#[derive(Debug, Clone)]
struct DecCache {
    agent: AttnCache,
    map: Option<AttnCache>,
    nav: AttnCache,
    out_ln: LnCache,
    out_ffn: MlpCache,
}

#[derive(Debug, Clone)]
struct ModeCache {
    mode: usize,
    enc: EncCache,
    time_in: Array2<f64>,
    pool: PoolCache,
    dec: DecCache,
    head: MlpCache,
}

/// Activations of one scene's forward pass, needed by [`Denoiser::backward`].
#[derive(Debug, Clone)]
pub struct SceneCache {
    version: u64,
    modes: Vec<ModeCache>,
}

/// Clean-trajectory predictions for one scene.
#[derive(Debug, Clone)]
pub struct SceneOutput {
    /// One flattened normalized prediction per mode.
    pub flat: Vec<Vec<f64>>,
    pub notes: ForwardNotes,
    /// Per-mode pooling weights over waypoints.
    pub alphas: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    pub store: ParamStore,
    layers: Layers,
}

impl Denoiser {
    /// Fresh network; weights depend only on `(cfg, seed)`.
    pub fn new(cfg: DenoiserConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_for(seed, stream::INIT, 0);
        let mut store = ParamStore::default();
        let layers = Layers::build(&cfg, &mut store, &mut rng);
        Ok(Self { cfg, store, layers })
    }

    pub fn scene_inputs(&self, scene: &Scene) -> Result<SceneInputs> {
        SceneInputs::new(scene, self.cfg.modes, self.cfg.d)
    }

    /// Projects the scene memories with the current parameters.
    pub fn context(&self, inputs: &SceneInputs) -> SceneContext {
        let st = &self.store;
        let l = &self.layers;
        let agent_tokens = l.agent_embed.forward(st, &inputs.agent_features);
        let agent_kv = l.dec_agent.project(st, &agent_tokens + &inputs.agent_pos, agent_tokens.clone());
        let map_tokens = l.map_embed.forward(st, &inputs.map_features);
        let map_kv = (map_tokens.nrows() > 0)
            .then(|| l.dec_map.project(st, &map_tokens + &inputs.map_pos, map_tokens.clone()));
        let nav_kv = inputs
            .nav_inputs
            .iter()
            .map(|x| {
                let tok = l.nav_embed.forward(st, x);
                l.dec_nav.project(st, tok.clone(), tok)
            })
            .collect();
        SceneContext {
            version: st.version(),
            inputs_agent: inputs.agent_features.clone(),
            inputs_map: inputs.map_features.clone(),
            agent_kv,
            map_kv,
            nav_inputs: inputs.nav_inputs.clone(),
            nav_kv,
            grid: inputs.grid.clone(),
        }
    }

    /// Predicts clean trajectories for every mode from noisy normalized inputs
    /// at diffusion `step`.
    pub fn forward(&self, ctx: &SceneContext, noisy: &[Trajectory], step: usize) -> Result<(SceneOutput, SceneCache)> {
        if ctx.version != self.store.version() {
            return Err(Error::StaleCache);
        }
        if noisy.len() != self.cfg.modes || noisy.iter().any(|t| t.len() != self.cfg.horizon) {
            return Err(Error::InvalidBatch(format!(
                "expected {} modes of {} waypoints",
                self.cfg.modes, self.cfg.horizon
            )));
        }
        let mut notes = ForwardNotes::default();
        let mut flat = Vec::with_capacity(noisy.len());
        let mut alphas = Vec::with_capacity(noisy.len());
        let mut modes = Vec::with_capacity(noisy.len());
        for (m, x) in noisy.iter().enumerate() {
            let (y, cache) = self.forward_mode(ctx, m, x, step, &mut notes)?;
            flat.push(y.iter().copied().collect());
            alphas.push(cache.pool.alpha.iter().copied().collect());
            modes.push(cache);
        }
        Ok((SceneOutput { flat, notes, alphas }, SceneCache { version: ctx.version, modes }))
    }

    fn forward_mode(
        &self,
        ctx: &SceneContext,
        m: usize,
        noisy: &Trajectory,
        step: usize,
        notes: &mut ForwardNotes,
    ) -> Result<(Array2<f64>, ModeCache)> {
        let (f_tau, enc) = self.encode(noisy);
        let time_in = row_matrix(sine_embed(&[step as f64], self.cfg.d)?.remove(0));
        let f_inst = &f_tau + &self.layers.time.forward(&self.store, &time_in);
        let (f_traj, pool) = self.pool(noisy, f_inst, &ctx.grid, notes)?;
        let (f_out, dec) = self.decode(ctx, m, &f_traj, notes);
        let (y, head) = self.layers.head.forward(&self.store, &f_out);
        Ok((y, ModeCache { mode: m, enc, time_in, pool, dec, head }))
    }

    fn encode(&self, noisy: &Trajectory) -> (Array2<f64>, EncCache) {
        let (st, l) = (&self.store, &self.layers);
        let emb = waypoint_embedding(noisy, self.cfg.scale, self.cfg.d);
        let h0 = l.pe.forward(st, &emb);
        let self_kv = l.enc_attn.project(st, h0.clone(), h0.clone());
        let (a, self_attn) = l.enc_attn.attend(st, &h0, &self_kv);
        let h1 = &h0 + &a;
        let (n1, ln) = l.enc_ln.forward(st, &h1);
        let (f1, ffn) = l.enc_ffn.forward(st, &n1);
        let h2 = &h1 + &f1;
        let f_tau = h2.mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0));
        (f_tau, EncCache { emb, h0, self_kv, self_attn, ln, ffn })
    }

    fn pool(
        &self,
        noisy: &Trajectory,
        f_inst: Array2<f64>,
        grid: &FeatureGrid,
        notes: &mut ForwardNotes,
    ) -> Result<(Array2<f64>, PoolCache)> {
        let (st, l) = (&self.store, &self.layers);
        let meters = noisy.map(|p| p * self.cfg.scale);
        let absolute = cumulative_sum(&meters.displacements())?;
        let mut grid_in = Array2::zeros((noisy.len(), GRID_CHANNELS));
        for (k, p) in absolute.points().iter().enumerate() {
            let (v, clamped) = grid.sample(*p);
            notes.clamped_samples += usize::from(clamped);
            grid_in.row_mut(k).assign(&ndarray::ArrayView1::from(&v));
        }
        let grid_feat = l.grid.forward(st, &grid_in);
        let alpha = softmax_rows(&l.pool_alpha.forward(st, &f_inst));
        let pooled = alpha.dot(&grid_feat);
        let (pm, mlp) = l.pool_mlp.forward(st, &pooled);
        let f_traj = &pm + &f_inst;
        Ok((f_traj, PoolCache { f_inst, grid_in, grid_feat, alpha, mlp }))
    }

    fn decode(&self, ctx: &SceneContext, m: usize, f_traj: &Array2<f64>, notes: &mut ForwardNotes) -> (Array2<f64>, DecCache) {
        let (st, l) = (&self.store, &self.layers);
        let q = st.value(l.queries).slice(s![m..m + 1, ..]).to_owned();
        let q0 = &q + f_traj;
        let (aa, agent) = l.dec_agent.attend(st, &q0, &ctx.agent_kv);
        let f_agent = &q0 + &aa;
        let (f_map, map) = match &ctx.map_kv {
            Some(kv) => {
                let q1 = &q + &f_agent;
                let (am, c) = l.dec_map.attend(st, &q1, kv);
                (&q1 + &am, Some(c))
            }
            None => {
                notes.skipped_blocks += 1;
                (f_agent, None)
            }
        };
        let (an, nav) = l.dec_nav.attend(st, &f_map, &ctx.nav_kv[m]);
        let f_nav = &f_map + &an;
        let (ln, out_ln) = l.out_ln.forward(st, &f_nav);
        let (f_out, out_ffn) = l.out_ffn.forward(st, &(&ln + &f_nav));
        (f_out, DecCache { agent, map, nav, out_ln, out_ffn })
    }

    /// Mode feature of a (noisy, normalized) trajectory.
    pub fn encode_trajectory(&self, noisy: &Trajectory) -> Vec<f64> {
        self.encode(noisy).0.iter().copied().collect()
    }

    /// Grid-pooled trajectory feature and the pooling weights.
    pub fn traj_pool(&self, noisy: &Trajectory, inst_feature: &[f64], grid: &FeatureGrid) -> Result<(Vec<f64>, Vec<f64>, ForwardNotes)> {
        let mut notes = ForwardNotes::default();
        let (f, c) = self.pool(noisy, row_matrix(inst_feature.to_vec()), grid, &mut notes)?;
        Ok((f.iter().copied().collect(), c.alpha.iter().copied().collect(), notes))
    }

    /// Pooling MLP applied to `v` (the pooled term before the residual).
    pub fn pool_mlp(&self, v: &[f64]) -> Vec<f64> {
        self.layers.pool_mlp.forward(&self.store, &row_matrix(v.to_vec())).0.iter().copied().collect()
    }

    /// Decoder output for mode `m`.
    pub fn decode_mode(&self, ctx: &SceneContext, m: usize, f_traj: &[f64]) -> (Vec<f64>, ForwardNotes) {
        let mut notes = ForwardNotes::default();
        let (f, _) = self.decode(ctx, m, &row_matrix(f_traj.to_vec()), &mut notes);
        (f.iter().copied().collect(), notes)
    }

    /// Normalized clean-trajectory estimate from a decoder output.
    pub fn regress_head(&self, f_out: &[f64], dt: f64) -> Trajectory {
        let (y, _) = self.layers.head.forward(&self.store, &row_matrix(f_out.to_vec()));
        Trajectory::from_flat_unchecked(y.as_slice().expect("contiguous"), dt)
    }

    /// Gradient of `sum(w * head(f_out))` with respect to `f_out`.
    pub fn regress_head_input_grad(&self, f_out: &[f64], w: &[f64]) -> Vec<f64> {
        let (_, cache) = self.layers.head.forward(&self.store, &row_matrix(f_out.to_vec()));
        let mut scratch = self.store.clone();
        self.layers.head.backward(&mut scratch, &cache, &row_matrix(w.to_vec())).iter().copied().collect()
    }

    /// Accumulates parameter gradients for upstream gradients `d_out` (one
    /// flattened row per mode) into the store's gradient buffers.
    pub fn backward(&mut self, ctx: &SceneContext, cache: &SceneCache, d_out: &[Vec<f64>]) -> Result<()> {
        if cache.version != self.store.version() || ctx.version != self.store.version() {
            return Err(Error::StaleCache);
        }
        if d_out.len() != cache.modes.len() || d_out.iter().any(|g| g.len() != 2 * self.cfg.horizon) {
            return Err(Error::InvalidBatch("upstream gradient shape does not match the forward pass".into()));
        }
        let l = self.layers;
        let st = &mut self.store;
        let d = self.cfg.d;
        let mut dk_agent = Array2::zeros(ctx.agent_kv.k.raw_dim());
        let mut dv_agent = Array2::zeros(ctx.agent_kv.v.raw_dim());
        let (mut dk_map, mut dv_map) = match &ctx.map_kv {
            Some(kv) => (Array2::zeros(kv.k.raw_dim()), Array2::zeros(kv.v.raw_dim())),
            None => (Array2::zeros((0, d)), Array2::zeros((0, d))),
        };
        let mut dq_all = Array2::<f64>::zeros((self.cfg.modes, d));

        for (mc, g) in cache.modes.iter().zip(d_out) {
            let m = mc.mode;
            let dy = row_matrix(g.clone());
            let df_out = l.head.backward(st, &mc.head, &dy);
            let du = l.out_ffn.backward(st, &mc.dec.out_ffn, &df_out);
            let df_nav = &du + &l.out_ln.backward(st, &mc.dec.out_ln, &du);

            let nav_kv = &ctx.nav_kv[m];
            let mut dk_nav = Array2::zeros(nav_kv.k.raw_dim());
            let mut dv_nav = Array2::zeros(nav_kv.v.raw_dim());
            let df_map = &df_nav + &l.dec_nav.attend_backward(st, &mc.dec.nav, nav_kv, &df_nav, &mut dk_nav, &mut dv_nav);
            let (dkn, dvn) = l.dec_nav.project_backward(st, nav_kv, &dk_nav, &dv_nav);
            l.nav_embed.backward(st, &ctx.nav_inputs[m], &(dkn + dvn));

            let (df_agent, dq_map) = match (&mc.dec.map, &ctx.map_kv) {
                (Some(c), Some(kv)) => {
                    let dq1 = &df_map + &l.dec_map.attend_backward(st, c, kv, &df_map, &mut dk_map, &mut dv_map);
                    (dq1.clone(), dq1)
                }
                _ => (df_map, Array2::zeros((1, d))),
            };
            let dq0 = &df_agent
                + &l.dec_agent.attend_backward(st, &mc.dec.agent, &ctx.agent_kv, &df_agent, &mut dk_agent, &mut dv_agent);
            {
                let mut row = dq_all.slice_mut(s![m..m + 1, ..]);
                row += &dq0;
                row += &dq_map;
            }
            let df_traj = dq0;

            // Pooling.
            let mut df_inst = df_traj.clone();
            let dpooled = l.pool_mlp.backward(st, &mc.pool.mlp, &df_traj);
            let dalpha = dpooled.dot(&mc.pool.grid_feat.t());
            let dgrid_feat = mc.pool.alpha.t().dot(&dpooled);
            l.grid.backward(st, &mc.pool.grid_in, &dgrid_feat);
            let dlogits = softmax_rows_backward(&mc.pool.alpha, &dalpha);
            df_inst += &l.pool_alpha.backward(st, &mc.pool.f_inst, &dlogits);

            // Encoder.
            l.time.backward(st, &mc.time_in, &df_inst);
            let enc = &mc.enc;
            let t = enc.h0.nrows() as f64;
            let dh2 = Array2::from_shape_fn(enc.h0.raw_dim(), |(_, j)| df_inst[[0, j]] / t);
            let dn1 = l.enc_ffn.backward(st, &enc.ffn, &dh2);
            let dh1 = &dh2 + &l.enc_ln.backward(st, &enc.ln, &dn1);
            let mut dk_self = Array2::zeros(enc.self_kv.k.raw_dim());
            let mut dv_self = Array2::zeros(enc.self_kv.v.raw_dim());
            let dxq = l.enc_attn.attend_backward(st, &enc.self_attn, &enc.self_kv, &dh1, &mut dk_self, &mut dv_self);
            let (dks, dvs) = l.enc_attn.project_backward(st, &enc.self_kv, &dk_self, &dv_self);
            let dh0 = dh1 + dxq + dks + dvs;
            l.pe.backward(st, &enc.emb, &dh0);
        }

        *st.grad_mut(l.queries) += &dq_all;
        let (dka, dva) = l.dec_agent.project_backward(st, &ctx.agent_kv, &dk_agent, &dv_agent);
        l.agent_embed.backward(st, &ctx.inputs_agent, &(dka + dva));
        if let Some(kv) = &ctx.map_kv {
            let (dkm, dvm) = l.dec_map.project_backward(st, kv, &dk_map, &dv_map);
            l.map_embed.backward(st, &ctx.inputs_map, &(dkm + dvm));
        }
        Ok(())
    }

    /// Overwrites parameter values, matching tensors by position, name and
    /// shape.
    pub fn load_values(&mut self, values: &[(String, Array2<f64>)]) -> Result<()> {
        let params = self.store.params_mut();
        if values.len() != params.len() {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint has {} tensors, network has {}",
                values.len(),
                params.len()
            )));
        }
        for (p, (name, v)) in params.iter_mut().zip(values) {
            if &p.name != name || p.value.dim() != v.dim() {
                return Err(Error::ConfigMismatch(format!(
                    "tensor {name} {:?} does not match {} {:?}",
                    v.dim(),
                    p.name,
                    p.value.dim()
                )));
            }
            p.value.assign(v);
        }
        Ok(())
    }
}

/// Denoiser-backed predictor for the sampler.
impl CleanPredictor for Denoiser {
    type Context = SceneContext;

    fn context(&self, scene: &Scene) -> Result<SceneContext> {
        Ok(Denoiser::context(self, &self.scene_inputs(scene)?))
    }

    fn predict_clean(&self, ctx: &SceneContext, noisy: &[Trajectory], step: usize) -> Result<Vec<Trajectory>> {
        let (out, _) = self.forward(ctx, noisy, step)?;
        let dt = noisy[0].dt();
        Ok(out.flat.iter().map(|f| Trajectory::from_flat_unchecked(f, dt)).collect())
    }
}
