//! Browser demo: generate a scene, push its anchor trajectories through the
//! forward noising process, and score the resulting mode set.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use diver_core::diffusion::{forward_noise, make_schedule, NoiseSchedule, ScheduleKind};
use diver_core::metrics::diversity_profile;
use diver_core::plot::render_svg;
use diver_core::rewards::total_reward;
use diver_core::rng::rng_for;
use diver_core::scene::{generate_corpus, Scene, SceneConfig, Template};
use diver_core::trajectory::{denormalize, normalize};
use diver_core::{Error, Result, TrajectorySet};

/// Scenes generated per corpus; anchors are clustered over all of them.
const CORPUS: usize = 12;
const MODES: usize = 6;
const SCALE: f64 = 30.0;

/// Reward breakdown of the displayed modes.
#[derive(Debug, Clone, Serialize)]
pub struct Scores {
    pub r_div: f64,
    pub r_safe: Vec<f64>,
    pub totals: Vec<f64>,
    pub best_mode: usize,
    /// Div at each waypoint.
    pub div: Vec<f64>,
}

#[wasm_bindgen]
pub struct Demo {
    scene: Scene,
    modes: TrajectorySet,
    schedule: NoiseSchedule,
}

impl Demo {
    pub fn create(seed: u64, template: &str) -> Result<Self> {
        let template: Template = template.parse()?;
        let mut corpus = generate_corpus(CORPUS, seed, &[template], MODES, &SceneConfig::default())?;
        let scene = corpus.swap_remove(0);
        let modes = TrajectorySet::new(scene.id.clone(), scene.anchors.clone())?;
        Ok(Self { scene, modes, schedule: make_schedule(50, ScheduleKind::Linear)? })
    }

    /// Replaces the displayed modes with the anchors noised to `step`.
    pub fn noise_anchors(&mut self, step: usize, seed: u64) -> Result<()> {
        let mut rng = rng_for(seed, 0, step as u64);
        let modes = self
            .scene
            .anchors
            .iter()
            .map(|a| {
                let noised = forward_noise(&normalize(a, SCALE)?, &self.schedule, step, &mut rng)?;
                denormalize(&noised.values, SCALE)
            })
            .collect::<Result<Vec<_>>>()?;
        self.modes = TrajectorySet::new(self.scene.id.clone(), modes)?;
        Ok(())
    }

    pub fn scores(&self, lambda_safe: f64, d_thresh: f64) -> Result<Scores> {
        if !(d_thresh.is_finite() && d_thresh >= 0.0 && lambda_safe.is_finite()) {
            return Err(Error::Config(format!("bad weights: lambda_safe {lambda_safe}, d_thresh {d_thresh}")));
        }
        let r = total_reward(&self.modes, &self.scene.safety, lambda_safe, d_thresh)?;
        Ok(Scores {
            r_div: r.r_div,
            best_mode: r.best_mode(),
            r_safe: r.r_safe,
            totals: r.totals,
            div: diversity_profile(&self.modes)?,
        })
    }
}

fn js(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
impl Demo {
    /// New scene of `template` (straight, left_turn, right_turn, obstacle, merge).
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, template: &str) -> std::result::Result<Demo, JsError> {
        Self::create(seed.into(), template).map_err(js)
    }

    #[wasm_bindgen(js_name = sceneId)]
    pub fn scene_id(&self) -> String {
        self.scene.id.clone()
    }

    #[wasm_bindgen(js_name = numSteps)]
    pub fn num_steps(&self) -> usize {
        self.schedule.num_steps()
    }

    /// Cumulative signal fraction at `step`.
    #[wasm_bindgen(js_name = alphaBar)]
    pub fn alpha_bar(&self, step: usize) -> f64 {
        self.schedule.alpha_bar(step.min(self.schedule.num_steps() - 1))
    }

    pub fn svg(&self, d_thresh: f64) -> String {
        render_svg(&self.scene, Some(&self.modes), d_thresh)
    }

    /// Shows the clean anchors again.
    pub fn reset(&mut self) {
        self.modes = TrajectorySet::new(self.scene.id.clone(), self.scene.anchors.clone()).expect("anchors form a valid set");
    }

    pub fn noise(&mut self, step: usize, seed: u32) -> std::result::Result<(), JsError> {
        self.noise_anchors(step, seed.into()).map_err(js)
    }

    /// Reward breakdown as JSON.
    pub fn score(&self, lambda_safe: f64, d_thresh: f64) -> std::result::Result<String, JsError> {
        let s = self.scores(lambda_safe, d_thresh).map_err(js)?;
        serde_json::to_string(&s).map_err(js)
    }
}
