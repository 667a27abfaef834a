//! The optimization loop.

pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod densify;
pub mod evaluate;
pub mod init;
pub mod objective;
pub mod synthetic;

use log::{debug, info, warn};
use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Plane;
use crate::interp::{enrich_point_cloud, interpolate_sequence};
use crate::io::{split_views, SceneData};
use crate::losses::{align_pseudo_depth, LossReport};
use crate::medium::{FrameWeight, MediumNet, DEFAULT_LAYERS, SHALLOW_LAYERS};
use crate::render::render;
use crate::scene::{CameraView, GaussianCloud, GaussianParam, NEAR_PLANE};

pub use adam::Adam;
pub use checkpoint::{checkpoint_name, Checkpoint};
pub use config::{LearningRates, TrainConfig};
pub use densify::{densify_and_prune, DensifyOutcome, DensifyParams, DensifyStats};
pub use evaluate::{evaluate, evaluate_to_dir, EvalReport, ViewMetrics};
pub use init::init_from_points;
pub use objective::{evaluate_view, ViewEvaluation};
pub use synthetic::{make_synthetic_scene, write_synthetic, SyntheticScene};

pub const GAUSSIAN_EPS: f64 = 1e-15;
pub const DEFAULT_EPS: f64 = 1e-8;
/// Pixels must be this opaque in the render to take part in depth alignment.
pub const ALIGN_MIN_ALPHA: f64 = 0.05;

/// `1.1` times the largest camera distance from the mean camera centre.
pub fn scene_extent(views: &[CameraView]) -> f64 {
    if views.is_empty() {
        return 1.0;
    }
    let centres: Vec<Vector3<f64>> = views.iter().map(|v| v.pose.center()).collect();
    let mean = centres.iter().sum::<Vector3<f64>>() / centres.len() as f64;
    let r = centres.iter().map(|c| (c - mean).norm()).fold(0.0, f64::max);
    if r > 1e-9 {
        1.1 * r
    } else {
        1.0
    }
}

/// Exponential interpolation from `start` to `end` over `total` steps.
pub fn exp_decay(start: f64, end: f64, step: usize, total: usize) -> f64 {
    if start <= 0.0 || end <= 0.0 {
        return start.max(0.0);
    }
    let t = if total == 0 { 1.0 } else { (step as f64 / total as f64).min(1.0) };
    (start.ln() * (1.0 - t) + end.ln() * t).exp()
}

/// Pseudo depth fitted affinely to the depths of sparse points seen by the view.
pub fn align_to_points(view: &CameraView, points: &[Vector3<f64>]) -> Option<Plane> {
    let pseudo = view.pseudo_depth.as_ref()?;
    let (w, h) = (view.width(), view.height());
    let mut z = Plane::filled(w, h, f64::INFINITY);
    let mut mask = Plane::new(w, h);
    let k = &view.intrinsics;
    for p in points {
        let c = view.pose.to_camera(p);
        if c.z <= NEAR_PLANE {
            continue;
        }
        let u = k.fx * c.x / c.z + k.cx;
        let v = k.fy * c.y / c.z + k.cy;
        if u < 0.0 || v < 0.0 || u >= w as f64 || v >= h as f64 {
            continue;
        }
        let i = v as usize * w + u as usize;
        // the nearest point is the visible one
        if c.z < z.data[i] {
            z.data[i] = c.z;
            mask.data[i] = 1.0;
        }
    }
    z.data.iter_mut().filter(|v| !v.is_finite()).for_each(|v| *v = 0.0);
    align_pseudo_depth(pseudo, &z, &mask).ok().map(|a| a.depth)
}

fn offset_rate(offset: usize, lr: &LearningRates, position: f64) -> f64 {
    const SCALE: usize = GaussianParam::LogScale as usize;
    const ROT: usize = GaussianParam::Rotation as usize;
    const OPACITY: usize = GaussianParam::Opacity as usize;
    const BACK: usize = GaussianParam::Backscatter as usize;
    const SH: usize = GaussianParam::Sh as usize;
    match offset {
        o if o < SCALE => position,
        o if o < ROT => lr.scale,
        o if o < OPACITY => lr.rotation,
        OPACITY => lr.opacity,
        o if o < SH => {
            debug_assert!(o >= BACK);
            lr.backscatter
        }
        o if o < SH + 3 => lr.sh_dc,
        _ => lr.sh_rest,
    }
}

/// Trainer state: parameters, optimizer moments and the view schedule.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub cloud: GaussianCloud,
    pub medium: MediumNet,
    /// Training views; interpolated ones follow the originals.
    pub views: Vec<CameraView>,
    pub test_views: Vec<CameraView>,
    pub frame_weights: Vec<FrameWeight>,
    /// Current depth target per training view.
    pub depth_targets: Vec<Option<Plane>>,
    pub iteration: usize,
    pub extent: f64,
    /// Sparse points before and after enrichment.
    pub points_initial: usize,
    pub points_enriched: usize,
    pub log: Vec<(usize, LossReport)>,
    gaussian_opt: Adam,
    medium_opt: Adam,
    gamma_opt: Vec<Adam>,
    stats: DensifyStats,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl Trainer {
    /// Trainer over prepared parameters and views. `views` with a weight
    /// handle must index into `frame_weights`.
    pub fn new(
        cloud: GaussianCloud,
        medium: MediumNet,
        views: Vec<CameraView>,
        test_views: Vec<CameraView>,
        frame_weights: Vec<FrameWeight>,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        if views.is_empty() {
            return Err(Error::Contract("no training views".into()));
        }
        if cloud.is_empty() {
            return Err(Error::Contract("empty Gaussian cloud".into()));
        }
        for v in &views {
            if let Some(h) = v.weight_handle {
                if h >= frame_weights.len() {
                    return Err(Error::Contract(format!("view {} has weight handle {h} out of range", v.id)));
                }
            }
        }
        let originals: Vec<CameraView> = views.iter().filter(|v| !v.is_interpolated).cloned().collect();
        let extent = scene_extent(if originals.is_empty() { &views } else { &originals });
        let depth_targets = views.iter().map(|v| v.pseudo_depth.clone()).collect();
        Ok(Self {
            gaussian_opt: Adam::new(cloud.len() * cloud.stride(), GAUSSIAN_EPS),
            medium_opt: Adam::new(medium.param_count(), DEFAULT_EPS),
            gamma_opt: vec![Adam::new(1, DEFAULT_EPS); frame_weights.len()],
            stats: DensifyStats::new(cloud.len()),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            order: Vec::new(),
            cursor: 0,
            points_initial: cloud.len(),
            points_enriched: cloud.len(),
            log: Vec::new(),
            iteration: 0,
            extent,
            depth_targets,
            config,
            cloud,
            medium,
            views,
            test_views,
            frame_weights,
        })
    }

    /// Split, interpolate, enrich and initialize from a loaded scene.
    pub fn from_scene(scene: &SceneData, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (train, test) = split_views(&scene.views, config.split_modulus);
        if train.is_empty() {
            return Err(Error::Contract("split leaves no training views".into()));
        }
        let mut train: Vec<CameraView> = train
            .into_iter()
            .map(|mut v| {
                if let Some(d) = align_to_points(&v, &scene.points) {
                    v.pseudo_depth = Some(d);
                }
                v
            })
            .collect();

        let (mut points, mut colours) = (scene.points.clone(), scene.colours.clone());
        let mut frame_weights = Vec::new();
        if config.ifi && train.len() >= 2 {
            let frames = interpolate_sequence(&train, config.interp_mode, Some(&scene.interp_dir()))?;
            (points, colours) = enrich_point_cloud(&points, &colours, &frames);
            for (k, f) in frames.iter().enumerate() {
                frame_weights.push(f.weight.clone());
                train.push(f.to_view(k));
            }
        }
        info!(
            "{} training views ({} interpolated), {} test views, {} -> {} points",
            train.len(),
            frame_weights.len(),
            test.len(),
            scene.points.len(),
            points.len()
        );

        let cloud = init_from_points(&points, &colours, config.sh_degree)?;
        let mut medium = MediumNet::new(
            if config.shallow_mlp { SHALLOW_LAYERS } else { DEFAULT_LAYERS },
            config.pe_freqs,
            config.seed,
        );
        medium.decouple = config.decouple;
        medium.backscatter_mode = config.backscatter_mode;
        let extent = scene_extent(&train);
        medium.position_scale = extent;
        medium.depth_scale = typical_depth(&train, &points).unwrap_or(extent);

        let mut t = Self::new(cloud, medium, train, test, frame_weights, config)?;
        t.points_initial = scene.points.len();
        t.points_enriched = points.len();
        Ok(t)
    }

    pub fn interpolated_count(&self) -> usize {
        self.frame_weights.len()
    }

    /// Learning rate of the positions at the current iteration.
    pub fn position_lr(&self) -> f64 {
        let lr = &self.config.lr;
        exp_decay(lr.position, lr.position_final, self.iteration, self.config.iterations) * self.extent
    }

    fn next_view(&mut self) -> usize {
        if self.cursor >= self.order.len() {
            self.order = (0..self.views.len()).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let i = self.order[self.cursor];
        self.cursor += 1;
        i
    }

    /// Refit every training view's pseudo depth against the current render.
    pub fn realign_depths(&mut self) -> Result<()> {
        for (i, v) in self.views.iter().enumerate() {
            let Some(pseudo) = &v.pseudo_depth else { continue };
            let out = render(&self.cloud, &self.medium, v)?;
            let m = v.mask_or_ones();
            let mask = Plane {
                width: m.width,
                height: m.height,
                data: m
                    .data
                    .iter()
                    .zip(&out.alpha_acc.data)
                    .map(|(&k, &a)| if k > 0.5 && a > ALIGN_MIN_ALPHA { 1.0 } else { 0.0 })
                    .collect(),
            };
            match align_pseudo_depth(pseudo, &out.depth, &mask) {
                Ok(a) => self.depth_targets[i] = Some(a.depth),
                Err(e) => debug!("keeping previous depth target for {}: {e}", v.id),
            }
        }
        Ok(())
    }

    /// One optimization step on the next scheduled view.
    pub fn train_step(&mut self) -> Result<LossReport> {
        let it = self.iteration;
        let cfg = self.config.clone();
        if it > 0 && cfg.sh_increase_interval > 0 && it.is_multiple_of(cfg.sh_increase_interval) {
            self.cloud.active_sh_degree = (self.cloud.active_sh_degree + 1).min(self.cloud.sh_degree);
        }
        if it > 0 && cfg.realign_interval > 0 && it.is_multiple_of(cfg.realign_interval) {
            self.realign_depths()?;
        }

        let vi = self.next_view();
        let view = &self.views[vi];
        let eval = evaluate_view(
            &self.cloud,
            &self.medium,
            view,
            &self.frame_weights,
            self.depth_targets[vi].as_ref(),
            &cfg,
            true,
        )?;
        let grads = eval.grads.expect("gradients requested");
        let gamma = objective::view_gamma(view, &self.frame_weights, &cfg);
        let (w, h) = (view.width(), view.height());

        if cfg.train_gaussians {
            let stride = self.cloud.stride();
            let pos = self.position_lr();
            let rates: Vec<f64> = (0..stride).map(|o| offset_rate(o, &cfg.lr, pos)).collect();
            let mut flat = self.cloud.to_flat();
            self.gaussian_opt.update(&mut flat, &grads.gaussians, |i| rates[i % stride]);
            self.cloud.set_flat(&flat);
            if cfg.lr.rotation > 0.0 {
                self.cloud.gaussians.iter_mut().for_each(|g| g.normalize_rotation());
            }
        }
        if cfg.train_medium && !self.medium.identity {
            let mut flat = self.medium.params_flat();
            self.medium_opt.update(&mut flat, &grads.medium, |_| cfg.lr.medium);
            self.medium.set_params_flat(&flat);
        }
        if let Some((hd, _)) = gamma {
            let mut p = [self.frame_weights[hd].gamma_logparam];
            self.gamma_opt[hd].update(&mut p, &[grads.frame_weights[hd]], |_| cfg.lr.gamma);
            self.frame_weights[hd].gamma_logparam = p[0];
        }

        let done = it + 1;
        if cfg.densify && cfg.train_gaussians && done <= cfg.densify_until {
            self.stats.accumulate(&grads, w, h);
            if done > cfg.densify_from && cfg.densify_interval > 0 && done.is_multiple_of(cfg.densify_interval) {
                self.densify();
            }
        }

        self.iteration = done;
        self.log.push((it, eval.report));
        Ok(eval.report)
    }

    fn densify(&mut self) {
        let params = DensifyParams {
            grad_threshold: self.config.densify_grad_threshold,
            prune_opacity: self.config.prune_opacity,
            clone_max_scale: self.config.percent_dense * self.extent,
        };
        let out = densify_and_prune(&self.cloud, &self.stats, &params, &mut self.rng);
        if out.cloned + out.split + out.pruned > 0 {
            debug!(
                "iteration {}: cloned {}, split {}, pruned {} -> {} Gaussians",
                self.iteration + 1,
                out.cloned,
                out.split,
                out.pruned,
                out.cloud.len()
            );
        }
        self.gaussian_opt.remap(&out.source, self.cloud.stride());
        self.cloud = out.cloud;
        self.stats.reset(self.cloud.len());
    }

    /// Train until `config.iterations`.
    pub fn run(&mut self) -> Result<()> {
        while self.iteration < self.config.iterations {
            self.train_step()?;
        }
        Ok(())
    }

    /// Mean total loss over every training view, without updating anything.
    pub fn training_loss(&self) -> Result<f64> {
        let mut sum = 0.0;
        for (i, v) in self.views.iter().enumerate() {
            let e = evaluate_view(
                &self.cloud,
                &self.medium,
                v,
                &self.frame_weights,
                self.depth_targets[i].as_ref(),
                &self.config,
                false,
            )?;
            sum += e.report.total;
        }
        Ok(sum / self.views.len() as f64)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            iteration: self.iteration as u64,
            config: self.config.clone(),
            cloud: self.cloud.clone(),
            medium: self.medium.clone(),
            frame_weights: self.frame_weights.clone(),
        }
    }

    pub fn evaluate_test(&self) -> Result<EvalReport> {
        if self.test_views.is_empty() {
            warn!("no held-out views to evaluate");
        }
        evaluate(&self.cloud, &self.medium, &self.test_views)
    }
}

/// 95th percentile of camera-space depth over the points each view sees in front.
fn typical_depth(views: &[CameraView], points: &[Vector3<f64>]) -> Option<f64> {
    let mut depths: Vec<f64> = views
        .iter()
        .filter(|v| !v.is_interpolated)
        .flat_map(|v| points.iter().map(|p| v.pose.to_camera(p).z))
        .filter(|&z| z > NEAR_PLANE)
        .collect();
    if depths.is_empty() {
        return None;
    }
    let k = ((0.95 * depths.len() as f64).ceil() as usize).clamp(1, depths.len()) - 1;
    let (_, z, _) = depths.select_nth_unstable_by(k, f64::total_cmp);
    Some(*z)
}

#[cfg(test)]
mod tests;
