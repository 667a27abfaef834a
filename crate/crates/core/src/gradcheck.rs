//! Finite-difference verification of the training gradients.
//!
//! [`random_scene`] builds a small view whose loss is differentiable around
//! its parameters: targets sit away from the render, pseudo depth lies
//! beyond every rendered depth, corrected colours stay inside the clamp and
//! transmittance never reaches the early-termination floor. [`check`] then
//! compares each analytic derivative of the full loss with a central
//! difference, skipping any probe whose interval crosses a kink.

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{Image, Plane};
use crate::medium::{FrameWeight, MediumNet, DEFAULT_LAYERS, DEFAULT_PE_FREQS};
use crate::render::{render, MIN_TRANSMITTANCE};
use crate::scene::sh::{eval_sh, rgb_to_dc};
use crate::scene::{logit, CameraView, Gaussian3D, GaussianCloud, Intrinsics, Pose};
use crate::train::{evaluate_view, TrainConfig};

pub const FD_STEP: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-3;
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradScene {
    pub cloud: GaussianCloud,
    pub medium: MediumNet,
    pub view: CameraView,
    pub frame_weights: Vec<FrameWeight>,
    pub depth_target: Plane,
    pub config: TrainConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Position,
    LogScale,
    Rotation,
    Opacity,
    Backscatter,
    ShDc,
    ShRest,
    Medium,
    FrameWeight,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 9] = [
        ParamGroup::Position,
        ParamGroup::LogScale,
        ParamGroup::Rotation,
        ParamGroup::Opacity,
        ParamGroup::Backscatter,
        ParamGroup::ShDc,
        ParamGroup::ShRest,
        ParamGroup::Medium,
        ParamGroup::FrameWeight,
    ];

    fn of_offset(o: usize) -> Self {
        match o {
            0..=2 => ParamGroup::Position,
            3..=5 => ParamGroup::LogScale,
            6..=9 => ParamGroup::Rotation,
            10 => ParamGroup::Opacity,
            11..=13 => ParamGroup::Backscatter,
            14..=16 => ParamGroup::ShDc,
            _ => ParamGroup::ShRest,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub group: ParamGroup,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    pub fn passes(&self) -> bool {
        let scale = self.analytic.abs().max(self.numeric.abs());
        (self.analytic - self.numeric).abs() <= (REL_TOL * scale).max(ABS_FLOOR)
    }

    pub fn rel_error(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs()).max(ABS_FLOOR);
        (self.analytic - self.numeric).abs() / scale
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub probes: Vec<Probe>,
    /// Probes skipped because the loss is not smooth across `[x - h, x + h]`.
    pub kinked: usize,
}

impl GradReport {
    pub fn failures(&self) -> Vec<&Probe> {
        self.probes.iter().filter(|p| !p.passes()).collect()
    }

    pub fn worst(&self) -> Option<&Probe> {
        self.probes.iter().max_by(|a, b| a.rel_error().total_cmp(&b.rel_error()))
    }
}

fn random_medium(rng: &mut ChaCha8Rng) -> MediumNet {
    let mut m = MediumNet::new(DEFAULT_LAYERS, DEFAULT_PE_FREQS, rng.random());
    m.depth_scale = 5.0;
    let last = m.layers.last_mut().expect("output layer");
    for w in &mut last.weights {
        *w = rng.random_range(-0.05f32..0.05);
    }
    for ch in 0..6 {
        // softplus^-1 of a coefficient in about [0.05, 0.35]
        let beta: f64 = rng.random_range(0.05..0.35);
        last.bias[ch] = beta.exp_m1().ln() as f32;
    }
    for ch in 6..9 {
        last.bias[ch] = rng.random_range(-1.0f32..0.5);
    }
    m
}

fn corrected_ok(g: &Gaussian3D, medium: &MediumNet, cam: &CameraView) -> Result<bool> {
    let c = cam.pose.center();
    let p = cam.pose.to_camera(&g.position);
    let dir = (g.position - c).normalize();
    let colour = eval_sh(&g.sh, &dir, 1)?;
    let s = medium.sample(p.z, &c)?;
    let bg = g.backscatter_colour();
    Ok((0..3).all(|ch| {
        let b = medium.backscatter_mode.combine(bg[ch], s.b_inf[ch]).0;
        let t_d = (-s.beta_d[ch] * p.z).exp();
        let t_b = (-s.beta_b[ch] * p.z).exp();
        let v = t_d * colour[ch] + (1.0 - t_b) * b;
        colour[ch] > 0.05 && v > 0.05 && v < 0.95
    }))
}

/// A random scene of `n` Gaussians in a `size x size` view, the first one a
/// wide backdrop so every pixel is covered. Odd seeds give an interpolated
/// view with a frame weight.
pub fn random_scene(seed: u64, n: usize, size: usize) -> Result<GradScene> {
    if n < 2 {
        return Err(Error::Contract("gradient scenes need at least two Gaussians".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let medium = random_medium(&mut rng);
    let focal = 1.25 * size as f64;
    let intr = Intrinsics::centered(focal, size, size);
    let eye = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
    let pose = Pose::look_at(eye, Vector3::new(0.0, 0.0, 4.0), Vector3::y());
    let probe = CameraView::blank("g", intr, pose);

    let mut gaussians = Vec::with_capacity(n);
    for k in 0..n {
        loop {
            let (p_cam, scales, opacity) = if k == 0 {
                (Vector3::new(0.0, 0.0, 6.0), Vector3::repeat(4.0), 0.5)
            } else {
                let z = rng.random_range(2.0..5.0);
                let u = rng.random_range(0.25..0.75) * size as f64;
                let v = rng.random_range(0.25..0.75) * size as f64;
                let p = Vector3::new((u - intr.cx) * z / focal, (v - intr.cy) * z / focal, z);
                let s = Vector3::from_fn(|_, _| rng.random_range(0.08..0.3));
                (p, s, rng.random_range(0.15..0.55))
            };
            let mut g = Gaussian3D::new(pose.to_world(&p_cam), 1.0, 1);
            g.log_scale = scales.map(f64::ln);
            let q = UnitQuaternion::from_euler_angles(
                rng.random_range(-3.0..3.0),
                rng.random_range(-1.5..1.5),
                rng.random_range(-3.0..3.0),
            );
            // deliberately not unit length
            let len = rng.random_range(0.8..1.2);
            g.rotation = [q.w * len, q.i * len, q.j * len, q.k * len];
            g.opacity_logit = logit(opacity);
            g.backscatter_logit = [0, 1, 2].map(|_| rng.random_range(-1.5..1.5));
            g.sh[0] = [0, 1, 2].map(|_| rgb_to_dc(rng.random_range(0.25..0.7)));
            for j in 1..4 {
                g.sh[j] = [0, 1, 2].map(|_| rng.random_range(-0.08..0.08));
            }
            if corrected_ok(&g, &medium, &probe)? {
                gaussians.push(g);
                break;
            }
        }
    }
    let mut cloud = GaussianCloud::new(gaussians, 1)?;
    cloud.active_sh_degree = 1;

    let out = render(&cloud, &medium, &probe)?;
    if out.alpha_acc.data.iter().any(|&a| 1.0 - a < 4.0 * MIN_TRANSMITTANCE || a < 0.05) {
        return Err(Error::Contract("scene opacity outside the smooth range".into()));
    }
    let mut target = Image::new(size, size);
    for (t, r) in target.data.iter_mut().zip(&out.colour.data) {
        let off = rng.random_range(0.05..0.2);
        *t = if *r > 0.5 { r - off } else { r + off };
    }
    let mut view = CameraView::new("g", intr, pose, target)?;
    let mut mask = Plane::filled(size, size, 1.0);
    let (mx, my) = (rng.random_range(0..size - 3), rng.random_range(0..size - 3));
    for y in my..my + 3 {
        for x in mx..mx + 3 {
            mask.set(x, y, 0.0);
        }
    }
    view.motion_mask = Some(mask);

    let mut depth_target = Plane::new(size, size);
    for i in 0..size * size {
        let hi = out.channel_depth[6 * i..6 * i + 6]
            .iter()
            .fold(out.depth.data[i], |m, &v| m.max(v));
        depth_target.data[i] = hi + 0.6 + rng.random_range(0.0..0.5);
    }
    let mut frame_weights = Vec::new();
    if seed % 2 == 1 {
        view.is_interpolated = true;
        view.weight_handle = Some(0);
        frame_weights.push(FrameWeight {
            gamma_logparam: rng.random_range(-0.5..0.5),
            frame_id: "g".into(),
        });
    }
    Ok(GradScene {
        cloud,
        medium,
        view,
        frame_weights,
        depth_target,
        config: TrainConfig::default(),
    })
}

/// Everything that decides which branch of a non-smooth operation is taken.
fn signature(s: &GradScene) -> Result<Vec<i8>> {
    let e = evaluate_view(&s.cloud, &s.medium, &s.view, &s.frame_weights, Some(&s.depth_target), &s.config, false)?;
    let out = &e.render;
    let sign = |v: f64| if v > 0.0 { 1 } else if v < 0.0 { -1 } else { 0 };
    let mut sig: Vec<i8> = Vec::new();
    let mask = s.view.mask_or_ones();
    for (i, (r, t)) in out.colour.data.iter().zip(&s.view.image.data).enumerate() {
        if mask.data[i / 3] > 0.5 {
            sig.push(sign(r - t));
        }
    }
    let w = out.colour.width;
    for p in 0..out.colour.pixel_count() {
        let (x, y) = (p % w, p / w);
        for q in [(x + 1 < w).then_some(p + 1), (y + 1 < out.colour.height).then_some(p + w)]
            .into_iter()
            .flatten()
        {
            for c in 0..3 {
                sig.push(sign(out.colour.data[3 * p + c] - out.colour.data[3 * q + c]));
            }
        }
    }
    for (i, d) in s.depth_target.data.iter().enumerate() {
        sig.push(sign(out.depth.data[i] - d));
        for j in 0..6 {
            sig.push(sign(out.channel_depth[6 * i + j] - d));
        }
    }
    for a in &out.alpha_acc.data {
        sig.push(i8::from(1.0 - a > MIN_TRANSMITTANCE));
    }
    let cam = s.view.pose.center();
    for g in &s.cloud.gaussians {
        let z = s.view.pose.to_camera(&g.position).z;
        sig.extend(s.medium.relu_pattern(z, &cam).into_iter().map(i8::from));
        let dir = (g.position - cam).normalize();
        let colour = eval_sh(&g.sh, &dir, s.cloud.active_sh_degree)?;
        sig.extend(colour.iter().map(|&c| sign(c)));
        sig.push(i8::from(corrected_ok(g, &s.medium, &s.view)?));
    }
    Ok(sig)
}

fn loss(s: &GradScene) -> Result<f64> {
    Ok(evaluate_view(&s.cloud, &s.medium, &s.view, &s.frame_weights, Some(&s.depth_target), &s.config, false)?
        .report
        .total)
}

/// Compare analytic and central-difference derivatives. Every Gaussian
/// parameter and the frame weight are probed; `medium_probes` network
/// parameters are drawn evenly across all layers.
pub fn check(scene: &GradScene, medium_probes: usize) -> Result<GradReport> {
    let e = evaluate_view(
        &scene.cloud,
        &scene.medium,
        &scene.view,
        &scene.frame_weights,
        Some(&scene.depth_target),
        &scene.config,
        true,
    )?;
    let grads = e.grads.expect("gradients requested");
    let mut report = GradReport::default();
    let h = FD_STEP;

    let probe = |report: &mut GradReport, group, index, analytic, plus: GradScene, minus: GradScene, step: f64| -> Result<()> {
        if signature(&plus)? != signature(&minus)? {
            report.kinked += 1;
            return Ok(());
        }
        let numeric = (loss(&plus)? - loss(&minus)?) / step;
        report.probes.push(Probe {
            group,
            index,
            analytic,
            numeric,
        });
        Ok(())
    };

    let flat = scene.cloud.to_flat();
    let stride = scene.cloud.stride();
    for (i, &x) in flat.iter().enumerate() {
        let mut plus = scene.clone();
        let mut minus = scene.clone();
        let mut f = flat.clone();
        f[i] = x + h;
        plus.cloud.set_flat(&f);
        f[i] = x - h;
        minus.cloud.set_flat(&f);
        probe(&mut report, ParamGroup::of_offset(i % stride), i, grads.gaussians[i], plus, minus, 2.0 * h)?;
    }

    let params = scene.medium.params_flat();
    let count = medium_probes.min(params.len());
    for k in 0..count {
        let i = (k * params.len()) / count.max(1) + (k * 7919) % (params.len() / count.max(1)).max(1);
        let i = i.min(params.len() - 1);
        let mut p = params.clone();
        p[i] = params[i] + h;
        let mut plus = scene.clone();
        plus.medium.set_params_flat(&p);
        p[i] = params[i] - h;
        let mut minus = scene.clone();
        minus.medium.set_params_flat(&p);
        // weights are stored in single precision; use the step actually taken
        let step = plus.medium.params_flat()[i] - minus.medium.params_flat()[i];
        probe(&mut report, ParamGroup::Medium, i, grads.medium[i], plus, minus, step)?;
    }

    for (i, w) in scene.frame_weights.iter().enumerate() {
        let mut plus = scene.clone();
        plus.frame_weights[i].gamma_logparam = w.gamma_logparam + h;
        let mut minus = scene.clone();
        minus.frame_weights[i].gamma_logparam = w.gamma_logparam - h;
        probe(&mut report, ParamGroup::FrameWeight, i, grads.frame_weights[i], plus, minus, 2.0 * h)?;
    }
    Ok(report)
}
