//! Synthetic underwater scenes with known geometry and medium.
//!
//! The world has a seabed at `y = -1`, a back wall at `z = 4` and a few
//! rocks. Cameras sit on a shallow arc looking down at the scene.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::{quantize_u8, Image, Plane};
use crate::io::colmap::{rotation_to_qvec, CameraModel, ColmapCamera, ColmapImage, ColmapPoint, ColmapScene};
use crate::io::ply::cloud_to_ply;
use crate::io::{write_colmap, SceneData, write_image, write_pfm, write_ply, DEPTH_DIR, IMAGES_DIR, SPARSE_DIR};
use crate::medium::{degrade_image, MediumNet, MediumSample};
use crate::render::render;
use crate::scene::sh::rgb_to_dc;
use crate::scene::{logit, CameraView, Gaussian3D, GaussianCloud, Intrinsics, Pose};

pub const SYNTH_WIDTH: usize = 64;
pub const SYNTH_HEIGHT: usize = 48;
pub const SYNTH_FOCAL: f64 = 80.0;
pub const MEDIUM_TRUTH_FILE: &str = "medium_truth.txt";
pub const CLEAN_DIR: &str = "clean";
pub const GT_CLOUD_FILE: &str = "gt_cloud.ply";

const SEABED_Y: f64 = -1.0;
const WALL_Z: f64 = 4.0;
const X_RANGE: (f64, f64) = (-4.0, 4.0);
const SEABED_Z: (f64, f64) = (-0.2, WALL_Z);
const WALL_Y: (f64, f64) = (SEABED_Y, 1.0);
const TARGET: [f64; 3] = [0.0, -0.5, 1.5];
const ARC_RADIUS: f64 = 4.0;
const ARC_HEIGHT: f64 = 1.5;
const ARC_DEGREES: f64 = 12.0;
const GT_OPACITY: f64 = 0.95;

/// A generated dataset held in memory. Images and depths are already
/// quantized exactly as they are stored on disk.
#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub cloud: GaussianCloud,
    pub medium: MediumSample,
    /// Views with degraded images and ground-truth depth as pseudo depth.
    pub views: Vec<CameraView>,
    pub clean: Vec<Image>,
    pub points: Vec<Vector3<f64>>,
    pub colours: Vec<[u8; 3]>,
}

impl SyntheticScene {
    /// The dataset as [`crate::io::load_scene`] would return it from `root`.
    pub fn scene_data(&self, root: &Path) -> SceneData {
        SceneData {
            root: root.to_path_buf(),
            views: self.views.clone(),
            points: self.points.clone(),
            colours: self.colours.iter().map(|c| c.map(|v| v as f64 / 255.0)).collect(),
        }
    }

    pub fn depth(&self, i: usize) -> &Plane {
        self.views[i].pseudo_depth.as_ref().expect("synthetic views carry depth")
    }
}

pub fn view_name(i: usize) -> String {
    format!("view_{i:03}")
}

fn quantize_image(img: &Image) -> Image {
    Image {
        width: img.width,
        height: img.height,
        data: img.data.iter().map(|&v| quantize_u8(v) as f64 / 255.0).collect(),
    }
}

fn texture(p: &Vector3<f64>, surface: usize) -> [f64; 3] {
    let (base, f) = match surface {
        0 => ([0.78, 0.68, 0.5], (2.1 * p.x).sin() * (2.7 * p.z).cos()),
        1 => ([0.45, 0.55, 0.45], (1.7 * p.x + 0.5 * p.y).sin() * (3.1 * p.y).cos()),
        _ => ([0.6, 0.4, 0.35], (4.0 * p.y).sin()),
    };
    base.map(|b| b * (0.75 + 0.25 * f))
}

/// Ground-truth cloud: Gaussians on the seabed, the wall and rock domes,
/// flattened along the surface normal and sized to cover it.
pub fn synthetic_cloud(rng: &mut ChaCha8Rng, n: usize) -> GaussianCloud {
    let seabed_area = (X_RANGE.1 - X_RANGE.0) * (SEABED_Z.1 - SEABED_Z.0);
    let wall_area = (X_RANGE.1 - X_RANGE.0) * (WALL_Y.1 - WALL_Y.0);
    let spacing = ((seabed_area + wall_area) / n as f64).sqrt();
    let rocks: Vec<(Vector3<f64>, f64)> = (0..3)
        .map(|_| {
            let c = Vector3::new(rng.random_range(-2.0..2.0), SEABED_Y, rng.random_range(0.8..2.8));
            (c, rng.random_range(0.35..0.6))
        })
        .collect();
    let jitter = Normal::new(0.0, 0.04).expect("valid sigma");
    let gaussians = (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            let s = spacing * rng.random_range(0.85..1.15);
            let (surface, pos, log_scale) = if u < 0.6 {
                let p = Vector3::new(
                    rng.random_range(X_RANGE.0..X_RANGE.1),
                    SEABED_Y,
                    rng.random_range(SEABED_Z.0..SEABED_Z.1),
                );
                (0, p, Vector3::new(s, 0.5 * s, s))
            } else if u < 0.88 {
                let p = Vector3::new(
                    rng.random_range(X_RANGE.0..X_RANGE.1),
                    rng.random_range(WALL_Y.0..WALL_Y.1),
                    WALL_Z,
                );
                (1, p, Vector3::new(s, s, 0.5 * s))
            } else {
                let (c, r) = rocks[rng.random_range(0..rocks.len())];
                // upper hemisphere
                let th = rng.random_range(0.0..std::f64::consts::TAU);
                let ph = rng.random_range(0.0..1.3f64);
                let p = c + r * Vector3::new(ph.sin() * th.cos(), ph.cos(), ph.sin() * th.sin());
                (2, p, Vector3::repeat(0.7 * s))
            };
            let mut g = Gaussian3D::new(pos, 1.0, 0);
            g.log_scale = log_scale.map(f64::ln);
            g.opacity_logit = logit(GT_OPACITY);
            let rgb = texture(&pos, surface).map(|c| (c + jitter.sample(rng)).clamp(0.05, 0.95));
            g.sh[0] = rgb.map(rgb_to_dc);
            g
        })
        .collect();
    GaussianCloud::new(gaussians, 0).expect("degree 0 cloud")
}

/// Cameras evenly spaced on the arc.
pub fn synthetic_poses(n_views: usize) -> Vec<Pose> {
    let target = Vector3::from(TARGET);
    (0..n_views)
        .map(|k| {
            let t = if n_views > 1 { k as f64 / (n_views - 1) as f64 } else { 0.5 };
            let th = (-ARC_DEGREES + 2.0 * ARC_DEGREES * t).to_radians();
            let eye = target + Vector3::new(ARC_RADIUS * th.sin(), ARC_HEIGHT, -ARC_RADIUS * th.cos());
            Pose::look_at(eye, target, Vector3::y())
        })
        .collect()
}

pub fn synthetic_intrinsics() -> Intrinsics {
    Intrinsics::centered(SYNTH_FOCAL, SYNTH_WIDTH, SYNTH_HEIGHT)
}

/// Generate a dataset: clean renders of a random cloud, their depth, and the
/// medium applied pixel-wise.
pub fn make_synthetic_scene(seed: u64, n_gaussians: usize, n_views: usize, medium: &MediumSample) -> Result<SyntheticScene> {
    if n_gaussians == 0 {
        return Err(Error::Contract("synthetic scene needs at least one Gaussian".into()));
    }
    if n_views < 2 {
        return Err(Error::Contract("synthetic scene needs at least two views".into()));
    }
    if !medium.is_valid() {
        return Err(Error::Contract("medium coefficients out of range".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cloud = synthetic_cloud(&mut rng, n_gaussians);
    let intr = synthetic_intrinsics();
    let clear = MediumNet::identity();
    let mut views = Vec::with_capacity(n_views);
    let mut clean = Vec::with_capacity(n_views);
    for (k, pose) in synthetic_poses(n_views).into_iter().enumerate() {
        let cam = CameraView::blank(view_name(k), intr, pose);
        let out = render(&cloud, &clear, &cam)?;
        // as stored in PFM
        let depth = Plane {
            width: out.depth.width,
            height: out.depth.height,
            data: out.depth.data.iter().map(|&z| z as f32 as f64).collect(),
        };
        let clean_img = quantize_image(&out.colour);
        let degraded = quantize_image(&degrade_image(&out.colour, &depth, medium)?);
        views.push(CameraView::new(view_name(k), intr, pose, degraded)?.with_pseudo_depth(depth)?);
        clean.push(clean_img);
    }
    let noise = Normal::new(0.0, 0.02).expect("valid sigma");
    let points = cloud
        .gaussians
        .iter()
        .map(|g| g.position + Vector3::from_fn(|_, _| noise.sample(&mut rng)))
        .collect();
    let colours = cloud
        .gaussians
        .iter()
        .map(|g| g.sh[0].map(|d| quantize_u8(d * crate::scene::sh::SH_C0 + 0.5)))
        .collect();
    Ok(SyntheticScene {
        cloud,
        medium: *medium,
        views,
        clean,
        points,
        colours,
    })
}

pub fn medium_truth_text(m: &MediumSample) -> String {
    let mut s = String::new();
    for (name, v) in [("beta_d", m.beta_d), ("beta_b", m.beta_b), ("b_inf", m.b_inf)] {
        let _ = writeln!(s, "{name} {:?} {:?} {:?}", v[0], v[1], v[2]);
    }
    s
}

pub fn parse_medium_truth(text: &str, source: &str) -> Result<MediumSample> {
    let mut out = MediumSample::clear_water();
    let mut seen = [false; 3];
    for (i, line) in text.lines().enumerate() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        let slot = match toks[0] {
            "beta_d" => 0,
            "beta_b" => 1,
            "b_inf" => 2,
            other => return Err(Error::parse(source, i + 1, format!("unknown key '{other}'"))),
        };
        if toks.len() != 4 {
            return Err(Error::parse(source, i + 1, "expected three values"));
        }
        let mut v = [0.0; 3];
        for ch in 0..3 {
            v[ch] = toks[ch + 1]
                .parse()
                .map_err(|_| Error::parse(source, i + 1, format!("bad number '{}'", toks[ch + 1])))?;
        }
        match slot {
            0 => out.beta_d = v,
            1 => out.beta_b = v,
            _ => out.b_inf = v,
        }
        seen[slot] = true;
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::parse(source, text.lines().count(), "missing medium coefficients"));
    }
    Ok(out)
}

pub fn read_medium_truth(path: &Path) -> Result<MediumSample> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_medium_truth(&text, &path.display().to_string())
}

/// Write the dataset in the scene layout read by [`crate::io::load_scene`],
/// plus clean images, the ground-truth cloud and the medium sidecar.
pub fn write_synthetic(dir: &Path, scene: &SyntheticScene) -> Result<()> {
    for sub in [IMAGES_DIR, DEPTH_DIR, CLEAN_DIR] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let intr = scene.views[0].intrinsics;
    let mut model = ColmapScene::default();
    model.cameras.insert(
        1,
        ColmapCamera {
            id: 1,
            model: CameraModel::Pinhole {
                fx: intr.fx,
                fy: intr.fy,
                cx: intr.cx,
                cy: intr.cy,
            },
            width: intr.width,
            height: intr.height,
        },
    );
    for (k, v) in scene.views.iter().enumerate() {
        let name = format!("{}.png", v.id);
        write_image(&dir.join(IMAGES_DIR).join(&name), &v.image)?;
        write_image(&dir.join(CLEAN_DIR).join(&name), &scene.clean[k])?;
        write_pfm(&dir.join(DEPTH_DIR).join(format!("{}.pfm", v.id)), scene.depth(k))?;
        model.images.insert(
            k as u32 + 1,
            ColmapImage {
                id: k as u32 + 1,
                qvec: rotation_to_qvec(&v.pose.rotation),
                tvec: v.pose.translation,
                camera_id: 1,
                name,
                observations: Vec::new(),
            },
        );
    }
    model.points3d = scene
        .points
        .iter()
        .zip(&scene.colours)
        .enumerate()
        .map(|(i, (p, c))| ColmapPoint {
            id: i as u64 + 1,
            xyz: *p,
            rgb: *c,
            error: 0.0,
            track: Vec::new(),
        })
        .collect();
    write_colmap(&dir.join(SPARSE_DIR), &model)?;
    write_ply(&dir.join(GT_CLOUD_FILE), &cloud_to_ply(&scene.cloud))?;
    let path = dir.join(MEDIUM_TRUTH_FILE);
    fs::write(&path, medium_truth_text(&scene.medium)).map_err(|e| Error::io(path, e))
}
