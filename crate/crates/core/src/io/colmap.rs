//! Reader for COLMAP's text export (`cameras.txt`, `images.txt`,
//! `points3D.txt`).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::scene::{Intrinsics, Pose};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CameraModel {
    SimplePinhole { f: f64, cx: f64, cy: f64 },
    Pinhole { fx: f64, fy: f64, cx: f64, cy: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ColmapCamera {
    pub id: u32,
    pub model: CameraModel,
    pub width: usize,
    pub height: usize,
}

impl ColmapCamera {
    pub fn intrinsics(&self) -> Intrinsics {
        let (fx, fy, cx, cy) = match self.model {
            CameraModel::SimplePinhole { f, cx, cy } => (f, f, cx, cy),
            CameraModel::Pinhole { fx, fy, cx, cy } => (fx, fy, cx, cy),
        };
        Intrinsics {
            fx,
            fy,
            cx,
            cy,
            width: self.width,
            height: self.height,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ColmapImage {
    pub id: u32,
    /// `(qw, qx, qy, qz)`, normalized on read.
    pub qvec: [f64; 4],
    pub tvec: Vector3<f64>,
    pub camera_id: u32,
    pub name: String,
    /// `(x, y, point3d_id)`; `-1` marks an untriangulated keypoint.
    pub observations: Vec<(f64, f64, i64)>,
}

impl ColmapImage {
    /// World-to-camera pose.
    pub fn pose(&self) -> Pose {
        let [w, x, y, z] = self.qvec;
        let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(w, x, y, z));
        let rotation: Matrix3<f64> = q.to_rotation_matrix().into_inner();
        Pose {
            rotation,
            translation: self.tvec,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ColmapPoint {
    pub id: u64,
    pub xyz: Vector3<f64>,
    pub rgb: [u8; 3],
    pub error: f64,
    /// `(image_id, point2d_index)` pairs.
    pub track: Vec<(u32, u32)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ColmapScene {
    pub cameras: BTreeMap<u32, ColmapCamera>,
    pub images: BTreeMap<u32, ColmapImage>,
    pub points3d: Vec<ColmapPoint>,
}

/// Non-comment, non-blank lines with their 1-based line numbers.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn field<T: std::str::FromStr>(tokens: &[&str], i: usize, file: &str, line: usize, what: &str) -> Result<T> {
    let tok = tokens
        .get(i)
        .ok_or_else(|| Error::parse(file, line, format!("missing {what}")))?;
    tok.parse()
        .map_err(|_| Error::parse(file, line, format!("bad {what} '{tok}'")))
}

fn read(dir: &Path, name: &str) -> Result<String> {
    let path = dir.join(name);
    fs::read_to_string(&path).map_err(|e| Error::io(path, e))
}

pub fn parse_cameras(text: &str, file: &str) -> Result<BTreeMap<u32, ColmapCamera>> {
    let mut cameras = BTreeMap::new();
    for (line, l) in data_lines(text) {
        let t: Vec<&str> = l.split_whitespace().collect();
        let id: u32 = field(&t, 0, file, line, "camera id")?;
        let model_name = *t.get(1).ok_or_else(|| Error::parse(file, line, "missing model"))?;
        let width = field(&t, 2, file, line, "width")?;
        let height = field(&t, 3, file, line, "height")?;
        let p = |i: usize, what: &str| field::<f64>(&t, 4 + i, file, line, what);
        let model = match model_name {
            "SIMPLE_PINHOLE" => CameraModel::SimplePinhole {
                f: p(0, "f")?,
                cx: p(1, "cx")?,
                cy: p(2, "cy")?,
            },
            "PINHOLE" => CameraModel::Pinhole {
                fx: p(0, "fx")?,
                fy: p(1, "fy")?,
                cx: p(2, "cx")?,
                cy: p(3, "cy")?,
            },
            other => {
                return Err(Error::parse(file, line, format!("unsupported camera model {other}")));
            }
        };
        if cameras
            .insert(
                id,
                ColmapCamera {
                    id,
                    model,
                    width,
                    height,
                },
            )
            .is_some()
        {
            return Err(Error::parse(file, line, format!("duplicate camera id {id}")));
        }
    }
    Ok(cameras)
}

/// Images take two lines each: the pose line and the observation line,
/// which may be empty.
pub fn parse_images(text: &str, file: &str) -> Result<BTreeMap<u32, ColmapImage>> {
    let mut images = BTreeMap::new();
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    while let Some((line, l)) = lines.next() {
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        let t: Vec<&str> = l.split_whitespace().collect();
        if t.len() < 10 {
            return Err(Error::parse(file, line, format!("expected 10 fields, found {}", t.len())));
        }
        let id: u32 = field(&t, 0, file, line, "image id")?;
        let mut q = [0.0; 4];
        for (k, v) in q.iter_mut().enumerate() {
            *v = field(&t, 1 + k, file, line, "quaternion")?;
        }
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::parse(file, line, "zero quaternion"));
        }
        let qvec = q.map(|v| v / norm);
        let tvec = Vector3::new(
            field(&t, 5, file, line, "tx")?,
            field(&t, 6, file, line, "ty")?,
            field(&t, 7, file, line, "tz")?,
        );
        let camera_id = field(&t, 8, file, line, "camera id")?;
        let name = t[9..].join(" ");

        let (obs_line, obs_text) = lines.next().unwrap_or((line + 1, ""));
        if obs_text.starts_with('#') {
            return Err(Error::parse(file, obs_line, "expected observation line"));
        }
        let o: Vec<&str> = obs_text.split_whitespace().collect();
        if !o.len().is_multiple_of(3) {
            return Err(Error::parse(file, obs_line, "observations must be (x, y, id) triples"));
        }
        let mut observations = Vec::with_capacity(o.len() / 3);
        for k in 0..o.len() / 3 {
            observations.push((
                field(&o, 3 * k, file, obs_line, "x")?,
                field(&o, 3 * k + 1, file, obs_line, "y")?,
                field(&o, 3 * k + 2, file, obs_line, "point id")?,
            ));
        }
        let img = ColmapImage {
            id,
            qvec,
            tvec,
            camera_id,
            name,
            observations,
        };
        if images.insert(id, img).is_some() {
            return Err(Error::parse(file, line, format!("duplicate image id {id}")));
        }
    }
    Ok(images)
}

pub fn parse_points(text: &str, file: &str) -> Result<Vec<ColmapPoint>> {
    let mut points = Vec::new();
    for (line, l) in data_lines(text) {
        let t: Vec<&str> = l.split_whitespace().collect();
        if t.len() < 8 || !(t.len() - 8).is_multiple_of(2) {
            return Err(Error::parse(file, line, "expected id, xyz, rgb, error and track pairs"));
        }
        let xyz = Vector3::new(
            field(&t, 1, file, line, "x")?,
            field(&t, 2, file, line, "y")?,
            field(&t, 3, file, line, "z")?,
        );
        let rgb = [
            field(&t, 4, file, line, "r")?,
            field(&t, 5, file, line, "g")?,
            field(&t, 6, file, line, "b")?,
        ];
        let mut track = Vec::with_capacity((t.len() - 8) / 2);
        for k in (8..t.len()).step_by(2) {
            track.push((
                field(&t, k, file, line, "track image id")?,
                field(&t, k + 1, file, line, "track point index")?,
            ));
        }
        points.push(ColmapPoint {
            id: field(&t, 0, file, line, "point id")?,
            xyz,
            rgb,
            error: field(&t, 7, file, line, "error")?,
            track,
        });
    }
    points.sort_by_key(|p| p.id);
    Ok(points)
}

/// Parse the three text files of a sparse model directory.
pub fn parse_colmap(dir: &Path) -> Result<ColmapScene> {
    let cameras = parse_cameras(&read(dir, "cameras.txt")?, "cameras.txt")?;
    let images = parse_images(&read(dir, "images.txt")?, "images.txt")?;
    let points3d = parse_points(&read(dir, "points3D.txt")?, "points3D.txt")?;
    for img in images.values() {
        if !cameras.contains_key(&img.camera_id) {
            return Err(Error::Contract(format!(
                "image {} ({}) references unknown camera id {}",
                img.id, img.name, img.camera_id
            )));
        }
    }
    Ok(ColmapScene {
        cameras,
        images,
        points3d,
    })
}

fn fmt_f64(v: f64) -> String {
    // shortest representation that parses back to the same value
    format!("{v:?}")
}

/// Write a sparse model directory in COLMAP's text format.
pub fn write_colmap(dir: &Path, scene: &ColmapScene) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut cams = String::from("# Camera list with one line of data per camera:\n#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n");
    for c in scene.cameras.values() {
        let (name, params) = match c.model {
            CameraModel::SimplePinhole { f, cx, cy } => ("SIMPLE_PINHOLE", vec![f, cx, cy]),
            CameraModel::Pinhole { fx, fy, cx, cy } => ("PINHOLE", vec![fx, fy, cx, cy]),
        };
        let p: Vec<String> = params.into_iter().map(fmt_f64).collect();
        cams += &format!("{} {} {} {} {}\n", c.id, name, c.width, c.height, p.join(" "));
    }
    let mut imgs = String::from("# Image list with two lines of data per image:\n#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n#   POINTS2D[] as (X, Y, POINT3D_ID)\n");
    for im in scene.images.values() {
        let nums: Vec<String> = im.qvec.iter().chain(im.tvec.iter()).map(|v| fmt_f64(*v)).collect();
        imgs += &format!("{} {} {} {}\n", im.id, nums.join(" "), im.camera_id, im.name);
        let obs: Vec<String> = im
            .observations
            .iter()
            .map(|(x, y, id)| format!("{} {} {id}", fmt_f64(*x), fmt_f64(*y)))
            .collect();
        imgs += &obs.join(" ");
        imgs.push('\n');
    }
    let mut pts = String::from("# 3D point list with one line of data per point:\n#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n");
    for p in &scene.points3d {
        let track: Vec<String> = p.track.iter().map(|(i, k)| format!("{i} {k}")).collect();
        pts += &format!(
            "{} {} {} {} {} {} {} {} {}\n",
            p.id,
            fmt_f64(p.xyz.x),
            fmt_f64(p.xyz.y),
            fmt_f64(p.xyz.z),
            p.rgb[0],
            p.rgb[1],
            p.rgb[2],
            fmt_f64(p.error),
            track.join(" ")
        );
    }
    for (name, text) in [("cameras.txt", cams), ("images.txt", imgs), ("points3D.txt", pts)] {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Quaternion `(w, x, y, z)` of an orthonormal rotation matrix.
pub fn rotation_to_qvec(r: &Matrix3<f64>) -> [f64; 4] {
    let q = UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(*r));
    let q = q.quaternion();
    let mut v = [q.w, q.i, q.j, q.k];
    if v[0] < 0.0 {
        v = v.map(|c| -c);
    }
    v
}
