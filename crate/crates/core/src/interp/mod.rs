//! Intermediate frames between adjacent views, and back-projection of
//! their pixels into extra initialization points.

pub mod flow;

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use log::warn;
use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::image::{Image, Plane};
use crate::io::imagefile::decode_image;
use crate::medium::FrameWeight;
use crate::scene::{quat_to_matrix, CameraView, Intrinsics, Pose, NEAR_PLANE};

use flow::{block_matching_flow, pixels, warp_midpoint};

/// Added points as a fraction of the existing cloud.
pub const ENRICH_RATIO: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InterpMode {
    Blend,
    Flow,
    Imported,
}

impl InterpMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Blend => "blend",
            Self::Flow => "flow",
            Self::Imported => "imported",
        }
    }
}

impl fmt::Display for InterpMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InterpMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blend" => Ok(Self::Blend),
            "flow" => Ok(Self::Flow),
            "imported" => Ok(Self::Imported),
            _ => Err(Error::Config(format!("unknown interpolation mode '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InterpolatedFrame {
    pub id: String,
    pub image: Image,
    pub intrinsics: Intrinsics,
    pub pose: Pose,
    pub source_pair: (String, String),
    pub mode: InterpMode,
    pub weight: FrameWeight,
    /// Depth at the midpoint, for back-projection.
    pub depth: Option<Plane>,
    /// Original file contents of an imported frame.
    pub source_bytes: Option<Vec<u8>>,
}

impl InterpolatedFrame {
    /// Training view tied to frame weight `handle`.
    pub fn to_view(&self, handle: usize) -> CameraView {
        let mut v = CameraView::blank(self.id.clone(), self.intrinsics, self.pose);
        v.image = self.image.clone();
        v.image.clamp01();
        v.pseudo_depth = self.depth.clone();
        v.is_interpolated = true;
        v.weight_handle = Some(handle);
        v
    }

    /// PNG bytes: imported frames pass through untouched.
    pub fn png_bytes(&self) -> Result<Vec<u8>> {
        match &self.source_bytes {
            Some(b) => Ok(b.clone()),
            None => crate::io::imagefile::encode_image(&self.image),
        }
    }

    pub fn write_png(&self, dir: &Path) -> Result<()> {
        let path = dir.join(format!("{}.png", self.id));
        fs::write(&path, self.png_bytes()?).map_err(|e| Error::io(path, e))
    }
}

pub fn interp_id(a: &str, b: &str) -> String {
    format!("interp_{a}_{b}")
}

fn matrix_to_quat(r: &Matrix3<f64>) -> [f64; 4] {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r));
    [q.w, q.i, q.j, q.k]
}

/// Geodesic midpoint of two rotations. Symmetric in its arguments, and
/// exact for equal inputs.
pub fn slerp_midpoint(ra: &Matrix3<f64>, rb: &Matrix3<f64>) -> Matrix3<f64> {
    if ra == rb {
        return *ra;
    }
    let qa = matrix_to_quat(ra);
    let qb = matrix_to_quat(rb);
    let dot: f64 = (0..4).map(|k| qa[k] * qb[k]).sum();
    let s = if dot < 0.0 { -1.0 } else { 1.0 };
    // at t = 1/2 slerp is the normalized sum on the short arc
    let sum = [0, 1, 2, 3].map(|k| qa[k] + s * qb[k]);
    let q = UnitQuaternion::from_quaternion(Quaternion::new(sum[0], sum[1], sum[2], sum[3]));
    quat_to_matrix([q.w, q.i, q.j, q.k])
}

/// Rotation midpoint and camera-centre midpoint.
pub fn interpolate_pose(a: &Pose, b: &Pose) -> Pose {
    if a == b {
        return *a;
    }
    let rotation = slerp_midpoint(&a.rotation, &b.rotation);
    let center = (a.center() + b.center()) * 0.5;
    Pose {
        rotation,
        translation: -(rotation * center),
    }
}

fn average_intrinsics(a: &Intrinsics, b: &Intrinsics) -> Intrinsics {
    Intrinsics {
        fx: 0.5 * (a.fx + b.fx),
        fy: 0.5 * (a.fy + b.fy),
        cx: 0.5 * (a.cx + b.cx),
        cy: 0.5 * (a.cy + b.cy),
        width: a.width,
        height: a.height,
    }
}

fn blend_images(a: &Image, b: &Image) -> Image {
    Image {
        width: a.width,
        height: a.height,
        data: a.data.iter().zip(&b.data).map(|(x, y)| 0.5 * (x + y)).collect(),
    }
}

fn blend_depth(a: &CameraView, b: &CameraView) -> Option<Plane> {
    match (&a.pseudo_depth, &b.pseudo_depth) {
        (Some(da), Some(db)) => Some(Plane {
            width: da.width,
            height: da.height,
            data: da.data.iter().zip(&db.data).map(|(x, y)| 0.5 * (x + y)).collect(),
        }),
        (Some(d), None) | (None, Some(d)) => Some(d.clone()),
        (None, None) => None,
    }
}

/// Synthesize the frame halfway between `a` and `b`.
///
/// `import_dir` holds `interp_<a>_<b>.png` files for [`InterpMode::Imported`].
pub fn interpolate_pair(
    a: &CameraView,
    b: &CameraView,
    mode: InterpMode,
    import_dir: Option<&Path>,
) -> Result<InterpolatedFrame> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::Shape(format!(
            "cannot interpolate {}x{} with {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let (w, h) = (a.width(), a.height());
    let id = interp_id(&a.id, &b.id);
    let blended = blend_images(&a.image, &b.image);
    let mut depth = blend_depth(a, b);
    let mut source_bytes = None;
    let image = match mode {
        InterpMode::Blend => blended,
        InterpMode::Flow => {
            let (la, lb) = (a.image.luma(), b.image.luma());
            let f_ab = block_matching_flow(&la, &lb);
            let f_ba = block_matching_flow(&lb, &la);
            let mid = warp_midpoint(
                &pixels(&a.image),
                &pixels(&b.image),
                w,
                h,
                &f_ab,
                &f_ba,
                &pixels(&blended),
            );
            if let (Some(da), Some(db), Some(fallback)) = (&a.pseudo_depth, &b.pseudo_depth, &depth) {
                let wrap = |p: &Plane| p.data.iter().map(|&v| [v]).collect::<Vec<_>>();
                let warped = warp_midpoint(&wrap(da), &wrap(db), w, h, &f_ab, &f_ba, &wrap(fallback));
                depth = Some(Plane {
                    width: w,
                    height: h,
                    data: warped.into_iter().map(|[v]| v).collect(),
                });
            }
            Image {
                width: w,
                height: h,
                data: mid.into_iter().flatten().collect(),
            }
        }
        InterpMode::Imported => {
            let dir = import_dir.ok_or_else(|| Error::Config("imported interpolation needs a directory".into()))?;
            let path = dir.join(format!("{id}.png"));
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let img = decode_image(&bytes, &path.display().to_string())?;
            if img.width != w || img.height != h {
                return Err(Error::Shape(format!(
                    "{}: {}x{} frame for {w}x{h} views",
                    path.display(),
                    img.width,
                    img.height
                )));
            }
            source_bytes = Some(bytes);
            img
        }
    };
    Ok(InterpolatedFrame {
        weight: FrameWeight::neutral(id.clone()),
        id,
        image,
        intrinsics: average_intrinsics(&a.intrinsics, &b.intrinsics),
        pose: interpolate_pose(&a.pose, &b.pose),
        source_pair: (a.id.clone(), b.id.clone()),
        mode,
        depth,
        source_bytes,
    })
}

/// One frame per adjacent pair of `views`.
pub fn interpolate_sequence(
    views: &[CameraView],
    mode: InterpMode,
    import_dir: Option<&Path>,
) -> Result<Vec<InterpolatedFrame>> {
    views
        .windows(2)
        .map(|p| interpolate_pair(&p[0], &p[1], mode, import_dir))
        .collect()
}

/// Append about [`ENRICH_RATIO`] times as many back-projected points.
pub fn enrich_point_cloud(
    points: &[Vector3<f64>],
    colours: &[[f64; 3]],
    frames: &[InterpolatedFrame],
) -> (Vec<Vector3<f64>>, Vec<[f64; 3]>) {
    let target = if frames.is_empty() {
        0
    } else {
        ((points.len() as f64 * ENRICH_RATIO).round() as usize).max(1)
    };
    enrich_point_cloud_with_count(points, colours, frames, target)
}

/// Append `count` points back-projected from evenly spaced pixels, taken
/// over the concatenated valid pixels of all frames with depth. Fewer are
/// added if fewer valid pixels exist.
pub fn enrich_point_cloud_with_count(
    points: &[Vector3<f64>],
    colours: &[[f64; 3]],
    frames: &[InterpolatedFrame],
    count: usize,
) -> (Vec<Vector3<f64>>, Vec<[f64; 3]>) {
    let mut out_p = points.to_vec();
    let mut out_c = colours.to_vec();
    let mut valid: Vec<(usize, usize)> = Vec::new();
    for (f, frame) in frames.iter().enumerate() {
        let Some(depth) = &frame.depth else {
            warn!("interpolated frame {} has no depth; skipped", frame.id);
            continue;
        };
        if depth.width != frame.image.width || depth.height != frame.image.height {
            warn!("interpolated frame {} depth size mismatch; skipped", frame.id);
            continue;
        }
        valid.extend(
            depth
                .data
                .iter()
                .enumerate()
                .filter(|(_, d)| d.is_finite() && **d > NEAR_PLANE)
                .map(|(i, _)| (f, i)),
        );
    }
    let m = valid.len();
    let n = count.min(m);
    for j in 0..n {
        // centre of the j-th of n equal strata
        let idx = ((2 * j + 1) * m) / (2 * n);
        let (f, i) = valid[idx];
        let frame = &frames[f];
        let depth = frame.depth.as_ref().unwrap().data[i];
        let (x, y) = (i % frame.image.width, i / frame.image.width);
        let k = &frame.intrinsics;
        let u = (x as f64 + 0.5 - k.cx) / k.fx;
        let v = (y as f64 + 0.5 - k.cy) / k.fy;
        out_p.push(frame.pose.to_world(&Vector3::new(u * depth, v * depth, depth)));
        out_c.push(frame.image.get(x, y));
    }
    (out_p, out_c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn view(id: &str, pose: Pose, value: f64) -> CameraView {
        let intr = Intrinsics::centered(30.0, 24, 16);
        CameraView::new(id, intr, pose, Image::filled(24, 16, [value; 3]))
            .unwrap()
            .with_pseudo_depth(Plane::filled(24, 16, 4.0))
            .unwrap()
    }

    fn pose_at(x: f64) -> Pose {
        Pose::look_at(
            Vector3::new(x, 0.2, -5.0),
            Vector3::zeros(),
            Vector3::new(0.0, 1.0, 0.0),
        )
    }

    #[test]
    fn identical_pair_is_fixed_point() {
        let a = view("a", pose_at(0.3), 0.4);
        for mode in [InterpMode::Blend, InterpMode::Flow] {
            let f = interpolate_pair(&a, &a, mode, None).unwrap();
            assert_eq!(f.image, a.image);
            assert_eq!(f.pose, a.pose);
            assert_eq!(f.weight.gamma(), 1.0);
        }
    }

    #[test]
    fn blend_of_black_and_white_is_grey() {
        let f = interpolate_pair(&view("a", pose_at(0.0), 0.0), &view("b", pose_at(1.0), 1.0), InterpMode::Blend, None).unwrap();
        assert!(f.image.data.iter().all(|&v| v == 0.5));
        assert_eq!(f.id, "interp_a_b");
        assert!(f.pose.orthonormality_error() < 1e-12);
    }

    #[test]
    fn imported_frames_pass_through() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::filled(24, 16, [0.2, 0.4, 0.6]);
        let bytes = crate::io::imagefile::encode_image(&img).unwrap();
        fs::write(dir.path().join("interp_a_b.png"), &bytes).unwrap();
        let a = view("a", pose_at(0.0), 0.0);
        let b = view("b", pose_at(1.0), 1.0);
        let f = interpolate_pair(&a, &b, InterpMode::Imported, Some(dir.path())).unwrap();
        assert_eq!(f.png_bytes().unwrap(), bytes);
        assert!(interpolate_pair(&b, &a, InterpMode::Imported, Some(dir.path())).is_err());
        let small = CameraView::new("c", Intrinsics::centered(30.0, 8, 8), pose_at(0.0), Image::new(8, 8)).unwrap();
        assert!(interpolate_pair(&a, &small, InterpMode::Blend, None).is_err());
    }

    #[test]
    fn enrichment_counts() {
        let pts: Vec<Vector3<f64>> = (0..17_635).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        let cols = vec![[0.5; 3]; pts.len()];
        let (p, c) = enrich_point_cloud(&pts, &cols, &[]);
        assert_eq!(p, pts);
        assert_eq!(c.len(), pts.len());

        let f = interpolate_pair(&view("a", pose_at(0.0), 0.1), &view("b", pose_at(0.4), 0.3), InterpMode::Blend, None).unwrap();
        let (p, c) = enrich_point_cloud_with_count(&pts, &cols, std::slice::from_ref(&f), 100);
        assert_eq!(p.len(), 17_735);
        assert_eq!(c.len(), 17_735);
        assert_eq!(&p[..pts.len()], pts.as_slice());
        assert!(c[pts.len()..].iter().all(|c| (c[0] - 0.2).abs() < 1e-12));
        // back-projected points sit at the frame depth
        for q in &p[pts.len()..] {
            assert!((f.pose.to_camera(q).z - 4.0).abs() < 1e-9);
        }

        let small: Vec<Vector3<f64>> = pts[..200].to_vec();
        let (p, _) = enrich_point_cloud(&small, &cols[..200], std::slice::from_ref(&f));
        assert_eq!(p.len(), 300);

        let mut no_depth = f.clone();
        no_depth.depth = None;
        let (p, _) = enrich_point_cloud(&small, &cols[..200], &[no_depth]);
        assert_eq!(p.len(), 200);
    }

    proptest! {
        #[test]
        fn blend_is_symmetric(ax in -2.0f64..2.0, bx in -2.0f64..2.0, va in 0.0f64..1.0, vb in 0.0f64..1.0) {
            let a = view("a", pose_at(ax), va);
            let b = view("b", pose_at(bx), vb);
            let ab = interpolate_pair(&a, &b, InterpMode::Blend, None).unwrap();
            let ba = interpolate_pair(&b, &a, InterpMode::Blend, None).unwrap();
            prop_assert_eq!(&ab.image, &ba.image);
            prop_assert_eq!(&ab.pose, &ba.pose);
        }

        #[test]
        fn midpoint_rotation_is_on_the_geodesic(
            axis in prop::array::uniform3(-1.0f64..1.0),
            angle in 0.05f64..3.0,
        ) {
            let axis = Vector3::from(axis);
            prop_assume!(axis.norm() > 1e-3);
            let ra = Matrix3::identity();
            let rb = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle).into_inner();
            let mid = slerp_midpoint(&ra, &rb);
            let half = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle / 2.0).into_inner();
            prop_assert!((mid - half).abs().max() < 1e-9);
            let q = matrix_to_quat(&mid);
            prop_assert!((q.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
        }
    }
}
