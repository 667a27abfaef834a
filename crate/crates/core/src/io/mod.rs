//! External formats and the on-disk scene layout.
//!
//! ```text
//! scene/images/*.png
//! scene/sparse/0/{cameras,images,points3D}.txt
//! scene/depth/<stem>.pfm     optional pseudo depth
//! scene/masks/<stem>.png     optional motion masks
//! scene/interp/*.png         optional externally interpolated frames
//! ```

pub mod colmap;
pub mod config;
pub mod imagefile;
pub mod pfm;
pub mod ply;

use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::scene::CameraView;

pub use colmap::{parse_colmap, write_colmap, ColmapScene};
pub use config::RunConfig;
pub use imagefile::{read_image, read_mask, write_image, write_mask};
pub use pfm::{read_pfm, write_pfm};
pub use ply::{read_ply, write_ply, PlyData, PlyFormat};

pub const IMAGES_DIR: &str = "images";
pub const SPARSE_DIR: &str = "sparse/0";
pub const DEPTH_DIR: &str = "depth";
pub const MASKS_DIR: &str = "masks";
pub const INTERP_DIR: &str = "interp";

/// Views in capture order plus the sparse points.
#[derive(Clone, Debug)]
pub struct SceneData {
    pub root: PathBuf,
    pub views: Vec<CameraView>,
    pub points: Vec<Vector3<f64>>,
    pub colours: Vec<[f64; 3]>,
}

impl SceneData {
    pub fn interp_dir(&self) -> PathBuf {
        self.root.join(INTERP_DIR)
    }
}

/// File stem used as the view id.
pub fn view_id(name: &str) -> String {
    Path::new(name)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| name.to_string())
}

/// Load a scene directory. Views are ordered by image name.
pub fn load_scene(dir: &Path) -> Result<SceneData> {
    let model = parse_colmap(&dir.join(SPARSE_DIR))?;
    let mut images: Vec<_> = model.images.values().collect();
    images.sort_by(|a, b| a.name.cmp(&b.name));
    let mut views = Vec::with_capacity(images.len());
    for im in images {
        let intr = model.cameras[&im.camera_id].intrinsics();
        let image = read_image(&dir.join(IMAGES_DIR).join(&im.name))?;
        let id = view_id(&im.name);
        let mut view = CameraView::new(id.clone(), intr, im.pose(), image)?;
        let depth = dir.join(DEPTH_DIR).join(format!("{id}.pfm"));
        if depth.exists() {
            view = view.with_pseudo_depth(read_pfm(&depth)?)?;
        }
        let mask = dir.join(MASKS_DIR).join(format!("{id}.png"));
        if mask.exists() {
            view = view.with_mask(read_mask(&mask)?)?;
        }
        views.push(view);
    }
    let points = model.points3d.iter().map(|p| p.xyz).collect();
    let colours = model
        .points3d
        .iter()
        .map(|p| p.rgb.map(|c| c as f64 / 255.0))
        .collect();
    Ok(SceneData {
        root: dir.to_path_buf(),
        views,
        points,
        colours,
    })
}

/// Files named `interp_*.png` in the scene's interpolation directory.
pub fn list_interp_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let d = dir.join(INTERP_DIR);
    if !d.is_dir() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
        let path = entry.map_err(|e| Error::io(&d, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("interp_") && name.ends_with(".png") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Indices `(train, test)`: every `modulus`-th view, starting at 0, is held out.
pub fn split_indices(n: usize, modulus: usize) -> (Vec<usize>, Vec<usize>) {
    let modulus = modulus.max(1);
    let (test, train): (Vec<usize>, Vec<usize>) = (0..n).partition(|i| i % modulus == 0);
    if train.is_empty() {
        warn!("split of {n} views leaves no training views");
    }
    (train, test)
}

pub fn split_views<T: Clone>(views: &[T], modulus: usize) -> (Vec<T>, Vec<T>) {
    let (train, test) = split_indices(views.len(), modulus);
    (
        train.iter().map(|&i| views[i].clone()).collect(),
        test.iter().map(|&i| views[i].clone()).collect(),
    )
}
