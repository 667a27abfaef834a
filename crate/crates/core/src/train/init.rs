//! Gaussians seeded from a point cloud.

use std::collections::HashMap;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::scene::sh::rgb_to_dc;
use crate::scene::{logit, Gaussian3D, GaussianCloud};

pub const DEFAULT_INIT_SCALE: f64 = 0.01;
pub const INIT_OPACITY: f64 = 0.1;
/// The k-th nearest neighbour sets the initial scale.
const SCALE_NEIGHBOUR: usize = 3;

/// Distance from each point to its k-th nearest other point, or `None`
/// when fewer than `k` other points exist.
pub fn kth_neighbour_distance(points: &[Vector3<f64>], k: usize) -> Vec<Option<f64>> {
    let n = points.len();
    if n <= k {
        return vec![None; n];
    }
    let (lo, hi) = points.iter().fold(
        (Vector3::repeat(f64::INFINITY), Vector3::repeat(f64::NEG_INFINITY)),
        |(lo, hi), p| (lo.inf(p), hi.sup(p)),
    );
    let span = (hi - lo).max().max(1e-12);
    // roughly two points per occupied cell for a surface-like cloud
    let cell = (span / (n as f64 / 2.0).sqrt()).max(span * 1e-6);
    let key = |p: &Vector3<f64>| -> (i64, i64, i64) {
        let q = (p - lo) / cell;
        (q.x.floor() as i64, q.y.floor() as i64, q.z.floor() as i64)
    };
    let mut grid: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        grid.entry(key(p)).or_default().push(i);
    }
    let max_ring = ((span / cell).ceil() as i64) + 1;

    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let c = key(p);
            let mut best: Vec<f64> = Vec::with_capacity(k + 1);
            let mut ring = 0i64;
            loop {
                for dx in -ring..=ring {
                    for dy in -ring..=ring {
                        for dz in -ring..=ring {
                            if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                                continue;
                            }
                            let Some(ids) = grid.get(&(c.0 + dx, c.1 + dy, c.2 + dz)) else {
                                continue;
                            };
                            for &j in ids {
                                if j == i {
                                    continue;
                                }
                                let d = (points[j] - p).norm();
                                let pos = best.partition_point(|&b| b <= d);
                                if pos < k {
                                    best.insert(pos, d);
                                    best.truncate(k);
                                }
                            }
                        }
                    }
                }
                // every point outside the searched cube is at least this far
                let covered = ring as f64 * cell;
                if (best.len() == k && best[k - 1] <= covered) || ring > max_ring {
                    break;
                }
                ring += 1;
            }
            best.get(k - 1).copied()
        })
        .collect()
}

/// One isotropic Gaussian per point with opacity 0.1 and the point's colour
/// as the DC term.
pub fn init_from_points(points: &[Vector3<f64>], colours: &[[f64; 3]], sh_degree: usize) -> Result<GaussianCloud> {
    init_from_points_with_scale(points, colours, sh_degree, DEFAULT_INIT_SCALE)
}

pub fn init_from_points_with_scale(
    points: &[Vector3<f64>],
    colours: &[[f64; 3]],
    sh_degree: usize,
    default_scale: f64,
) -> Result<GaussianCloud> {
    if points.is_empty() {
        return Err(Error::Contract("cannot initialize from an empty point set".into()));
    }
    if colours.len() != points.len() {
        return Err(Error::Shape(format!("{} colours for {} points", colours.len(), points.len())));
    }
    let dist = kth_neighbour_distance(points, SCALE_NEIGHBOUR);
    let gaussians = points
        .iter()
        .zip(colours)
        .zip(dist)
        .map(|((p, c), d)| {
            let scale = d.unwrap_or(default_scale).max(1e-7);
            let mut g = Gaussian3D::new(*p, scale, sh_degree);
            g.opacity_logit = logit(INIT_OPACITY);
            g.sh[0] = c.map(rgb_to_dc);
            g
        })
        .collect();
    let mut cloud = GaussianCloud::new(gaussians, sh_degree)?;
    cloud.active_sh_degree = 0;
    Ok(cloud)
}
