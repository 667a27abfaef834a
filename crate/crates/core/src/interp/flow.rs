//! Coarse-to-fine block-matching optical flow and forward warping.

use crate::image::{Image, Plane};

/// Side of the square matching window, in pixels.
pub const PATCH: usize = 8;
pub const LEVELS: usize = 3;
/// Search radius at the coarsest level and during refinement.
const COARSE_RADIUS: i64 = 4;
const REFINE_RADIUS: i64 = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    /// Displacement `(dx, dy)` per pixel, row-major.
    pub data: Vec<[f64; 2]>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![[0.0; 2]; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 2] {
        self.data[y * self.width + x]
    }
}

fn downsample(p: &Plane) -> Plane {
    let (w, h) = (p.width.div_ceil(2), p.height.div_ceil(2));
    let mut out = Plane::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut sum = 0.0;
            let mut n = 0.0;
            for (sx, sy) in [(2 * x, 2 * y), (2 * x + 1, 2 * y), (2 * x, 2 * y + 1), (2 * x + 1, 2 * y + 1)] {
                if sx < p.width && sy < p.height {
                    sum += p.get(sx, sy);
                    n += 1.0;
                }
            }
            out.set(x, y, sum / n);
        }
    }
    out
}

#[inline]
fn at(p: &Plane, x: i64, y: i64) -> f64 {
    let xc = x.clamp(0, p.width as i64 - 1) as usize;
    let yc = y.clamp(0, p.height as i64 - 1) as usize;
    p.data[yc * p.width + xc]
}

fn sad(a: &Plane, b: &Plane, x: i64, y: i64, dx: i64, dy: i64) -> f64 {
    let half = PATCH as i64 / 2;
    let mut cost = 0.0;
    for v in -half..half {
        for u in -half..half {
            cost += (at(a, x + u, y + v) - at(b, x + u + dx, y + v + dy)).abs();
        }
    }
    cost
}

/// Search offsets ordered by distance so ties keep the smallest motion.
fn offsets(radius: i64) -> Vec<(i64, i64)> {
    let mut o: Vec<(i64, i64)> = (-radius..=radius)
        .flat_map(|dy| (-radius..=radius).map(move |dx| (dx, dy)))
        .collect();
    o.sort_by_key(|&(dx, dy)| (dx * dx + dy * dy, dy, dx));
    o
}

fn match_level(a: &Plane, b: &Plane, init: &FlowField, radius: i64, subpixel: bool) -> FlowField {
    let cands = offsets(radius);
    let mut out = FlowField::zeros(a.width, a.height);
    for y in 0..a.height {
        for x in 0..a.width {
            let [fx, fy] = init.get(x, y);
            let (bx, by) = (fx.round() as i64, fy.round() as i64);
            let (xi, yi) = (x as i64, y as i64);
            let mut best = (f64::INFINITY, 0, 0);
            for &(dx, dy) in &cands {
                let c = sad(a, b, xi, yi, bx + dx, by + dy);
                if c < best.0 {
                    best = (c, dx, dy);
                }
            }
            let (c0, dx, dy) = best;
            let (mut sx, mut sy) = (0.0, 0.0);
            // an exact match needs no refinement
            if subpixel && c0 > 0.0 {
                let (ux, uy) = (bx + dx, by + dy);
                let parabola = |cm: f64, cp: f64| {
                    let den = cm - 2.0 * c0 + cp;
                    if den > 1e-12 {
                        (0.5 * (cm - cp) / den).clamp(-0.5, 0.5)
                    } else {
                        0.0
                    }
                };
                sx = parabola(sad(a, b, xi, yi, ux - 1, uy), sad(a, b, xi, yi, ux + 1, uy));
                sy = parabola(sad(a, b, xi, yi, ux, uy - 1), sad(a, b, xi, yi, ux, uy + 1));
            }
            out.data[y * a.width + x] = [(bx + dx) as f64 + sx, (by + dy) as f64 + sy];
        }
    }
    out
}

fn upsample(f: &FlowField, width: usize, height: usize) -> FlowField {
    let mut out = FlowField::zeros(width, height);
    for y in 0..height {
        for x in 0..width {
            let [dx, dy] = f.get((x / 2).min(f.width - 1), (y / 2).min(f.height - 1));
            out.data[y * width + x] = [2.0 * dx, 2.0 * dy];
        }
    }
    out
}

/// Dense flow taking pixels of `a` to their match in `b`.
pub fn block_matching_flow(a: &Plane, b: &Plane) -> FlowField {
    let mut pa = vec![a.clone()];
    let mut pb = vec![b.clone()];
    for _ in 1..LEVELS {
        let (na, nb) = (downsample(pa.last().unwrap()), downsample(pb.last().unwrap()));
        pa.push(na);
        pb.push(nb);
    }
    let top = LEVELS - 1;
    let mut flow = FlowField::zeros(pa[top].width, pa[top].height);
    for level in (0..LEVELS).rev() {
        if level != top {
            flow = upsample(&flow, pa[level].width, pa[level].height);
        }
        let radius = if level == top { COARSE_RADIUS } else { REFINE_RADIUS };
        flow = match_level(&pa[level], &pb[level], &flow, radius, level == 0);
    }
    flow
}

/// Splat each pixel of `src` to `p + t * flow(p)`, rounding to the nearest
/// pixel. Returns the averaged values and the per-pixel hit count.
pub fn forward_warp<const C: usize>(src: &[[f64; C]], width: usize, height: usize, flow: &FlowField, t: f64) -> (Vec<[f64; C]>, Vec<u32>) {
    let mut sum = vec![[0.0; C]; width * height];
    let mut hits = vec![0u32; width * height];
    for y in 0..height {
        for x in 0..width {
            let [dx, dy] = flow.get(x, y);
            let tx = (x as f64 + t * dx).round();
            let ty = (y as f64 + t * dy).round();
            if tx < 0.0 || ty < 0.0 || tx >= width as f64 || ty >= height as f64 {
                continue;
            }
            let j = ty as usize * width + tx as usize;
            for (s, v) in sum[j].iter_mut().zip(&src[y * width + x]) {
                *s += v;
            }
            hits[j] += 1;
        }
    }
    for (s, &n) in sum.iter_mut().zip(&hits) {
        if n > 0 {
            for v in s.iter_mut() {
                *v /= n as f64;
            }
        }
    }
    (sum, hits)
}

pub(crate) fn pixels(img: &Image) -> Vec<[f64; 3]> {
    img.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect()
}

/// Midpoint of two views of the same size: both are forward-warped halfway
/// along their flows and averaged; holes fall back to `fallback`.
pub fn warp_midpoint<const C: usize>(
    a: &[[f64; C]],
    b: &[[f64; C]],
    width: usize,
    height: usize,
    flow_ab: &FlowField,
    flow_ba: &FlowField,
    fallback: &[[f64; C]],
) -> Vec<[f64; C]> {
    let (wa, ha) = forward_warp(a, width, height, flow_ab, 0.5);
    let (wb, hb) = forward_warp(b, width, height, flow_ba, 0.5);
    (0..width * height)
        .map(|i| match (ha[i] > 0, hb[i] > 0) {
            (true, true) => std::array::from_fn(|c| 0.5 * (wa[i][c] + wb[i][c])),
            (true, false) => wa[i],
            (false, true) => wb[i],
            (false, false) => fallback[i],
        })
        .collect()
}
