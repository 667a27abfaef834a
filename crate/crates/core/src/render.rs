//! Tile-based rasterizer for medium-corrected Gaussians and its adjoint.
//!
//! Each pixel composites the depth-sorted Gaussians overlapping its tile,
//! front to back. Alongside colour the pass produces the medium-free
//! ("restored") colour, opacity-normalized depth and, per colour channel,
//! depths weighted by the direct and backscatter transmissions.
//!
//! The backward pass replays each pixel's front-to-back sequence and walks
//! it in reverse, so no per-pixel state is stored between the passes. Tiles
//! are processed independently and their partial gradients are merged in
//! tile order, which keeps results bit-identical for any thread count.

use nalgebra::{Matrix2, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::image::{Image, Plane};
use crate::medium::{MediumEval, MediumNet, MediumSample};
use crate::scene::sh::{sh_basis, sh_basis_grad, sh_sum, SH_OFFSET};
use crate::scene::{CameraView, GaussianCloud, GaussianParam, Projection};

pub const TILE_SIZE: usize = 16;
/// Compositing stops once transmittance falls below this.
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
/// Floor on normalizing weights of the depth outputs.
pub const DEPTH_EPS: f64 = 1e-6;
/// Gaussian falloff exponents below this contribute nothing (< 1.4e-11).
const MIN_POWER: f64 = -25.0;

// Per-Gaussian blended quantities.
const Q_COLOUR: usize = 0;
const Q_RESTORED: usize = 3;
const Q_DEPTH: usize = 6;
const Q_TZ: usize = 7;
const Q_T: usize = 13;
const Q_ALPHA: usize = 19;
const NQ: usize = 20;

/// Index of channel `ch` under condition `n` (0 direct, 1 backscatter).
#[inline]
pub fn channel_depth_index(ch: usize, n: usize) -> usize {
    2 * ch + n
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub colour: Image,
    /// Composite of the Gaussians' own colours with the medium removed.
    pub restored: Image,
    pub depth: Plane,
    /// `H x W x 3 x 2`, see [`channel_depth_index`].
    pub channel_depth: Vec<f64>,
    pub alpha_acc: Plane,
}

impl RenderOutput {
    pub fn channel_depth_plane(&self, ch: usize, n: usize) -> Plane {
        let j = channel_depth_index(ch, n);
        Plane {
            width: self.depth.width,
            height: self.depth.height,
            data: self.channel_depth.iter().skip(j).step_by(6).copied().collect(),
        }
    }
}

/// Gradients of a scalar objective w.r.t. each render output.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderUpstream {
    pub colour: Vec<f64>,
    pub restored: Vec<f64>,
    pub depth: Vec<f64>,
    pub channel_depth: Vec<f64>,
}

impl RenderUpstream {
    pub fn zeros(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            colour: vec![0.0; 3 * n],
            restored: vec![0.0; 3 * n],
            depth: vec![0.0; n],
            channel_depth: vec![0.0; 6 * n],
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.values_mut() {
            *v *= s;
        }
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.colour
            .iter_mut()
            .chain(self.restored.iter_mut())
            .chain(self.depth.iter_mut())
            .chain(self.channel_depth.iter_mut())
    }

    fn validate(&self, width: usize, height: usize) -> Result<()> {
        let n = width * height;
        if self.colour.len() != 3 * n
            || self.restored.len() != 3 * n
            || self.depth.len() != n
            || self.channel_depth.len() != 6 * n
        {
            return Err(Error::Shape("upstream gradient buffers vs image size".into()));
        }
        let all = self
            .colour
            .iter()
            .chain(&self.restored)
            .chain(&self.depth)
            .chain(&self.channel_depth);
        if let Some(pos) = all.clone().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("upstream gradient entry {pos}")));
        }
        Ok(())
    }
}

/// Gradients for every optimizable parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBuffer {
    /// `len * stride`, laid out like [`GaussianCloud::to_flat`].
    pub gaussians: Vec<f64>,
    pub stride: usize,
    /// Laid out like [`MediumNet::params_flat`].
    pub medium: Vec<f64>,
    /// One entry per frame weight in the trainer's table.
    pub frame_weights: Vec<f64>,
    /// Screen-space gradient of each Gaussian's mean (px), for densification.
    pub mean2d: Vec<[f64; 2]>,
    /// Whether the Gaussian was projected in this view.
    pub visible: Vec<bool>,
}

impl GradientBuffer {
    pub fn zeros(cloud: &GaussianCloud, medium: &MediumNet) -> Self {
        Self {
            gaussians: vec![0.0; cloud.len() * cloud.stride()],
            stride: cloud.stride(),
            medium: vec![0.0; medium.param_count()],
            frame_weights: Vec::new(),
            mean2d: vec![[0.0; 2]; cloud.len()],
            visible: vec![false; cloud.len()],
        }
    }

    pub fn gaussian(&self, i: usize) -> &[f64] {
        &self.gaussians[i * self.stride..(i + 1) * self.stride]
    }

    pub fn is_finite(&self) -> bool {
        self.gaussians
            .iter()
            .chain(&self.medium)
            .chain(&self.frame_weights)
            .all(|v| v.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.gaussians
            .iter()
            .chain(&self.medium)
            .chain(&self.frame_weights)
            .all(|&v| v == 0.0)
    }
}

/// Everything about one Gaussian in one view that both passes need.
struct Prepared {
    index: usize,
    proj: Projection,
    opacity: f64,
    view_dir: Vector3<f64>,
    view_dist: f64,
    basis: [f64; 16],
    /// SH sum plus offset, before the clamp at zero.
    colour_raw: [f64; 3],
    medium: MediumEval,
    t_d: [f64; 3],
    t_b: [f64; 3],
    b: [f64; 3],
    /// Correction before the clamp to [0, 1].
    corrected_raw: [f64; 3],
    q: [f64; NQ],
    tiles: (usize, usize, usize, usize),
}

/// Per-view preprocessing shared by the forward and backward passes.
pub struct PreparedView<'a> {
    cam: &'a CameraView,
    cam_pos: Vector3<f64>,
    sh_degree: usize,
    items: Vec<Prepared>,
    tile_lists: Vec<Vec<u32>>,
    tiles_x: usize,
    tiles_y: usize,
}

struct PixelOut {
    s: [f64; NQ],
}

#[derive(Clone, Copy, Default)]
struct Accum {
    d_q: [f64; NQ],
    d_opacity: f64,
    d_mean: [f64; 2],
    d_conic: [f64; 3],
}

impl<'a> PreparedView<'a> {
    pub fn new(cloud: &GaussianCloud, medium: &MediumNet, cam: &'a CameraView, keep_tape: bool) -> Result<Self> {
        let intr = &cam.intrinsics;
        let (w, h) = (intr.width, intr.height);
        let tiles_x = w.div_ceil(TILE_SIZE);
        let tiles_y = h.div_ceil(TILE_SIZE);
        let cam_pos = cam.pose.center();
        let sh_degree = cloud.active_sh_degree.min(cloud.sh_degree);

        let mut items = Vec::with_capacity(cloud.len());
        for (index, g) in cloud.gaussians.iter().enumerate() {
            let Some(proj) = Projection::compute(g, intr, &cam.pose) else {
                continue;
            };
            let ext = proj.splat.extent();
            let m = proj.splat.mean2d;
            let (x0, x1) = (m.x - ext.x, m.x + ext.x);
            let (y0, y1) = (m.y - ext.y, m.y + ext.y);
            if x1 < 0.0 || y1 < 0.0 || x0 >= w as f64 || y0 >= h as f64 {
                continue;
            }
            let tx0 = (x0.max(0.0) as usize) / TILE_SIZE;
            let ty0 = (y0.max(0.0) as usize) / TILE_SIZE;
            let tx1 = ((x1.min(w as f64 - 1e-9)) as usize / TILE_SIZE).min(tiles_x - 1);
            let ty1 = ((y1.min(h as f64 - 1e-9)) as usize / TILE_SIZE).min(tiles_y - 1);

            let z = proj.splat.depth_z;
            let offset = g.position - cam_pos;
            let view_dist = offset.norm();
            let view_dir = offset / view_dist;
            let basis = sh_basis(&view_dir, sh_degree);
            let colour_raw = sh_sum(&g.sh, &basis, sh_degree).map(|v| v + SH_OFFSET);
            let colour = colour_raw.map(|v| v.max(0.0));

            let medium_eval = medium.evaluate(z, &cam_pos, keep_tape)?;
            let s = &medium_eval.sample;
            let t_d = s.beta_d.map(|b| (-b * z).exp());
            let t_b = s.beta_b.map(|b| (-b * z).exp());
            let bg = g.backscatter_colour();
            let b = [0, 1, 2].map(|ch| medium.backscatter_mode.combine(bg[ch], s.b_inf[ch]).0);
            let corrected_raw = [0, 1, 2].map(|ch| t_d[ch] * colour[ch] + (1.0 - t_b[ch]) * b[ch]);

            let mut q = [0.0; NQ];
            for ch in 0..3 {
                q[Q_COLOUR + ch] = corrected_raw[ch].clamp(0.0, 1.0);
                q[Q_RESTORED + ch] = colour[ch];
                q[Q_TZ + channel_depth_index(ch, 0)] = t_d[ch] * z;
                q[Q_TZ + channel_depth_index(ch, 1)] = t_b[ch] * z;
                q[Q_T + channel_depth_index(ch, 0)] = t_d[ch];
                q[Q_T + channel_depth_index(ch, 1)] = t_b[ch];
            }
            q[Q_DEPTH] = z;
            q[Q_ALPHA] = 1.0;

            items.push(Prepared {
                index,
                proj,
                opacity: g.opacity(),
                view_dir,
                view_dist,
                basis,
                colour_raw,
                medium: medium_eval,
                t_d,
                t_b,
                b,
                corrected_raw,
                q,
                tiles: (tx0, ty0, tx1, ty1),
            });
        }

        items.sort_by(|a, b| {
            a.proj
                .splat
                .depth_z
                .total_cmp(&b.proj.splat.depth_z)
                .then(a.index.cmp(&b.index))
        });

        let mut tile_lists = vec![Vec::new(); tiles_x * tiles_y];
        for (k, it) in items.iter().enumerate() {
            let (tx0, ty0, tx1, ty1) = it.tiles;
            for ty in ty0..=ty1 {
                for tx in tx0..=tx1 {
                    tile_lists[ty * tiles_x + tx].push(k as u32);
                }
            }
        }

        Ok(Self {
            cam,
            cam_pos,
            sh_degree,
            items,
            tile_lists,
            tiles_x,
            tiles_y,
        })
    }

    pub fn visible_count(&self) -> usize {
        self.items.len()
    }

    fn tile_pixels(&self, tile: usize) -> impl Iterator<Item = (usize, usize)> {
        let (w, h) = (self.cam.width(), self.cam.height());
        let tx = tile % self.tiles_x;
        let ty = tile / self.tiles_x;
        let xs = tx * TILE_SIZE..((tx + 1) * TILE_SIZE).min(w);
        let ys = ty * TILE_SIZE..((ty + 1) * TILE_SIZE).min(h);
        ys.flat_map(move |y| xs.clone().map(move |x| (x, y)))
    }

    /// Visit each contributor front to back with its slot in `list`, item
    /// index, `alpha_hat`, Gaussian value, transmittance in front of it and
    /// pixel offset from its mean.
    fn composite(
        &self,
        list: &[u32],
        x: usize,
        y: usize,
        mut visit: impl FnMut(usize, usize, f64, f64, f64, Vector2<f64>),
    ) {
        let px = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
        let mut t = 1.0;
        for (slot, &k) in list.iter().enumerate() {
            let it = &self.items[k as usize];
            let d = px - it.proj.splat.mean2d;
            let c = &it.proj.conic;
            let power = -0.5 * (c[(0, 0)] * d.x * d.x + 2.0 * c[(0, 1)] * d.x * d.y + c[(1, 1)] * d.y * d.y);
            if power < MIN_POWER {
                continue;
            }
            let g = power.exp();
            let a = it.opacity * g;
            visit(slot, k as usize, a, g, t, d);
            t *= 1.0 - a;
            if t < MIN_TRANSMITTANCE {
                break;
            }
        }
    }

    fn forward_tile(&self, tile: usize) -> Vec<PixelOut> {
        let list = &self.tile_lists[tile];
        self.tile_pixels(tile)
            .map(|(x, y)| {
                let mut s = [0.0; NQ];
                self.composite(list, x, y, |_, k, a, _, t, _| {
                    let w = a * t;
                    for (acc, q) in s.iter_mut().zip(&self.items[k].q) {
                        *acc += w * q;
                    }
                });
                PixelOut { s }
            })
            .collect()
    }

    pub fn forward(&self) -> RenderOutput {
        let (w, h) = (self.cam.width(), self.cam.height());
        let tiles = self.map_tiles(|t| self.forward_tile(t));
        let mut out = RenderOutput {
            colour: Image::new(w, h),
            restored: Image::new(w, h),
            depth: Plane::new(w, h),
            channel_depth: vec![0.0; 6 * w * h],
            alpha_acc: Plane::new(w, h),
        };
        for (tile, pixels) in tiles.into_iter().enumerate() {
            for ((x, y), p) in self.tile_pixels(tile).zip(pixels) {
                let s = &p.s;
                let i = y * w + x;
                out.colour.data[3 * i..3 * i + 3].copy_from_slice(&s[Q_COLOUR..Q_COLOUR + 3]);
                out.restored.data[3 * i..3 * i + 3].copy_from_slice(&s[Q_RESTORED..Q_RESTORED + 3]);
                let acc = s[Q_ALPHA];
                out.alpha_acc.data[i] = acc;
                out.depth.data[i] = s[Q_DEPTH] / acc.max(DEPTH_EPS);
                for j in 0..6 {
                    out.channel_depth[6 * i + j] = s[Q_TZ + j] / s[Q_T + j].max(DEPTH_EPS);
                }
            }
        }
        out
    }

    fn backward_tile(&self, tile: usize, up: &RenderUpstream) -> Vec<Accum> {
        let list = &self.tile_lists[tile];
        let w = self.cam.width();
        let mut acc = vec![Accum::default(); list.len()];
        let mut seq: Vec<(usize, usize, f64, f64, f64, Vector2<f64>)> = Vec::new();
        for (x, y) in self.tile_pixels(tile) {
            seq.clear();
            let mut s = [0.0; NQ];
            self.composite(list, x, y, |slot, k, a, g, t, d| {
                seq.push((k, slot, a, g, t, d));
                let wgt = a * t;
                for (acc, q) in s.iter_mut().zip(&self.items[k].q) {
                    *acc += wgt * q;
                }
            });
            if seq.is_empty() {
                continue;
            }

            let i = y * w + x;
            let mut g_s = [0.0; NQ];
            g_s[Q_COLOUR..Q_COLOUR + 3].copy_from_slice(&up.colour[3 * i..3 * i + 3]);
            g_s[Q_RESTORED..Q_RESTORED + 3].copy_from_slice(&up.restored[3 * i..3 * i + 3]);
            let alpha = s[Q_ALPHA];
            let gd = up.depth[i];
            if alpha > DEPTH_EPS {
                g_s[Q_DEPTH] = gd / alpha;
                g_s[Q_ALPHA] -= gd * s[Q_DEPTH] / (alpha * alpha);
            } else {
                g_s[Q_DEPTH] = gd / DEPTH_EPS;
            }
            for j in 0..6 {
                let gc = up.channel_depth[6 * i + j];
                let den = s[Q_T + j];
                if den > DEPTH_EPS {
                    g_s[Q_TZ + j] = gc / den;
                    g_s[Q_T + j] -= gc * s[Q_TZ + j] / (den * den);
                } else {
                    g_s[Q_TZ + j] = gc / DEPTH_EPS;
                }
            }
            if g_s.iter().all(|&v| v == 0.0) {
                continue;
            }

            let mut behind = 0.0;
            for &(k, slot, a, g, t, d) in seq.iter().rev() {
                let it = &self.items[k];
                let gq: f64 = g_s.iter().zip(&it.q).map(|(a, b)| a * b).sum();
                let wgt = a * t;
                let ac = &mut acc[slot];
                for (dq, gs) in ac.d_q.iter_mut().zip(&g_s) {
                    *dq += gs * wgt;
                }
                let d_alpha = t * gq - behind / (1.0 - a);
                behind += wgt * gq;

                ac.d_opacity += d_alpha * g;
                let d_power = d_alpha * it.opacity * g;
                ac.d_conic[0] += -0.5 * d.x * d.x * d_power;
                ac.d_conic[1] += -0.5 * d.x * d.y * d_power;
                ac.d_conic[2] += -0.5 * d.y * d.y * d_power;
                let c = &it.proj.conic;
                ac.d_mean[0] += d_power * (c[(0, 0)] * d.x + c[(0, 1)] * d.y);
                ac.d_mean[1] += d_power * (c[(1, 0)] * d.x + c[(1, 1)] * d.y);
            }
        }
        acc
    }

    pub fn backward(&self, cloud: &GaussianCloud, medium: &MediumNet, up: &RenderUpstream) -> Result<GradientBuffer> {
        up.validate(self.cam.width(), self.cam.height())?;
        let partials = self.map_tiles(|t| self.backward_tile(t, up));
        let mut per_item = vec![Accum::default(); self.items.len()];
        for (tile, acc) in partials.into_iter().enumerate() {
            for (slot, a) in acc.into_iter().enumerate() {
                let dst = &mut per_item[self.tile_lists[tile][slot] as usize];
                for k in 0..NQ {
                    dst.d_q[k] += a.d_q[k];
                }
                dst.d_opacity += a.d_opacity;
                for k in 0..2 {
                    dst.d_mean[k] += a.d_mean[k];
                }
                for k in 0..3 {
                    dst.d_conic[k] += a.d_conic[k];
                }
            }
        }

        let mut grads = GradientBuffer::zeros(cloud, medium);
        let stride = grads.stride;
        let intr = &self.cam.intrinsics;
        for (it, acc) in self.items.iter().zip(&per_item) {
            let g = &cloud.gaussians[it.index];
            let out = &mut grads.gaussians[it.index * stride..(it.index + 1) * stride];
            grads.visible[it.index] = true;
            grads.mean2d[it.index] = acc.d_mean;
            let z = it.proj.splat.depth_z;
            let d_q = &acc.d_q;

            let mut d_colour = [0.0; 3];
            let mut d_td = [0.0; 3];
            let mut d_tb = [0.0; 3];
            let mut d_b = [0.0; 3];
            let mut d_z = d_q[Q_DEPTH];
            let colour = it.colour_raw.map(|v| v.max(0.0));
            for ch in 0..3 {
                let dc = d_q[Q_COLOUR + ch];
                let cr = it.corrected_raw[ch];
                if dc != 0.0 && cr > 0.0 && cr < 1.0 {
                    d_td[ch] += dc * colour[ch];
                    d_colour[ch] += dc * it.t_d[ch];
                    d_tb[ch] -= dc * it.b[ch];
                    d_b[ch] += dc * (1.0 - it.t_b[ch]);
                }
                d_colour[ch] += d_q[Q_RESTORED + ch];
                for (n, (dt, t)) in [(&mut d_td, &it.t_d), (&mut d_tb, &it.t_b)].into_iter().enumerate() {
                    let j = channel_depth_index(ch, n);
                    d_z += d_q[Q_TZ + j] * t[ch];
                    dt[ch] += d_q[Q_TZ + j] * z + d_q[Q_T + j];
                }
            }

            let sample = &it.medium.sample;
            let mut d_sample = MediumSample {
                beta_d: [0.0; 3],
                beta_b: [0.0; 3],
                b_inf: [0.0; 3],
            };
            let bg = g.backscatter_colour();
            for ch in 0..3 {
                d_sample.beta_d[ch] = -d_td[ch] * z * it.t_d[ch];
                d_sample.beta_b[ch] = -d_tb[ch] * z * it.t_b[ch];
                d_z -= d_td[ch] * sample.beta_d[ch] * it.t_d[ch] + d_tb[ch] * sample.beta_b[ch] * it.t_b[ch];
                let (_, db_g, db_inf) = medium.backscatter_mode.combine(bg[ch], sample.b_inf[ch]);
                d_sample.b_inf[ch] = d_b[ch] * db_inf;
                out[GaussianParam::Backscatter as usize + ch] = d_b[ch] * db_g * bg[ch] * (1.0 - bg[ch]);
            }
            if !medium.identity {
                d_z += medium.backward(&it.medium, &d_sample, z, &mut grads.medium);
            }

            // SH coefficients and view direction
            let mut d_dir = Vector3::zeros();
            let grad_basis = (self.sh_degree > 0).then(|| sh_basis_grad(&it.view_dir, self.sh_degree));
            for ch in 0..3 {
                if it.colour_raw[ch] <= 0.0 || d_colour[ch] == 0.0 {
                    continue;
                }
                let dc = d_colour[ch];
                for k in 0..crate::scene::sh_coeff_count(self.sh_degree) {
                    out[GaussianParam::Sh as usize + 3 * k + ch] += dc * it.basis[k];
                    if let Some(gb) = &grad_basis {
                        let c = g.sh[k][ch] * dc;
                        d_dir.x += c * gb[k][0];
                        d_dir.y += c * gb[k][1];
                        d_dir.z += c * gb[k][2];
                    }
                }
            }
            let d_pos_view = (d_dir - it.view_dir * it.view_dir.dot(&d_dir)) / it.view_dist;

            let d_conic = Matrix2::new(acc.d_conic[0], acc.d_conic[1], acc.d_conic[1], acc.d_conic[2]);
            let pg = it.proj.vjp(
                intr,
                &self.cam.pose,
                &Vector2::new(acc.d_mean[0], acc.d_mean[1]),
                &d_conic,
                d_z,
            );
            let p = GaussianParam::Position as usize;
            let pos = pg.position + d_pos_view;
            out[p..p + 3].copy_from_slice(pos.as_slice());
            let s = GaussianParam::LogScale as usize;
            out[s..s + 3].copy_from_slice(pg.log_scale.as_slice());
            let r = GaussianParam::Rotation as usize;
            out[r..r + 4].copy_from_slice(&pg.rotation);
            out[GaussianParam::Opacity as usize] = acc.d_opacity * it.opacity * (1.0 - it.opacity);
        }
        debug_assert!(self.cam_pos.iter().all(|v| v.is_finite()));
        if !grads.is_finite() {
            return Err(Error::NonFinite("render gradients".into()));
        }
        Ok(grads)
    }

    #[cfg(feature = "parallel")]
    fn map_tiles<T: Send>(&self, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
        use rayon::prelude::*;
        (0..self.tiles_x * self.tiles_y).into_par_iter().map(f).collect()
    }

    #[cfg(not(feature = "parallel"))]
    fn map_tiles<T>(&self, f: impl Fn(usize) -> T) -> Vec<T> {
        (0..self.tiles_x * self.tiles_y).map(f).collect()
    }
}

/// Forward render of one view.
pub fn render(cloud: &GaussianCloud, medium: &MediumNet, cam: &CameraView) -> Result<RenderOutput> {
    Ok(PreparedView::new(cloud, medium, cam, false)?.forward())
}

/// Reverse-mode gradients of an objective whose output gradients are `upstream`.
pub fn render_backward(
    cloud: &GaussianCloud,
    medium: &MediumNet,
    cam: &CameraView,
    upstream: &RenderUpstream,
) -> Result<GradientBuffer> {
    PreparedView::new(cloud, medium, cam, true)?.backward(cloud, medium, upstream)
}
