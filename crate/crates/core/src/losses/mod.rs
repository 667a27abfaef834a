//! Objective terms: masked reconstruction, depth supervision, grey-world
//! prior, depth-edge-aware smoothness and adaptive frame weighting, plus
//! their composition and the evaluation metrics.
//!
//! Every term comes in a value form and a `*_grad` form returning the
//! gradient w.r.t. the rendered quantity it penalizes.

pub mod metrics;

use log::warn;

use crate::error::{Error, Result};
use crate::image::{Image, Plane};
use crate::medium::FrameWeight;
use crate::scene::CameraView;

pub use metrics::{psnr, ssim};

const MASK_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_r: f64,
    pub lambda_d: f64,
    pub lambda_ca: f64,
    pub lambda_s: f64,
    pub lambda_b: f64,
    pub alpha_afw: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_r: 0.8,
            lambda_d: 0.1,
            lambda_ca: 1.0,
            lambda_s: 0.2,
            lambda_b: 2.0,
            alpha_afw: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_r,
            self.lambda_d,
            self.lambda_ca,
            self.lambda_s,
            self.lambda_b,
            self.alpha_afw,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        if self.lambda_r > 1.0 {
            return Err(Error::Config("lambda_r must be <= 1".into()));
        }
        if self.alpha_afw > 1.0 {
            return Err(Error::Config("alpha_afw must be <= 1".into()));
        }
        if self.lambda_b > 5.0 {
            return Err(Error::Config("lambda_b must be <= 5".into()));
        }
        Ok(())
    }
}

/// Unweighted-by-AFW loss terms of one view.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub rec: f64,
    pub depth: f64,
    pub grey: f64,
    pub smooth: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub rec: f64,
    pub depth: f64,
    pub grey: f64,
    pub smooth: f64,
    pub total: f64,
    /// Frame weight applied, for interpolated views.
    pub afw_gamma_used: Option<f64>,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "iter,rec,depth,grey,smooth,total,gamma";

    pub fn csv_row(&self, iter: usize) -> String {
        let gamma = self.afw_gamma_used.map(|g| format!("{g:.9e}")).unwrap_or_default();
        format!(
            "{iter},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{gamma}",
            self.rec, self.depth, self.grey, self.smooth, self.total
        )
    }

    pub fn is_finite(&self) -> bool {
        [self.rec, self.depth, self.grey, self.smooth, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn check_mask(mask: &Plane, img: &Image) -> Result<f64> {
    if !mask.matches(img) {
        return Err(Error::Shape("mask vs image".into()));
    }
    Ok(mask.data.iter().sum())
}

/// `lambda_r * L1 + (1 - lambda_r) * (1 - SSIM) / 2`, both restricted to
/// the masked pixels; an all-zero mask gives 0.
pub fn loss_rec(rendered: &Image, target: &Image, mask: &Plane, lambda_r: f64) -> Result<f64> {
    Ok(loss_rec_impl(rendered, target, mask, lambda_r, false)?.0)
}

pub fn loss_rec_grad(rendered: &Image, target: &Image, mask: &Plane, lambda_r: f64) -> Result<(f64, Vec<f64>)> {
    loss_rec_impl(rendered, target, mask, lambda_r, true)
}

/// Masked L1 and masked SSIM loss separately.
pub fn rec_components(rendered: &Image, target: &Image, mask: &Plane) -> Result<(f64, f64)> {
    rendered.ensure_same_shape(target)?;
    let msum = check_mask(mask, rendered)?;
    if msum <= MASK_EPS {
        return Ok((0.0, 0.0));
    }
    let l1 = rendered
        .data
        .chunks_exact(3)
        .zip(target.data.chunks_exact(3))
        .zip(&mask.data)
        .map(|((r, t), m)| m * (0..3).map(|c| (r[c] - t[c]).abs()).sum::<f64>())
        .sum::<f64>()
        / (3.0 * msum);
    let smap = metrics::ssim_map(rendered, target);
    let s = smap
        .chunks_exact(3)
        .zip(&mask.data)
        .map(|(p, m)| m * (p[0] + p[1] + p[2]) / 3.0)
        .sum::<f64>()
        / msum;
    Ok((l1, (1.0 - s) / 2.0))
}

fn loss_rec_impl(
    rendered: &Image,
    target: &Image,
    mask: &Plane,
    lambda_r: f64,
    want_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    let (l1, lssim) = rec_components(rendered, target, mask)?;
    let msum: f64 = mask.data.iter().sum();
    let mut grad = Vec::new();
    if msum <= MASK_EPS {
        warn!("reconstruction loss over an empty motion mask");
        if want_grad {
            grad = vec![0.0; rendered.data.len()];
        }
        return Ok((0.0, grad));
    }
    if want_grad {
        grad = vec![0.0; rendered.data.len()];
        let k1 = lambda_r / (3.0 * msum);
        let mut weights = vec![0.0; rendered.data.len()];
        let ks = -(1.0 - lambda_r) / (6.0 * msum);
        for (p, &m) in mask.data.iter().enumerate() {
            for c in 0..3 {
                let i = 3 * p + c;
                let d = rendered.data[i] - target.data[i];
                grad[i] = k1 * m * sign(d);
                weights[i] = ks * m;
            }
        }
        if lambda_r < 1.0 {
            let gs = metrics::ssim_map_vjp(rendered, target, &weights);
            for (g, s) in grad.iter_mut().zip(gs) {
                *g += s;
            }
        }
    }
    Ok((lambda_r * l1 + (1.0 - lambda_r) * lssim, grad))
}

#[inline]
fn sign(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `lambda_d * mean|D_hat - D| + lambda_ca * sum_{ch,n} mean|z_ch^n - D|`.
///
/// `channel_depths` is laid out as in [`crate::render::RenderOutput`].
pub fn loss_depth(
    rendered_depth: &Plane,
    channel_depths: &[f64],
    pseudo: &Plane,
    lambda_d: f64,
    lambda_ca: f64,
) -> Result<f64> {
    Ok(loss_depth_grad(rendered_depth, channel_depths, pseudo, lambda_d, lambda_ca)?.0)
}

/// Value plus gradients w.r.t. the rendered depth and the channel depths.
pub fn loss_depth_grad(
    rendered_depth: &Plane,
    channel_depths: &[f64],
    pseudo: &Plane,
    lambda_d: f64,
    lambda_ca: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let n = pseudo.data.len();
    if rendered_depth.width != pseudo.width || rendered_depth.height != pseudo.height || channel_depths.len() != 6 * n {
        return Err(Error::Shape("depth loss inputs".into()));
    }
    let inv = 1.0 / n.max(1) as f64;
    let mut g_depth = vec![0.0; n];
    let mut g_ch = vec![0.0; 6 * n];
    let mut l_d = 0.0;
    let mut l_ca = 0.0;
    for p in 0..n {
        let d = pseudo.data[p];
        let e = rendered_depth.data[p] - d;
        l_d += e.abs();
        g_depth[p] = lambda_d * inv * sign(e);
        for j in 0..6 {
            let e = channel_depths[6 * p + j] - d;
            l_ca += e.abs();
            g_ch[6 * p + j] = lambda_ca * inv * sign(e);
        }
    }
    Ok((lambda_d * l_d * inv + lambda_ca * l_ca * inv, g_depth, g_ch))
}

/// Pseudo depth mapped affinely onto the rendered depth scale.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedDepth {
    pub depth: Plane,
    pub scale: f64,
    pub shift: f64,
}

/// Least-squares `scale * pseudo + shift` against `rendered` over pixels with
/// `mask > 0.5`. A constant pseudo depth gets a shift-only fit.
pub fn align_pseudo_depth(pseudo: &Plane, rendered: &Plane, mask: &Plane) -> Result<AlignedDepth> {
    if pseudo.width != rendered.width || pseudo.height != rendered.height || mask.data.len() != pseudo.data.len() {
        return Err(Error::Shape("depth alignment inputs".into()));
    }
    let idx: Vec<usize> = (0..pseudo.data.len()).filter(|&i| mask.data[i] > 0.5).collect();
    if idx.len() < 2 {
        return Err(Error::Contract(format!(
            "depth alignment needs >= 2 valid pixels, have {}",
            idx.len()
        )));
    }
    let n = idx.len() as f64;
    let mp = idx.iter().map(|&i| pseudo.data[i]).sum::<f64>() / n;
    let mr = idx.iter().map(|&i| rendered.data[i]).sum::<f64>() / n;
    let var = idx.iter().map(|&i| (pseudo.data[i] - mp).powi(2)).sum::<f64>();
    let cov = idx
        .iter()
        .map(|&i| (pseudo.data[i] - mp) * (rendered.data[i] - mr))
        .sum::<f64>();
    let (scale, shift) = if var <= 1e-12 * n.max(1.0) {
        (1.0, mr - mp)
    } else {
        let a = cov / var;
        (a, mr - a * mp)
    };
    let depth = Plane {
        width: pseudo.width,
        height: pseudo.height,
        data: pseudo.data.iter().map(|v| scale * v + shift).collect(),
    };
    Ok(AlignedDepth { depth, scale, shift })
}

/// `sum_ch (mean(J_ch) - 0.5)^2`.
pub fn loss_grey(restored: &Image) -> f64 {
    (0..3).map(|c| (restored.channel_mean(c) - 0.5).powi(2)).sum()
}

pub fn loss_grey_grad(restored: &Image) -> (f64, Vec<f64>) {
    let n = restored.pixel_count().max(1) as f64;
    let means = [0, 1, 2].map(|c| restored.channel_mean(c));
    let mut grad = vec![0.0; restored.data.len()];
    for p in grad.chunks_exact_mut(3) {
        for c in 0..3 {
            p[c] = 2.0 * (means[c] - 0.5) / n;
        }
    }
    (loss_grey(restored), grad)
}

/// Total variation of `image` weighted by `exp(-lambda_b |dD|)` of the
/// depth across each horizontal and vertical neighbour pair, summed over
/// channels and pixels.
pub fn loss_smooth(image: &Image, depth: &Plane, lambda_b: f64) -> Result<f64> {
    Ok(smooth_impl(image, depth, lambda_b, false)?.0)
}

pub fn loss_smooth_grad(image: &Image, depth: &Plane, lambda_b: f64) -> Result<(f64, Vec<f64>)> {
    smooth_impl(image, depth, lambda_b, true)
}

/// Horizontal and vertical edge weights, `None` past the border.
pub fn smooth_weights(depth: &Plane, lambda_b: f64) -> (Vec<Option<f64>>, Vec<Option<f64>>) {
    let (w, h) = (depth.width, depth.height);
    let mut wx = vec![None; w * h];
    let mut wy = vec![None; w * h];
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            if j + 1 < w {
                wx[p] = Some((-lambda_b * (depth.data[p] - depth.data[p + 1]).abs()).exp());
            }
            if i + 1 < h {
                wy[p] = Some((-lambda_b * (depth.data[p] - depth.data[p + w]).abs()).exp());
            }
        }
    }
    (wx, wy)
}

fn smooth_impl(image: &Image, depth: &Plane, lambda_b: f64, want_grad: bool) -> Result<(f64, Vec<f64>)> {
    if !depth.matches(image) {
        return Err(Error::Shape("smoothness depth vs image".into()));
    }
    let w = image.width;
    let (wx, wy) = smooth_weights(depth, lambda_b);
    let mut grad = if want_grad { vec![0.0; image.data.len()] } else { Vec::new() };
    let mut total = 0.0;
    for p in 0..image.pixel_count() {
        for (weight, q) in [(wx[p], p + 1), (wy[p], p + w)] {
            let Some(wt) = weight else { continue };
            for c in 0..3 {
                let d = image.data[3 * p + c] - image.data[3 * q + c];
                total += wt * d.abs();
                if want_grad {
                    let g = wt * sign(d);
                    grad[3 * p + c] += g;
                    grad[3 * q + c] -= g;
                }
            }
        }
    }
    Ok((total, grad))
}

/// `0.5 gamma L - 0.5 alpha ln gamma`.
pub fn loss_afw(base_loss: f64, gamma: f64, alpha_afw: f64) -> f64 {
    debug_assert!(gamma > 0.0);
    0.5 * gamma * base_loss - 0.5 * alpha_afw * gamma.ln()
}

/// `d loss_afw / d ln(gamma)`.
pub fn loss_afw_dlog_gamma(base_loss: f64, gamma: f64, alpha_afw: f64) -> f64 {
    0.5 * gamma * base_loss - 0.5 * alpha_afw
}

/// Compose the per-view total; interpolated views are reweighted by their
/// frame weight looked up through the view's handle.
pub fn loss_final(
    parts: &LossParts,
    weights: &LossWeights,
    view: &CameraView,
    frame_weights: &[FrameWeight],
) -> LossReport {
    let gamma = view
        .is_interpolated
        .then(|| view.weight_handle.and_then(|h| frame_weights.get(h)).map(FrameWeight::gamma))
        .flatten();
    compose(parts, weights, gamma)
}

/// [`loss_final`] with the frame weight given directly.
pub fn compose(parts: &LossParts, weights: &LossWeights, gamma: Option<f64>) -> LossReport {
    let base = parts.rec + parts.depth + parts.grey + weights.lambda_s * parts.smooth;
    let total = match gamma {
        Some(g) => loss_afw(base, g, weights.alpha_afw),
        None => base,
    };
    LossReport {
        rec: parts.rec,
        depth: parts.depth,
        grey: parts.grey,
        smooth: parts.smooth,
        total,
        afw_gamma_used: gamma,
    }
}
