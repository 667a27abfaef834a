//! The per-view training objective and its gradients.

use crate::error::{Error, Result};
use crate::image::Plane;
use crate::losses::{
    compose, loss_afw_dlog_gamma, loss_depth_grad, loss_grey_grad, loss_rec_grad, loss_smooth_grad, LossParts,
    LossReport,
};
use crate::medium::{FrameWeight, MediumNet};
use crate::render::{GradientBuffer, PreparedView, RenderOutput, RenderUpstream};
use crate::scene::{CameraView, GaussianCloud};

use super::TrainConfig;

#[derive(Clone, Debug)]
pub struct ViewEvaluation {
    pub report: LossReport,
    pub render: RenderOutput,
    /// Present when gradients were requested.
    pub grads: Option<GradientBuffer>,
}

/// Frame weight applied to `view`, if any.
pub fn view_gamma(view: &CameraView, frame_weights: &[FrameWeight], cfg: &TrainConfig) -> Option<(usize, f64)> {
    if !(cfg.afw && view.is_interpolated) {
        return None;
    }
    let h = view.weight_handle?;
    frame_weights.get(h).map(|w| (h, w.gamma()))
}

/// Render `view`, evaluate the full loss and optionally backpropagate it.
///
/// `depth_target` is the aligned pseudo depth; the view's raw pseudo depth
/// is used when it is absent. The smoothness edges come from the same depth,
/// or from the (detached) rendered depth when the view has none.
pub fn evaluate_view(
    cloud: &GaussianCloud,
    medium: &MediumNet,
    view: &CameraView,
    frame_weights: &[FrameWeight],
    depth_target: Option<&Plane>,
    cfg: &TrainConfig,
    want_grad: bool,
) -> Result<ViewEvaluation> {
    let w = &cfg.weights;
    let prepared = PreparedView::new(cloud, medium, view, want_grad)?;
    let out = prepared.forward();
    let (width, height) = (view.width(), view.height());
    let npx = (width * height) as f64;
    let mask = view.mask_or_ones();

    let (rec, g_rec) = loss_rec_grad(&out.colour, &view.image, &mask, w.lambda_r)?;

    let target = depth_target.or(view.pseudo_depth.as_ref());
    let (depth, g_depth, g_ch) = match target {
        Some(t) if w.lambda_d > 0.0 || w.lambda_ca > 0.0 => {
            loss_depth_grad(&out.depth, &out.channel_depth, t, w.lambda_d, w.lambda_ca)?
        }
        _ => (0.0, vec![0.0; width * height], vec![0.0; 6 * width * height]),
    };

    let (grey, g_grey) = loss_grey_grad(&out.restored);

    let (smooth, g_smooth) = if cfg.esl && w.lambda_s > 0.0 {
        let edges = target.unwrap_or(&out.depth);
        let (mut s, mut g) = loss_smooth_grad(&out.colour, edges, w.lambda_b)?;
        if cfg.smooth_normalize {
            s /= npx;
            g.iter_mut().for_each(|v| *v /= npx);
        }
        (s, g)
    } else {
        (0.0, Vec::new())
    };

    let parts = LossParts {
        rec,
        depth,
        grey,
        smooth,
    };
    let gamma = view_gamma(view, frame_weights, cfg);
    let report = compose(&parts, w, gamma.map(|g| g.1));
    if !report.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss on view {}: rec={} depth={} grey={} smooth={} total={}",
            view.id, report.rec, report.depth, report.grey, report.smooth, report.total
        )));
    }

    let grads = if want_grad {
        let mut colour = g_rec;
        if !g_smooth.is_empty() {
            for (c, s) in colour.iter_mut().zip(&g_smooth) {
                *c += w.lambda_s * s;
            }
        }
        let mut up = RenderUpstream {
            colour,
            restored: g_grey,
            depth: g_depth,
            channel_depth: g_ch,
        };
        if let Some((_, g)) = gamma {
            up.scale(0.5 * g);
        }
        let mut grads = prepared.backward(cloud, medium, &up)?;
        grads.frame_weights = vec![0.0; frame_weights.len()];
        if let Some((h, g)) = gamma {
            let base = rec + depth + grey + w.lambda_s * smooth;
            grads.frame_weights[h] = loss_afw_dlog_gamma(base, g, w.alpha_afw);
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite(format!("gradients on view {}", view.id)));
        }
        Some(grads)
    } else {
        None
    };

    Ok(ViewEvaluation {
        report,
        render: out,
        grads,
    })
}
