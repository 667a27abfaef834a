//! Adaptive density control: clone, split and prune.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::render::GradientBuffer;
use crate::scene::GaussianCloud;

pub const SPLIT_SCALE_DIVISOR: f64 = 1.6;
pub const SPLIT_SAMPLES: usize = 2;

/// Running sums of screen-space mean gradient norms, in normalized device units.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DensifyStats {
    pub grad_sum: Vec<f64>,
    pub count: Vec<u32>,
}

impl DensifyStats {
    pub fn new(len: usize) -> Self {
        Self {
            grad_sum: vec![0.0; len],
            count: vec![0; len],
        }
    }

    pub fn reset(&mut self, len: usize) {
        *self = Self::new(len);
    }

    /// Add one view's gradients. Pixel gradients are converted to NDC units.
    pub fn accumulate(&mut self, grads: &GradientBuffer, width: usize, height: usize) {
        let (sx, sy) = (0.5 * width as f64, 0.5 * height as f64);
        for (i, g) in grads.mean2d.iter().enumerate() {
            if grads.visible[i] {
                self.grad_sum[i] += (g[0] * sx).hypot(g[1] * sy);
                self.count[i] += 1;
            }
        }
    }

    pub fn mean(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.grad_sum[i] / self.count[i] as f64
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DensifyParams {
    pub grad_threshold: f64,
    pub prune_opacity: f64,
    /// Clone rather than split when the largest scale is at most this.
    pub clone_max_scale: f64,
}

/// Outcome of one densify and prune pass.
#[derive(Clone, Debug, PartialEq)]
pub struct DensifyOutcome {
    pub cloud: GaussianCloud,
    /// For each output Gaussian, the input index whose optimizer state it keeps.
    pub source: Vec<Option<usize>>,
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

pub fn densify_and_prune<R: Rng>(
    cloud: &GaussianCloud,
    stats: &DensifyStats,
    params: &DensifyParams,
    rng: &mut R,
) -> DensifyOutcome {
    let mut out = Vec::with_capacity(cloud.len());
    let mut source = Vec::with_capacity(cloud.len());
    let (mut cloned, mut split) = (0, 0);

    for (i, g) in cloud.gaussians.iter().enumerate() {
        let hot = i < stats.count.len() && stats.mean(i) > params.grad_threshold;
        if !hot {
            out.push(g.clone());
            source.push(Some(i));
            continue;
        }
        if g.scale().max() <= params.clone_max_scale {
            out.push(g.clone());
            source.push(Some(i));
            out.push(g.clone());
            source.push(None);
            cloned += 1;
        } else {
            let r = g.rotation_matrix();
            let s = g.scale();
            for _ in 0..SPLIT_SAMPLES {
                let n = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
                let mut child = g.clone();
                child.position = g.position + r * s.component_mul(&n);
                child.log_scale = g.log_scale.add_scalar(-SPLIT_SCALE_DIVISOR.ln());
                out.push(child);
                source.push(None);
            }
            split += 1;
        }
    }

    // prune, keeping the most opaque Gaussian if all would go
    let keep: Vec<bool> = out.iter().map(|g| g.opacity() >= params.prune_opacity).collect();
    let mut pruned = keep.iter().filter(|k| !**k).count();
    let (mut gaussians, mut src): (Vec<_>, Vec<_>) = out
        .iter()
        .zip(&source)
        .zip(&keep)
        .filter(|(_, k)| **k)
        .map(|((g, s), _)| (g.clone(), *s))
        .unzip();
    if gaussians.is_empty() && !out.is_empty() {
        let best = (0..out.len())
            .max_by(|&a, &b| out[a].opacity_logit.total_cmp(&out[b].opacity_logit))
            .expect("non-empty");
        gaussians.push(out[best].clone());
        src.push(source[best]);
        pruned -= 1;
    }

    let mut next = cloud.clone();
    next.gaussians = gaussians;
    DensifyOutcome {
        cloud: next,
        source: src,
        cloned,
        split,
        pruned,
    }
}
