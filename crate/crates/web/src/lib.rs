//! Browser bindings for the demo page in `www/`.

use wasm_bindgen::prelude::*;

use uwsplat::losses::{loss_afw, smooth_weights};
use uwsplat::medium::{DEFAULT_LAYERS, DEFAULT_PE_FREQS};
use uwsplat::train::{make_synthetic_scene, SyntheticScene};
use uwsplat::{render, Image, MediumNet, MediumSample};

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// A small generated scene rendered on demand through a uniform water body.
#[wasm_bindgen]
pub struct Demo {
    scene: SyntheticScene,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, gaussians: u32, views: u32) -> Result<Demo, JsError> {
        let scene = make_synthetic_scene(seed as u64, gaussians as usize, views as usize, &MediumSample::clear_water())
            .map_err(js_err)?;
        Ok(Demo { scene })
    }

    pub fn width(&self) -> u32 {
        self.scene.views[0].intrinsics.width as u32
    }

    pub fn height(&self) -> u32 {
        self.scene.views[0].intrinsics.height as u32
    }

    pub fn views(&self) -> u32 {
        self.scene.views.len() as u32
    }

    /// RGBA pixels of `view` seen through water. `medium` holds nine values:
    /// attenuation, backscatter and veiling light, each as r, g, b.
    pub fn render(&self, view: u32, medium: &[f64]) -> Result<Vec<u8>, JsError> {
        if medium.len() != 9 {
            return Err(JsError::new("expected 9 medium coefficients"));
        }
        let sample = MediumSample {
            beta_d: [medium[0], medium[1], medium[2]],
            beta_b: [medium[3], medium[4], medium[5]],
            b_inf: [medium[6], medium[7], medium[8]],
        };
        if !sample.is_valid() {
            return Err(JsError::new("medium coefficients out of range"));
        }
        let net = MediumNet::constant(&sample, DEFAULT_LAYERS, DEFAULT_PE_FREQS, 0);
        let cam = self.camera(view)?;
        let out = render(&self.scene.cloud, &net, cam).map_err(js_err)?;
        Ok(out.colour.to_rgba8())
    }

    /// Grey-level RGBA map of the smoothness weight between each pixel and
    /// its right and lower neighbours (their minimum).
    pub fn edge_weights(&self, view: u32, lambda_b: f64) -> Result<Vec<u8>, JsError> {
        let depth = self.scene.depth(self.index(view)?);
        let (wx, wy) = smooth_weights(depth, lambda_b);
        let mut img = Image::new(depth.width, depth.height);
        for (p, (a, b)) in wx.iter().zip(&wy).enumerate() {
            let w = a.unwrap_or(1.0).min(b.unwrap_or(1.0));
            img.data[3 * p..3 * p + 3].fill(w);
        }
        Ok(img.to_rgba8())
    }

    /// Ground-truth depth of `view` scaled to 0..1 by its maximum, as RGBA.
    pub fn depth(&self, view: u32) -> Result<Vec<u8>, JsError> {
        let depth = self.scene.depth(self.index(view)?);
        let max = depth.data.iter().cloned().fold(f64::MIN_POSITIVE, f64::max);
        let mut img = Image::new(depth.width, depth.height);
        for (p, z) in depth.data.iter().enumerate() {
            img.data[3 * p..3 * p + 3].fill(z / max);
        }
        Ok(img.to_rgba8())
    }
}

impl Demo {
    fn index(&self, view: u32) -> Result<usize, JsError> {
        let i = view as usize;
        if i < self.scene.views.len() {
            Ok(i)
        } else {
            Err(JsError::new("view index out of range"))
        }
    }

    fn camera(&self, view: u32) -> Result<&uwsplat::CameraView, JsError> {
        Ok(&self.scene.views[self.index(view)?])
    }
}

/// Weighted frame loss sampled at `n` log-spaced gamma values in
/// `[gamma_min, gamma_max]`. Returns gamma, loss pairs interleaved.
#[wasm_bindgen]
pub fn afw_curve(base_loss: f64, alpha: f64, gamma_min: f64, gamma_max: f64, n: u32) -> Vec<f64> {
    let n = n.max(2) as usize;
    let (lo, hi) = (gamma_min.ln(), gamma_max.ln());
    (0..n)
        .flat_map(|k| {
            let g = (lo + (hi - lo) * k as f64 / (n - 1) as f64).exp();
            [g, loss_afw(base_loss, g, alpha)]
        })
        .collect()
}

/// Minimiser of the weighted frame loss.
#[wasm_bindgen]
pub fn afw_optimum(base_loss: f64, alpha: f64) -> f64 {
    alpha / base_loss
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curve_bottoms_out_at_the_optimum() {
        let (l, a) = (0.4, 0.6);
        let c = afw_curve(l, a, 0.1, 10.0, 201);
        let best = c.chunks(2).min_by(|p, q| p[1].total_cmp(&q[1])).unwrap()[0];
        assert!((best / afw_optimum(l, a) - 1.0).abs() < 0.03);
    }
}
