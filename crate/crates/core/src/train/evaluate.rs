//! Held-out view metrics.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;

use crate::error::{Error, Result};
use crate::io::write_image;
use crate::losses::{psnr, ssim};
use crate::medium::MediumNet;
use crate::render::render;
use crate::scene::{CameraView, GaussianCloud};

pub const METRICS_FILE: &str = "metrics.csv";
pub const RENDERS_DIR: &str = "renders";

#[derive(Clone, Debug, PartialEq)]
pub struct ViewMetrics {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub views: Vec<ViewMetrics>,
}

impl EvalReport {
    pub fn mean_psnr(&self) -> Option<f64> {
        mean(self.views.iter().map(|v| v.psnr))
    }

    pub fn mean_ssim(&self) -> Option<f64> {
        mean(self.views.iter().map(|v| v.ssim))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("view,psnr,ssim\n");
        for v in &self.views {
            let _ = writeln!(s, "{},{:.6},{:.6}", v.id, v.psnr, v.ssim);
        }
        if let (Some(p), Some(q)) = (self.mean_psnr(), self.mean_ssim()) {
            let _ = writeln!(s, "mean,{p:.6},{q:.6}");
        }
        s
    }
}

fn mean(it: impl ExactSizeIterator<Item = f64>) -> Option<f64> {
    let n = it.len();
    (n > 0).then(|| it.sum::<f64>() / n as f64)
}

/// Render every view and score it against its image.
pub fn evaluate(cloud: &GaussianCloud, medium: &MediumNet, views: &[CameraView]) -> Result<EvalReport> {
    Ok(evaluate_with_renders(cloud, medium, views)?.0)
}

fn evaluate_with_renders(
    cloud: &GaussianCloud,
    medium: &MediumNet,
    views: &[CameraView],
) -> Result<(EvalReport, Vec<crate::image::Image>)> {
    if views.is_empty() {
        warn!("evaluation set is empty");
    }
    let mut report = EvalReport::default();
    let mut renders = Vec::with_capacity(views.len());
    for v in views {
        let mut out = render(cloud, medium, v)?.colour;
        out.clamp01();
        report.views.push(ViewMetrics {
            id: v.id.clone(),
            psnr: psnr(&out, &v.image),
            ssim: ssim(&out, &v.image),
        });
        renders.push(out);
    }
    Ok((report, renders))
}

/// [`evaluate`], writing `metrics.csv` and one PNG per view into `out_dir`.
pub fn evaluate_to_dir(
    cloud: &GaussianCloud,
    medium: &MediumNet,
    views: &[CameraView],
    out_dir: &Path,
) -> Result<EvalReport> {
    let (report, renders) = evaluate_with_renders(cloud, medium, views)?;
    let rdir = out_dir.join(RENDERS_DIR);
    fs::create_dir_all(&rdir).map_err(|e| Error::io(&rdir, e))?;
    for (v, img) in views.iter().zip(&renders) {
        write_image(&rdir.join(format!("{}.png", v.id)), img)?;
    }
    let path = out_dir.join(METRICS_FILE);
    fs::write(&path, report.to_csv()).map_err(|e| Error::io(path, e))?;
    Ok(report)
}
