//! PSNR and SSIM (11x11 Gaussian window, sigma 1.5, zero-padded "same"
//! filtering, mean over pixels and channels), plus the SSIM adjoint.

use crate::image::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const PSNR_CAP: f64 = 100.0;

pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let w: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable zero-padded filter. Self-adjoint for a symmetric kernel.
fn filter(src: &[f64], width: usize, height: usize, kernel: &[f64]) -> Vec<f64> {
    let r = kernel.len() / 2;
    let mut tmp = vec![0.0; src.len()];
    for y in 0..height {
        let row = &src[y * width..(y + 1) * width];
        for x in 0..width {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let sx = x as isize + k as isize - r as isize;
                if sx >= 0 && (sx as usize) < width {
                    acc += kv * row[sx as usize];
                }
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let sy = y as isize + k as isize - r as isize;
                if sy >= 0 && (sy as usize) < height {
                    acc += kv * tmp[sy as usize * width + x];
                }
            }
            out[y * width + x] = acc;
        }
    }
    out
}

struct ChannelStats {
    mu_x: Vec<f64>,
    mu_y: Vec<f64>,
    e_xx: Vec<f64>,
    e_yy: Vec<f64>,
    e_xy: Vec<f64>,
}

fn channel_stats(x: &[f64], y: &[f64], width: usize, height: usize, kernel: &[f64]) -> ChannelStats {
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    ChannelStats {
        mu_x: filter(x, width, height, kernel),
        mu_y: filter(y, width, height, kernel),
        e_xx: filter(&xx, width, height, kernel),
        e_yy: filter(&yy, width, height, kernel),
        e_xy: filter(&xy, width, height, kernel),
    }
}

#[inline]
fn ssim_terms(mx: f64, my: f64, exx: f64, eyy: f64, exy: f64) -> (f64, f64, f64, f64) {
    let a = 2.0 * mx * my + SSIM_C1;
    let b = 2.0 * (exy - mx * my) + SSIM_C2;
    let c = mx * mx + my * my + SSIM_C1;
    let d = (exx - mx * mx) + (eyy - my * my) + SSIM_C2;
    (a, b, c, d)
}

fn split_channel(img: &Image, ch: usize) -> Vec<f64> {
    img.data.iter().skip(ch).step_by(3).copied().collect()
}

/// Per-pixel SSIM, interleaved like the image.
pub fn ssim_map(a: &Image, b: &Image) -> Vec<f64> {
    assert!(a.same_shape(b), "ssim on images of different shapes");
    let kernel = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let (w, h) = (a.width, a.height);
    let mut out = vec![0.0; a.data.len()];
    for ch in 0..3 {
        let st = channel_stats(&split_channel(a, ch), &split_channel(b, ch), w, h, &kernel);
        for p in 0..w * h {
            let (t1, t2, t3, t4) = ssim_terms(st.mu_x[p], st.mu_y[p], st.e_xx[p], st.e_yy[p], st.e_xy[p]);
            out[3 * p + ch] = (t1 * t2) / (t3 * t4);
        }
    }
    out
}

pub fn ssim(a: &Image, b: &Image) -> f64 {
    let m = ssim_map(a, b);
    m.iter().sum::<f64>() / m.len() as f64
}

pub fn mse(a: &Image, b: &Image) -> f64 {
    assert!(a.same_shape(b), "mse on images of different shapes");
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64
}

/// `10 log10(1 / MSE)`, capped at 100 dB.
pub fn psnr(a: &Image, b: &Image) -> f64 {
    let m = mse(a, b);
    if m < 1e-10 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / m).log10()).min(PSNR_CAP)
    }
}

/// Gradient w.r.t. `x` of `sum_p weights[p] * ssim_map(x, y)[p]`.
pub fn ssim_map_vjp(x: &Image, y: &Image, weights: &[f64]) -> Vec<f64> {
    let kernel = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let (w, h) = (x.width, x.height);
    let mut grad = vec![0.0; x.data.len()];
    for ch in 0..3 {
        let xs = split_channel(x, ch);
        let ys = split_channel(y, ch);
        let st = channel_stats(&xs, &ys, w, h, &kernel);
        let n = w * h;
        let mut g_mu = vec![0.0; n];
        let mut g_xx = vec![0.0; n];
        let mut g_xy = vec![0.0; n];
        for p in 0..n {
            let wp = weights[3 * p + ch];
            if wp == 0.0 {
                continue;
            }
            let (mx, my) = (st.mu_x[p], st.mu_y[p]);
            let (a, b, c, d) = ssim_terms(mx, my, st.e_xx[p], st.e_yy[p], st.e_xy[p]);
            let s = (a * b) / (c * d);
            g_mu[p] = wp * s * (2.0 * my / a - 2.0 * my / b - 2.0 * mx / c + 2.0 * mx / d);
            g_xx[p] = -wp * s / d;
            g_xy[p] = wp * s * 2.0 / b;
        }
        let f_mu = filter(&g_mu, w, h, &kernel);
        let f_xx = filter(&g_xx, w, h, &kernel);
        let f_xy = filter(&g_xy, w, h, &kernel);
        for p in 0..n {
            grad[3 * p + ch] = f_mu[p] + 2.0 * xs[p] * f_xx[p] + ys[p] * f_xy[p];
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut impl Rng, w: usize, h: usize) -> Image {
        Image::from_data(w, h, (0..w * h * 3).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn identical_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_image(&mut rng, 13, 9);
        assert_eq!(psnr(&a, &a), 100.0);
        assert_eq!(ssim(&a, &a), 1.0);
    }

    #[test]
    fn constant_offset_psnr() {
        let a = Image::filled(8, 8, [0.0; 3]);
        let b = Image::filled(8, 8, [0.1; 3]);
        assert!((psnr(&a, &b) - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &b), psnr(&b, &a));
    }

    #[test]
    fn window_is_normalized_and_symmetric() {
        let w = gaussian_window(11, 1.5);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..11 {
            assert_eq!(w[i], w[10 - i]);
        }
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_image(&mut rng, 14, 12);
        let y = random_image(&mut rng, 14, 12);
        let weights: Vec<f64> = (0..x.data.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = |img: &Image| -> f64 { ssim_map(img, &y).iter().zip(&weights).map(|(s, w)| s * w).sum() };
        let g = ssim_map_vjp(&x, &y, &weights);
        for k in (0..x.data.len()).step_by(7) {
            let mut a = x.clone();
            let mut b = x.clone();
            a.data[k] += 1e-6;
            b.data[k] -= 1e-6;
            let fd = (f(&a) - f(&b)) / 2e-6;
            assert!((fd - g[k]).abs() < 1e-6 * fd.abs().max(1.0), "{k}: {fd} vs {}", g[k]);
        }
    }
}
