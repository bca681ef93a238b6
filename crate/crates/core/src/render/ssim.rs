//! Structural similarity with an 11x11 Gaussian window (sigma 1.5, zero
//! padding at the border), computed per channel.

use nalgebra::Vector3;

use crate::raster::{Mask, RgbImage};

pub const WINDOW: usize = 11;
pub const WINDOW_SIGMA: f64 = 1.5;
pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;

pub fn gaussian_window() -> [f64; WINDOW] {
    let half = (WINDOW / 2) as f64;
    let mut k = [0.0; WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - half;
        *v = (-x * x / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp();
    }
    let sum: f64 = k.iter().sum();
    k.map(|v| v / sum)
}

/// Separable zero-padded filter. The window is symmetric, so this is also
/// its own adjoint.
fn blur(src: &[f64], w: usize, h: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let r = (WINDOW / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let xx = x as isize + i as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    acc += kv * src[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let yy = y as isize + i as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    acc += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn channel(img: &RgbImage, c: usize) -> Vec<f64> {
    img.data.iter().map(|v| v[c]).collect()
}

/// Mean SSIM over the selected pixels and all three channels. Returns 1
/// when no pixel is selected.
pub fn ssim(x: &RgbImage, y: &RgbImage, mask: Option<&Mask>) -> f64 {
    ssim_impl(x, y, mask, false).0
}

/// Mean SSIM and its gradient with respect to `x`.
pub fn ssim_with_grad(x: &RgbImage, y: &RgbImage, mask: Option<&Mask>) -> (f64, Vec<Vector3<f64>>) {
    let (v, g) = ssim_impl(x, y, mask, true);
    (v, g.unwrap())
}

fn ssim_impl(
    x: &RgbImage,
    y: &RgbImage,
    mask: Option<&Mask>,
    want_grad: bool,
) -> (f64, Option<Vec<Vector3<f64>>>) {
    assert!(x.same_shape(y), "ssim: image size mismatch");
    let (w, h) = (x.width, x.height);
    let n = w * h;
    let selected = |i: usize| mask.map_or(true, |m| m.data[i]);
    let count = (0..n).filter(|&i| selected(i)).count();
    let mut grad = want_grad.then(|| vec![Vector3::zeros(); n]);
    if count == 0 {
        return (1.0, grad);
    }
    let scale = 1.0 / (3 * count) as f64;
    let k = gaussian_window();
    let mut total = 0.0;
    for c in 0..3 {
        let xs = channel(x, c);
        let ys = channel(y, c);
        let xx: Vec<f64> = xs.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = ys.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = xs.iter().zip(&ys).map(|(a, b)| a * b).collect();
        let mx = blur(&xs, w, h, &k);
        let my = blur(&ys, w, h, &k);
        let exx = blur(&xx, w, h, &k);
        let eyy = blur(&yy, w, h, &k);
        let exy = blur(&xy, w, h, &k);
        let mut da = vec![0.0; n];
        let mut db = vec![0.0; n];
        let mut dc = vec![0.0; n];
        for i in 0..n {
            if !selected(i) {
                continue;
            }
            let (ux, uy) = (mx[i], my[i]);
            let sxx = exx[i] - ux * ux;
            let syy = eyy[i] - uy * uy;
            let sxy = exy[i] - ux * uy;
            let n1 = 2.0 * ux * uy + C1;
            let n2 = 2.0 * sxy + C2;
            let d1 = ux * ux + uy * uy + C1;
            let d2 = sxx + syy + C2;
            let s = n1 * n2 / (d1 * d2);
            total += s;
            if want_grad {
                da[i] = scale
                    * (2.0 * uy * (n2 - n1) / (d1 * d2) - 2.0 * ux * s * (1.0 / d1 - 1.0 / d2));
                db[i] = scale * (-s / d2);
                dc[i] = scale * 2.0 * n1 / (d1 * d2);
            }
        }
        if let Some(g) = grad.as_mut() {
            let ga = blur(&da, w, h, &k);
            let gb = blur(&db, w, h, &k);
            let gc = blur(&dc, w, h, &k);
            for i in 0..n {
                g[i][c] = ga[i] + 2.0 * xs[i] * gb[i] + ys[i] * gc[i];
            }
        }
    }
    (total * scale, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Raster;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Raster::from_vec(
            w,
            h,
            (0..w * h)
                .map(|_| Vector3::new(rng.gen(), rng.gen(), rng.gen()))
                .collect(),
        )
    }

    #[test]
    fn window_is_normalized_and_symmetric() {
        let k = gaussian_window();
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..WINDOW {
            assert_eq!(k[i], k[WINDOW - 1 - i]);
        }
    }

    #[test]
    fn identical_images_score_one() {
        let a = random_image(17, 13, 1);
        assert!((ssim(&a, &a, None) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let a = random_image(14, 12, 2);
        let b = random_image(14, 12, 3);
        let mask = Raster::from_vec(14, 12, (0..14 * 12).map(|i| i % 5 != 0).collect());
        let (_, g) = ssim_with_grad(&a, &b, Some(&mask));
        let h = 1e-6;
        for &(i, c) in &[(0usize, 0usize), (37, 1), (100, 2), (167, 0), (5, 2)] {
            let mut p = a.clone();
            p.data[i][c] += h;
            let mut m = a.clone();
            m.data[i][c] -= h;
            let fd = (ssim(&p, &b, Some(&mask)) - ssim(&m, &b, Some(&mask))) / (2.0 * h);
            assert!((fd - g[i][c]).abs() < 1e-7 + 1e-4 * fd.abs(), "{fd} vs {}", g[i][c]);
        }
    }
}
