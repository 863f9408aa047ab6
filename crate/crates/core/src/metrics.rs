//! Evaluation measures: PSNR, SSIM, lightness-order error, brightness
//! consistency across views and flow-based warping error.
//!
//! Everything here is computed in `f64` on plain images and is not
//! differentiable; see [`crate::losses`] for the training objective.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{dim_err, Error, Result};
use crate::image_io::{ImageRGB, Mask};
use crate::tensor::Scalar;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Side length of the LOE working resolution (shorter side).
pub const LOE_SIDE: usize = 100;

fn same_dims(a: &ImageRGB, b: &ImageRGB, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(dim_err!("{what}: {:?} vs {:?}", a.dims(), b.dims()));
    }
    Ok(())
}

/// `10·log10(1 / MSE)` with peak 1. Identical inputs give `+∞`.
pub fn psnr_slices<T: Scalar>(x: &[T], y: &[T]) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(dim_err!("psnr over {} vs {} samples", x.len(), y.len()));
    }
    let mse = x
        .iter()
        .zip(y)
        .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum::<f64>()
        / x.len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    })
}

pub fn psnr(x: &ImageRGB, y: &ImageRGB) -> Result<f64> {
    same_dims(x, y, "psnr")?;
    psnr_slices(x.data(), y.data())
}

/// Window side used for an `h × w` plane: 11, or the largest odd size that
/// fits when a side is shorter.
pub fn ssim_window_size(h: usize, w: usize) -> usize {
    let m = h.min(w).min(SSIM_WINDOW);
    if m.is_multiple_of(2) {
        m.saturating_sub(1)
    } else {
        m
    }
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of an `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ho, wo) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        let src = &plane[y * w..(y + 1) * w];
        for x in 0..wo {
            rows[y * wo + x] = taps.iter().zip(&src[x..x + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..k).map(|i| taps[i] * rows[(y + i) * wo + x]).sum();
        }
    }
    out
}

/// Mean SSIM of two single-channel planes.
pub fn ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize) -> Result<f64> {
    if x.len() != h * w || y.len() != h * w {
        return Err(dim_err!("ssim plane is not {h}x{w}"));
    }
    let size = ssim_window_size(h, w);
    if size == 0 {
        return Err(dim_err!("ssim needs a non-empty plane"));
    }
    let taps = gaussian_taps(size, SSIM_SIGMA);
    let prod = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(p, q)| p * q).collect() };
    let mx = filter_valid(x, h, w, &taps);
    let my = filter_valid(y, h, w, &taps);
    let mxx = filter_valid(&prod(x, x), h, w, &taps);
    let myy = filter_valid(&prod(y, y), h, w, &taps);
    let mxy = filter_valid(&prod(x, y), h, w, &taps);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = mxx[i] - ux * ux;
        let vy = myy[i] - uy * uy;
        let cxy = mxy[i] - ux * uy;
        total += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2))
            / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
    }
    Ok(total / mx.len() as f64)
}

fn channel_plane(img: &ImageRGB, c: usize) -> Vec<f64> {
    img.data()
        .iter()
        .skip(c)
        .step_by(3)
        .map(|&v| v as f64)
        .collect()
}

/// Mean local SSIM per channel, averaged over the three channels.
pub fn ssim_image(x: &ImageRGB, y: &ImageRGB) -> Result<f64> {
    same_dims(x, y, "ssim")?;
    let (h, w) = x.dims();
    let mut total = 0.0;
    for c in 0..3 {
        total += ssim_plane(&channel_plane(x, c), &channel_plane(y, c), h, w)?;
    }
    Ok(total / 3.0)
}

/// Per-pixel `max(R, G, B)` at LOE working resolution.
fn loe_lightness(img: &ImageRGB) -> (Vec<f32>, usize, usize) {
    let (h, w) = img.dims();
    let short = h.min(w);
    let (nh, nw) = if short > LOE_SIDE {
        let scale = LOE_SIDE as f64 / short as f64;
        (
            ((h as f64 * scale).round() as usize).max(1),
            ((w as f64 * scale).round() as usize).max(1),
        )
    } else {
        (h, w)
    };
    let mut out = Vec::with_capacity(nh * nw);
    for y in 0..nh {
        let sy = ((y * 2 + 1) * h / (2 * nh)).min(h - 1);
        for x in 0..nw {
            let sx = ((x * 2 + 1) * w / (2 * nw)).min(w - 1);
            out.push(
                img.get(sy, sx, 0)
                    .max(img.get(sy, sx, 1))
                    .max(img.get(sy, sx, 2)),
            );
        }
    }
    (out, nh, nw)
}

/// Lightness-order error: the fraction of ordered pixel pairs `(i, j)` whose
/// relation `L(i) ≥ L(j)` differs between enhanced and reference, × 1000.
pub fn loe(enhanced: &ImageRGB, reference: &ImageRGB) -> Result<f64> {
    same_dims(enhanced, reference, "loe")?;
    let (le, ..) = loe_lightness(enhanced);
    let (lr, ..) = loe_lightness(reference);
    let m = le.len();
    let mut disagree: u64 = 0;
    for i in 0..m {
        let (ei, ri) = (le[i], lr[i]);
        disagree += le
            .iter()
            .zip(&lr)
            .filter(|&(&ej, &rj)| (ei >= ej) != (ri >= rj))
            .count() as u64;
    }
    Ok(disagree as f64 / (m as f64 * m as f64) * 1000.0)
}

/// Mean brightness on the 0–255 scale.
pub fn brightness(img: &ImageRGB) -> f64 {
    img.mean() * 255.0
}

/// `(AB, MABD)`: population variance of per-view brightness and mean absolute
/// brightness difference between consecutive views, both on the 0–255 scale.
pub fn ab_mabd(images: &[ImageRGB]) -> Result<(f64, f64)> {
    if images.len() < 2 {
        return Err(Error::Contract(format!(
            "AB/MABD need at least two images, got {}",
            images.len()
        )));
    }
    let b: Vec<f64> = images.iter().map(brightness).collect();
    let n = b.len() as f64;
    let mean = b.iter().sum::<f64>() / n;
    let ab = b.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let mabd = b.windows(2).map(|p| (p[1] - p[0]).abs()).sum::<f64>() / (n - 1.0);
    Ok((ab, mabd))
}

/// Dense displacement field; `(dx, dy)` per pixel in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub height: usize,
    pub width: usize,
    pub data: Vec<[f32; 2]>,
}

pub const FLOW_MAGIC: &[u8; 4] = b"RCFL";

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        FlowField {
            height,
            width,
            data: vec![[0.0; 2]; height * width],
        }
    }

    pub fn uniform(height: usize, width: usize, dx: f32, dy: f32) -> Self {
        FlowField {
            height,
            width,
            data: vec![[dx, dy]; height * width],
        }
    }

    pub fn at(&self, y: usize, x: usize) -> [f32; 2] {
        self.data[y * self.width + x]
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(FLOW_MAGIC)?;
        w.write_all(&(self.height as u32).to_le_bytes())?;
        w.write_all(&(self.width as u32).to_le_bytes())?;
        for [dx, dy] in &self.data {
            w.write_all(&dx.to_le_bytes())?;
            w.write_all(&dy.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::Malformed(format!("reading flow: {e}")))?;
        if bytes.len() < 12 || &bytes[..4] != FLOW_MAGIC {
            return Err(Error::Malformed("not an RCFL flow file".into()));
        }
        let u32_at =
            |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
        let (height, width) = (u32_at(4) as usize, u32_at(8) as usize);
        let body = &bytes[12..];
        if body.len() != height * width * 8 {
            return Err(Error::Malformed(format!(
                "flow body holds {} bytes, expected {}",
                body.len(),
                height * width * 8
            )));
        }
        let data: Vec<[f32; 2]> = body
            .chunks_exact(8)
            .map(|c| {
                [
                    f32::from_le_bytes([c[0], c[1], c[2], c[3]]),
                    f32::from_le_bytes([c[4], c[5], c[6], c[7]]),
                ]
            })
            .collect();
        if data.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NumericDomain(
                "flow contains non-finite values".into(),
            ));
        }
        Ok(FlowField {
            height,
            width,
            data,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::with_capacity(12 + self.data.len() * 8);
        self.write_to(&mut buf)
            .expect("writing to a Vec cannot fail");
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut f)
    }
}

fn bilinear(img: &ImageRGB, y: f64, x: f64, c: usize) -> f64 {
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = (
        (y0 + 1).min(img.height() - 1),
        (x0 + 1).min(img.width() - 1),
    );
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let g = |yy: usize, xx: usize| img.get(yy, xx, c) as f64;
    (1.0 - fy) * ((1.0 - fx) * g(y0, x0) + fx * g(y0, x1))
        + fy * ((1.0 - fx) * g(y1, x0) + fx * g(y1, x1))
}

/// Mean squared error between `a` and `b` sampled at `p + flow(p)`, over
/// pixels that are unmasked and whose target lands inside `b`.
pub fn warping_error(a: &ImageRGB, b: &ImageRGB, flow: &FlowField, mask: &Mask) -> Result<f64> {
    same_dims(a, b, "warping error images")?;
    let (h, w) = a.dims();
    if (flow.height, flow.width) != (h, w) || (mask.height, mask.width) != (h, w) {
        return Err(dim_err!(
            "flow {}x{} / mask {}x{} do not match {h}x{w} images",
            flow.height,
            flow.width,
            mask.height,
            mask.width
        ));
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            if !mask.valid[y * w + x] {
                continue;
            }
            let [dx, dy] = flow.at(y, x);
            let (ty, tx) = (y as f64 + dy as f64, x as f64 + dx as f64);
            if !(0.0..=(h - 1) as f64).contains(&ty) || !(0.0..=(w - 1) as f64).contains(&tx) {
                continue;
            }
            for c in 0..3 {
                sum += (a.get(y, x, c) as f64 - bilinear(b, ty, tx, c)).powi(2);
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Contract(
            "warping error undefined: every pixel is occluded or out of bounds".into(),
        ));
    }
    Ok(sum / (3 * count) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> ImageRGB {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageRGB::from_fn(h, w, |_, _, _| rng.random())
    }

    /// Direct per-window SSIM with the full 2-D window, no separability.
    fn ssim_plane_naive(x: &[f64], y: &[f64], h: usize, w: usize) -> f64 {
        let k = ssim_window_size(h, w);
        let c = (k as f64 - 1.0) / 2.0;
        let mut win = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                let r2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
                win[i * k + j] = (-r2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            }
        }
        let s: f64 = win.iter().sum();
        win.iter_mut().for_each(|v| *v /= s);
        let mut total = 0.0;
        let mut n = 0;
        for oy in 0..=h - k {
            for ox in 0..=w - k {
                let (mut ux, mut uy, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let g = win[i * k + j];
                        let (a, b) = (x[(oy + i) * w + ox + j], y[(oy + i) * w + ox + j]);
                        ux += g * a;
                        uy += g * b;
                        xx += g * a * a;
                        yy += g * b * b;
                        xy += g * a * b;
                    }
                }
                let (vx, vy, cxy) = (xx - ux * ux, yy - uy * uy, xy - ux * uy);
                total += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                    / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
                n += 1;
            }
        }
        total / n as f64
    }

    #[test]
    fn psnr_hand_values() {
        let x = ImageRGB::filled(4, 4, 0.5);
        assert_eq!(psnr(&x, &x).unwrap(), f64::INFINITY);
        let a = vec![0.6f64; 48];
        let b = vec![0.5f64; 48];
        assert!((psnr_slices(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let c = vec![0.51f64; 48];
        assert!((psnr_slices(&c, &b).unwrap() - 40.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_decreases_with_noise_amplitude() {
        let base = random_image(16, 16, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noise: Vec<f32> = (0..base.data().len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let mut last = f64::INFINITY;
        for amp in [0.01f32, 0.03, 0.1] {
            let mut noisy = base.clone();
            noisy
                .data_mut()
                .iter_mut()
                .zip(&noise)
                .for_each(|(v, n)| *v += amp * n);
            let p = psnr(&base, &noisy).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ssim_identity_symmetry_and_oracle() {
        let x = random_image(32, 32, 3);
        let y = random_image(32, 32, 4);
        assert!((ssim_image(&x, &x).unwrap() - 1.0).abs() < 1e-9);
        let xy = ssim_image(&x, &y).unwrap();
        assert!((xy - ssim_image(&y, &x).unwrap()).abs() < 1e-12);
        let mut oracle = 0.0;
        for c in 0..3 {
            oracle += ssim_plane_naive(&channel_plane(&x, c), &channel_plane(&y, c), 32, 32);
        }
        assert!((xy - oracle / 3.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_of_inverted_checkerboard_is_negative() {
        let board = ImageRGB::from_fn(16, 16, |y, x, _| ((y + x) % 2) as f32);
        let inv = board.map(|v| 1.0 - v);
        assert!(ssim_image(&board, &inv).unwrap() < 0.0);
    }

    #[test]
    fn small_planes_shrink_the_window() {
        assert_eq!(ssim_window_size(64, 64), 11);
        assert_eq!(ssim_window_size(8, 20), 7);
        assert_eq!(ssim_window_size(7, 9), 7);
        let x = random_image(8, 9, 5);
        let y = random_image(8, 9, 6);
        let oracle = ssim_plane_naive(&channel_plane(&x, 0), &channel_plane(&y, 0), 8, 9);
        let fast = ssim_plane(&channel_plane(&x, 0), &channel_plane(&y, 0), 8, 9).unwrap();
        assert!((fast - oracle).abs() < 1e-12);
    }

    fn loe_brute(e: &ImageRGB, r: &ImageRGB) -> f64 {
        let l = |img: &ImageRGB| -> Vec<f32> {
            (0..img.height() * img.width())
                .map(|p| {
                    let (y, x) = (p / img.width(), p % img.width());
                    (0..3).map(|c| img.get(y, x, c)).fold(f32::MIN, f32::max)
                })
                .collect()
        };
        let (le, lr) = (l(e), l(r));
        let m = le.len();
        let mut bad = 0;
        for i in 0..m {
            for j in 0..m {
                if (le[i] >= le[j]) != (lr[i] >= lr[j]) {
                    bad += 1;
                }
            }
        }
        bad as f64 / (m * m) as f64 * 1000.0
    }

    #[test]
    fn loe_identity_inversion_and_monotone_remap() {
        // distinct lightness values
        let r = ImageRGB::from_fn(8, 8, |y, x, c| {
            ((y * 8 + x) as f32 + 1.0) / 66.0 * if c == 0 { 1.0 } else { 0.5 }
        });
        assert_eq!(loe(&r, &r).unwrap(), 0.0);
        let inv = r.map(|v| 1.0 - v);
        let inv_l = ImageRGB::from_fn(8, 8, |y, x, _| 1.0 - r.get(y, x, 0));
        let got = loe(&inv_l, &r).unwrap();
        assert_eq!(got, loe_brute(&inv_l, &r));
        assert_eq!(got, (64.0 * 63.0) / (64.0 * 64.0) * 1000.0);
        assert!(loe(&inv, &r).unwrap() > 0.0);
        let sq = r.map(|v| v * v);
        assert_eq!(loe(&sq, &r).unwrap(), 0.0);
    }

    #[test]
    fn loe_downsamples_large_images() {
        let big = random_image(150, 250, 7);
        let (l, h, w) = loe_lightness(&big);
        assert_eq!((h, w), (100, 167));
        assert_eq!(l.len(), h * w);
        assert_eq!(loe(&big, &big).unwrap(), 0.0);
    }

    #[test]
    fn ab_mabd_hand_values() {
        let a = ImageRGB::filled(4, 4, 0.2);
        let b = ImageRGB::filled(4, 4, 0.4);
        let (ab, mabd) = ab_mabd(&[a.clone(), a.clone()]).unwrap();
        assert_eq!((ab, mabd), (0.0, 0.0));
        let (_, mabd) = ab_mabd(&[a.clone(), b.clone()]).unwrap();
        assert!((mabd - 51.0).abs() < 1e-4);
        let seq1 = [a.clone(), b.clone(), a.clone()];
        let seq2 = [a.clone(), a.clone(), b.clone()];
        let (ab1, m1) = ab_mabd(&seq1).unwrap();
        let (ab2, m2) = ab_mabd(&seq2).unwrap();
        assert!((ab1 - ab2).abs() < 1e-9);
        assert!((m1 - m2).abs() > 1.0);
        assert!(ab_mabd(&[a]).is_err());
    }

    #[test]
    fn warping_error_cases() {
        let a = random_image(12, 12, 8);
        let all = Mask::all_valid(12, 12);
        assert_eq!(
            warping_error(&a, &a, &FlowField::zeros(12, 12), &all).unwrap(),
            0.0
        );

        // b is a shifted right by 2, down by 1: b(y+1, x+2) = a(y, x)
        let b = ImageRGB::from_fn(12, 12, |y, x, c| {
            if y >= 1 && x >= 2 {
                a.get(y - 1, x - 2, c)
            } else {
                0.0
            }
        });
        let flow = FlowField::uniform(12, 12, 2.0, 1.0);
        assert!(warping_error(&a, &b, &flow, &all).unwrap() < 1e-12);

        let far = FlowField::uniform(12, 12, 50.0, 0.0);
        assert!(warping_error(&a, &b, &far, &all).is_err());
        let none = Mask {
            height: 12,
            width: 12,
            valid: vec![false; 144],
        };
        assert!(warping_error(&a, &a, &FlowField::zeros(12, 12), &none).is_err());
    }

    #[test]
    fn flow_file_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = FlowField {
            height: 3,
            width: 5,
            data: (0..15).map(|_| [rng.random(), rng.random()]).collect(),
        };
        let mut buf = Vec::new();
        f.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"RCFL");
        assert_eq!(buf.len(), 12 + 15 * 8);
        assert_eq!(FlowField::read_from(&mut buf.as_slice()).unwrap(), f);
        buf.pop();
        assert!(matches!(
            FlowField::read_from(&mut buf.as_slice()),
            Err(Error::Malformed(_))
        ));
    }
}
