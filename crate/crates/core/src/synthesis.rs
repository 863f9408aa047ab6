//! Low-light degradation: darkening `β·(α·v)^γ`, Gaussian-Poisson noise and
//! the pairwise similarity gate that decides whether three views form a
//! usable triplet.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::image_io::ImageRGB;
use crate::metrics;

pub const ALPHA_RANGE: (f64, f64) = (0.9, 1.0);
pub const BETA_RANGE: (f64, f64) = (0.1, 0.3);
pub const GAMMA_RANGE: (f64, f64) = (1.4, 2.5);

pub const DEFAULT_SHOT_GAIN: f64 = 1000.0;
pub const DEFAULT_READ_SIGMA: f64 = 0.01;

/// Per-view degradation parameters. `shot_gain = ∞` disables shot noise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub shot_gain: f64,
    pub read_sigma: f64,
    pub seed: u64,
}

impl DegradationParams {
    /// Parameters that leave an image untouched.
    pub fn identity() -> Self {
        DegradationParams {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            shot_gain: f64::INFINITY,
            read_sigma: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.alpha, self.beta, self.gamma, self.read_sigma]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.shot_gain.is_nan() {
            return Err(Error::NumericDomain(format!(
                "non-finite degradation parameter in {self:?}"
            )));
        }
        if !(self.shot_gain > 0.0) {
            return Err(Error::Contract(format!(
                "shot_gain must be positive, got {}",
                self.shot_gain
            )));
        }
        if self.read_sigma < 0.0 {
            return Err(Error::Contract(format!(
                "read_sigma must be non-negative, got {}",
                self.read_sigma
            )));
        }
        Ok(())
    }
}

/// Noise settings shared by all views of a synthesis run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub shot_gain: f64,
    pub read_sigma: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel {
            shot_gain: DEFAULT_SHOT_GAIN,
            read_sigma: DEFAULT_READ_SIGMA,
        }
    }
}

/// Draws `α ∼ U(0.9, 1)`, `β ∼ U(0.1, 0.3)`, `γ ∼ U(1.4, 2.5)` and a noise seed.
pub fn sample_params(rng: &mut impl Rng, noise: &NoiseModel) -> DegradationParams {
    DegradationParams {
        alpha: rng.random_range(ALPHA_RANGE.0..=ALPHA_RANGE.1),
        beta: rng.random_range(BETA_RANGE.0..=BETA_RANGE.1),
        gamma: rng.random_range(GAMMA_RANGE.0..=GAMMA_RANGE.1),
        shot_gain: noise.shot_gain,
        read_sigma: noise.read_sigma,
        seed: rng.random(),
    }
}

pub fn darken(img: &ImageRGB, p: &DegradationParams) -> ImageRGB {
    img.map(|v| (p.beta * (p.alpha * v as f64).powf(p.gamma)) as f32)
}

/// `Poisson(v·gain)/gain + N(0, σ)`, clamped to `[0, 1]`. The generator is
/// seeded from `p.seed`, so equal inputs give equal outputs.
pub fn add_mixed_noise(img: &ImageRGB, p: &DegradationParams) -> Result<ImageRGB> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let read = (p.read_sigma > 0.0)
        .then(|| Normal::new(0.0, p.read_sigma))
        .transpose()
        .map_err(|e| Error::NumericDomain(format!("read noise: {e}")))?;
    let mut out = img.clone();
    for v in out.data_mut() {
        let mut x = *v as f64;
        if p.shot_gain.is_finite() && x > 0.0 {
            let lambda = x * p.shot_gain;
            let shot = Poisson::new(lambda)
                .map_err(|e| Error::NumericDomain(format!("shot noise at λ={lambda}: {e}")))?;
            x = shot.sample(&mut rng) / p.shot_gain;
        }
        if let Some(n) = &read {
            x += n.sample(&mut rng);
        }
        *v = x.clamp(0.0, 1.0) as f32;
    }
    Ok(out)
}

pub fn degrade(img: &ImageRGB, p: &DegradationParams) -> Result<ImageRGB> {
    add_mixed_noise(&darken(img, p), p)
}

/// Degrades each view with its own freshly sampled parameters.
pub fn synth_triplet(
    gt: &[ImageRGB; 3],
    rng: &mut impl Rng,
    noise: &NoiseModel,
) -> Result<([ImageRGB; 3], [DegradationParams; 3])> {
    let params = [
        sample_params(rng, noise),
        sample_params(rng, noise),
        sample_params(rng, noise),
    ];
    let low = [
        degrade(&gt[0], &params[0])?,
        degrade(&gt[1], &params[1])?,
        degrade(&gt[2], &params[2])?,
    ];
    Ok((low, params))
}

/// Pairwise image dissimilarity used by [`SimilarityGate`].
pub trait Dissimilarity: Send + Sync {
    fn dissimilarity(&self, a: &ImageRGB, b: &ImageRGB) -> Result<f64>;
}

/// `(1 − SSIM) / 2`, in `[0, 1]`.
#[derive(Clone, Copy, Debug, Default)]
pub struct SsimDissimilarity;

impl Dissimilarity for SsimDissimilarity {
    fn dissimilarity(&self, a: &ImageRGB, b: &ImageRGB) -> Result<f64> {
        Ok((1.0 - metrics::ssim_image(a, b)?) / 2.0)
    }
}

pub struct SimilarityGate {
    pub threshold: f64,
    pub measure: Box<dyn Dissimilarity>,
}

impl Default for SimilarityGate {
    fn default() -> Self {
        SimilarityGate {
            threshold: 0.2,
            measure: Box::new(SsimDissimilarity),
        }
    }
}

impl SimilarityGate {
    pub fn with_threshold(threshold: f64) -> Self {
        SimilarityGate {
            threshold,
            ..Self::default()
        }
    }

    /// A pair passes when its dissimilarity is below the threshold or the two
    /// images are bit-identical.
    pub fn pair_passes(&self, a: &ImageRGB, b: &ImageRGB) -> Result<bool> {
        if a.dims() != b.dims() {
            return Err(dim_err!(
                "gate views differ in size: {:?} vs {:?}",
                a.dims(),
                b.dims()
            ));
        }
        if a.data() == b.data() {
            return Ok(true);
        }
        Ok(self.measure.dissimilarity(a, b)? < self.threshold)
    }

    pub fn admits(&self, views: &[ImageRGB; 3]) -> Result<bool> {
        for (i, j) in [(0, 1), (0, 2), (1, 2)] {
            if !self.pair_passes(&views[i], &views[j])? {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

pub fn gate_triplet(views: &[ImageRGB; 3], gate: &SimilarityGate) -> Result<bool> {
    gate.admits(views)
}

/// Smooth procedural canvas with soft-edged blobs, stripes and a colour ramp.
/// Values stay inside `[0.04, 0.96]`.
pub fn procedural_scene(height: usize, width: usize, rng: &mut impl Rng) -> ImageRGB {
    struct Blob {
        cy: f32,
        cx: f32,
        radius: f32,
        color: [f32; 3],
    }
    let (h, w) = (height as f32, width as f32);
    let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.75));
    let ramp: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.25..0.25));
    let blobs: Vec<Blob> = (0..rng.random_range(6..12))
        .map(|_| Blob {
            cy: rng.random_range(0.0..h),
            cx: rng.random_range(0.0..w),
            radius: rng.random_range(3.0..(h.min(w) / 4.0).max(4.0)),
            color: std::array::from_fn(|_| rng.random_range(0.05..0.95)),
        })
        .collect();
    let freq = rng.random_range(0.15f32..0.5);
    let angle = rng.random_range(0.0f32..std::f32::consts::PI);
    let (sa, ca) = angle.sin_cos();
    ImageRGB::from_fn(height, width, |y, x, c| {
        let (fy, fx) = (y as f32, x as f32);
        let mut v = base[c] + ramp[c] * (fx / w - 0.5) + 0.08 * ((fx * ca + fy * sa) * freq).sin();
        for b in &blobs {
            let d = ((fy - b.cy).powi(2) + (fx - b.cx).powi(2)).sqrt();
            let weight = (1.0 - (d - b.radius).clamp(0.0, 1.5) / 1.5) * 0.85;
            v = v * (1.0 - weight) + b.color[c] * weight;
        }
        v.clamp(0.04, 0.96)
    })
}

/// Three overlapping `height × width` crops of one procedural canvas, offset by
/// up to `max_shift` pixels in each direction, with the middle crop centred.
pub fn procedural_triplet(
    height: usize,
    width: usize,
    max_shift: usize,
    rng: &mut impl Rng,
) -> [ImageRGB; 3] {
    let canvas = procedural_scene(height + 2 * max_shift, width + 2 * max_shift, rng);
    let mut offset = |centre: bool| -> (usize, usize) {
        if centre || max_shift == 0 {
            (max_shift, max_shift)
        } else {
            (
                rng.random_range(0..=2 * max_shift),
                rng.random_range(0..=2 * max_shift),
            )
        }
    };
    let offsets = [offset(false), offset(true), offset(false)];
    offsets.map(|(oy, ox)| {
        canvas
            .crop(oy, ox, height, width)
            .expect("crop lies inside the padded canvas")
    })
}

/// Draws procedural triplets until one passes `gate`.
pub fn admitted_procedural_triplet(
    height: usize,
    width: usize,
    max_shift: usize,
    gate: &SimilarityGate,
    max_tries: usize,
    rng: &mut impl Rng,
) -> Result<[ImageRGB; 3]> {
    for _ in 0..max_tries {
        let views = procedural_triplet(height, width, max_shift, rng);
        if gate.admits(&views)? {
            return Ok(views);
        }
    }
    Err(Error::Contract(format!(
        "no procedural triplet passed the similarity gate in {max_tries} tries"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_image(h: usize, w: usize) -> ImageRGB {
        ImageRGB::from_fn(h, w, |y, x, c| {
            ((y * w + x) * 3 + c) as f32 / (h * w * 3) as f32
        })
    }

    #[test]
    fn darken_examples() {
        let img = ramp_image(4, 5);
        assert_eq!(darken(&img, &DegradationParams::identity()), img);
        let p = DegradationParams {
            alpha: 1.0,
            beta: 0.2,
            gamma: 2.0,
            ..DegradationParams::identity()
        };
        let half = ImageRGB::filled(1, 1, 0.5);
        assert!((darken(&half, &p).get(0, 0, 0) - 0.05).abs() < 1e-7);
        let zero = ImageRGB::filled(2, 2, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let q = sample_params(&mut rng, &NoiseModel::default());
            assert!(darken(&zero, &q).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn zero_input_without_read_noise_stays_zero() {
        let p = DegradationParams {
            shot_gain: 1000.0,
            seed: 9,
            ..DegradationParams::identity()
        };
        let out = add_mixed_noise(&ImageRGB::filled(8, 8, 0.0), &p).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn noise_is_seed_deterministic_and_seed_sensitive() {
        let img = ramp_image(16, 16);
        let p = DegradationParams {
            shot_gain: 200.0,
            read_sigma: 0.02,
            seed: 5,
            ..DegradationParams::identity()
        };
        let a = add_mixed_noise(&img, &p).unwrap();
        assert_eq!(a, add_mixed_noise(&img, &p).unwrap());
        let b = add_mixed_noise(&img, &DegradationParams { seed: 6, ..p }).unwrap();
        assert_ne!(a, b);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn invalid_noise_parameters_are_rejected() {
        let img = ImageRGB::filled(2, 2, 0.5);
        let bad_gain = DegradationParams {
            shot_gain: 0.0,
            ..DegradationParams::identity()
        };
        assert!(matches!(
            add_mixed_noise(&img, &bad_gain),
            Err(Error::Contract(_))
        ));
        let bad_sigma = DegradationParams {
            read_sigma: -1.0,
            ..DegradationParams::identity()
        };
        assert!(matches!(
            add_mixed_noise(&img, &bad_sigma),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn same_seed_gives_same_parameter_stream() {
        let noise = NoiseModel::default();
        let mut a = ChaCha8Rng::seed_from_u64(77);
        let mut b = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..50 {
            assert_eq!(sample_params(&mut a, &noise), sample_params(&mut b, &noise));
        }
    }

    #[test]
    fn identical_views_with_different_params_diverge() {
        let gt = ramp_image(16, 16);
        let views = [gt.clone(), gt.clone(), gt.clone()];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (low, params) = synth_triplet(&views, &mut rng, &NoiseModel::default()).unwrap();
        assert_ne!(low[0], low[1]);
        assert_ne!(low[1], low[2]);
        assert_ne!(params[0].seed, params[1].seed);
        for v in &low {
            assert!(v.mean() < gt.mean());
        }
    }

    #[test]
    fn gate_admits_identical_and_rejects_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scene = procedural_scene(64, 64, &mut rng);
        let gate = SimilarityGate::default();
        assert!(gate_triplet(&[scene.clone(), scene.clone(), scene.clone()], &gate).unwrap());

        let noise = ImageRGB::from_fn(64, 64, |_, _, _| rng.random());
        let d = SsimDissimilarity.dissimilarity(&scene, &noise).unwrap();
        assert!(d > 0.2, "noise dissimilarity {d}");
        assert!(!gate_triplet(&[scene.clone(), scene.clone(), noise], &gate).unwrap());
    }

    #[test]
    fn zero_threshold_admits_only_bit_identical_views() {
        let gate = SimilarityGate::with_threshold(0.0);
        let a = ramp_image(16, 16);
        assert!(gate.admits(&[a.clone(), a.clone(), a.clone()]).unwrap());
        let mut b = a.clone();
        b.set(3, 3, 1, b.get(3, 3, 1) + 1e-3);
        assert!(!gate.admits(&[a.clone(), b, a.clone()]).unwrap());
        let small = ImageRGB::filled(8, 8, 0.5);
        assert!(gate.admits(&[a.clone(), small, a]).is_err());
    }

    #[test]
    fn procedural_triplets_overlap_and_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let views = procedural_triplet(32, 40, 3, &mut rng);
        for v in &views {
            assert_eq!(v.dims(), (32, 40));
            assert!(v.data().iter().all(|x| (0.04..=0.96).contains(x)));
        }
    }

    #[test]
    fn rejection_sampling_yields_admitted_triplets() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gate = SimilarityGate::default();
        for _ in 0..3 {
            let views = admitted_procedural_triplet(48, 48, 3, &gate, 50, &mut rng).unwrap();
            assert!(gate.admits(&views).unwrap());
        }
        let strict = SimilarityGate::with_threshold(0.0);
        assert!(admitted_procedural_triplet(48, 48, 3, &strict, 3, &mut rng).is_err());
    }
}
