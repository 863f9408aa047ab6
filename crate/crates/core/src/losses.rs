//! Training objective: differentiable SSIM, the per-image reconstruction loss
//! `mean|X − Y| + 1 − SSIM(X, Y)` and its sum over every supervised stage.

use crate::error::{dim_err, Error, Result};
use crate::metrics::{gaussian_taps, ssim_window_size, SSIM_C1, SSIM_C2, SSIM_SIGMA};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// The Gaussian window as a vertical and a horizontal 1-D kernel.
fn ssim_kernels<T: Scalar>(size: usize) -> (Tensor<T>, Tensor<T>) {
    let taps = gaussian_taps(size, SSIM_SIGMA);
    let t = |i: usize| T::lit(taps[i]);
    (
        Tensor::from_fn(vec![1, 1, size, 1], t),
        Tensor::from_fn(vec![1, 1, 1, size], t),
    )
}

/// Mean local SSIM over all images and channels of two `N × C × H × W`
/// tensors (valid-mode Gaussian window, see [`crate::metrics::ssim_plane`]).
pub fn ssim<T: Scalar>(tape: &Tape<T>, x: Var, y: Var) -> Result<Var> {
    let shape = tape.shape(x);
    if shape != tape.shape(y) {
        return Err(dim_err!(
            "ssim operands differ: {:?} vs {:?}",
            shape,
            tape.shape(y)
        ));
    }
    let [n, c, h, w] = shape[..] else {
        return Err(dim_err!("ssim expects NCHW tensors, got {:?}", shape));
    };
    let size = ssim_window_size(h, w);
    if size == 0 {
        return Err(dim_err!("ssim needs non-empty planes"));
    }
    let planes = [n * c, 1, h, w];
    let x = tape.reshape(x, &planes)?;
    let y = tape.reshape(y, &planes)?;
    let (kv, kh) = ssim_kernels(size);
    let (kv, kh) = (tape.constant(kv), tape.constant(kh));
    let bias = tape.constant(Tensor::zeros(vec![1]));
    let blur = |v: Var| tape.conv2d(tape.conv2d(v, kv, bias, 1, 0)?, kh, bias, 1, 0);

    let mu_x = blur(x)?;
    let mu_y = blur(y)?;
    let mu_xx = tape.mul(mu_x, mu_x)?;
    let mu_yy = tape.mul(mu_y, mu_y)?;
    let mu_xy = tape.mul(mu_x, mu_y)?;
    let var_x = tape.sub(blur(tape.mul(x, x)?)?, mu_xx)?;
    let var_y = tape.sub(blur(tape.mul(y, y)?)?, mu_yy)?;
    let cov = tape.sub(blur(tape.mul(x, y)?)?, mu_xy)?;

    let two = T::lit(2.0);
    let num_l = tape.affine(mu_xy, two, T::lit(SSIM_C1))?;
    let num_s = tape.affine(cov, two, T::lit(SSIM_C2))?;
    let den_l = tape.affine(tape.add(mu_xx, mu_yy)?, T::one(), T::lit(SSIM_C1))?;
    let den_s = tape.affine(tape.add(var_x, var_y)?, T::one(), T::lit(SSIM_C2))?;
    let map = tape.div(tape.mul(num_l, num_s)?, tape.mul(den_l, den_s)?)?;
    tape.mean(map)
}

/// `mean|X − Y| + 1 − SSIM(X, Y)`.
pub fn l_rec<T: Scalar>(tape: &Tape<T>, x: Var, y: Var) -> Result<Var> {
    let s = ssim(tape, x, y)?;
    let l1 = tape.mean(tape.abs(tape.sub(x, y)?)?)?;
    tape.add(l1, tape.affine(s, -T::one(), T::one())?)
}

/// The individual reconstruction terms: one per stage prediction, then the
/// final output.
pub fn l_total_terms<T: Scalar>(
    tape: &Tape<T>,
    stages: &[Var],
    restored: Var,
    gt: Var,
) -> Result<Vec<Var>> {
    stages
        .iter()
        .chain(std::iter::once(&restored))
        .map(|&s| l_rec(tape, s, gt))
        .collect()
}

/// Unweighted sum of scalar terms.
pub fn sum_terms<T: Scalar>(tape: &Tape<T>, terms: &[Var]) -> Result<Var> {
    let (&first, rest) = terms
        .split_first()
        .ok_or_else(|| Error::Contract("cannot sum an empty list of loss terms".into()))?;
    rest.iter().try_fold(first, |acc, &t| tape.add(acc, t))
}

/// `Σ_t L_rec(I_t, gt) + L_rec(R, gt)`.
pub fn l_total<T: Scalar>(tape: &Tape<T>, stages: &[Var], restored: Var, gt: Var) -> Result<Var> {
    sum_terms(tape, &l_total_terms(tape, stages, restored, gt)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image_io::ImageRGB;
    use crate::metrics::ssim_image;
    use crate::tensor::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(0.0..1.0))
    }

    fn scalar(tape: &Tape<f64>, v: Var) -> f64 {
        tape.value(v).item().unwrap()
    }

    #[test]
    fn ssim_of_identical_inputs_is_one() {
        let tape = Tape::new();
        let x = tape.constant(random(&[2, 3, 16, 16], 1));
        let s = ssim(&tape, x, x).unwrap();
        assert!((scalar(&tape, s) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_matches_the_image_metric() {
        let a = random(&[1, 3, 32, 32], 2);
        let b = random(&[1, 3, 32, 32], 3);
        let tape = Tape::new();
        let s = ssim(&tape, tape.constant(a.clone()), tape.constant(b.clone())).unwrap();
        let s_ba = ssim(&tape, tape.constant(b.clone()), tape.constant(a.clone())).unwrap();
        let ia = ImageRGB::from_tensor(&a).unwrap();
        let ib = ImageRGB::from_tensor(&b).unwrap();
        // the image metric sees the f32-rounded values
        let ra = ImageRGB::from_tensor(&a).unwrap().to_tensor::<f64>();
        let rb = ImageRGB::from_tensor(&b).unwrap().to_tensor::<f64>();
        let s_r = ssim(&tape, tape.constant(ra), tape.constant(rb)).unwrap();
        assert!((scalar(&tape, s_r) - ssim_image(&ia, &ib).unwrap()).abs() < 1e-9);
        assert!((scalar(&tape, s) - scalar(&tape, s_ba)).abs() < 1e-12);
    }

    #[test]
    fn l_rec_identity_and_shift() {
        let tape = Tape::new();
        let y = random(&[1, 3, 16, 16], 4).map(|v| 0.2 + 0.6 * v);
        let yv = tape.constant(y.clone());
        assert_eq!(scalar(&tape, l_rec(&tape, yv, yv).unwrap()), 0.0);
        let shifted = tape.constant(y.map(|v| v + 0.1));
        let l1 = tape
            .mean(tape.abs(tape.sub(shifted, yv).unwrap()).unwrap())
            .unwrap();
        assert!((scalar(&tape, l1) - 0.1).abs() < 1e-12);
        assert!(scalar(&tape, l_rec(&tape, shifted, yv).unwrap()) > 0.1);
    }

    #[test]
    fn l_rec_gradient_matches_central_differences() {
        let y = random(&[1, 3, 16, 16], 5);
        let x = random(&[1, 3, 16, 16], 6);
        let err = finite_diff_check(
            |t: &Tape<f64>, v: Var| {
                let yv = t.constant(y.clone());
                l_rec(t, v, yv)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn l_total_is_the_sum_of_its_terms() {
        let tape = Tape::new();
        let gt = tape.constant(random(&[1, 3, 16, 16], 7));
        let stages: Vec<Var> = (0..3)
            .map(|i| tape.constant(random(&[1, 3, 16, 16], 8 + i)))
            .collect();
        let r = tape.constant(random(&[1, 3, 16, 16], 20));
        let total = scalar(&tape, l_total(&tape, &stages, r, gt).unwrap());
        let by_hand: f64 = stages
            .iter()
            .chain(std::iter::once(&r))
            .map(|&s| scalar(&tape, l_rec(&tape, s, gt).unwrap()))
            .sum();
        assert!((total - by_hand).abs() < 1e-12);

        let only_final = scalar(&tape, l_total(&tape, &[], r, gt).unwrap());
        assert_eq!(only_final, scalar(&tape, l_rec(&tape, r, gt).unwrap()));
        assert_eq!(
            scalar(&tape, l_total(&tape, &[gt, gt], gt, gt).unwrap()),
            0.0
        );
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let tape = Tape::new();
        let a = tape.constant(random(&[1, 3, 16, 16], 1));
        let b = tape.constant(random(&[1, 3, 16, 15], 1));
        assert!(matches!(l_rec(&tape, a, b), Err(Error::Dimension(_))));
        assert!(sum_terms(&tape, &[]).is_err());
    }
}
