//! Forward and backward kernels used by the tape.

#[cfg(test)]
use super::Tensor;
use super::{MatView, Scalar};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, img: &[T], cols: &mut [T]) {
    let ncols = g.col_cols();
    for c in 0..g.cin {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], img: &mut [T]) {
    let ncols = g.col_cols();
    for c in 0..g.cin {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(g: &ConvGeom) -> bool {
    g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0
}

// Unpadded stride-1 convolutions skip im2col: each kernel tap is one GEMM
// against the input read in place at a shifted offset. Outputs live in a
// "wide" layout with the input's row stride; column `oy * w + ox` is valid
// for `ox < wo` and the remaining columns are discarded.
fn is_shiftable(g: &ConvGeom) -> bool {
    g.stride == 1 && g.pad == 0 && !is_pointwise(g)
}

fn wide_cols(g: &ConvGeom) -> usize {
    (g.ho - 1) * g.w + g.wo
}

fn tap_view(g: &ConvGeom, ky: usize, kx: usize) -> MatView {
    MatView::new(ky * g.kw + kx, g.cin * g.kh * g.kw, g.kh * g.kw)
}

fn shifted_forward<T: Scalar>(g: &ConvGeom, img: &[T], kernel: &[T], bias: &[T], dst: &mut [T]) {
    let nw = wide_cols(g);
    let plane = g.h * g.w;
    let mut wide = vec![T::zero(); g.cout * nw];
    for (o, chunk) in wide.chunks_mut(nw).enumerate() {
        chunk.fill(bias[o]);
    }
    for ky in 0..g.kh {
        for kx in 0..g.kw {
            T::gemm_view(
                (g.cout, nw, g.cin),
                (kernel, tap_view(g, ky, kx)),
                (img, MatView::new(ky * g.w + kx, plane, 1)),
                (&mut wide, MatView::new(0, nw, 1)),
                T::one(),
            );
        }
    }
    let ncols = g.col_cols();
    for o in 0..g.cout {
        for oy in 0..g.ho {
            let src = &wide[o * nw + oy * g.w..][..g.wo];
            dst[o * ncols + oy * g.wo..][..g.wo].copy_from_slice(src);
        }
    }
}

fn shifted_backward<T: Scalar>(
    g: &ConvGeom,
    img: &[T],
    kernel: &[T],
    go: &[T],
    dk: Option<&mut Vec<T>>,
    di: Option<&mut [T]>,
) {
    let nw = wide_cols(g);
    let plane = g.h * g.w;
    let ncols = g.col_cols();
    let mut wide = vec![T::zero(); g.cout * nw];
    for o in 0..g.cout {
        for oy in 0..g.ho {
            wide[o * nw + oy * g.w..][..g.wo].copy_from_slice(&go[o * ncols + oy * g.wo..][..g.wo]);
        }
    }
    let gw = MatView::new(0, nw, 1);
    if let Some(dk) = dk {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                // dK[:, :, ky, kx] += dOut · shifted(input)ᵀ
                T::gemm_view(
                    (g.cout, g.cin, nw),
                    (&wide, gw),
                    (img, MatView::new(ky * g.w + kx, 1, plane)),
                    (dk, tap_view(g, ky, kx)),
                    T::one(),
                );
            }
        }
    }
    if let Some(di) = di {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                // shifted(dIn) += K[:, :, ky, kx]ᵀ · dOut; discarded columns are zero
                let kt = tap_view(g, ky, kx);
                T::gemm_view(
                    (g.cin, nw, g.cout),
                    (kernel, MatView::new(kt.offset, kt.cs, kt.rs)),
                    (&wide, gw),
                    (di, MatView::new(ky * g.w + kx, plane, 1)),
                    T::one(),
                );
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    kernel: &[T],
    bias: &[T],
) -> Vec<T> {
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let mut out = vec![T::zero(); g.n * g.cout * ncols];
    if is_shiftable(g) {
        for b in 0..g.n {
            let img = &input[b * g.cin * g.h * g.w..(b + 1) * g.cin * g.h * g.w];
            let dst = &mut out[b * g.cout * ncols..(b + 1) * g.cout * ncols];
            shifted_forward(g, img, kernel, bias, dst);
        }
        return out;
    }
    let mut cols = vec![T::zero(); if is_pointwise(g) { 0 } else { rows * ncols }];
    for b in 0..g.n {
        let img = &input[b * g.cin * g.h * g.w..(b + 1) * g.cin * g.h * g.w];
        let dst = &mut out[b * g.cout * ncols..(b + 1) * g.cout * ncols];
        for (o, chunk) in dst.chunks_mut(ncols).enumerate() {
            chunk.fill(bias[o]);
        }
        let src = if is_pointwise(g) {
            img
        } else {
            im2col(g, img, &mut cols);
            &cols
        };
        T::gemm(
            g.cout,
            ncols,
            rows,
            kernel,
            false,
            src,
            false,
            dst,
            T::one(),
        );
    }
    out
}

/// Returns `(d_input, d_kernel, d_bias)`; entries are `None` when not requested.
#[allow(clippy::type_complexity)]
pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    want: [bool; 3],
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let mut d_in = want[0].then(|| vec![T::zero(); g.n * g.cin * g.h * g.w]);
    let mut d_k = want[1].then(|| vec![T::zero(); g.cout * rows]);
    let mut d_b = want[2].then(|| vec![T::zero(); g.cout]);
    let shiftable = is_shiftable(g);
    let im2col_len = if is_pointwise(g) || shiftable {
        0
    } else {
        rows * ncols
    };
    let mut cols = vec![T::zero(); im2col_len];
    let mut dcols = vec![T::zero(); if want[0] { im2col_len } else { 0 }];
    for b in 0..g.n {
        let go = &grad_out[b * g.cout * ncols..(b + 1) * g.cout * ncols];
        if let Some(db) = d_b.as_mut() {
            for (o, chunk) in go.chunks(ncols).enumerate() {
                db[o] = db[o] + super::wide_sum(chunk);
            }
        }
        let img = &input[b * g.cin * g.h * g.w..(b + 1) * g.cin * g.h * g.w];
        if shiftable {
            let di = d_in
                .as_mut()
                .map(|di| &mut di[b * g.cin * g.h * g.w..(b + 1) * g.cin * g.h * g.w]);
            shifted_backward(g, img, kernel, go, d_k.as_mut(), di);
            continue;
        }
        if let Some(dk) = d_k.as_mut() {
            let src = if is_pointwise(g) {
                img
            } else {
                im2col(g, img, &mut cols);
                &cols
            };
            // dK[o, r] += Σ_p dOut[o, p] · cols[r, p]
            T::gemm(g.cout, rows, ncols, go, false, src, true, dk, T::one());
        }
        if let Some(di) = d_in.as_mut() {
            let dst = &mut di[b * g.cin * g.h * g.w..(b + 1) * g.cin * g.h * g.w];
            if is_pointwise(g) {
                T::gemm(rows, ncols, g.cout, kernel, true, go, false, dst, T::one());
            } else {
                T::gemm(
                    rows,
                    ncols,
                    g.cout,
                    kernel,
                    true,
                    go,
                    false,
                    &mut dcols,
                    T::zero(),
                );
                col2im(g, &dcols, dst);
            }
        }
    }
    (d_in, d_k, d_b)
}

/// Maps each element of an output shaped like `full` to the flat index of the
/// broadcast operand shaped `small` (same rank, extents equal or 1).
pub(crate) fn broadcast_offsets(full: &[usize], small: &[usize]) -> Vec<usize> {
    let rank = full.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for ax in (0..rank).rev() {
        strides[ax] = if small[ax] == 1 { 0 } else { acc };
        acc *= small[ax];
    }
    let numel: usize = full.iter().product();
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..numel {
        out.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < full[ax] {
                break;
            }
            off -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}

/// Sums a full-shape gradient back onto the broadcast operand.
pub(crate) fn reduce_to<T: Scalar>(grad: &[T], offsets: &[usize], small_len: usize) -> Vec<T> {
    let mut out = vec![T::zero(); small_len];
    for (&g, &o) in grad.iter().zip(offsets) {
        out[o] = out[o] + g;
    }
    out
}

/// Direct nested-loop convolution used as a reference in tests.
#[cfg(test)]
pub(crate) fn conv2d_naive<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (n, cin, h, w) = input.dims4().unwrap();
    let (cout, _, kh, kw) = kernel.dims4().unwrap();
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let x = input.data();
    let k = kernel.data();
    let mut out = vec![T::zero(); n * cout * ho * wo];
    for b in 0..n {
        for o in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.data()[o];
                    for c in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc = acc
                                    + x[((b * cin + c) * h + iy as usize) * w + ix as usize]
                                        * k[((o * cin + c) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((b * cout + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, cout, ho, wo], out).unwrap()
}
