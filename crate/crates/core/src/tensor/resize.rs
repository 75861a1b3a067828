use rayon::prelude::*;

use super::{lit, Dims, Scalar, Tensor};
use crate::error::{Error, Result};

/// Row range `[start, end)` averaged into output cell `i`.
#[inline]
fn bin(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = i * input / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end)
}

/// Adaptive average pooling; bins tile the input exactly.
pub fn adaptive_avg_pool<T: Scalar>(
    x: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims();
    if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
        return Err(Error::Argument(format!(
            "adaptive pooling cannot map {h}x{w} to {out_h}x{out_w}"
        )));
    }
    let mut out = vec![T::zero(); n * c * out_h * out_w];
    out.par_chunks_mut(out_h * out_w)
        .enumerate()
        .for_each(|(plane, dst)| {
            let src = x.plane(plane / c, plane % c);
            for i in 0..out_h {
                let (y0, y1) = bin(i, h, out_h);
                for j in 0..out_w {
                    let (x0, x1) = bin(j, w, out_w);
                    let mut acc = T::zero();
                    for y in y0..y1 {
                        for v in &src[y * w + x0..y * w + x1] {
                            acc = acc + *v;
                        }
                    }
                    dst[i * out_w + j] = acc / lit::<T>(((y1 - y0) * (x1 - x0)) as f64);
                }
            }
        });
    Ok(Tensor::raw([n, c, out_h, out_w], out))
}

pub(crate) fn adaptive_avg_pool_backward<T: Scalar>(dy: &Tensor<T>, in_dims: Dims) -> Tensor<T> {
    let [n, c, h, w] = in_dims;
    let [_, _, oh, ow] = dy.dims();
    let mut dx = vec![T::zero(); n * c * h * w];
    dx.par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(plane, dst)| {
            let g = dy.plane(plane / c, plane % c);
            for i in 0..oh {
                let (y0, y1) = bin(i, h, oh);
                for j in 0..ow {
                    let (x0, x1) = bin(j, w, ow);
                    let share = g[i * ow + j] / lit::<T>(((y1 - y0) * (x1 - x0)) as f64);
                    for y in y0..y1 {
                        for v in &mut dst[y * w + x0..y * w + x1] {
                            *v = *v + share;
                        }
                    }
                }
            }
        });
    Tensor::raw(in_dims, dx)
}

/// Source taps `(i0, i1, frac)` for every output index along one axis.
fn taps<T: Scalar>(input: usize, output: usize, align_corners: bool) -> Vec<(usize, usize, T)> {
    (0..output)
        .map(|o| {
            let src = if align_corners {
                if output > 1 {
                    o as f64 * (input - 1) as f64 / (output - 1) as f64
                } else {
                    0.0
                }
            } else {
                ((o as f64 + 0.5) * input as f64 / output as f64 - 0.5).max(0.0)
            };
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, lit::<T>(src - i0 as f64))
        })
        .collect()
}

/// Bilinear resize to a larger grid. `align_corners = false` uses
/// half-pixel centers.
pub fn bilinear_upsample<T: Scalar>(
    x: &Tensor<T>,
    out_h: usize,
    out_w: usize,
    align_corners: bool,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims();
    if out_h < h || out_w < w {
        return Err(Error::Argument(format!(
            "bilinear upsampling cannot shrink {h}x{w} to {out_h}x{out_w}"
        )));
    }
    let ty = taps::<T>(h, out_h, align_corners);
    let tx = taps::<T>(w, out_w, align_corners);
    let mut out = vec![T::zero(); n * c * out_h * out_w];
    out.par_chunks_mut(out_h * out_w)
        .enumerate()
        .for_each(|(plane, dst)| {
            let src = x.plane(plane / c, plane % c);
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                let (r0, r1) = (&src[y0 * w..(y0 + 1) * w], &src[y1 * w..(y1 + 1) * w]);
                let hy = T::one() - ly;
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let hx = T::one() - lx;
                    dst[oy * out_w + ox] =
                        hy * (hx * r0[x0] + lx * r0[x1]) + ly * (hx * r1[x0] + lx * r1[x1]);
                }
            }
        });
    Ok(Tensor::raw([n, c, out_h, out_w], out))
}

pub(crate) fn bilinear_upsample_backward<T: Scalar>(
    dy: &Tensor<T>,
    in_dims: Dims,
    align_corners: bool,
) -> Tensor<T> {
    let [n, c, h, w] = in_dims;
    let [_, _, oh, ow] = dy.dims();
    let ty = taps::<T>(h, oh, align_corners);
    let tx = taps::<T>(w, ow, align_corners);
    let mut dx = vec![T::zero(); n * c * h * w];
    dx.par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(plane, dst)| {
            let g = dy.plane(plane / c, plane % c);
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                let hy = T::one() - ly;
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let hx = T::one() - lx;
                    let v = g[oy * ow + ox];
                    dst[y0 * w + x0] = dst[y0 * w + x0] + v * hy * hx;
                    dst[y0 * w + x1] = dst[y0 * w + x1] + v * hy * lx;
                    dst[y1 * w + x0] = dst[y1 * w + x0] + v * ly * hx;
                    dst[y1 * w + x1] = dst[y1 * w + x1] + v * ly * lx;
                }
            }
        });
    Tensor::raw(in_dims, dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pooling_constant_and_identity() {
        let x = Tensor::full([1, 2, 4, 4], 7.0f32).unwrap();
        let y = adaptive_avg_pool(&x, 2, 2).unwrap();
        assert!(y.data().iter().all(|&v| v == 7.0));
        let r = Tensor::from_fn([1, 1, 3, 5], |i| i as f32).unwrap();
        assert_eq!(adaptive_avg_pool(&r, 3, 5).unwrap(), r);
    }

    #[test]
    fn pooling_bin_averages() {
        // bin oracle: each 2x2 quadrant of [[1..16]] averaged by hand
        let x = Tensor::from_fn([1, 1, 4, 4], |i| i as f32 + 1.0).unwrap();
        let y = adaptive_avg_pool(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[3.5, 5.5, 11.5, 13.5]);
    }

    #[test]
    fn pooling_uneven_bins_overlap() {
        // 3 -> 2: bins [0,2) and [1,3)
        let x = Tensor::from_vec([1, 1, 1, 3], vec![1.0f64, 2.0, 4.0]).unwrap();
        let y = adaptive_avg_pool(&x, 1, 2).unwrap();
        assert_eq!(y.data(), &[1.5, 3.0]);
    }

    #[test]
    fn pooling_rejects_upscale() {
        let x = Tensor::<f32>::zeros([1, 1, 2, 2]).unwrap();
        assert!(matches!(
            adaptive_avg_pool(&x, 4, 4),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn bilinear_half_pixel_row() {
        let x = Tensor::from_vec([1, 1, 2, 2], vec![0.0f64, 1.0, 0.0, 1.0]).unwrap();
        let y = bilinear_upsample(&x, 2, 4, false).unwrap();
        assert_eq!(y.data(), &[0.0, 0.25, 0.75, 1.0, 0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn bilinear_align_corners_row() {
        let x = Tensor::from_vec([1, 1, 1, 2], vec![0.0f64, 3.0]).unwrap();
        let y = bilinear_upsample(&x, 1, 4, true).unwrap();
        assert_eq!(y.data(), &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn bilinear_constant_and_singleton() {
        let x = Tensor::full([1, 3, 3, 5], 2.5f32).unwrap();
        let y = bilinear_upsample(&x, 7, 11, false).unwrap();
        assert!(y.data().iter().all(|&v| (v - 2.5).abs() < 1e-6));
        let s = Tensor::full([1, 1, 1, 1], -4.0f32).unwrap();
        let y = bilinear_upsample(&s, 5, 3, false).unwrap();
        assert!(y.data().iter().all(|&v| v == -4.0));
    }

    proptest! {
        #[test]
        fn even_pooling_preserves_mean(
            v in proptest::collection::vec(-10.0f64..10.0, 2 * 6 * 8),
            (oh, ow) in (prop::sample::select(vec![1usize, 2, 3, 6]), prop::sample::select(vec![1usize, 2, 4, 8])),
        ) {
            let x = Tensor::from_vec([1, 2, 6, 8], v).unwrap();
            let y = adaptive_avg_pool(&x, oh, ow).unwrap();
            prop_assert!((x.mean() - y.mean()).abs() < 1e-6);
        }
    }
}
