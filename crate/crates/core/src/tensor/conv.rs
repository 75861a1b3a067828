use rayon::prelude::*;

use super::{ConvSpec, Dims, Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

/// Pixels per tile in the pointwise kernel.
const PW_TILE: usize = 512;
/// Output channels computed together in the pointwise kernel.
const PW_BLOCK: usize = 4;

fn check_conv<T: Scalar>(
    x: &Tensor<T>,
    spec: &ConvSpec,
    weight: &Tensor<T>,
    bias: Option<&[T]>,
) -> Result<(usize, usize)> {
    spec.validate()?;
    if x.c() != spec.in_ch {
        return Err(shape_err(
            "c",
            format!("conv expects {} input channels, got {}", spec.in_ch, x.c()),
        ));
    }
    if weight.dims() != spec.weight_dims() {
        return Err(shape_err(
            "weight",
            format!("expected {:?}, got {:?}", spec.weight_dims(), weight.dims()),
        ));
    }
    match (spec.has_bias, bias) {
        (true, None) => return Err(shape_err("bias", "spec declares a bias but none was given")),
        (false, Some(_)) => return Err(shape_err("bias", "bias given for a bias-free conv")),
        (true, Some(b)) if b.len() != spec.out_ch => {
            return Err(shape_err(
                "bias",
                format!("expected {} entries, got {}", spec.out_ch, b.len()),
            ))
        }
        _ => {}
    }
    spec.output_hw(x.h(), x.w()).ok_or_else(|| {
        shape_err(
            "h",
            format!(
                "input {}x{} smaller than kernel {:?}",
                x.h(),
                x.w(),
                spec.kernel
            ),
        )
    })
}

/// Range of output columns whose tap `k` lands inside `[0, len)`.
#[inline]
fn valid_range(len: usize, out: usize, stride: usize, pad: usize, k: usize) -> (usize, usize) {
    // ix = o * stride + k - pad
    let lo = if pad > k {
        (pad - k).div_ceil(stride)
    } else {
        0
    };
    let hi = if len + pad > k {
        ((len + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// 2-D cross-correlation with zero padding and grouped channels.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    spec: &ConvSpec,
    weight: &Tensor<T>,
    bias: Option<&[T]>,
) -> Result<Tensor<T>> {
    let (oh, ow) = check_conv(x, spec, weight, bias)?;
    let n = x.n();
    let mut out = vec![T::zero(); n * spec.out_ch * oh * ow];
    let pointwise = spec.kernel == (1, 1)
        && spec.stride == (1, 1)
        && spec.padding == (0, 0)
        && spec.groups == 1;
    if pointwise {
        pointwise_kernel(x, spec, weight.data(), &mut out);
    } else {
        direct_kernel(x, spec, weight.data(), oh, ow, &mut out);
    }
    if let Some(b) = bias {
        let hw = oh * ow;
        out.par_chunks_mut(hw).enumerate().for_each(|(plane, dst)| {
            let bv = b[plane % spec.out_ch];
            dst.iter_mut().for_each(|v| *v = *v + bv);
        });
    }
    Ok(Tensor::raw([n, spec.out_ch, oh, ow], out))
}

/// Depthwise convolution: every channel filtered independently.
pub fn depthwise_conv2d<T: Scalar>(
    x: &Tensor<T>,
    spec: &ConvSpec,
    weight: &Tensor<T>,
    bias: Option<&[T]>,
) -> Result<Tensor<T>> {
    if !spec.is_depthwise() {
        return Err(Error::Config(vec![format!(
            "depthwise conv needs groups == in_ch == out_ch, got groups={} in={} out={}",
            spec.groups, spec.in_ch, spec.out_ch
        )]));
    }
    conv2d(x, spec, weight, bias)
}

fn pointwise_kernel<T: Scalar>(x: &Tensor<T>, spec: &ConvSpec, w: &[T], out: &mut [T]) {
    let (cin, cout) = (spec.in_ch, spec.out_ch);
    let hw = x.h() * x.w();
    for (n, out_n) in out.chunks_mut(cout * hw).enumerate() {
        let x_n = &x.data()[n * cin * hw..(n + 1) * cin * hw];
        out_n
            .par_chunks_mut(PW_BLOCK * hw)
            .enumerate()
            .for_each(|(blk, dst)| {
                let o0 = blk * PW_BLOCK;
                let nb = dst.len() / hw;
                let mut p0 = 0;
                while p0 < hw {
                    let p1 = (p0 + PW_TILE).min(hw);
                    for i in 0..cin {
                        let src = &x_n[i * hw + p0..i * hw + p1];
                        for b in 0..nb {
                            let wv = w[(o0 + b) * cin + i];
                            let acc = &mut dst[b * hw + p0..b * hw + p1];
                            for (a, &s) in acc.iter_mut().zip(src) {
                                *a = *a + wv * s;
                            }
                        }
                    }
                    p0 = p1;
                }
            });
    }
}

fn direct_kernel<T: Scalar>(
    x: &Tensor<T>,
    spec: &ConvSpec,
    w: &[T],
    oh: usize,
    ow: usize,
    out: &mut [T],
) {
    let [_, _, ih, iw] = x.dims();
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let icg = spec.in_per_group();
    let ocg = spec.out_ch / spec.groups;
    let cout = spec.out_ch;
    out.par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(plane, dst)| {
            let (n, o) = (plane / cout, plane % cout);
            let g = o / ocg;
            for icl in 0..icg {
                let src = x.plane(n, g * icg + icl);
                for ky in 0..kh {
                    let (ylo, yhi) = valid_range(ih, oh, sh, ph, ky);
                    for kx in 0..kw {
                        let wv = w[((o * icg + icl) * kh + ky) * kw + kx];
                        let (xlo, xhi) = valid_range(iw, ow, sw, pw, kx);
                        if xlo >= xhi {
                            continue;
                        }
                        for oy in ylo..yhi {
                            let iy = oy * sh + ky - ph;
                            let row = &src[iy * iw..(iy + 1) * iw];
                            let acc = &mut dst[oy * ow + xlo..oy * ow + xhi];
                            let ix0 = xlo * sw + kx - pw;
                            if sw == 1 {
                                for (a, &s) in acc.iter_mut().zip(&row[ix0..ix0 + (xhi - xlo)]) {
                                    *a = *a + wv * s;
                                }
                            } else {
                                for (j, a) in acc.iter_mut().enumerate() {
                                    *a = *a + wv * row[ix0 + j * sw];
                                }
                            }
                        }
                    }
                }
            }
        });
}

/// Gradient of `conv2d` with respect to its input.
pub(crate) fn conv2d_grad_input<T: Scalar>(
    dy: &Tensor<T>,
    spec: &ConvSpec,
    weight: &Tensor<T>,
    in_dims: Dims,
) -> Tensor<T> {
    let [n_, cin, ih, iw] = in_dims;
    let [_, cout, oh, ow] = dy.dims();
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let icg = spec.in_per_group();
    let ocg = cout / spec.groups;
    let w = weight.data();
    let mut dx = vec![T::zero(); n_ * cin * ih * iw];
    dx.par_chunks_mut(ih * iw)
        .enumerate()
        .for_each(|(plane, dst)| {
            let (n, ic) = (plane / cin, plane % cin);
            let g = ic / icg;
            let icl = ic % icg;
            for o in g * ocg..(g + 1) * ocg {
                let grad = dy.plane(n, o);
                for ky in 0..kh {
                    let (ylo, yhi) = valid_range(ih, oh, sh, ph, ky);
                    for kx in 0..kw {
                        let wv = w[((o * icg + icl) * kh + ky) * kw + kx];
                        let (xlo, xhi) = valid_range(iw, ow, sw, pw, kx);
                        for oy in ylo..yhi {
                            let iy = oy * sh + ky - ph;
                            for ox in xlo..xhi {
                                let ix = ox * sw + kx - pw;
                                dst[iy * iw + ix] = dst[iy * iw + ix] + wv * grad[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        });
    Tensor::raw(in_dims, dx)
}

/// Gradient of `conv2d` with respect to its weight.
pub(crate) fn conv2d_grad_weight<T: Scalar>(
    x: &Tensor<T>,
    dy: &Tensor<T>,
    spec: &ConvSpec,
) -> Tensor<T> {
    let [n_, _, ih, iw] = x.dims();
    let [_, _, oh, ow] = dy.dims();
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let icg = spec.in_per_group();
    let ocg = spec.out_ch / spec.groups;
    let per_out = icg * kh * kw;
    let mut dw = vec![T::zero(); spec.out_ch * per_out];
    dw.par_chunks_mut(per_out).enumerate().for_each(|(o, dst)| {
        let g = o / ocg;
        for icl in 0..icg {
            for ky in 0..kh {
                let (ylo, yhi) = valid_range(ih, oh, sh, ph, ky);
                for kx in 0..kw {
                    let (xlo, xhi) = valid_range(iw, ow, sw, pw, kx);
                    let mut acc = T::zero();
                    for n in 0..n_ {
                        let src = x.plane(n, g * icg + icl);
                        let grad = dy.plane(n, o);
                        for oy in ylo..yhi {
                            let iy = oy * sh + ky - ph;
                            for ox in xlo..xhi {
                                let ix = ox * sw + kx - pw;
                                acc = acc + src[iy * iw + ix] * grad[oy * ow + ox];
                            }
                        }
                    }
                    dst[(icl * kh + ky) * kw + kx] = acc;
                }
            }
        }
    });
    Tensor::raw(spec.weight_dims(), dw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(dims: Dims, v: &[f32]) -> Tensor<f32> {
        Tensor::from_vec(dims, v.to_vec()).unwrap()
    }

    fn random(dims: Dims, rng: &mut ChaCha8Rng) -> Tensor<f32> {
        Tensor::from_fn(dims, |_| rng.gen_range(-1.0..1.0)).unwrap()
    }

    // Direct six-loop summation, independent of the tiled kernels.
    fn reference(x: &Tensor<f32>, s: &ConvSpec, w: &Tensor<f32>, b: Option<&[f32]>) -> Tensor<f32> {
        let (oh, ow) = s.output_hw(x.h(), x.w()).unwrap();
        let icg = s.in_per_group();
        let ocg = s.out_ch / s.groups;
        let mut out = Tensor::zeros([x.n(), s.out_ch, oh, ow]).unwrap();
        for n in 0..x.n() {
            for o in 0..s.out_ch {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.map_or(0.0, |b| b[o]) as f64;
                        for icl in 0..icg {
                            let ic = (o / ocg) * icg + icl;
                            for ky in 0..s.kernel.0 {
                                for kx in 0..s.kernel.1 {
                                    let iy = (oy * s.stride.0 + ky) as isize - s.padding.0 as isize;
                                    let ix = (ox * s.stride.1 + kx) as isize - s.padding.1 as isize;
                                    if iy < 0
                                        || ix < 0
                                        || iy >= x.h() as isize
                                        || ix >= x.w() as isize
                                    {
                                        continue;
                                    }
                                    acc += (x.at(n, ic, iy as usize, ix as usize)
                                        * w.at(o, icl, ky, kx))
                                        as f64;
                                }
                            }
                        }
                        let i = out.index(n, o, oy, ox);
                        out.data_mut()[i] = acc as f32;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn pointwise_scaling() {
        let x = t([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let w = t([1, 1, 1, 1], &[2.0]);
        let y = conv2d(&x, &ConvSpec::pointwise(1, 1), &w, None).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn all_ones_window_sums() {
        let x = Tensor::full([1, 1, 3, 3], 1.0f32).unwrap();
        let w = Tensor::full([1, 1, 3, 3], 1.0f32).unwrap();
        let y = conv2d(&x, &ConvSpec::new(1, 1, 3, 1), &w, None).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn unit_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random([2, 1, 5, 7], &mut rng);
        let w = t([1, 1, 1, 1], &[1.0]);
        assert_eq!(conv2d(&x, &ConvSpec::pointwise(1, 1), &w, None).unwrap(), x);
    }

    #[test]
    fn depthwise_per_channel_scaling_and_zero() {
        let x = Tensor::from_fn([1, 2, 2, 2], |i| i as f32 + 1.0).unwrap();
        let spec = ConvSpec::depthwise(2, 1, 1);
        let y = depthwise_conv2d(&x, &spec, &t([2, 1, 1, 1], &[2.0, 3.0]), None).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0, 6.0, 8.0, 15.0, 18.0, 21.0, 24.0]);
        let z = depthwise_conv2d(&x, &spec, &Tensor::zeros([2, 1, 1, 1]).unwrap(), None).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn depthwise_matches_block_diagonal_dense_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random([1, 4, 5, 5], &mut rng);
        let spec = ConvSpec::depthwise(4, 3, 1);
        let w = random(spec.weight_dims(), &mut rng);
        let dense_spec = ConvSpec::new(4, 4, 3, 1);
        let mut dense_w = Tensor::zeros(dense_spec.weight_dims()).unwrap();
        for c in 0..4 {
            for k in 0..9 {
                let i = dense_w.index(c, c, k / 3, k % 3);
                dense_w.data_mut()[i] = w.at(c, 0, k / 3, k % 3);
            }
        }
        let a = depthwise_conv2d(&x, &spec, &w, None).unwrap();
        let b = conv2d(&x, &dense_spec, &dense_w, None).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-6);
    }

    #[test]
    fn depthwise_rejects_wrong_groups() {
        let x = Tensor::<f32>::zeros([1, 4, 3, 3]).unwrap();
        let spec = ConvSpec::new(4, 4, 3, 1);
        let w = Tensor::zeros(spec.weight_dims()).unwrap();
        assert!(matches!(
            depthwise_conv2d(&x, &spec, &w, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn shape_errors_name_the_axis() {
        let x = Tensor::<f32>::zeros([1, 3, 4, 4]).unwrap();
        let spec = ConvSpec::new(2, 4, 3, 1);
        let w = Tensor::zeros(spec.weight_dims()).unwrap();
        match conv2d(&x, &spec, &w, None) {
            Err(Error::Shape { axis, .. }) => assert_eq!(axis, "c"),
            other => panic!("{other:?}"),
        }
        let spec = ConvSpec::new(3, 4, 3, 1);
        let bad_w = Tensor::zeros([4, 3, 1, 1]).unwrap();
        assert!(matches!(
            conv2d(&x, &spec, &bad_w, None),
            Err(Error::Shape { axis: "weight", .. })
        ));
        let w = Tensor::zeros(spec.weight_dims()).unwrap();
        assert!(matches!(
            conv2d(&x, &spec, &w, Some(&[0.0; 4])),
            Err(Error::Shape { axis: "bias", .. })
        ));
    }

    #[test]
    fn random_specs_match_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let cases = [
            (ConvSpec::new(3, 5, 3, 1), 5, 5),
            (ConvSpec::new(3, 5, 3, 2), 5, 4),
            (ConvSpec::new(4, 6, 5, 2), 5, 5),
            (ConvSpec::pointwise(7, 9), 3, 4),
            (ConvSpec::depthwise(6, 5, 1), 4, 5),
            (ConvSpec::depthwise(6, 3, 2), 5, 5),
            (
                ConvSpec {
                    groups: 2,
                    ..ConvSpec::new(4, 6, 3, 1)
                }
                .with_bias(true),
                5,
                3,
            ),
            (ConvSpec::pointwise(5, 3).with_bias(true), 2, 2),
        ];
        for (spec, h, w) in cases {
            let x = random([2, spec.in_ch, h, w], &mut rng);
            let wt = random(spec.weight_dims(), &mut rng);
            let bias: Option<Vec<f32>> = spec
                .has_bias
                .then(|| (0..spec.out_ch).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let got = conv2d(&x, &spec, &wt, bias.as_deref()).unwrap();
            let want = reference(&x, &spec, &wt, bias.as_deref());
            assert!(got.max_abs_diff(&want).unwrap() < 1e-5, "{spec:?}");
        }
    }

    #[test]
    fn thread_count_does_not_change_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = ConvSpec::new(8, 12, 3, 1);
        let x = random([1, 8, 17, 19], &mut rng);
        let w = random(spec.weight_dims(), &mut rng);
        let one = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let four = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap();
        let a = one.install(|| conv2d(&x, &spec, &w, None).unwrap());
        let b = four.install(|| conv2d(&x, &spec, &w, None).unwrap());
        assert_eq!(a.data(), b.data());
    }
}
