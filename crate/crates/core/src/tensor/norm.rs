use rayon::prelude::*;

use super::{lit, ConvSpec, Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

/// Default epsilon for inference-form batch norm.
pub const BN_EPS: f64 = 1e-5;

/// Frozen batch-norm statistics and affine parameters for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<T = f32> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: T,
}

impl<T: Scalar> BatchNormParams<T> {
    /// gamma = 1, beta = 0, mean = 0, var = 1.
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps: lit(BN_EPS),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        for (label, v) in [
            ("gamma", &self.gamma),
            ("beta", &self.beta),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ] {
            if v.len() != channels {
                return Err(shape_err(
                    "c",
                    format!(
                        "batch norm {label} has {} entries, expected {channels}",
                        v.len()
                    ),
                ));
            }
        }
        if !(self.eps >= T::zero()) {
            return Err(Error::Invariant(format!(
                "batch norm eps must be >= 0, got {:?}",
                self.eps
            )));
        }
        if let Some((c, v)) = self
            .running_var
            .iter()
            .enumerate()
            .find(|(_, &v)| !(v >= T::zero()) || !(v + self.eps > T::zero()))
        {
            return Err(Error::Invariant(format!(
                "batch norm variance must be non-negative with var + eps > 0 (channel {c}: {v:?})"
            )));
        }
        Ok(())
    }

    /// Per-channel `(scale, shift)` so that `bn(x) = scale * x + shift`.
    pub fn affine(&self) -> (Vec<T>, Vec<T>) {
        let scale: Vec<T> = self
            .gamma
            .iter()
            .zip(&self.running_var)
            .map(|(&g, &v)| g / (v + self.eps).sqrt())
            .collect();
        let shift = self
            .beta
            .iter()
            .zip(&self.running_mean)
            .zip(&scale)
            .map(|((&b, &m), &s)| b - m * s)
            .collect();
        (scale, shift)
    }
}

/// Inference-form batch norm over the channel axis.
pub fn batch_norm<T: Scalar>(x: &Tensor<T>, bn: &BatchNormParams<T>) -> Result<Tensor<T>> {
    let mut y = x.clone();
    batch_norm_inplace(&mut y, bn)?;
    Ok(y)
}

pub fn batch_norm_inplace<T: Scalar>(x: &mut Tensor<T>, bn: &BatchNormParams<T>) -> Result<()> {
    bn.validate(x.c())?;
    let c = x.c();
    let hw = x.h() * x.w();
    let (scale, shift) = bn.affine();
    x.data_mut()
        .par_chunks_mut(hw)
        .enumerate()
        .for_each(|(plane, dst)| {
            let (s, b) = (scale[plane % c], shift[plane % c]);
            dst.iter_mut().for_each(|v| *v = *v * s + b);
        });
    Ok(())
}

/// Folds a frozen batch norm into the preceding convolution. Returns the
/// rescaled weight and the bias of the equivalent biased convolution.
pub fn batchnorm_fold<T: Scalar>(
    spec: &ConvSpec,
    weight: &Tensor<T>,
    bias: Option<&[T]>,
    bn: &BatchNormParams<T>,
) -> Result<(Tensor<T>, Vec<T>)> {
    spec.validate()?;
    if weight.dims() != spec.weight_dims() {
        return Err(shape_err(
            "weight",
            format!("expected {:?}, got {:?}", spec.weight_dims(), weight.dims()),
        ));
    }
    if bn.channels() != spec.out_ch {
        return Err(shape_err(
            "c",
            format!(
                "batch norm has {} channels, conv produces {}",
                bn.channels(),
                spec.out_ch
            ),
        ));
    }
    bn.validate(spec.out_ch)?;
    if let Some(b) = bias {
        if b.len() != spec.out_ch {
            return Err(shape_err(
                "bias",
                format!("expected {} entries, got {}", spec.out_ch, b.len()),
            ));
        }
    }
    let (scale, shift) = bn.affine();
    let row = spec.weight_len() / spec.out_ch;
    let mut w = weight.clone();
    for (o, chunk) in w.data_mut().chunks_mut(row).enumerate() {
        chunk.iter_mut().for_each(|v| *v = *v * scale[o]);
    }
    let folded_bias = (0..spec.out_ch)
        .map(|o| bias.map_or(T::zero(), |b| b[o]) * scale[o] + shift[o])
        .collect();
    Ok((w, folded_bias))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::conv2d;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bn_with(gamma: f32, eps: f32, c: usize) -> BatchNormParams<f32> {
        BatchNormParams {
            gamma: vec![gamma; c],
            beta: vec![0.0; c],
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
            eps,
        }
    }

    fn random_case(
        seed: u64,
        var_lo: f32,
        var_hi: f32,
    ) -> (Tensor<f32>, ConvSpec, Tensor<f32>, BatchNormParams<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = ConvSpec::new(8, 8, 3, 1);
        let x = Tensor::from_fn([1, 8, 6, 6], |_| rng.gen_range(-1.0..1.0)).unwrap();
        let w = Tensor::from_fn(spec.weight_dims(), |_| rng.gen_range(-0.5..0.5)).unwrap();
        let bn = BatchNormParams {
            gamma: (0..8).map(|_| rng.gen_range(0.1..2.0)).collect(),
            beta: (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            running_mean: (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            running_var: (0..8).map(|_| rng.gen_range(var_lo..var_hi)).collect(),
            eps: BN_EPS as f32,
        };
        (x, spec, w, bn)
    }

    #[test]
    fn identity_normalization_leaves_weights() {
        let spec = ConvSpec::new(2, 3, 3, 1);
        let w = Tensor::from_fn(spec.weight_dims(), |i| i as f32 * 0.1).unwrap();
        let (w2, b2) = batchnorm_fold(&spec, &w, None, &bn_with(1.0, 0.0, 3)).unwrap();
        assert_eq!(w2, w);
        assert_eq!(b2, vec![0.0; 3]);
    }

    #[test]
    fn gamma_two_doubles_rows() {
        let spec = ConvSpec::pointwise(2, 2);
        let w = Tensor::from_vec(spec.weight_dims(), vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let (w2, _) = batchnorm_fold(&spec, &w, None, &bn_with(2.0, 0.0, 2)).unwrap();
        assert_eq!(w2.data(), &[2.0, -4.0, 1.0, 6.0]);
    }

    #[test]
    fn negative_variance_is_rejected() {
        let spec = ConvSpec::pointwise(1, 1);
        let w = Tensor::full([1, 1, 1, 1], 1.0f32).unwrap();
        let mut bn = bn_with(1.0, 1e-5, 1);
        bn.running_var[0] = -0.5;
        assert!(matches!(
            batchnorm_fold(&spec, &w, None, &bn),
            Err(Error::Invariant(_))
        ));
    }

    #[test]
    fn folded_conv_matches_conv_then_bn() {
        let (x, spec, w, bn) = random_case(11, 1e-3, 10.0);
        let reference = batch_norm(&conv2d(&x, &spec, &w, None).unwrap(), &bn).unwrap();
        let (fw, fb) = batchnorm_fold(&spec, &w, None, &bn).unwrap();
        let folded = conv2d(&x, &spec.with_bias(true), &fw, Some(&fb)).unwrap();
        assert!(folded.max_rel_diff(&reference).unwrap() < 1e-4);
    }

    proptest! {
        #[test]
        fn fold_equivalence_over_variance_range(seed in any::<u64>()) {
            let (x, spec, w, bn) = random_case(seed, 1e-3, 10.0);
            let reference = batch_norm(&conv2d(&x, &spec, &w, None).unwrap(), &bn).unwrap();
            let (fw, fb) = batchnorm_fold(&spec, &w, None, &bn).unwrap();
            let folded = conv2d(&x, &spec.with_bias(true), &fw, Some(&fb)).unwrap();
            prop_assert!(folded.max_rel_diff(&reference).unwrap() < 1e-4);
        }
    }
}
