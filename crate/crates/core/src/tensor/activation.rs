use rayon::prelude::*;

use super::{lit, Scalar, Tensor};

pub fn relu6<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    relu6_inplace(&mut y);
    y
}

pub fn relu6_inplace<T: Scalar>(x: &mut Tensor<T>) {
    let six = lit::<T>(6.0);
    x.data_mut()
        .iter_mut()
        .for_each(|v| *v = v.max(T::zero()).min(six));
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| T::one() / (T::one() + (-v).exp()))
}

/// Softmax over the last (`w`) axis of every `(n, c, h)` row.
pub fn softmax_lastdim<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    let w = x.w();
    y.data_mut().par_chunks_mut(w).for_each(|row| {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        row.iter_mut().for_each(|v| *v = *v / sum);
    });
    y
}
