use rayon::prelude::*;

use super::{ensure_same_dims, Scalar, Tensor};
use crate::error::{shape_err, Result};

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut y = a.clone();
    add_inplace(&mut y, b)?;
    Ok(y)
}

pub fn add_inplace<T: Scalar>(a: &mut Tensor<T>, b: &Tensor<T>) -> Result<()> {
    ensure_same_dims(a, b, "add")?;
    a.data_mut()
        .iter_mut()
        .zip(b.data())
        .for_each(|(x, &y)| *x = *x + y);
    Ok(())
}

/// Elementwise product.
pub fn hadamard<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    ensure_same_dims(a, b, "hadamard")?;
    Ok(Tensor::raw(
        a.dims(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x * y)
            .collect(),
    ))
}

pub fn scale<T: Scalar>(x: &Tensor<T>, factor: T) -> Tensor<T> {
    x.map(|v| v * factor)
}

/// Concatenates along channels; all parts must share `n`, `h`, `w`.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| shape_err("c", "concat needs at least one tensor"))?;
    let [n, _, h, w] = first.dims();
    for p in parts {
        let [pn, _, ph, pw] = p.dims();
        if pn != n {
            return Err(shape_err(
                "n",
                format!("concat {:?} with {:?}", first.dims(), p.dims()),
            ));
        }
        if (ph, pw) != (h, w) {
            return Err(shape_err(
                if ph != h { "h" } else { "w" },
                format!("concat {:?} with {:?}", first.dims(), p.dims()),
            ));
        }
    }
    let c: usize = parts.iter().map(|p| p.c()).sum();
    let mut out = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for p in parts {
            let block = p.c() * h * w;
            out.extend_from_slice(&p.data()[b * block..(b + 1) * block]);
        }
    }
    Ok(Tensor::raw([n, c, h, w], out))
}

/// Splits along channels into consecutive groups of the given sizes.
pub fn split_channels<T: Scalar>(x: &Tensor<T>, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    let total: usize = sizes.iter().sum();
    if total != x.c() || sizes.contains(&0) {
        return Err(shape_err(
            "c",
            format!("split sizes {sizes:?} do not partition {} channels", x.c()),
        ));
    }
    let [n, c, h, w] = x.dims();
    let hw = h * w;
    let mut offset = 0;
    let mut parts = Vec::with_capacity(sizes.len());
    for &s in sizes {
        let mut data = Vec::with_capacity(n * s * hw);
        for b in 0..n {
            let start = (b * c + offset) * hw;
            data.extend_from_slice(&x.data()[start..start + s * hw]);
        }
        parts.push(Tensor::raw([n, s, h, w], data));
        offset += s;
    }
    Ok(parts)
}

/// Swaps the `h` and `w` axes.
pub fn transpose_last2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.dims();
    let mut out = vec![T::zero(); x.len()];
    out.par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(plane, dst)| {
            let src = x.plane(plane / c, plane % c);
            for y in 0..h {
                for xx in 0..w {
                    dst[xx * h + y] = src[y * w + xx];
                }
            }
        });
    Tensor::raw([n, c, w, h], out)
}

/// `(n, c, m, k) x (n, c, k, p) -> (n, c, m, p)`, batched over `n` and `c`.
pub fn matmul_batched<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, m, k] = a.dims();
    let [bn, bc, bk, p] = b.dims();
    if (bn, bc) != (n, c) {
        return Err(shape_err(
            if bn != n { "n" } else { "c" },
            format!("matmul batch dims {:?} vs {:?}", a.dims(), b.dims()),
        ));
    }
    if bk != k {
        return Err(shape_err(
            "inner",
            format!("matmul {:?} x {:?}", a.dims(), b.dims()),
        ));
    }
    let mut out = vec![T::zero(); n * c * m * p];
    out.par_chunks_mut(m * p)
        .enumerate()
        .for_each(|(batch, dst)| {
            let lhs = &a.data()[batch * m * k..(batch + 1) * m * k];
            let rhs = &b.data()[batch * k * p..(batch + 1) * k * p];
            for i in 0..m {
                let row = &mut dst[i * p..(i + 1) * p];
                for kk in 0..k {
                    let av = lhs[i * k + kk];
                    for (o, &bv) in row.iter_mut().zip(&rhs[kk * p..(kk + 1) * p]) {
                        *o = *o + av * bv;
                    }
                }
            }
        });
    Ok(Tensor::raw([n, c, m, p], out))
}
