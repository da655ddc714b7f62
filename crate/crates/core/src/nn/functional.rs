use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Numerically stable softmax along `axis`.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if axis >= s.len() {
        return Err(Error::InvalidAxis { axis, rank: s.len() });
    }
    let len = s[axis];
    let inner: usize = s[axis + 1..].iter().product();
    let outer: usize = s[..axis].iter().product();
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let m = (0..len).map(|k| xd[at(k)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for k in 0..len {
                let e = (xd[at(k)] - m).exp();
                out[at(k)] = e;
                z += e;
            }
            for k in 0..len {
                out[at(k)] = out[at(k)] / z;
            }
        }
    }
    let y = out.clone();
    Ok(Tensor::from_op(out, s.to_vec(), vec![x.clone()], move |g| {
        let mut dx = vec![T::zero(); g.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let dot = (0..len).map(|k| g[at(k)] * y[at(k)]).sum::<T>();
                for k in 0..len {
                    dx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                }
            }
        }
        vec![Some(dx)]
    }))
}

/// `x W + b` with `W` stored as `d_in x d_out`.
pub fn linear<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let y = x.matmul(weight)?;
    match bias {
        Some(b) => y.add(b),
        None => Ok(y),
    }
}
