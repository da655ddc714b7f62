use crate::error::{Error, Result};
use crate::tensor::{lit, ReduceOp, Scalar, Tensor};

fn window(i: usize, out: usize, len: usize) -> (usize, usize) {
    (i * len / out, ((i + 1) * len).div_ceil(out))
}

/// Average pooling to a fixed `out_h x out_w` grid. Output cell `i` covers
/// input rows `floor(i H / oh) .. ceil((i + 1) H / oh)`, so windows may
/// overlap when the extents do not divide.
pub fn adaptive_avg_pool2d<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 || out_h == 0 || out_w == 0 || out_h > s[2] || out_w > s[3] {
        return Err(Error::shape(format!(
            "adaptive_avg_pool2d to {out_h}x{out_w} from {s:?}"
        )));
    }
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let cells: Vec<(usize, usize, usize, usize)> = (0..out_h)
        .flat_map(|oy| {
            (0..out_w).map(move |ox| {
                let (y0, y1) = window(oy, out_h, h);
                let (x0, x1) = window(ox, out_w, w);
                (y0, y1, x0, x1)
            })
        })
        .collect();
    let xd = x.data();
    let mut out = Vec::with_capacity(planes * cells.len());
    for p in 0..planes {
        let plane = &xd[p * h * w..(p + 1) * h * w];
        for &(y0, y1, x0, x1) in &cells {
            let mut acc = T::zero();
            for y in y0..y1 {
                acc += plane[y * w + x0..y * w + x1].iter().copied().sum::<T>();
            }
            out.push(acc / lit::<T>(((y1 - y0) * (x1 - x0)) as f64));
        }
    }
    Ok(Tensor::from_op(
        out,
        vec![s[0], s[1], out_h, out_w],
        vec![x.clone()],
        move |g| {
            let mut dx = vec![T::zero(); planes * h * w];
            for p in 0..planes {
                let plane = &mut dx[p * h * w..(p + 1) * h * w];
                for (ci, &(y0, y1, x0, x1)) in cells.iter().enumerate() {
                    let share = g[p * cells.len() + ci] / lit::<T>(((y1 - y0) * (x1 - x0)) as f64);
                    for y in y0..y1 {
                        plane[y * w + x0..y * w + x1].iter_mut().for_each(|v| *v += share);
                    }
                }
            }
            vec![Some(dx)]
        },
    ))
}

/// Global max over the spatial axes, keeping them as extent 1.
pub fn max_pool_global<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 4 {
        return Err(Error::shape(format!("max_pool_global expects rank 4, got {:?}", x.shape())));
    }
    x.reduce(ReduceOp::Max, &[2, 3], true)
}
