//! Pixel cross-entropy and the summed multi-level objective.

use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE};
use crate::network::ForwardOutputs;
use crate::tensor::{lit, Scalar, Tensor};

/// Mean of `-log softmax(logits)[label]` over all non-IGNORE pixels of the
/// batch. `labels[n]` must match the spatial extents of the logits.
pub fn ce_loss<T: Scalar>(logits: &Tensor<T>, labels: &[LabelMap]) -> Result<Tensor<T>> {
    let s = logits.shape();
    if s.len() != 4 || s[0] != labels.len() {
        return Err(Error::shape(format!(
            "cross-entropy over logits {s:?} with {} label maps",
            labels.len()
        )));
    }
    let (n, k, h, w) = (s[0], s[1], s[2], s[3]);
    if k < 2 {
        return Err(Error::InvalidArgument(format!("cross-entropy needs at least 2 classes, got {k}")));
    }
    for m in labels {
        if m.height != h || m.width != w {
            return Err(Error::shape(format!(
                "{}x{} labels for {h}x{w} logits",
                m.height, m.width
            )));
        }
        m.check_classes(k)?;
    }
    let hw = h * w;
    let d = logits.data();
    let mut probs = vec![T::zero(); d.len()];
    let mut total = 0.0f64;
    let mut count = 0usize;
    for b in 0..n {
        for p in 0..hw {
            let at = |c: usize| (b * k + c) * hw + p;
            let m = (0..k).map(|c| d[at(c)]).fold(T::neg_infinity(), T::max);
            let z: T = (0..k).map(|c| (d[at(c)] - m).exp()).sum();
            for c in 0..k {
                probs[at(c)] = (d[at(c)] - m).exp() / z;
            }
            let y = labels[b].data[p];
            if y != IGNORE {
                total += (m + z.ln() - d[at(y as usize)]).as_f64();
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Label("every pixel is IGNORE; the loss is undefined".into()));
    }
    let labels: Vec<u8> = labels.iter().flat_map(|m| m.data.iter().copied()).collect();
    let inv = lit::<T>(1.0 / count as f64);
    Ok(Tensor::from_op(
        vec![lit::<T>(total / count as f64)],
        vec![1],
        vec![logits.clone()],
        move |g| {
            let scale = g[0] * inv;
            let mut dx = vec![T::zero(); probs.len()];
            for b in 0..n {
                for p in 0..hw {
                    let y = labels[b * hw + p];
                    if y == IGNORE {
                        continue;
                    }
                    for c in 0..k {
                        let at = (b * k + c) * hw + p;
                        let onehot = if c == y as usize { T::one() } else { T::zero() };
                        dx[at] = (probs[at] - onehot) * scale;
                    }
                }
            }
            vec![Some(dx)]
        },
    ))
}

/// Label pyramid matching every logit level, by top-left nearest
/// reduction of the full-resolution labels.
pub fn label_pyramid(logits: &[Tensor<impl Scalar>], labels: &[LabelMap]) -> Result<Vec<Vec<LabelMap>>> {
    logits
        .iter()
        .map(|l| {
            let (h, w) = (l.shape()[2], l.shape()[3]);
            labels
                .iter()
                .map(|m| {
                    if m.height % h != 0 || m.height / h != m.width / w || m.width % w != 0 {
                        return Err(Error::shape(format!(
                            "{}x{} labels do not reduce to {h}x{w} logits",
                            m.height, m.width
                        )));
                    }
                    m.downsample(m.height / h)
                })
                .collect()
        })
        .collect()
}

/// Unweighted sum of the cross-entropy of every decoder level.
pub fn total_loss<T: Scalar>(out: &ForwardOutputs<T>, labels: &[LabelMap]) -> Result<Tensor<T>> {
    let pyramid = label_pyramid(&out.logits, labels)?;
    let mut total: Option<Tensor<T>> = None;
    for (l, y) in out.logits.iter().zip(&pyramid) {
        let term = ce_loss(l, y)?;
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    Ok(total.expect("four levels"))
}
