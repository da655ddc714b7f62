//! Finite-difference audit of every differentiable component in double
//! precision.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::MipaConfig;
use crate::error::Result;
use crate::labels::{LabelMap, IGNORE};
use crate::loss::ce_loss;
use crate::mim::Mim;
use crate::network::MipaNet;
use crate::nn::{
    adaptive_avg_pool2d, batch_norm, conv2d, linear, max_pool_global, resize, softmax, BatchNorm2d, Init, Module,
    ParamKind, ResizeMode,
};
use crate::pam::PamPair;
use crate::tensor::{grad_check_many, GradCheckOptions, GradReport, Tensor};

pub const THRESHOLD: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentResult {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub checked: usize,
    pub kinks: usize,
}

impl ComponentResult {
    /// Also fails when kinks hide most coordinates, since the check would
    /// then prove little.
    pub fn passed(&self) -> bool {
        self.max_rel_error < THRESHOLD && self.checked > 4 * self.kinks
    }
}

impl fmt::Display for ComponentResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<22} max_rel_error={:.3e} checked={} kinks={} {}",
            self.name,
            self.max_rel_error,
            self.checked,
            self.kinks,
            if self.passed() { "ok" } else { "FAILED" }
        )
    }
}

type Check = fn(&mut ChaCha8Rng) -> Result<GradReport>;

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec((0..n).map(|_| rng.random_range(lo..hi)).collect(), shape).expect("shape")
}

fn named(pairs: Vec<(&str, Tensor<f64>)>) -> Vec<(String, Tensor<f64>)> {
    pairs.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

/// `sum(y * w)` with a fixed random `w`, so every output coordinate
/// contributes with its own weight.
fn weighted(y: &Tensor<f64>, w: &Tensor<f64>) -> Result<Tensor<f64>> {
    Ok(y.mul(w)?.sum_all())
}

fn opts() -> GradCheckOptions {
    GradCheckOptions::default()
}

/// Checks `f` with respect to `inputs` and every trainable tensor of `m`.
fn check_module<M: Module<f64>>(
    m: &mut M,
    inputs: Vec<(String, Tensor<f64>)>,
    max_coords: Option<usize>,
    f: impl Fn(&M, &[Tensor<f64>]) -> Result<Tensor<f64>>,
) -> Result<GradReport> {
    let k = inputs.len();
    let mut all = inputs;
    m.visit("", &mut |name, kind, t| {
        if kind == ParamKind::Trainable {
            all.push((name.to_string(), t.clone()));
        }
    });
    grad_check_many(
        |t| {
            let mut i = k;
            m.visit("", &mut |_, kind, p| {
                if kind == ParamKind::Trainable {
                    *p = t[i].clone();
                    i += 1;
                }
            });
            f(m, &t[..k])
        },
        &all,
        &GradCheckOptions { max_coords, ..opts() },
    )
}

fn elementwise(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let a = rand_t(rng, &[2, 3, 4], -1.0, 1.0);
    let b = rand_t(rng, &[3, 1], 0.5, 2.0);
    let w = rand_t(rng, &[2, 3, 4], -1.0, 1.0);
    grad_check_many(
        |t| {
            let y = t[0].add(&t[1])?.mul(&t[0])?.sub(&t[1])?.div(&t[1])?;
            weighted(&y, &w)
        },
        &named(vec![("a", a), ("b", b)]),
        &opts(),
    )
}

fn activations(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let x = rand_t(rng, &[3, 5], -2.0, 2.0);
    let w = rand_t(rng, &[3, 5], -1.0, 1.0);
    grad_check_many(
        |t| {
            let x = &t[0];
            let y = x.relu().add(&x.sigmoid())?.add(&x.neg().exp())?.add(&x.mul(x)?.add_scalar(1.0).log())?;
            weighted(&y, &w)
        },
        &named(vec![("x", x)]),
        &opts(),
    )
}

fn matmul(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let a = rand_t(rng, &[2, 3, 4], -1.0, 1.0);
    let b = rand_t(rng, &[2, 4, 5], -1.0, 1.0);
    let w = rand_t(rng, &[2, 3, 5], -1.0, 1.0);
    grad_check_many(|t| weighted(&t[0].matmul(&t[1])?, &w), &named(vec![("a", a), ("b", b)]), &opts())
}

fn reductions(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let x = rand_t(rng, &[2, 3, 4], -1.0, 1.0);
    let (w1, w2) = (rand_t(rng, &[2, 1, 4], -1.0, 1.0), rand_t(rng, &[3], -1.0, 1.0));
    let w3 = rand_t(rng, &[2, 3, 1], -1.0, 1.0);
    grad_check_many(
        |t| {
            let s = weighted(&t[0].sum_axes(&[1], true)?, &w1)?;
            let m = weighted(&t[0].mean_axes(&[0, 2], false)?, &w2)?;
            let x = weighted(&t[0].max_axes(&[2], true)?, &w3)?;
            s.add(&m)?.add(&x)
        },
        &named(vec![("x", x)]),
        &opts(),
    )
}

fn layout(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let x = rand_t(rng, &[2, 3, 4], -1.0, 1.0);
    let w = rand_t(rng, &[6, 2, 2], -1.0, 1.0);
    grad_check_many(
        |t| weighted(&t[0].permute(&[2, 0, 1])?.transpose_last()?.reshape(&[6, 2, 2])?, &w),
        &named(vec![("x", x)]),
        &opts(),
    )
}

fn conv(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let x = rand_t(rng, &[2, 3, 6, 5], -1.0, 1.0);
    let k = rand_t(rng, &[4, 3, 3, 3], -0.5, 0.5);
    let b = rand_t(rng, &[4], -0.5, 0.5);
    let w = rand_t(rng, &[2, 4, 3, 3], -1.0, 1.0);
    grad_check_many(
        |t| weighted(&conv2d(&t[0], &t[1], Some(&t[2]), 2, 1)?, &w),
        &named(vec![("x", x), ("weight", k), ("bias", b)]),
        &opts(),
    )
}

fn batch_norm_train(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let x = rand_t(rng, &[2, 3, 3, 3], -1.0, 1.0);
    let gamma = rand_t(rng, &[3], 0.5, 1.5);
    let beta = rand_t(rng, &[3], -0.5, 0.5);
    let w = rand_t(rng, &[2, 3, 3, 3], -1.0, 1.0);
    grad_check_many(
        |t| {
            let mut bn = BatchNorm2d::<f64>::new(3);
            bn.gamma = t[1].clone();
            bn.beta = t[2].clone();
            weighted(&batch_norm(&t[0], &bn, true)?, &w)
        },
        &named(vec![("x", x), ("gamma", gamma), ("beta", beta)]),
        &opts(),
    )
}

fn adaptive_pool(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let x = rand_t(rng, &[2, 2, 5, 7], -1.0, 1.0);
    let w = rand_t(rng, &[2, 2, 2, 3], -1.0, 1.0);
    grad_check_many(|t| weighted(&adaptive_avg_pool2d(&t[0], 2, 3)?, &w), &named(vec![("x", x)]), &opts())
}

fn global_max(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let x = rand_t(rng, &[2, 3, 3, 3], -1.0, 1.0);
    let w = rand_t(rng, &[2, 3, 1, 1], -1.0, 1.0);
    grad_check_many(|t| weighted(&max_pool_global(&t[0])?, &w), &named(vec![("x", x)]), &opts())
}

fn bilinear(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let x = rand_t(rng, &[1, 2, 3, 4], -1.0, 1.0);
    let w = rand_t(rng, &[1, 2, 6, 8], -1.0, 1.0);
    grad_check_many(
        |t| weighted(&resize(&t[0], 6, 8, ResizeMode::Bilinear)?, &w),
        &named(vec![("x", x)]),
        &opts(),
    )
}

fn softmax_check(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let x = rand_t(rng, &[2, 3, 5], -2.0, 2.0);
    let w = rand_t(rng, &[2, 3, 5], -1.0, 1.0);
    grad_check_many(|t| weighted(&softmax(&t[0], 2)?, &w), &named(vec![("x", x)]), &opts())
}

fn linear_check(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let x = rand_t(rng, &[4, 3], -1.0, 1.0);
    let m = rand_t(rng, &[3, 5], -1.0, 1.0);
    let b = rand_t(rng, &[5], -1.0, 1.0);
    let w = rand_t(rng, &[4, 5], -1.0, 1.0);
    grad_check_many(
        |t| weighted(&linear(&t[0], &t[1], Some(&t[2]))?, &w),
        &named(vec![("x", x), ("weight", m), ("bias", b)]),
        &opts(),
    )
}

fn pam(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let mut pair = PamPair::<f64>::new(&mut Init::new(rng.random()), 4, (2, 2), false);
    let fr = rand_t(rng, &[2, 4, 4, 4], -1.0, 1.0);
    let fd = rand_t(rng, &[2, 4, 4, 4], -1.0, 1.0);
    let w = rand_t(rng, &[2, 4, 4, 4], -1.0, 1.0);
    check_module(&mut pair, named(vec![("f_rgb", fr), ("f_dep", fd)]), None, |m, t| {
        weighted(&m.fuse(&t[0], &t[1])?, &w)
    })
}

fn mim(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let mut mim = Mim::<f64>::new(&mut Init::new(rng.random()), 8, 2, false)?;
    let fr = rand_t(rng, &[1, 8, 2, 2], -1.0, 1.0);
    let fd = rand_t(rng, &[1, 8, 2, 2], -1.0, 1.0);
    let (w1, w2) = (rand_t(rng, &[1, 8, 2, 2], -1.0, 1.0), rand_t(rng, &[1, 8, 2, 2], -1.0, 1.0));
    check_module(&mut mim, named(vec![("f_rgb", fr), ("f_dep", fd)]), None, |m, t| {
        let o = m.forward(&t[0], &t[1])?;
        weighted(&o.rgb, &w1)?.add(&weighted(&o.dep, &w2)?)
    })
}

fn cross_entropy(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let x = rand_t(rng, &[2, 4, 3, 3], -2.0, 2.0);
    let mut labels: Vec<LabelMap> = (0..2)
        .map(|_| LabelMap::new(3, 3, (0..9).map(|_| rng.random_range(0..4)).collect()).expect("extent"))
        .collect();
    labels[0].data[4] = IGNORE;
    grad_check_many(|t| ce_loss(&t[0], &labels), &named(vec![("logits", x)]), &opts())
}

fn network(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let cfg = MipaConfig { num_classes: 2, base_channels: 4, stage_depths: [1, 1, 1, 1], heads: 2, ..Default::default() };
    let mut net = MipaNet::<f64>::new(&cfg, rng.random())?;
    let rgb = rand_t(rng, &[1, 3, 16, 16], 0.0, 1.0);
    let dep = rand_t(rng, &[1, 1, 16, 16], 0.0, 1.0);
    let shapes: Vec<Vec<usize>> = net.forward(&rgb, &dep, false)?.logits.iter().map(|l| l.shape().to_vec()).collect();
    let probes: Vec<Tensor<f64>> = shapes.iter().map(|s| rand_t(rng, s, -1.0, 1.0)).collect();
    // Evaluation-mode batch norm: at 16x16 input stage 4 is 1x1, where
    // batch statistics of a single image are degenerate.
    check_module(&mut net, named(vec![("rgb", rgb), ("depth", dep)]), Some(4), |m, t| {
        let out = m.forward(&t[0], &t[1], false)?;
        let mut total = Tensor::scalar(0.0);
        for (l, p) in out.logits.iter().zip(&probes) {
            total = total.add(&weighted(l, p)?)?;
        }
        Ok(total)
    })
}

fn nearest(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let x = rand_t(rng, &[1, 2, 2, 3], -1.0, 1.0);
    let w = rand_t(rng, &[1, 2, 4, 6], -1.0, 1.0);
    grad_check_many(
        |t| weighted(&resize(&t[0], 4, 6, ResizeMode::Nearest)?, &w),
        &named(vec![("x", x)]),
        &opts(),
    )
}

pub const COMPONENTS: [(&str, Check); 17] = [
    ("elementwise", elementwise),
    ("activations", activations),
    ("matmul", matmul),
    ("reductions", reductions),
    ("reshape_permute", layout),
    ("conv2d", conv),
    ("batch_norm", batch_norm_train),
    ("adaptive_avg_pool2d", adaptive_pool),
    ("max_pool_global", global_max),
    ("resize_bilinear", bilinear),
    ("resize_nearest", nearest),
    ("softmax", softmax_check),
    ("linear", linear_check),
    ("pam_forward", pam),
    ("mim_forward", mim),
    ("ce_loss", cross_entropy),
    ("network_end_to_end", network),
];

/// Runs every component, calling `on_result` as each finishes. A component
/// whose evaluation errors is reported with an infinite error.
pub fn run(seed: u64, mut on_result: impl FnMut(&ComponentResult)) -> Vec<ComponentResult> {
    COMPONENTS
        .iter()
        .enumerate()
        .map(|(i, (name, check))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let r = match check(&mut rng) {
                Ok(g) => ComponentResult { name, max_rel_error: g.max_rel_error, checked: g.checked, kinks: g.kinks },
                Err(_) => ComponentResult { name, max_rel_error: f64::INFINITY, checked: 0, kinks: 0 },
            };
            on_result(&r);
            r
        })
        .collect()
}
