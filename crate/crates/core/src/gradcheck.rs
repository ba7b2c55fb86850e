//! Central finite-difference verification of graph gradients.

use alloc::format;

use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Primitive, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Largest relative disagreement between the analytic gradient of `f` at `x`
/// and a central difference with step `h`:
/// `max_i |analytic_i - fd_i| / max(1, |fd_i|)`.
///
/// The difference quotient divides by the step actually realised in floating
/// point, `(x + h) - (x - h)`, rather than the nominal `2h`.
pub fn gradient_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let mut g = Graph::new();
    let leaf = g.param(x.clone());
    let root = f(&mut g, leaf)?;
    if !g.value(root).all_finite() {
        return Err(Error::NonFinite("gradient_check: f(x)".into()));
    }
    g.backward(root)?;
    let analytic = g.grad(leaf).cloned().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    let eval = |point: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(point);
        let r = f(&mut g, v)?;
        let value = g.value(r).item().ok_or_else(|| Error::NonScalarRoot(g.shape(r).to_vec()))?;
        if value.is_finite() {
            Ok(value)
        } else {
            Err(Error::NonFinite("gradient_check: f(x ± h)".into()))
        }
    };

    let mut worst = 0.0_f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus.data_mut()[i] += h;
        minus.data_mut()[i] -= h;
        let step = plus.data()[i] - minus.data()[i];
        let fd = (eval(plus)? - eval(minus)?) / step;
        let err = libm::fabs(analytic.data()[i] - fd) / libm::fabs(fd).max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Worst [`gradient_check`] error of `prim` over each of its inputs in
/// turn, the others held constant. The output is reduced to a scalar by a
/// fixed non-uniform weighting so that normalising primitives (softmax,
/// l2-normalise) still have non-trivial gradients.
pub fn check_primitive(prim: &Primitive, inputs: &[Tensor], h: f64) -> Result<f64> {
    let mut worst = 0.0_f64;
    for which in 0..inputs.len() {
        let f = |g: &mut Graph, v: Var| -> Result<Var> {
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(i, t)| if i == which { v } else { g.constant(t.clone()) })
                .collect();
            let out = g.apply(prim, &vars)?;
            let shape = g.shape(out).to_vec();
            let w = g.constant(Tensor::from_fn(shape, |i| libm::sin(1.0 + 0.7 * i as f64)));
            let weighted = g.mul(out, w)?;
            Ok(g.sum(weighted))
        };
        worst = worst.max(gradient_check(f, &inputs[which], h)?);
    }
    Ok(worst)
}

/// Names of the primitives covered by [`random_case`], in index order.
pub const CASE_NAMES: [&str; 19] = [
    "add", "sub", "mul", "exp", "log", "neg", "scale", "matmul", "conv2d", "relu", "softmax",
    "l2_normalize", "avg_pool", "upsample_bilinear", "pairwise_sq_dist", "masked_mean", "concat",
    "slice", "dropout",
];

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero so that kinks (relu) and poles (log) lie
/// well outside the difference stencil.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.1..1.5);
        if rng.random::<bool>() { m } else { -m }
    })
}

/// A random, well-conditioned instance of primitive `index` (see
/// [`CASE_NAMES`]) with its inputs.
pub fn random_case(index: usize, seed: u64) -> (Primitive, Vec<Tensor>) {
    let mut rng = rng::stream(seed, index as u64);
    let r = &mut rng;
    let d = |r: &mut ChaCha8Rng| r.random_range(1..4usize);
    match index {
        0 | 1 | 2 => {
            let shape = [d(r), d(r) + 1];
            let prim = [Primitive::Add, Primitive::Sub, Primitive::Mul][index].clone();
            (prim, alloc::vec![uniform(&shape, r, -2.0, 2.0), uniform(&shape, r, -2.0, 2.0)])
        }
        3 => (Primitive::Exp, alloc::vec![uniform(&[d(r), 3], r, -2.0, 2.0)]),
        4 => (Primitive::Log, alloc::vec![uniform(&[d(r), 3], r, 0.2, 3.0)]),
        5 => (Primitive::Neg, alloc::vec![uniform(&[4], r, -2.0, 2.0)]),
        6 => (Primitive::Scale(r.random_range(-3.0..3.0)), alloc::vec![uniform(&[d(r), 2], r, -2.0, 2.0)]),
        7 => {
            let (m, k, n) = (d(r), d(r) + 1, d(r));
            (Primitive::MatMul, alloc::vec![uniform(&[m, k], r, -1.0, 1.0), uniform(&[k, n], r, -1.0, 1.0)])
        }
        8 => {
            let (stride, pad) = (r.random_range(1..3usize), r.random_range(0..2usize));
            let (c, o, ks) = (d(r), d(r), [1usize, 3][r.random_range(0..2usize)]);
            let hw = ks + r.random_range(1..4usize);
            let mut inputs = alloc::vec![
                uniform(&[d(r), c, hw, hw + 1], r, -1.0, 1.0),
                uniform(&[o, c, ks, ks], r, -1.0, 1.0),
            ];
            if r.random::<bool>() {
                inputs.push(uniform(&[o], r, -1.0, 1.0));
            }
            (Primitive::Conv2d { stride, pad }, inputs)
        }
        9 => (Primitive::Relu, alloc::vec![away_from_zero(&[d(r), 4], r)]),
        10 => {
            let tau = [0.07, 0.5, 1.0, 2.0][r.random_range(0..4usize)];
            let scale = if tau < 0.1 { 0.1 } else { 2.0 };
            let shape = [d(r), d(r) + 1, 2];
            let axis = r.random_range(0..3usize);
            (Primitive::Softmax { axis, tau }, alloc::vec![uniform(&shape, r, -scale, scale)])
        }
        11 => {
            let shape = [d(r), d(r) + 1, 2];
            (Primitive::L2Normalize { axis: r.random_range(0..3usize) }, alloc::vec![away_from_zero(&shape, r)])
        }
        12 => {
            let window = r.random_range(1..3usize);
            let shape = [d(r), d(r), window * d(r), window * d(r)];
            (Primitive::AvgPool { window }, alloc::vec![uniform(&shape, r, -1.0, 1.0)])
        }
        13 => {
            let shape = [d(r), d(r), d(r) + 1, d(r) + 1];
            let (out_h, out_w) = (r.random_range(1..7usize), r.random_range(1..7usize));
            (Primitive::UpsampleBilinear { out_h, out_w }, alloc::vec![uniform(&shape, r, -1.0, 1.0)])
        }
        14 => (Primitive::PairwiseSqDist, alloc::vec![uniform(&[d(r) + 1, d(r)], r, -1.0, 1.0)]),
        15 => {
            let x = uniform(&[d(r), 4], r, -2.0, 2.0);
            let mut weights: Vec<f64> = (0..x.len()).map(|_| r.random_range(0.0..1.0)).collect();
            weights[0] = 1.0;
            (Primitive::MaskedMean { weights }, alloc::vec![x])
        }
        16 => {
            let axis = r.random_range(0..2usize);
            let n = r.random_range(2..4usize);
            let inputs = (0..n)
                .map(|_| {
                    let mut shape = [2usize, 3];
                    shape[axis] = d(r);
                    uniform(&shape, r, -1.0, 1.0)
                })
                .collect();
            (Primitive::Concat { axis }, inputs)
        }
        17 => {
            let shape = [d(r) + 2, d(r) + 1];
            let axis = r.random_range(0..2usize);
            let start = r.random_range(0..shape[axis]);
            let len = r.random_range(1..=shape[axis] - start);
            (Primitive::Slice { axis, start, len }, alloc::vec![uniform(&shape, r, -1.0, 1.0)])
        }
        _ => {
            let p = r.random_range(0.0..0.6);
            (Primitive::Dropout { p, seed: r.random() }, alloc::vec![uniform(&[d(r), 5], r, -1.0, 1.0)])
        }
    }
}

/// Loss names covered by [`loss_case_error`], in index order.
pub const LOSS_NAMES: [&str; 4] = ["consistency", "uniformity", "prototype", "supervised"];

/// [`gradient_check`] error of loss `index` (see [`LOSS_NAMES`]) on a random
/// instance. Losses over probabilities or unit vectors are checked through
/// the softmax or normalisation that produces their inputs.
pub fn loss_case_error(index: usize, seed: u64, h: f64) -> Result<f64> {
    let mut rng = rng::stream(seed, 0x1055 + index as u64);
    let r = &mut rng;
    match index {
        0 => {
            let shape = [r.random_range(1..3usize), r.random_range(2..5usize), 2, r.random_range(1..4usize)];
            let n = shape[0] * shape[2] * shape[3];
            let weights: Vec<f64> = (0..n).map(|_| f64::from(u8::from(r.random::<bool>()))).collect();
            let target = uniform(&shape, r, -2.0, 2.0);
            let pred = uniform(&shape, r, -2.0, 2.0);
            // both arguments carry gradient in training; check each
            let f_pred = |g: &mut Graph, v: Var| {
                let t = g.constant(target.clone());
                let t = g.softmax(t, 1, 1.0)?;
                let p = g.softmax(v, 1, 1.0)?;
                crate::losses::consistency(g, t, p, &weights)
            };
            let f_target = |g: &mut Graph, v: Var| {
                let t = g.softmax(v, 1, 1.0)?;
                let p = g.constant(pred.clone());
                let p = g.softmax(p, 1, 1.0)?;
                crate::losses::consistency(g, t, p, &weights)
            };
            Ok(gradient_check(f_pred, &pred, h)?.max(gradient_check(f_target, &target, h)?))
        }
        1 => {
            let side = 4 * r.random_range(1..3usize);
            let z = away_from_zero(&[r.random_range(1..3usize), r.random_range(2..5usize), side, 4], r);
            gradient_check(
                |g, v| {
                    let u = g.l2_normalize(v, 1, crate::autodiff::NORM_EPS)?;
                    crate::losses::uniformity(g, u)
                },
                &z,
                h,
            )
        }
        2 => {
            let p = away_from_zero(&[r.random_range(2..6usize), r.random_range(2..6usize)], r);
            gradient_check(
                |g, v| {
                    let u = g.l2_normalize(v, 0, crate::autodiff::NORM_EPS)?;
                    crate::losses::prototype(g, u)
                },
                &p,
                h,
            )
        }
        _ => {
            let shape = [r.random_range(1..3usize), r.random_range(2..5usize), 2, r.random_range(1..4usize)];
            let k = shape[1] as i32;
            let labels: Vec<i32> = (0..shape[0] * shape[2] * shape[3]).map(|_| r.random_range(-1..k)).collect();
            let x = uniform(&shape, r, -2.0, 2.0);
            gradient_check(
                |g, v| {
                    let p = g.softmax(v, 1, 1.0)?;
                    Ok(crate::losses::supervised(g, p, &labels)?.loss)
                },
                &x,
                h,
            )
        }
    }
}
