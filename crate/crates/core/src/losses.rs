//! Training objective: photometric error plus four regularizers.

use crate::error::{Error, Result};
use crate::renderer::{BatchTape, RayGrad};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub pt_rgb: f64,
    pub bg: f64,
    pub dist: f64,
    pub tv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            pt_rgb: 1e-2,
            bg: 1e-3,
            dist: 1e-2,
            tv: 1e-5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("pt_rgb", self.pt_rgb), ("bg", self.bg), ("dist", self.dist), ("tv", self.tv)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} must be a nonnegative number, got {v}")));
            }
        }
        Ok(())
    }
}

/// Unweighted value of every term and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub photometric: f64,
    pub pt_rgb: f64,
    pub bg: f64,
    pub dist: f64,
    pub tv: f64,
    pub total: f64,
}

fn sq_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|c| (a[c] - b[c]).powi(2)).sum()
}

/// Mean squared error over rays and channels.
pub fn photometric_loss(rendered: &[[f64; 3]], target: &[[f64; 3]]) -> f64 {
    if rendered.is_empty() {
        return 0.0;
    }
    rendered.iter().zip(target).map(|(a, b)| sq_dist(a, b)).sum::<f64>() / (3 * rendered.len()) as f64
}

/// `Σ_k w_k ‖c_k - C‖²` for one ray.
pub fn per_point_rgb_loss(weights: &[f64], colors: &[[f64; 3]], target: &[f64; 3]) -> f64 {
    weights.iter().zip(colors).map(|(w, c)| w * sq_dist(c, target)).sum()
}

const ENTROPY_EPS: f64 = 1e-6;

fn xlogx(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

/// Binary entropy of the accumulated opacity of one ray.
pub fn background_entropy(opacity: f64) -> f64 {
    let o = opacity.clamp(0.0, 1.0);
    -(xlogx(o) + xlogx(1.0 - o))
}

/// Derivative of [`background_entropy`], with the input clamped to `[ε, 1-ε]`.
pub fn background_entropy_grad(opacity: f64) -> f64 {
    let o = opacity.clamp(ENTROPY_EPS, 1.0 - ENTROPY_EPS);
    (1.0 - o).ln() - o.ln()
}

/// Mean binary entropy over rays.
pub fn background_entropy_loss(opacities: &[f64]) -> f64 {
    if opacities.is_empty() {
        return 0.0;
    }
    opacities.iter().map(|&o| background_entropy(o)).sum::<f64>() / opacities.len() as f64
}

/// Interval distortion of one ray over sorted sample positions `s` with
/// interval widths `ds`. Returns the value and `dL/dw`, both in O(n).
pub fn distortion(weights: &[f64], s: &[f64], ds: &[f64]) -> (f64, Vec<f64>) {
    let n = weights.len();
    debug_assert!(s.windows(2).all(|p| p[0] <= p[1]));
    let total_w: f64 = weights.iter().sum();
    let total_ws: f64 = weights.iter().zip(s).map(|(w, x)| w * x).sum();
    let mut below_w = 0.0;
    let mut below_ws = 0.0;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(n);
    for k in 0..n {
        let (w, x) = (weights[k], s[k]);
        let above_w = total_w - below_w - w;
        let above_ws = total_ws - below_ws - w * x;
        // Σ_j w_j |s_k - s_j|
        let spread = x * below_w - below_ws + above_ws - x * above_w;
        value += w * spread + w * w * ds[k] / 3.0;
        grad.push(2.0 * spread + 2.0 * w * ds[k] / 3.0);
        below_w += w;
        below_ws += w * x;
    }
    (value, grad)
}

pub fn distortion_loss(weights: &[f64], s: &[f64], ds: &[f64]) -> f64 {
    distortion(weights, s, ds).0
}

/// Maps distances into `[0, 1]` by `t / (t + scale)` and derives interval
/// widths from the midpoints between neighbouring samples.
pub fn normalized_intervals(distances: &[f64], scale: f64) -> (Vec<f64>, Vec<f64>) {
    let s: Vec<f64> = distances
        .iter()
        .map(|&t| if t.is_infinite() { 1.0 } else { t / (t + scale) })
        .collect();
    let n = s.len();
    let mut ds = Vec::with_capacity(n);
    for k in 0..n {
        let lo = if k > 0 { 0.5 * (s[k - 1] + s[k]) } else if n > 1 { (s[0] - 0.5 * (s[1] - s[0])).max(0.0) } else { s[0] };
        let hi = if k + 1 < n {
            0.5 * (s[k] + s[k + 1])
        } else if n > 1 {
            (s[k] + 0.5 * (s[k] - s[k - 1])).min(1.0)
        } else {
            s[k]
        };
        ds.push((hi - lo).max(0.0));
    }
    (s, ds)
}

/// Mean squared difference between neighbours along `axes` of a row-major
/// tensor of `shape`. Returns 0 when no axis has two entries.
pub fn tv_loss(values: &[f64], shape: &[usize], axes: &[usize]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for_each_pair(shape, axes, |a, b| {
        sum += (values[b] - values[a]).powi(2);
        count += 1;
    });
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Adds `scale * d(tv_loss)/dvalues` into `grad`.
pub fn tv_backward(values: &[f64], shape: &[usize], axes: &[usize], scale: f64, grad: &mut [f64]) {
    let count = tv_pair_count(shape, axes);
    if count == 0 || scale == 0.0 {
        return;
    }
    let k = 2.0 * scale / count as f64;
    for_each_pair(shape, axes, |a, b| {
        let d = k * (values[b] - values[a]);
        grad[b] += d;
        grad[a] -= d;
    });
}

pub fn tv_pair_count(shape: &[usize], axes: &[usize]) -> usize {
    let total: usize = shape.iter().product();
    axes.iter()
        .map(|&a| if shape[a] == 0 { 0 } else { total / shape[a] * (shape[a] - 1) })
        .sum()
}

fn for_each_pair(shape: &[usize], axes: &[usize], mut f: impl FnMut(usize, usize)) {
    for &axis in axes {
        let n = shape[axis];
        if n < 2 {
            continue;
        }
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        for o in 0..outer {
            let base = o * n * inner;
            for i in 0..n - 1 {
                let row = base + i * inner;
                for j in 0..inner {
                    f(row + j, row + inner + j);
                }
            }
        }
    }
}

/// Per-ray losses of a rendered batch and the matching upstream gradients.
///
/// Rays without samples are left out of every average when `skip_empty` is
/// set. `scale` normalizes distances for the distortion term. TV is handled
/// separately since it acts on the grids directly.
pub fn batch_loss(
    tape: &BatchTape,
    targets: &[[f64; 3]],
    weights: &LossWeights,
    scale: f64,
    skip_empty: bool,
) -> Result<(LossTerms, Vec<RayGrad>)> {
    if targets.len() != tape.rays.len() {
        return Err(Error::Shape(format!(
            "{} targets for {} rays",
            targets.len(),
            tape.rays.len()
        )));
    }
    let active: Vec<bool> = tape.rays.iter().map(|r| !(skip_empty && r.samples.is_empty())).collect();
    let n = active.iter().filter(|&&a| a).count();
    let mut terms = LossTerms::default();
    let mut grads = vec![RayGrad::default(); tape.rays.len()];
    if n == 0 {
        return Ok((terms, grads));
    }
    let inv = 1.0 / n as f64;
    for ((ray, target), (grad, &on)) in tape.rays.iter().zip(targets).zip(grads.iter_mut().zip(&active)) {
        if !on {
            continue;
        }
        let out = &ray.output;
        let m = ray.samples.len();
        for c in 0..3 {
            let e = out.color[c] - target[c];
            terms.photometric += e * e * inv / 3.0;
            grad.color[c] = 2.0 * e * inv / 3.0;
        }
        terms.bg += background_entropy(out.accumulated_opacity) * inv;
        grad.opacity = weights.bg * background_entropy_grad(out.accumulated_opacity) * inv;

        grad.weights = vec![0.0; m];
        if weights.pt_rgb > 0.0 {
            grad.sample_colors = vec![[0.0; 3]; m];
        }
        for (k, s) in ray.samples.iter().enumerate() {
            if s.row.is_none() {
                continue;
            }
            let w = out.per_sample_weights[k];
            let err = sq_dist(&s.color, target);
            terms.pt_rgb += w * err * inv;
            if weights.pt_rgb > 0.0 {
                grad.weights[k] += weights.pt_rgb * err * inv;
                for c in 0..3 {
                    grad.sample_colors[k][c] = weights.pt_rgb * 2.0 * w * (s.color[c] - target[c]) * inv;
                }
            }
        }
        if m > 0 {
            let distances: Vec<f64> = ray.samples.iter().map(|s| s.distance).collect();
            let (s, ds) = normalized_intervals(&distances, scale);
            let (d, dg) = distortion(&out.per_sample_weights, &s, &ds);
            terms.dist += d * inv;
            if weights.dist > 0.0 {
                for (g, v) in grad.weights.iter_mut().zip(dg) {
                    *g += weights.dist * v * inv;
                }
            }
        }
    }
    terms.total = terms.photometric + weights.pt_rgb * terms.pt_rgb + weights.bg * terms.bg + weights.dist * terms.dist;
    Ok((terms, grads))
}
