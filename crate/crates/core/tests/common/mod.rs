// SPDX-License-Identifier: MIT OR Apache-2.0

//! Exhaustive criterion scans used as oracles for the sweep-based fits.

#![allow(dead_code)]

use rand::Rng;
use zoomcp::estimator::{Window, TIE_RTOL};
use zoomcp::model::{Basis, ModelFamily, Sample};

/// Least squares on one side, straight from the normal equations on centered data.
pub fn side_rss(basis: Basis, side: &[Sample]) -> f64 {
    let n = side.len() as f64;
    let my = side.iter().map(|s| s.y).sum::<f64>() / n;
    match basis {
        Basis::Constant => side.iter().map(|s| (s.y - my).powi(2)).sum(),
        Basis::Affine => {
            let mx = side.iter().map(|s| s.x).sum::<f64>() / n;
            let cxx: f64 = side.iter().map(|s| (s.x - mx).powi(2)).sum();
            let cxy: f64 = side.iter().map(|s| (s.x - mx) * (s.y - my)).sum();
            let b = cxy / cxx;
            let a = my - b * mx;
            side.iter().map(|s| (s.y - a - b * s.x).powi(2)).sum()
        }
    }
}

fn distinct(xs: impl Iterator<Item = f64>) -> usize {
    let mut v: Vec<f64> = xs.collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v.len()
}

/// `{lo}` plus every sample covariate in `(lo, hi]`, ascending, deduplicated.
fn candidates(samples: &[Sample], w: Window) -> Vec<f64> {
    let mut c: Vec<f64> = samples
        .iter()
        .map(|s| s.x)
        .filter(|&x| x > w.lo && x <= w.hi)
        .collect();
    c.push(w.lo);
    c.sort_by(f64::total_cmp);
    c.dedup();
    c
}

fn pick(
    samples: &[Sample],
    w: Window,
    cands: &[f64],
    values: &[Option<f64>],
    scale: f64,
) -> Option<(f64, f64)> {
    let best = values
        .iter()
        .flatten()
        .copied()
        .fold(f64::INFINITY, f64::min);
    if !best.is_finite() {
        return None;
    }
    let hit = |v: &Option<f64>| v.is_some_and(|v| v <= best + TIE_RTOL * scale);
    let first = values.iter().position(hit)?;
    let last = values.iter().rposition(hit)?;
    let d_lo = cands[first];
    let next = samples
        .iter()
        .map(|s| s.x)
        .filter(|&x| x > cands[last])
        .fold(f64::INFINITY, f64::min);
    Some((d_lo, next.min(w.hi)))
}

/// `(d_lo, d_hi, rss)` of the profiled criterion by direct evaluation at every candidate.
pub fn brute_free(samples: &[Sample], w: Window, family: ModelFamily) -> Option<(f64, f64, f64)> {
    let cands = candidates(samples, w);
    let my = samples.iter().map(|s| s.y).sum::<f64>() / samples.len() as f64;
    let tss: f64 = samples.iter().map(|s| (s.y - my).powi(2)).sum();
    let values: Vec<Option<f64>> = cands
        .iter()
        .map(|&d| {
            let left: Vec<Sample> = samples.iter().copied().filter(|s| s.x <= d).collect();
            let right: Vec<Sample> = samples.iter().copied().filter(|s| s.x > d).collect();
            if distinct(left.iter().map(|s| s.x)) < family.left.dim()
                || distinct(right.iter().map(|s| s.x)) < family.right.dim()
            {
                return None;
            }
            Some(side_rss(family.left, &left) + side_rss(family.right, &right))
        })
        .collect();
    let (d_lo, d_hi) = pick(samples, w, &cands, &values, tss)?;
    let left: Vec<Sample> = samples.iter().copied().filter(|s| s.x <= d_lo).collect();
    let right: Vec<Sample> = samples.iter().copied().filter(|s| s.x > d_lo).collect();
    Some((
        d_lo,
        d_hi,
        side_rss(family.left, &left) + side_rss(family.right, &right),
    ))
}

pub fn fixed_value(samples: &[Sample], d: f64, bl: &[f64], bu: &[f64], family: ModelFamily) -> f64 {
    let mut total = 0.0;
    for s in samples {
        let r = if s.x <= d {
            s.y - family.left.eval(bl, s.x)
        } else {
            s.y - family.right.eval(bu, s.x)
        };
        total += r * r;
    }
    total
}

pub fn brute_fixed(
    samples: &[Sample],
    w: Window,
    bl: &[f64],
    bu: &[f64],
    family: ModelFamily,
) -> (f64, f64, f64) {
    let cands = candidates(samples, w);
    let scale: f64 = samples
        .iter()
        .map(|s| {
            (s.y - family.left.eval(bl, s.x)).powi(2) + (s.y - family.right.eval(bu, s.x)).powi(2)
        })
        .sum();
    let values: Vec<Option<f64>> = cands
        .iter()
        .map(|&d| Some(fixed_value(samples, d, bl, bu, family)))
        .collect();
    let (d_lo, d_hi) =
        pick(samples, w, &cands, &values, scale).expect("fixed criterion always has a minimum");
    (d_lo, d_hi, fixed_value(samples, d_lo, bl, bu, family))
}

/// A random instance: jump model plus noise, optionally coarse (tied) covariates
/// or two-level responses that create exact criterion ties.
pub struct Instance {
    pub samples: Vec<Sample>,
    pub window: Window,
    pub family: ModelFamily,
    pub beta_l: Vec<f64>,
    pub beta_u: Vec<f64>,
}

pub fn random_instance<R: Rng>(rng: &mut R) -> Instance {
    let family = if rng.random_bool(0.5) {
        ModelFamily::STUMP
    } else {
        ModelFamily::TWO_LINES
    };
    let n = rng.random_range(4..=200);
    let d0 = rng.random_range(0.2..0.8);
    let coarse = rng.random_bool(0.25);
    let discrete = rng.random_bool(0.2);
    let sigma = if discrete {
        0.0
    } else {
        rng.random_range(0.05..1.0)
    };
    let (bl, bu) = if family == ModelFamily::STUMP {
        (vec![0.5], vec![1.5])
    } else {
        (vec![0.2, 0.5], vec![1.0, -0.3])
    };
    let samples = (0..n)
        .map(|_| {
            let mut x: f64 = rng.random();
            if coarse {
                x = (x * 40.0).round() / 40.0;
            }
            let mu = if x <= d0 {
                family.left.eval(&bl, x)
            } else {
                family.right.eval(&bu, x)
            };
            let noise = if sigma > 0.0 {
                sigma * (rng.random::<f64>() - 0.5) * 3.0
            } else {
                0.0
            };
            Sample::new(x, mu + noise)
        })
        .collect();
    let window = match rng.random_range(0..3) {
        0 => Window::UNIT,
        1 => {
            let c = d0 + rng.random_range(-0.1..0.1);
            let h = rng.random_range(0.02..0.3);
            Window::around(c, h).unwrap()
        }
        _ => {
            let lo = rng.random_range(0.0..0.5);
            Window::new(lo, rng.random_range(lo + 0.05..1.0)).unwrap()
        }
    };
    // frozen coefficients: truth, perturbed
    let jitter =
        |b: &[f64], rng: &mut R| b.iter().map(|v| v + rng.random_range(-0.2..0.2)).collect();
    let beta_l = jitter(&bl, rng);
    let beta_u = jitter(&bu, rng);
    Instance {
        samples,
        window,
        family,
        beta_l,
        beta_u,
    }
}
