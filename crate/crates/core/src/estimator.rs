// SPDX-License-Identifier: MIT OR Apache-2.0

//! Least-squares change-point fits over a search window.
//!
//! The criterion is a right-continuous step function of the split `d` that
//! only jumps at sample covariates, so evaluating it at the window's lower
//! edge and at every distinct covariate inside the window is exact. A point
//! is a minimizer when the criterion or its left limit attains the minimum;
//! the largest minimizer is therefore the jump that closes the last
//! minimizing stretch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Basis, ModelFamily, Sample};

/// Closed search or sampling interval inside [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub lo: f64,
    pub hi: f64,
}

impl Window {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        let w = Self { lo, hi };
        w.check()?;
        Ok(w)
    }

    pub const UNIT: Window = Window { lo: 0.0, hi: 1.0 };

    /// `[center - half_width, center + half_width]` clipped to [0, 1].
    pub fn around(center: f64, half_width: f64) -> Result<Self> {
        Self::new(
            (center - half_width).max(0.0),
            (center + half_width).min(1.0),
        )
    }

    pub fn check(&self) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite())
            || self.lo < 0.0
            || self.hi > 1.0
            || self.hi <= self.lo
        {
            return Err(Error::DegenerateWindow {
                lo: self.lo,
                hi: self.hi,
            });
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }
}

/// Result of a change-point fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFit {
    /// Smallest minimizer.
    pub d_lo: f64,
    /// Largest minimizer.
    pub d_hi: f64,
    pub d_av: f64,
    pub beta_l: Vec<f64>,
    pub beta_u: Vec<f64>,
    /// Criterion value at the minimum.
    pub rss: f64,
    pub sigma_hat: f64,
    pub n: usize,
}

impl SplitFit {
    /// Fitted `psi_u - psi_l` at `x`.
    pub fn jump_at(&self, family: ModelFamily, x: f64) -> f64 {
        family.right.eval(&self.beta_u, x) - family.left.eval(&self.beta_l, x)
    }
}

/// Relative slack under which two criterion values count as tied.
pub const TIE_RTOL: f64 = 1e-9;

/// Samples sorted by covariate with their distinct-covariate groups.
struct Sweep {
    xs: Vec<f64>,
    ys: Vec<f64>,
    /// End index (exclusive) of each distinct-covariate group.
    group_end: Vec<usize>,
}

impl Sweep {
    fn new(samples: &[Sample]) -> Self {
        let mut s = samples.to_vec();
        s.sort_by(|a, b| a.x.total_cmp(&b.x));
        let xs: Vec<f64> = s.iter().map(|p| p.x).collect();
        let ys: Vec<f64> = s.iter().map(|p| p.y).collect();
        let mut group_end = Vec::new();
        for i in 1..=xs.len() {
            if i == xs.len() || xs[i] != xs[i - 1] {
                group_end.push(i);
            }
        }
        Self { xs, ys, group_end }
    }

    /// Candidate splits: the window's lower edge (samples with `x <= lo` on
    /// the left) followed by each distinct covariate in `(lo, hi]`.
    /// Each entry is `(location, left count, left distinct count)`.
    fn candidates(&self, window: Window) -> Vec<(f64, usize, usize)> {
        let first = self.xs.partition_point(|&x| x <= window.lo);
        let groups_at_lo = self.group_end.partition_point(|&e| e <= first);
        let mut out = vec![(window.lo, first, groups_at_lo)];
        for (g, &end) in self.group_end.iter().enumerate().skip(groups_at_lo) {
            let x = self.xs[end - 1];
            if x > window.hi {
                break;
            }
            out.push((x, end, g + 1));
        }
        out
    }

    /// First distinct covariate strictly above `d`, capped at `hi`.
    fn next_jump(&self, d: f64, hi: f64) -> f64 {
        let i = self.xs.partition_point(|&x| x <= d);
        if i < self.xs.len() {
            self.xs[i].min(hi)
        } else {
            hi
        }
    }
}

fn minimizing_range(values: &[Option<f64>], scale: f64) -> Option<(usize, usize, f64)> {
    let best = values
        .iter()
        .flatten()
        .copied()
        .fold(f64::INFINITY, f64::min);
    if !best.is_finite() {
        return None;
    }
    let tol = TIE_RTOL * scale;
    let first = values
        .iter()
        .position(|v| v.is_some_and(|v| v <= best + tol))?;
    let last = values
        .iter()
        .rposition(|v| v.is_some_and(|v| v <= best + tol))?;
    Some((first, last, best))
}

/// Running sums for per-side least squares on centered data.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: f64,
    sx: f64,
    sxx: f64,
    sy: f64,
    sxy: f64,
    syy: f64,
}

impl Moments {
    fn push(&mut self, x: f64, y: f64) {
        self.n += 1.0;
        self.sx += x;
        self.sxx += x * x;
        self.sy += y;
        self.sxy += x * y;
        self.syy += y * y;
    }

    fn minus(&self, o: &Moments) -> Moments {
        Moments {
            n: self.n - o.n,
            sx: self.sx - o.sx,
            sxx: self.sxx - o.sxx,
            sy: self.sy - o.sy,
            sxy: self.sxy - o.sxy,
            syy: self.syy - o.syy,
        }
    }

    fn rss(&self, basis: Basis) -> f64 {
        let cyy = self.syy - self.sy * self.sy / self.n;
        let r = match basis {
            Basis::Constant => cyy,
            Basis::Affine => {
                let cxx = self.sxx - self.sx * self.sx / self.n;
                let cxy = self.sxy - self.sx * self.sy / self.n;
                cyy - cxy * cxy / cxx
            }
        };
        r.max(0.0)
    }
}

/// Direct (two-pass) least-squares fit of one side; returns coefficients and RSS.
pub fn fit_side(basis: Basis, side: &[Sample]) -> (Vec<f64>, f64) {
    let n = side.len() as f64;
    let my = side.iter().map(|s| s.y).sum::<f64>() / n;
    match basis {
        Basis::Constant => {
            let rss = side.iter().map(|s| (s.y - my).powi(2)).sum();
            (vec![my], rss)
        }
        Basis::Affine => {
            let mx = side.iter().map(|s| s.x).sum::<f64>() / n;
            let cxx: f64 = side.iter().map(|s| (s.x - mx).powi(2)).sum();
            let cxy: f64 = side.iter().map(|s| (s.x - mx) * (s.y - my)).sum();
            let slope = cxy / cxx;
            let intercept = my - slope * mx;
            let rss = side
                .iter()
                .map(|s| (s.y - intercept - slope * s.x).powi(2))
                .sum();
            (vec![intercept, slope], rss)
        }
    }
}

fn split_at(samples: &[Sample], d: f64) -> (Vec<Sample>, Vec<Sample>) {
    samples.iter().partition(|s| s.x <= d)
}

/// Free-parameter least squares: both segment fits are profiled out at
/// every candidate split. Candidates leaving fewer than `dim(basis)`
/// distinct covariates on a side are skipped.
pub fn fit_free(samples: &[Sample], window: Window, family: ModelFamily) -> Result<SplitFit> {
    window.check()?;
    if samples.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 samples, got {}",
            samples.len()
        )));
    }
    if samples
        .iter()
        .any(|s| !(s.x.is_finite() && s.y.is_finite()))
    {
        return Err(Error::invalid("samples must be finite"));
    }
    let sweep = Sweep::new(samples);
    let n = sweep.xs.len();
    let groups = sweep.group_end.len();
    let mx = sweep.xs.iter().sum::<f64>() / n as f64;
    let my = sweep.ys.iter().sum::<f64>() / n as f64;
    let tss: f64 = sweep.ys.iter().map(|y| (y - my).powi(2)).sum();

    let mut prefix = Vec::with_capacity(n + 1);
    let mut acc = Moments::default();
    prefix.push(acc);
    for (x, y) in sweep.xs.iter().zip(&sweep.ys) {
        acc.push(x - mx, y - my);
        prefix.push(acc);
    }
    let total = acc;

    let (dl, du) = (family.left.dim(), family.right.dim());
    let candidates = sweep.candidates(window);
    let values: Vec<Option<f64>> = candidates
        .iter()
        .map(|&(_, left_n, left_groups)| {
            if left_groups < dl || groups - left_groups < du {
                return None;
            }
            let left = prefix[left_n];
            let right = total.minus(&left);
            Some(left.rss(family.left) + right.rss(family.right))
        })
        .collect();

    let (first, last, _) = minimizing_range(&values, tss).ok_or(Error::AllCandidatesSkipped)?;
    let d_lo = candidates[first].0;
    let d_hi = sweep.next_jump(candidates[last].0, window.hi);

    let (left, right) = split_at(samples, d_lo);
    let (beta_l, rss_l) = fit_side(family.left, &left);
    let (beta_u, rss_u) = fit_side(family.right, &right);
    let rss = rss_l + rss_u;
    let dof = n.saturating_sub(dl + du).max(1);
    Ok(SplitFit {
        d_lo,
        d_hi,
        d_av: 0.5 * (d_lo + d_hi),
        beta_l,
        beta_u,
        rss,
        sigma_hat: (rss / dof as f64).sqrt(),
        n,
    })
}

/// Fixed-parameter criterion
/// `sum (w - psi_l(u))^2 1(u <= d) + (w - psi_u(u))^2 1(u > d)`
/// with segment coefficients frozen from an earlier stage.
pub fn fit_fixed(
    samples: &[Sample],
    window: Window,
    beta_l: &[f64],
    beta_u: &[f64],
    family: ModelFamily,
) -> Result<SplitFit> {
    window.check()?;
    if samples.is_empty() {
        return Err(Error::EmptySampleSet);
    }
    if beta_l.len() != family.left.dim() || beta_u.len() != family.right.dim() {
        return Err(Error::invalid("frozen coefficients do not match basis"));
    }
    let sweep = Sweep::new(samples);
    let left_sq: Vec<f64> = sweep
        .xs
        .iter()
        .zip(&sweep.ys)
        .map(|(&x, &y)| (y - family.left.eval(beta_l, x)).powi(2))
        .collect();
    let right_sq: Vec<f64> = sweep
        .xs
        .iter()
        .zip(&sweep.ys)
        .map(|(&x, &y)| (y - family.right.eval(beta_u, x)).powi(2))
        .collect();
    let mut prefix = Vec::with_capacity(left_sq.len() + 1);
    let mut acc = 0.0;
    prefix.push(acc);
    for (l, r) in left_sq.iter().zip(&right_sq) {
        acc += l - r;
        prefix.push(acc);
    }
    let right_total: f64 = right_sq.iter().sum();
    let scale = right_total + left_sq.iter().sum::<f64>();

    let candidates = sweep.candidates(window);
    let values: Vec<Option<f64>> = candidates
        .iter()
        .map(|&(_, left_n, _)| Some(right_total + prefix[left_n]))
        .collect();
    let (first, last, _) = minimizing_range(&values, scale).ok_or(Error::EmptySampleSet)?;
    let d_lo = candidates[first].0;
    let d_hi = sweep.next_jump(candidates[last].0, window.hi);
    let rss = fixed_criterion(samples, d_lo, beta_l, beta_u, family);
    let n = samples.len();
    Ok(SplitFit {
        d_lo,
        d_hi,
        d_av: 0.5 * (d_lo + d_hi),
        beta_l: beta_l.to_vec(),
        beta_u: beta_u.to_vec(),
        rss,
        sigma_hat: (rss / n as f64).sqrt(),
        n,
    })
}

/// Direct evaluation of the fixed-parameter criterion at `d`.
pub fn fixed_criterion(
    samples: &[Sample],
    d: f64,
    beta_l: &[f64],
    beta_u: &[f64],
    family: ModelFamily,
) -> f64 {
    samples
        .iter()
        .map(|s| {
            if s.x <= d {
                (s.y - family.left.eval(beta_l, s.x)).powi(2)
            } else {
                (s.y - family.right.eval(beta_u, s.x)).powi(2)
            }
        })
        .sum()
}

/// One-stage estimate over `[eps0, 1 - eps0]`.
pub fn classical_estimate(samples: &[Sample], family: ModelFamily, eps0: f64) -> Result<SplitFit> {
    fit_free(samples, Window::new(eps0, 1.0 - eps0)?, family)
}

/// Side means of a stump split at `d`; `None` when a side is empty.
pub fn stump_means(samples: &[Sample], d: f64) -> Option<(f64, f64)> {
    let (left, right) = split_at(samples, d);
    if left.is_empty() || right.is_empty() {
        return None;
    }
    let m = |s: &[Sample]| s.iter().map(|p| p.y).sum::<f64>() / s.len() as f64;
    Some((m(&left), m(&right)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[(f64, f64)]) -> Vec<Sample> {
        v.iter().map(|&(x, y)| Sample::new(x, y)).collect()
    }

    #[test]
    fn separable_stump() {
        let s = pts(&[(0.2, 0.5), (0.4, 0.5), (0.6, 1.5), (0.8, 1.5)]);
        let fit = fit_free(&s, Window::UNIT, ModelFamily::STUMP).unwrap();
        assert_eq!((fit.d_lo, fit.d_hi), (0.4, 0.6));
        assert_eq!(fit.beta_l, vec![0.5]);
        assert_eq!(fit.beta_u, vec![1.5]);
        assert_eq!(fit.rss, 0.0);
        assert_eq!(fit.d_av, 0.5);
    }

    #[test]
    fn window_excluding_jump_lands_on_boundary() {
        let s = pts(&[(0.1, 0.5), (0.2, 0.5), (0.3, 0.5), (0.6, 1.5), (0.8, 1.5)]);
        let fit = fit_free(&s, Window::new(0.0, 0.25).unwrap(), ModelFamily::STUMP).unwrap();
        assert!(fit.rss > 0.0);
        assert_eq!(fit.d_lo, 0.2);
        assert_eq!(fit.d_hi, 0.25);
        let flat = pts(&[(0.1, 1.0), (0.2, 1.0), (0.3, 1.0), (0.6, 1.0)]);
        let fit = fit_free(&flat, Window::new(0.0, 0.25).unwrap(), ModelFamily::STUMP).unwrap();
        assert_eq!(fit.rss, 0.0);
    }

    #[test]
    fn fixed_single_straddle_and_sign_flip() {
        let s = pts(&[(0.45, 0.5), (0.55, 1.5)]);
        let fit = fit_fixed(&s, Window::UNIT, &[0.5], &[1.5], ModelFamily::STUMP).unwrap();
        assert_eq!((fit.d_lo, fit.d_hi), (0.45, 0.55));
        assert!((fit.d_av - 0.5).abs() < 1e-15);
        assert_eq!(fit.beta_l, vec![0.5]);
        let w = Window::new(0.4, 0.6).unwrap();
        let flipped = fit_fixed(&s, w, &[1.5], &[0.5], ModelFamily::STUMP).unwrap();
        assert_eq!((flipped.d_lo, flipped.d_hi), (0.4, 0.6));
        assert_eq!(flipped.rss, 1.0);
    }

    #[test]
    fn fixed_rejects_empty() {
        assert!(matches!(
            fit_fixed(&[], Window::UNIT, &[0.0], &[1.0], ModelFamily::STUMP),
            Err(Error::EmptySampleSet)
        ));
    }

    #[test]
    fn free_rejects_small_inputs() {
        assert!(matches!(
            fit_free(&pts(&[(0.5, 1.0)]), Window::UNIT, ModelFamily::STUMP),
            Err(Error::InsufficientData(_))
        ));
        let s = pts(&[(0.2, 0.0), (0.3, 0.0), (0.4, 1.0)]);
        assert!(matches!(
            fit_free(&s, Window::UNIT, ModelFamily::TWO_LINES),
            Err(Error::AllCandidatesSkipped)
        ));
        // duplicates do not count as distinct covariates
        let dup = pts(&[(0.2, 0.0), (0.2, 0.1), (0.7, 1.0), (0.8, 1.1)]);
        assert!(matches!(
            fit_free(&dup, Window::UNIT, ModelFamily::TWO_LINES),
            Err(Error::AllCandidatesSkipped)
        ));
    }

    #[test]
    fn noiseless_grid_classical() {
        let s: Vec<Sample> = (1..=10)
            .map(|i| {
                let x = i as f64 / 10.0;
                Sample::new(x, if x <= 0.5 { 0.5 } else { 1.5 })
            })
            .collect();
        let fit = classical_estimate(&s, ModelFamily::STUMP, 0.05).unwrap();
        assert_eq!(fit.d_lo, 0.5);
        assert_eq!(fit.d_hi, 0.6);
        assert_eq!(fit.jump_at(ModelFamily::STUMP, 0.5), 1.0);
    }

    #[test]
    fn affine_noiseless_recovery() {
        let s: Vec<Sample> = (0..40)
            .map(|i| {
                let x = (i as f64 + 0.5) / 40.0;
                Sample::new(x, if x <= 0.6 { 1.0 + 2.0 * x } else { 4.0 - x })
            })
            .collect();
        let fit = fit_free(&s, Window::UNIT, ModelFamily::TWO_LINES).unwrap();
        assert!(fit.d_lo <= 0.6 && fit.d_hi > 0.6);
        assert!((fit.beta_l[1] - 2.0).abs() < 1e-9);
        assert!((fit.beta_u[0] - 4.0).abs() < 1e-9);
        assert!(fit.rss < 1e-18);
    }
}
