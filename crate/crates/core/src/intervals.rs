// SPDX-License-Identifier: MIT OR Apache-2.0

//! Confidence intervals for the change point: conservative (envelope
//! quantiles), exact (quantiles of the centering statistic), and
//! finite-sample intervals from the allocation calculus.

use serde::{Deserialize, Serialize};

use crate::cpp_limit::{ArgminStat, CppQuantiles};
use crate::design::StagePlan;
use crate::error::{Error, Result};
use crate::estimator::SplitFit;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalFamily {
    Conservative,
    Exact,
    FiniteSample,
    Multistage,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    /// Unclipped bounds; coverage is judged on these.
    pub lo: f64,
    pub hi: f64,
    pub nominal_level: f64,
    pub family: IntervalFamily,
    pub center: ArgminStat,
    pub center_value: f64,
    /// Whether either bound falls outside [0, 1].
    pub clipped: bool,
}

impl ConfidenceInterval {
    fn new(
        lo: f64,
        hi: f64,
        level: f64,
        family: IntervalFamily,
        center: ArgminStat,
        value: f64,
    ) -> Self {
        Self {
            lo,
            hi,
            nominal_level: level,
            family,
            center,
            center_value: value,
            clipped: lo < 0.0 || hi > 1.0,
        }
    }

    pub fn length(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn covers(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    /// Bounds intersected with [0, 1].
    pub fn clipped_bounds(&self) -> (f64, f64) {
        (self.lo.clamp(0.0, 1.0), self.hi.clamp(0.0, 1.0))
    }
}

/// Limit rate `C(K, lambda, gamma) = (lambda / (1 - lambda))^gamma / (2K)`
/// of the two-stage estimator under uniform second-stage sampling.
pub fn limit_rate(k: f64, lambda: f64, gamma: f64) -> Result<f64> {
    check_rate_inputs(k, lambda, gamma)?;
    Ok((lambda / (1.0 - lambda)).powf(gamma) / (2.0 * k))
}

/// Limit rate `(lambda / (1 - lambda))^gamma h(0) / K` under a second-stage
/// density `h` on [-1, 1].
pub fn limit_rate_density(k: f64, lambda: f64, gamma: f64, h0: f64) -> Result<f64> {
    check_rate_inputs(k, lambda, gamma)?;
    if !(h0 > 0.0 && h0.is_finite()) {
        return Err(Error::invalid("h(0) must be positive"));
    }
    Ok((lambda / (1.0 - lambda)).powf(gamma) * h0 / k)
}

/// Limit rate `C_P = (lambda_{P-1} / lambda_P)^{(P-2) + gamma_{P-1}} / (2 K_{P-1})`
/// of a P-stage estimator.
pub fn limit_rate_p_stage(plan: &StagePlan, k_last: f64) -> Result<f64> {
    let p = plan.stages();
    if p < 2 {
        return Err(Error::InvalidStageCount(p));
    }
    if !(k_last > 0.0) {
        return Err(Error::invalid("window constant must be positive"));
    }
    let g = plan.gamma[p - 2];
    let ratio = plan.lambda[p - 2] / plan.lambda[p - 1];
    Ok(ratio.powf((p - 2) as f64 + g) / (2.0 * k_last))
}

fn check_rate_inputs(k: f64, lambda: f64, gamma: f64) -> Result<()> {
    if !(k > 0.0 && k.is_finite()) {
        return Err(Error::invalid(format!("K must be positive, got {k}")));
    }
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::invalid(format!(
            "lambda must lie in (0, 1), got {lambda}"
        )));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::invalid(format!(
            "gamma must lie in (0, 1), got {gamma}"
        )));
    }
    Ok(())
}

/// Normalizing rate `n_P^{(P-1) + gamma_{P-1}}`; for two stages `n_2^{1 + gamma}`.
pub fn normalization(last_stage_size: usize, stages: usize, gamma_last: f64) -> f64 {
    (last_stage_size as f64).powf((stages - 1) as f64 + gamma_last)
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::invalid(format!("tau must lie in (0, 1), got {tau}")));
    }
    Ok(())
}

fn center_value(fit: &SplitFit, center: ArgminStat) -> f64 {
    match center {
        ArgminStat::Lower => fit.d_lo,
        ArgminStat::Upper => fit.d_hi,
        ArgminStat::Average => fit.d_av,
    }
}

/// Interval from canonical quantiles `a < b`:
/// `(center - b / (C norm), center - a / (C norm))`.
#[allow(clippy::too_many_arguments)]
fn from_quantiles(
    value: f64,
    a: f64,
    b: f64,
    rate: f64,
    norm: f64,
    tau: f64,
    family: IntervalFamily,
    center: ArgminStat,
) -> Result<ConfidenceInterval> {
    if !(rate > 0.0 && norm > 0.0) {
        return Err(Error::invalid(
            "limit rate and normalization must be positive",
        ));
    }
    let scale = rate * norm;
    Ok(ConfidenceInterval::new(
        value - b / scale,
        value - a / scale,
        1.0 - tau,
        family,
        center,
        value,
    ))
}

/// Conservative interval: `a` is the `tau/2` quantile of `d_l` and `b` the
/// `1 - tau/2` quantile of `d_u`, shared by every center.
pub fn conservative_ci(
    fit: &SplitFit,
    quantiles: &CppQuantiles,
    rate: f64,
    norm: f64,
    tau: f64,
    center: ArgminStat,
) -> Result<ConfidenceInterval> {
    check_tau(tau)?;
    let a = quantiles.quantile(ArgminStat::Lower, tau / 2.0)?;
    let b = quantiles.quantile(ArgminStat::Upper, 1.0 - tau / 2.0)?;
    from_quantiles(
        center_value(fit, center),
        a,
        b,
        rate,
        norm,
        tau,
        IntervalFamily::Conservative,
        center,
    )
}

/// Exact interval from the quantiles of the same statistic as the center.
pub fn exact_ci(
    fit: &SplitFit,
    quantiles: &CppQuantiles,
    rate: f64,
    norm: f64,
    tau: f64,
    center: ArgminStat,
) -> Result<ConfidenceInterval> {
    check_tau(tau)?;
    let a = quantiles.quantile(center, tau / 2.0)?;
    let b = quantiles.quantile(center, 1.0 - tau / 2.0)?;
    from_quantiles(
        center_value(fit, center),
        a,
        b,
        rate,
        norm,
        tau,
        IntervalFamily::Exact,
        center,
    )
}

/// Neighborhood of the stage-(q-1) average estimate with half-width
/// `2^{q-2} c_1 ... c_{q-1} / (n^{q-1} lambda_1 ... lambda_{q-1})`.
///
/// With `c_j = C_{zeta_j}` this is the level `1 - 2 zeta_{q-1}` window; with
/// the last factor `C_{tau/2}` and `q = P + 1` it is a level `1 - tau`
/// interval for the final estimate.
pub fn multistage_half_width(q: usize, lambda: &[f64], c: &[f64], n: usize) -> Result<f64> {
    if q < 2 || c.len() < q - 1 || lambda.len() < q - 1 {
        return Err(Error::invalid(format!(
            "multistage interval needs q >= 2 and {} factors",
            q.max(2) - 1
        )));
    }
    let num = 2f64.powi(q as i32 - 2) * c[..q - 1].iter().product::<f64>();
    let den = (n as f64).powi(q as i32 - 1) * lambda[..q - 1].iter().product::<f64>();
    Ok(num / den)
}

pub fn multistage_ci(
    center: f64,
    q: usize,
    lambda: &[f64],
    c: &[f64],
    n: usize,
    level: f64,
) -> Result<ConfidenceInterval> {
    let h = multistage_half_width(q, lambda, c, n)?;
    Ok(ConfidenceInterval::new(
        center - h,
        center + h,
        level,
        IntervalFamily::Multistage,
        ArgminStat::Average,
        center,
    ))
}

/// Level `1 - tau` interval `d_av -/+ 8 C_{zeta_1} C_{tau/2} / n^2` for the
/// equal-allocation two-stage design.
pub fn finite_sample_ci(
    d_av: f64,
    n: usize,
    c_zeta1: f64,
    c_tau_half: f64,
    tau: f64,
    plan: &StagePlan,
) -> Result<ConfidenceInterval> {
    check_tau(tau)?;
    let equal = plan.stages() == 2 && plan.lambda.iter().all(|l| (l - 0.5).abs() < 1e-12);
    if !equal {
        return Err(Error::PlanMismatch(format!(
            "finite-sample interval needs two equal stages, plan has fractions {:?}",
            plan.lambda
        )));
    }
    let h = 8.0 * c_zeta1 * c_tau_half / (n as f64).powi(2);
    Ok(ConfidenceInterval::new(
        d_av - h,
        d_av + h,
        1.0 - tau,
        IntervalFamily::FiniteSample,
        ArgminStat::Average,
        d_av,
    ))
}

/// Finite-sample interval for any P-stage plan:
/// `2^{P-1} C_{zeta_1} ... C_{zeta_{P-1}} C_{tau/2} / (n^P lambda_1 ... lambda_P)`.
pub fn allocation_ci(
    d_av: f64,
    plan: &StagePlan,
    quantiles: &CppQuantiles,
    n: usize,
    tau: f64,
) -> Result<ConfidenceInterval> {
    check_tau(tau)?;
    let p = plan.stages();
    let mut c = crate::design::c_factors(plan, quantiles)?;
    c.push(quantiles.c_zeta(tau / 2.0)?);
    let h = multistage_half_width(p + 1, &plan.lambda, &c, n)?;
    Ok(ConfidenceInterval::new(
        d_av - h,
        d_av + h,
        1.0 - tau,
        IntervalFamily::FiniteSample,
        ArgminStat::Average,
        d_av,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cpp_limit::{estimate_quantiles, prob_grid};
    use crate::model::ErrorDist;
    use crate::rng::StreamSeed;

    fn fit(d_lo: f64, d_hi: f64) -> SplitFit {
        SplitFit {
            d_lo,
            d_hi,
            d_av: 0.5 * (d_lo + d_hi),
            beta_l: vec![0.5],
            beta_u: vec![1.5],
            rss: 0.0,
            sigma_hat: 0.2,
            n: 10,
        }
    }

    fn table(q_dl: Vec<f64>, q_du: Vec<f64>, q_dav: Vec<f64>) -> CppQuantiles {
        CppQuantiles {
            version: 1,
            snr: 5.0,
            error_dist: ErrorDist::Normal,
            reps: 100,
            seed: 0,
            prob_grid: vec![0.025, 0.5, 0.975],
            q_dl,
            q_du,
            q_dav,
        }
    }

    #[test]
    fn rates() {
        assert!((limit_rate(1.0, 1.0 / 3.0, 0.5).unwrap() - 0.5f64.sqrt() / 2.0).abs() < 1e-15);
        // uniform h has h(0) = 1/2
        assert!(
            (limit_rate_density(1.0, 0.5, 0.5, 0.5).unwrap() - limit_rate(1.0, 0.5, 0.5).unwrap())
                .abs()
                < 1e-15
        );
        assert!(limit_rate(0.0, 0.5, 0.5).is_err());
        let plan = StagePlan::two_stage(0.5, 0.5, 0.001).unwrap();
        assert!(
            (limit_rate_p_stage(&plan, 2.0).unwrap() - limit_rate(2.0, 0.5, 0.5).unwrap()).abs()
                < 1e-15
        );
    }

    #[test]
    fn symmetric_quantiles_give_symmetric_interval() {
        let q = table(
            vec![-2.0, -0.5, 1.0],
            vec![-1.0, 0.5, 2.0],
            vec![-1.5, 0.0, 1.5],
        );
        let f = fit(0.49, 0.51);
        let ci = conservative_ci(&f, &q, 1.0, 100.0, 0.05, ArgminStat::Average).unwrap();
        assert!((ci.hi - 0.5 - (0.5 - ci.lo)).abs() < 1e-15);
        assert!((ci.length() - 0.04).abs() < 1e-15);
        let ex = exact_ci(&f, &q, 1.0, 100.0, 0.05, ArgminStat::Average).unwrap();
        assert!((ex.length() - 0.03).abs() < 1e-15);
        assert!(ex.length() <= ci.length());
        let lo = exact_ci(&f, &q, 1.0, 100.0, 0.05, ArgminStat::Lower).unwrap();
        assert!((lo.lo - (0.49 - 0.01)).abs() < 1e-15 && (lo.hi - (0.49 + 0.02)).abs() < 1e-15);
        assert!(matches!(
            exact_ci(&f, &q, 1.0, 100.0, 0.1, ArgminStat::Average),
            Err(Error::MissingQuantiles(_))
        ));
    }

    #[test]
    fn exact_nested_in_conservative_from_one_path_set() {
        let grid = prob_grid(&[]);
        let q =
            estimate_quantiles(5.0, ErrorDist::Normal, 40_000, &grid, StreamSeed::new(9)).unwrap();
        let f = fit(0.5, 0.5);
        let cons = conservative_ci(&f, &q, 0.4, 1e4, 0.05, ArgminStat::Average).unwrap();
        for c in [ArgminStat::Lower, ArgminStat::Upper, ArgminStat::Average] {
            let ex = exact_ci(&f, &q, 0.4, 1e4, 0.05, c).unwrap();
            assert!(ex.length() <= cons.length());
        }
    }

    #[test]
    fn finite_sample_scaling_and_guard() {
        let plan = StagePlan::two_stage(0.5, 0.5, 0.0005).unwrap();
        let a = finite_sample_ci(0.5, 100, 4.0, 1.5, 0.05, &plan).unwrap();
        let b = finite_sample_ci(0.5, 200, 4.0, 1.5, 0.05, &plan).unwrap();
        assert!((a.length() / b.length() - 4.0).abs() < 1e-12);
        assert!((a.length() - 2.0 * 8.0 * 6.0 / 1e4).abs() < 1e-15);
        let other = StagePlan::two_stage(0.4, 0.5, 0.0005).unwrap();
        assert!(matches!(
            finite_sample_ci(0.5, 100, 4.0, 1.5, 0.05, &other),
            Err(Error::PlanMismatch(_))
        ));
        // the general form agrees at P = 2
        let h = multistage_half_width(3, &plan.lambda, &[4.0, 1.5], 100).unwrap();
        assert!((2.0 * h - a.length()).abs() < 1e-15);
    }

    #[test]
    fn multistage_widths() {
        let (c1, n) = (3.0, 600);
        let h2 = multistage_half_width(2, &[0.5, 0.5], &[c1], n).unwrap();
        assert!((h2 - c1 / (n as f64 * 0.5)).abs() < 1e-15);
        let third = [1.0 / 3.0; 3];
        let h3 = multistage_half_width(3, &third, &[c1, c1], n).unwrap();
        assert!((h3 - 2.0 * c1 * c1 * 9.0 / (n as f64).powi(2)).abs() < 1e-15);
        let h2t = multistage_half_width(2, &third, &[c1], n).unwrap();
        assert!(h3 < h2t);
        assert!(multistage_half_width(1, &third, &[c1], n).is_err());
    }

    #[test]
    fn clip_flag() {
        let q = table(
            vec![-2.0, -0.5, 1.0],
            vec![-1.0, 0.5, 2.0],
            vec![-1.5, 0.0, 1.5],
        );
        let ci =
            conservative_ci(&fit(0.99, 0.995), &q, 1.0, 100.0, 0.05, ArgminStat::Upper).unwrap();
        assert!(ci.clipped);
        assert_eq!(ci.clipped_bounds().1, 1.0);
        assert!(ci.hi > 1.0);
    }
}
