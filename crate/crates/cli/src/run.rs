// SPDX-License-Identifier: MIT OR Apache-2.0

//! `plan` and `run` subcommands.

use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

use zoomcp::cpp_limit::{ArgminStat, CppQuantiles};
use zoomcp::design::{
    plug_in_snr, run_experiment, window_constant, QuantileSource, RunResult, StagePlan,
};
use zoomcp::harness::QuantileBank;
use zoomcp::intervals::{
    allocation_ci, conservative_ci, exact_ci, limit_rate, limit_rate_density, limit_rate_p_stage,
    normalization, ConfidenceInterval,
};
use zoomcp::model::{ExternalOracle, ModelOracle, Oracle, PoolOracle, SamplingDensity};
use zoomcp::rng::StreamSeed;

use crate::config::{read_json, ConfigError, RunConfig};

#[derive(Debug, Serialize)]
struct StagePreview {
    stage: usize,
    size: usize,
    k: Option<f64>,
    /// Window half-width, or `null` for stage one.
    half_width: Option<f64>,
}

#[derive(Debug, Serialize)]
struct PlanReport<'a> {
    config: &'a RunConfig,
    snr: Option<f64>,
    stages: Vec<StagePreview>,
}

#[derive(Debug, Serialize)]
struct RunReport<'a> {
    config: &'a RunConfig,
    oracle: &'a str,
    seed: u64,
    result: &'a RunResult,
    /// SNR used for the limit-law quantiles behind the intervals.
    interval_snr: f64,
    limit_rate: f64,
    normalization: f64,
    intervals: Vec<ConfidenceInterval>,
}

fn load(path: &Path) -> Result<RunConfig> {
    read_json::<RunConfig>(path)?.resolve()
}

fn write_report<T: Serialize>(report: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    match out {
        Some(p) => {
            std::fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display()))?
        }
        None => writeln!(std::io::stdout().lock(), "{text}")?,
    }
    Ok(())
}

fn model_snr(cfg: &RunConfig) -> Result<Option<f64>> {
    match &cfg.model {
        Some(m) => Ok(Some(cfg.build_model(m)?.snr())),
        None => Ok(None),
    }
}

pub fn cmd_plan(path: &Path, _seed: u64, out: Option<&Path>) -> Result<()> {
    let cfg = load(path)?;
    let plan = cfg.plan();
    let sizes = plan.stage_sizes(cfg.budget)?;
    let p = plan.stages();
    let snr = plan.snr.map(Some).map_or_else(|| model_snr(&cfg), Ok)?;
    let ks: Vec<f64> = match (&plan.k, p) {
        (_, 1) => Vec::new(),
        (Some(k), _) => k.clone(),
        (None, _) => {
            let snr = snr.ok_or_else(|| {
                ConfigError::new(
                    "plan without fixed K needs plan.snr or a model to size its windows",
                )
            })?;
            let bank = QuantileBank::new(cfg.quantiles.clone(), &cfg.required_probs());
            let q = bank.get(snr, error_dist(&cfg))?;
            (2..=p)
                .map(|q_idx| window_constant(q_idx, plan, &q, cfg.budget))
                .collect::<zoomcp::Result<_>>()?
        }
    };
    let stages = (1..=p)
        .map(|q| {
            let (k, hw) = if q == 1 {
                (None, None)
            } else {
                let k = ks[q - 2];
                let hw = k / (sizes[q - 2] as f64).powf((q - 2) as f64 + plan.gamma[q - 2]);
                (Some(k), Some(hw))
            };
            StagePreview {
                stage: q,
                size: sizes[q - 1],
                k,
                half_width: hw,
            }
        })
        .collect();
    write_report(
        &PlanReport {
            config: &cfg,
            snr,
            stages,
        },
        out,
    )
}

fn error_dist(cfg: &RunConfig) -> zoomcp::model::ErrorDist {
    cfg.model.as_ref().map(|m| m.error_dist).unwrap_or_default()
}

fn make_oracle(cfg: &RunConfig, spec: &str) -> Result<Box<dyn Oracle>> {
    if spec == "model" {
        let m = cfg.model.as_ref().ok_or_else(|| {
            ConfigError::new("the model oracle needs a `model` section in the config")
        })?;
        return Ok(Box::new(ModelOracle::new(cfg.build_model(m)?, cfg.budget)));
    }
    if let Some(path) = spec.strip_prefix("pool:") {
        return Ok(Box::new(PoolOracle::from_csv(path, cfg.budget)?));
    }
    if let Some(cmd) = spec.strip_prefix("exec:") {
        return Ok(Box::new(ExternalOracle::spawn(cmd, cfg.budget)?));
    }
    Err(ConfigError::new(format!(
        "unknown oracle `{spec}`; use model, pool:PATH or exec:CMD"
    ))
    .into())
}

/// Limit rate and normalization for the final-stage estimate.
fn rate_and_norm(plan: &StagePlan, result: &RunResult) -> Result<(f64, f64)> {
    let p = plan.stages();
    let last = *result.stage_sizes.last().expect("at least one stage");
    if p == 1 {
        return Ok((1.0, last as f64));
    }
    let g = plan.gamma[p - 2];
    let k = result.k_used[p - 2];
    let rate = if p == 2 {
        // realized allocation, as the stage sizes are integers
        let l = result.stage_sizes[0] as f64 / result.n as f64;
        match &plan.second_stage_density {
            SamplingDensity::Uniform => limit_rate(k, l, g)?,
            h => limit_rate_density(k, l, g, h.at_zero())?,
        }
    } else {
        limit_rate_p_stage(plan, k)?
    };
    Ok((rate, normalization(last, p, g)))
}

fn intervals(
    cfg: &RunConfig,
    result: &RunResult,
    q: &CppQuantiles,
    rate: f64,
    norm: f64,
) -> Result<Vec<ConfidenceInterval>> {
    let plan = cfg.plan();
    let fit = result.final_fit();
    let mut out = Vec::new();
    for center in [ArgminStat::Average, ArgminStat::Lower, ArgminStat::Upper] {
        out.push(conservative_ci(fit, q, rate, norm, cfg.tau, center)?);
    }
    for center in [ArgminStat::Average, ArgminStat::Lower, ArgminStat::Upper] {
        out.push(exact_ci(fit, q, rate, norm, cfg.tau, center)?);
    }
    if plan.k.is_none() && plan.stages() > 1 {
        out.push(allocation_ci(result.d_av, plan, q, result.n, cfg.tau)?);
    }
    Ok(out)
}

pub fn cmd_run(path: &Path, oracle_spec: &str, seed: u64, out: Option<&Path>) -> Result<()> {
    let cfg = load(path)?;
    let plan = cfg.plan();
    let mut oracle = make_oracle(&cfg, oracle_spec)?;
    let bank = QuantileBank::new(cfg.quantiles.clone(), &cfg.required_probs());
    let dist = error_dist(&cfg);
    let resolve = |snr: f64| bank.get(snr, dist).map(|q| (*q).clone());
    let result = run_experiment(
        oracle.as_mut(),
        plan,
        cfg.family.family(),
        cfg.budget,
        QuantileSource::Resolver(&resolve),
        StreamSeed::new(seed),
        0,
    )?;
    let interval_snr = result
        .snr_used
        .or(plan.snr)
        .unwrap_or_else(|| plug_in_snr(&result.stages[0].fit, cfg.family.family()));
    let q = bank.get(interval_snr, dist)?;
    let (rate, norm) = rate_and_norm(plan, &result)?;
    let intervals = intervals(&cfg, &result, &q, rate, norm)?;
    write_report(
        &RunReport {
            config: &cfg,
            oracle: oracle_spec,
            seed,
            result: &result,
            interval_snr,
            limit_rate: rate,
            normalization: norm,
            intervals,
        },
        out,
    )
}
