//! Error metrics, evaluation sweeps, timing and CSV tables.

use std::path::Path;
use std::time::Instant;

use rand::RngCore;
use rand_distr::{Distribution, Normal};

use crate::cfm::{integrate, prior_draws, sample_posterior, ConditionedNet, SamplerConfig};
use crate::error::invalid;
use crate::forward::{TaskKind, TaskSpec, TokenFeatures};
use crate::mcmc::{run_chain, ChainConfig};
use crate::net::VelocityNet;
use crate::rng::{stream, tag};
use crate::Result;

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖d − d̂‖ / ‖d‖`
pub fn relative_error_obs(d: &[f64], d_hat: &[f64]) -> Result<f64> {
    if d.len() != d_hat.len() {
        return Err(invalid(format!("comparing {} and {} values", d.len(), d_hat.len())));
    }
    let den = norm(d.iter().copied());
    if den == 0.0 {
        return Err(invalid("reference vector has zero norm"));
    }
    Ok(norm(d.iter().zip(d_hat).map(|(a, b)| a - b)) / den)
}

/// Relative distance between the discretized solutions for `m_true` and
/// `m_est` (`e` supplies the darcy boundary centres).
pub fn relative_error_de(task: &TaskSpec, m_true: &[f64], m_est: &[f64], e: &[f64]) -> Result<f64> {
    let a = task.solution(m_true, e)?;
    let b = task.solution(m_est, e)?;
    relative_error_obs(&a, &b)
}

/// A synthetic inversion problem: truth, design and noisy observations.
#[derive(Clone, Debug, PartialEq)]
pub struct Problem {
    pub m_true: Vec<f64>,
    pub e: Vec<f64>,
    pub d: Vec<f64>,
}

/// Problem for `(seed, n_obs, trial)`, independent of the training data
/// streams.
pub fn draw_problem(task: &TaskSpec, seed: u64, n_obs: usize, trial: u64) -> Result<Problem> {
    let mut rng = stream(seed, &[tag::EVAL, n_obs as u64, trial]);
    let m_true = task.sample_prior(&mut rng);
    let e = task.sample_design(&mut rng, n_obs);
    problem_for(task, m_true, e, &mut rng)
}

/// Noisy observations of `m_true` under design `e`.
pub fn problem_for<R: rand::Rng>(task: &TaskSpec, m_true: Vec<f64>, e: Vec<f64>, rng: &mut R) -> Result<Problem> {
    let obs = task.forward(&m_true, &e)?;
    let noise = Normal::new(0.0, obs.noise_sigma).map_err(|err| invalid(err.to_string()))?;
    let d = obs.values.iter().map(|f| f + noise.sample(rng)).collect();
    Ok(Problem { m_true, e, d })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub n_obs: usize,
    pub mean: f64,
    pub std: f64,
    pub errors: Vec<f64>,
}

impl SweepRow {
    pub fn from_errors(n_obs: usize, errors: Vec<f64>) -> Self {
        let n = errors.len() as f64;
        let mean = errors.iter().sum::<f64>() / n;
        let std = if errors.len() < 2 {
            0.0
        } else {
            (errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self {
            n_obs,
            mean,
            std,
            errors,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub task: TaskKind,
    pub ensemble: usize,
    pub rows: Vec<SweepRow>,
}

/// Mean solution-space error of the ensemble-mean estimate over `trials`
/// fresh problems for each observation count.
pub fn evaluate_sweep(
    net: &VelocityNet,
    task: &TaskSpec,
    n_list: &[usize],
    trials: usize,
    sampler: &SamplerConfig,
) -> Result<EvalReport> {
    if trials == 0 {
        return Err(invalid("at least one trial is required"));
    }
    let mut rows = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let mut errors = Vec::with_capacity(trials);
        for trial in 0..trials as u64 {
            let p = draw_problem(task, sampler.seed, n, trial)?;
            let member_seed = stream(sampler.seed, &[tag::SAMPLE, n as u64, trial]).next_u64();
            let ens = sample_posterior(
                net,
                task,
                &p.d,
                &p.e,
                &SamplerConfig {
                    seed: member_seed,
                    ..sampler.clone()
                },
            )?;
            errors.push(relative_error_de(task, &p.m_true, &ens.mean(), &p.e)?);
        }
        let row = SweepRow::from_errors(n, errors);
        log::info!(
            "{} N = {n}: {:.3}% ± {:.3}%",
            task.kind.name(),
            100.0 * row.mean,
            100.0 * row.std
        );
        rows.push(row);
    }
    Ok(EvalReport {
        task: task.kind,
        ensemble: sampler.ensemble,
        rows,
    })
}

/// Observation-space error of single posterior draws: for each of `count`
/// fresh problems one sample `m̂` is drawn and `d̂ = F(m̂, e)` compared with
/// the observed `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction {
    /// `‖D − D̂‖ / ‖D‖` over all problems stacked into one vector.
    pub stacked: f64,
    /// Mean and standard deviation of the per-problem ratio.
    pub per_problem_mean: f64,
    pub per_problem_std: f64,
    pub count: usize,
}

pub fn reconstruction_error(
    net: &VelocityNet,
    task: &TaskSpec,
    count: usize,
    n_obs: usize,
    sampler: &SamplerConfig,
) -> Result<Reconstruction> {
    const CHUNK: usize = 500;
    let (mut num, mut den) = (0.0, 0.0);
    let mut per = Vec::with_capacity(count);
    let mut start = 0;
    while start < count {
        let end = (start + CHUNK).min(count);
        let problems: Vec<Problem> = (start..end)
            .map(|i| draw_problem(task, sampler.seed, n_obs, i as u64))
            .collect::<Result<_>>()?;
        let features: Vec<TokenFeatures> = problems
            .iter()
            .map(|p| task.token_features(&p.d, &p.e))
            .collect::<Result<_>>()?;
        let refs: Vec<&TokenFeatures> = features.iter().collect();
        let field = ConditionedNet::from_features(net, task, &refs)?;
        let x0: Vec<f64> = (start..end)
            .flat_map(|i| task.sample_prior(&mut stream(sampler.seed, &[tag::SAMPLE, i as u64])))
            .collect();
        let x1 = integrate(&field, &x0, sampler.steps, sampler.method)?;
        for (p, m_hat) in problems.iter().zip(x1.chunks(task.dim_m())) {
            let d_hat = task.forward(m_hat, &p.e)?.values;
            num += p.d.iter().zip(&d_hat).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            den += p.d.iter().map(|a| a * a).sum::<f64>();
            per.push(relative_error_obs(&p.d, &d_hat).unwrap_or(f64::INFINITY));
        }
        start = end;
    }
    let finite: Vec<f64> = per.iter().copied().filter(|v| v.is_finite()).collect();
    let row = SweepRow::from_errors(n_obs, finite);
    Ok(Reconstruction {
        stacked: (num / den).sqrt(),
        per_problem_mean: row.mean,
        per_problem_std: row.std,
        count,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Timing {
    pub cfm_seconds: f64,
    pub mcmc_seconds: f64,
    /// `mcmc_seconds / cfm_seconds`
    pub ratio: f64,
}

/// Wall-clock of one ensemble inference against one MCMC chain on the same
/// problem, both on the calling thread.
pub fn benchmark_timing(
    net: &VelocityNet,
    task: &TaskSpec,
    problem: &Problem,
    sampler: &SamplerConfig,
    chain: &ChainConfig,
) -> Result<Timing> {
    let start = Instant::now();
    sample_posterior(net, task, &problem.d, &problem.e, sampler)?;
    let cfm_seconds = start.elapsed().as_secs_f64();
    let start = Instant::now();
    run_chain(task, &problem.d, &problem.e, chain)?;
    let mcmc_seconds = start.elapsed().as_secs_f64();
    Ok(Timing {
        cfm_seconds,
        mcmc_seconds,
        ratio: mcmc_seconds / cfm_seconds.max(1e-12),
    })
}

/// Prior draws used as starting points of straightness probes.
pub fn probe_starts(task: &TaskSpec, seed: u64, count: usize) -> Vec<f64> {
    prior_draws(task, seed, tag::PATHS, count)
}

// ---- CSV ------------------------------------------------------------------

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)?)
}

fn num(v: f64) -> String {
    format!("{v}")
}

/// Columns `N, mean_error_pct, std_error_pct`.
pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["N", "mean_error_pct", "std_error_pct"])?;
    for r in rows {
        w.write_record([r.n_obs.to_string(), num(100.0 * r.mean), num(100.0 * r.std)])?;
    }
    w.flush()?;
    Ok(())
}

/// `(N, mean %, std %)` rows of a sweep table.
pub fn read_sweep_csv(path: &Path) -> Result<Vec<(usize, f64, f64)>> {
    let mut r = csv::Reader::from_path(path)?;
    r.records()
        .map(|rec| {
            let rec = rec?;
            let field = |i: usize| rec.get(i).ok_or_else(|| invalid("short CSV record"));
            Ok((
                field(0)?.parse().map_err(|_| invalid("bad N"))?,
                field(1)?.parse().map_err(|_| invalid("bad mean"))?,
                field(2)?.parse().map_err(|_| invalid("bad std"))?,
            ))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct McmcRow {
    pub n_obs: usize,
    pub n_sample: usize,
    pub error: f64,
}

/// Columns `N, n_sample, error_pct`.
pub fn write_mcmc_csv(rows: &[McmcRow], path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["N", "n_sample", "error_pct"])?;
    for r in rows {
        w.write_record([r.n_obs.to_string(), r.n_sample.to_string(), num(100.0 * r.error)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_mcmc_csv(path: &Path) -> Result<Vec<(usize, usize, f64)>> {
    let mut r = csv::Reader::from_path(path)?;
    r.records()
        .map(|rec| {
            let rec = rec?;
            let field = |i: usize| rec.get(i).ok_or_else(|| invalid("short CSV record"));
            Ok((
                field(0)?.parse().map_err(|_| invalid("bad N"))?,
                field(1)?.parse().map_err(|_| invalid("bad n_sample"))?,
                field(2)?.parse().map_err(|_| invalid("bad error"))?,
            ))
        })
        .collect()
}

/// Columns `path, t, x0, x1, …`: one row per stored point of every path.
pub fn write_paths_csv(paths: &[Vec<(f64, Vec<f64>)>], path: &Path) -> Result<()> {
    let dim = paths.first().and_then(|p| p.first()).map_or(1, |(_, x)| x.len());
    let mut w = writer(path)?;
    let mut header = vec!["path".to_string(), "t".to_string()];
    header.extend((0..dim).map(|k| format!("x{k}")));
    w.write_record(&header)?;
    for (i, p) in paths.iter().enumerate() {
        for (t, x) in p {
            let mut rec = vec![i.to_string(), num(*t)];
            rec.extend(x.iter().map(|v| num(*v)));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Nodal comparison of a darcy reconstruction: columns `x, y, logk_true,
/// logk_mean, u_true, u_recon`.
pub fn write_field_csv(
    task: &TaskSpec,
    m_true: &[f64],
    m_mean: &[f64],
    e: &[f64],
    path: &Path,
) -> Result<()> {
    let kl = task.kl()?;
    let (lk_true, lk_mean) = (kl.expand(m_true)?, kl.expand(m_mean)?);
    let (u_true, u_rec) = (task.solution(m_true, e)?, task.solution(m_mean, e)?);
    let n = lk_true.n;
    let h = lk_true.h();
    let mut w = writer(path)?;
    w.write_record(["x", "y", "logk_true", "logk_mean", "u_true", "u_recon"])?;
    for i in 0..n {
        for j in 0..n {
            let k = i * n + j;
            w.write_record([
                num(i as f64 * h),
                num(j as f64 * h),
                num(lk_true.values[k]),
                num(lk_mean.values[k]),
                num(u_true[k]),
                num(u_rec[k]),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
