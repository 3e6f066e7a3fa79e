//! Random-walk Metropolis–Hastings on the unnormalized posterior
//! `log π(d | m, e) + log π(m)`.

use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::invalid;
use crate::forward::TaskSpec;
use crate::rng::{stream, tag, StreamRng};
use crate::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct ChainConfig {
    /// Chain length after tuning, burn-in included.
    pub n_samples: usize,
    /// Initial isotropic proposal standard deviation.
    pub proposal_scale: f64,
    /// Fraction of the chain discarded before averaging.
    pub burn_in: f64,
    /// Likelihood noise level.
    pub sigma_obs: f64,
    /// Rounds of 100 steps used to adapt the proposal scale; 0 disables.
    pub tune_rounds: usize,
    pub seed: u64,
}

impl ChainConfig {
    /// Defaults with the likelihood noise matching the data-generation
    /// noise of `task` (for darcy the relative level times a unit pressure
    /// scale).
    pub fn for_task(task: &TaskSpec) -> Self {
        Self {
            n_samples: 10_000,
            proposal_scale: 0.1,
            burn_in: 0.5,
            sigma_obs: task.noise,
            tune_rounds: 20,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.burn_in) || !(self.proposal_scale >= 0.0) || !(self.sigma_obs > 0.0) {
            return Err(invalid("need burn-in in [0, 1), proposal scale ≥ 0 and σ_obs > 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChainStep {
    pub state: Vec<f64>,
    pub log_posterior: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug)]
pub struct ChainResult {
    /// Every post-tuning step, burn-in included.
    pub trace: Vec<ChainStep>,
    /// Index into `trace` of the first retained sample.
    pub retained_from: usize,
    pub acceptance_rate: f64,
    pub proposal_scale: f64,
    pub mean: Vec<f64>,
    pub seconds: f64,
    pub warning: Option<String>,
}

impl ChainResult {
    pub fn retained(&self) -> impl Iterator<Item = &[f64]> {
        self.trace[self.retained_from..].iter().map(|s| s.state.as_slice())
    }
}

/// `−‖d − F(m, e)‖² / 2σ² + log π(m)`, or `−∞` outside the prior support
/// or when the forward model fails.
pub fn log_posterior(task: &TaskSpec, m: &[f64], d: &[f64], e: &[f64], sigma_obs: f64) -> f64 {
    let prior = task.log_prior(m);
    if prior == f64::NEG_INFINITY {
        return prior;
    }
    match task.forward(m, e) {
        Ok(obs) if obs.values.len() == d.len() => {
            let r2: f64 = obs.values.iter().zip(d).map(|(f, y)| (y - f).powi(2)).sum();
            prior - r2 / (2.0 * sigma_obs * sigma_obs)
        }
        Ok(_) => {
            log::warn!("observation length mismatch in log posterior");
            f64::NEG_INFINITY
        }
        Err(err) => {
            log::warn!("forward model failed inside the chain: {err}");
            f64::NEG_INFINITY
        }
    }
}

/// Current chain position with its cached log target.
#[derive(Clone, Debug)]
pub struct ChainState {
    pub m: Vec<f64>,
    pub log_target: f64,
}

/// One Gaussian random-walk proposal, accepted with probability
/// `min(1, exp(Δ))`.
pub fn mh_step(
    state: &mut ChainState,
    scale: f64,
    rng: &mut StreamRng,
    log_target: &mut impl FnMut(&[f64]) -> f64,
) -> bool {
    let proposal: Vec<f64> = state
        .m
        .iter()
        .map(|&x| {
            let z: f64 = StandardNormal.sample(rng);
            x + scale * z
        })
        .collect();
    let lp = if proposal == state.m {
        state.log_target
    } else {
        log_target(&proposal)
    };
    let u: f64 = rng.gen();
    let accept = lp >= state.log_target || (lp > f64::NEG_INFINITY && u.ln() < lp - state.log_target);
    if accept {
        state.m = proposal;
        state.log_target = lp;
    }
    accept
}

const TUNE_ROUND: usize = 100;
const STUCK_LIMIT: usize = 1000;

/// Run a chain on an arbitrary log target from `init`.
pub fn run_chain_on(
    init: Vec<f64>,
    config: &ChainConfig,
    mut log_target: impl FnMut(&[f64]) -> f64,
) -> Result<ChainResult> {
    config.validate()?;
    let start = Instant::now();
    let mut rng = stream(config.seed, &[tag::MCMC, 1]);
    let lp = log_target(&init);
    let mut state = ChainState { m: init, log_target: lp };
    let mut scale = config.proposal_scale;

    for _ in 0..config.tune_rounds {
        let accepted = (0..TUNE_ROUND)
            .filter(|_| mh_step(&mut state, scale, &mut rng, &mut log_target))
            .count();
        let rate = accepted as f64 / TUNE_ROUND as f64;
        if (0.2..=0.4).contains(&rate) || scale == 0.0 {
            break;
        }
        // multiplicative adaptation towards an acceptance of 0.3
        scale *= ((rate - 0.3) * 4.0).exp().clamp(0.25, 4.0);
    }

    let mut trace = Vec::with_capacity(config.n_samples);
    let mut accepted = 0usize;
    let mut run = 0usize;
    let mut warning = None;
    for _ in 0..config.n_samples {
        let ok = mh_step(&mut state, scale, &mut rng, &mut log_target);
        accepted += ok as usize;
        run = if ok { 0 } else { run + 1 };
        if run == STUCK_LIMIT && warning.is_none() {
            warning = Some(format!("{STUCK_LIMIT} consecutive proposals rejected"));
        }
        trace.push(ChainStep {
            state: state.m.clone(),
            log_posterior: state.log_target,
            accepted: ok,
        });
    }
    let retained_from = ((config.n_samples as f64 * config.burn_in) as usize).min(config.n_samples.saturating_sub(1));
    let dim = state.m.len();
    let kept = &trace[retained_from.min(trace.len())..];
    let mean = (0..dim)
        .map(|k| kept.iter().map(|s| s.state[k]).sum::<f64>() / kept.len().max(1) as f64)
        .collect();
    Ok(ChainResult {
        acceptance_rate: accepted as f64 / config.n_samples.max(1) as f64,
        proposal_scale: scale,
        mean,
        seconds: start.elapsed().as_secs_f64(),
        warning,
        trace,
        retained_from,
    })
}

/// Chain for the posterior of `task` given `(d, e)`, started at a prior
/// draw.
pub fn run_chain(task: &TaskSpec, d: &[f64], e: &[f64], config: &ChainConfig) -> Result<ChainResult> {
    let init = task.sample_prior(&mut stream(config.seed, &[tag::MCMC, 0]));
    run_chain_on(init, config, |m| log_posterior(task, m, d, e, config.sigma_obs))
}

/// Effective sample size from the initial positive sequence of
/// autocorrelation pairs.
pub fn effective_sample_size(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 4 {
        return n as f64;
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let c0 = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    if c0 == 0.0 {
        return n as f64;
    }
    let rho = |lag: usize| -> f64 {
        (0..n - lag).map(|i| (x[i] - mean) * (x[i + lag] - mean)).sum::<f64>() / (n as f64 * c0)
    };
    let mut tau = -1.0;
    let mut lag = 0;
    while lag + 1 < n {
        let pair = rho(lag) + rho(lag + 1);
        if pair <= 0.0 {
            break;
        }
        tau += 2.0 * pair;
        lag += 2;
    }
    n as f64 / tau.max(1.0)
}
