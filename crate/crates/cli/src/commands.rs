//! One function per subcommand. Each writes its outputs and a manifest
//! into the output directory and returns what it computed.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use cfm_core::cfm::{path_straightness, sample_posterior, ConditionedNet, PosteriorEnsemble, Straightness, Trainer};
use cfm_core::data::{generate_dataset, load_dataset, save_dataset, verify_dataset, Dataset};
use cfm_core::mcmc::{run_chain, ChainConfig};
use cfm_core::metrics::{
    benchmark_timing, draw_problem, evaluate_sweep, probe_starts, reconstruction_error, relative_error_de,
    write_field_csv, write_mcmc_csv, write_paths_csv, write_sweep_csv, EvalReport, McmcRow, Reconstruction,
    SweepRow, Timing,
};
use cfm_core::net::VelocityNet;
use cfm_core::rng::{stream, tag};
use cfm_core::{TaskKind, TaskSpec};
use cfm_tensor::AdamConfig;
use rand::RngCore;

use crate::checkpoint::{self, Checkpoint};
use crate::config::RunConfig;
use crate::manifest::Manifest;
use crate::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    GenerateData,
    Train,
    Sample,
    Evaluate,
    Mcmc,
    Benchmark,
    Paths,
}

impl Command {
    pub const ALL: [Command; 7] = [
        Command::GenerateData,
        Command::Train,
        Command::Sample,
        Command::Evaluate,
        Command::Mcmc,
        Command::Benchmark,
        Command::Paths,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::GenerateData => "generate-data",
            Command::Train => "train",
            Command::Sample => "sample",
            Command::Evaluate => "evaluate",
            Command::Mcmc => "mcmc",
            Command::Benchmark => "benchmark",
            Command::Paths => "paths",
        }
    }

    /// Run and return a one-paragraph summary for the terminal.
    pub fn run(self, cfg: &RunConfig) -> Result<String> {
        Ok(match self {
            Command::GenerateData => {
                let (path, count) = generate_data(cfg)?;
                format!("wrote {count} tuples to {}", path.display())
            }
            Command::Train => {
                let out = train(cfg)?;
                format!(
                    "trained {} steps, final loss {:.5}; checkpoint {}",
                    out.steps,
                    out.final_loss,
                    out.checkpoint.display()
                )
            }
            Command::Sample => {
                let out = sample(cfg)?;
                let mut s = format!("posterior mean {:?}", out.ensemble.mean());
                if let Some(err) = out.error {
                    let _ = write!(s, "\nrelative error {:.3}%", 100.0 * err);
                }
                s
            }
            Command::Evaluate => {
                let out = evaluate(cfg)?;
                let mut s = String::new();
                for r in &out.report.rows {
                    let _ = writeln!(s, "N = {}: {:.3}% ± {:.3}%", r.n_obs, 100.0 * r.mean, 100.0 * r.std);
                }
                if let Some(r) = out.reconstruction {
                    let _ = writeln!(s, "reconstruction error {:.3e} over {} inferences", r.stacked, r.count);
                }
                s.trim_end().to_string()
            }
            Command::Mcmc => mcmc(cfg)?
                .iter()
                .map(|r| format!("N = {}, {} samples: {:.3}%", r.n_obs, r.n_sample, 100.0 * r.error))
                .collect::<Vec<_>>()
                .join("\n"),
            Command::Benchmark => {
                let t = benchmark(cfg)?;
                format!(
                    "flow inference {:.3} s, chain {:.3} s, ratio {:.0}",
                    t.cfm_seconds, t.mcmc_seconds, t.ratio
                )
            }
            Command::Paths => {
                let s = paths(cfg)?;
                format!(
                    "mean path deviation {:.4} over {} paths",
                    s.mean_deviation,
                    s.per_path.len()
                )
            }
        })
    }
}

fn ensure_out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.out_dir();
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    Ok(dir)
}

pub fn load_data(cfg: &RunConfig, task: &TaskSpec) -> Result<Dataset> {
    let path = cfg.dataset_path();
    if !path.exists() {
        return Err(CliError::DatasetNotFound(path));
    }
    let data = load_dataset(&path)?;
    if data.task != cfg.task {
        return Err(CliError::Mismatch(format!(
            "dataset {} holds {} tuples, configured task is {}",
            path.display(),
            data.task.name(),
            cfg.task.name()
        )));
    }
    let checked = verify_dataset(task, &data, cfg.num("data.verify_fraction")?, cfg.seed)?;
    log::info!("re-verified {checked} of {} tuples", data.tuple_count());
    Ok(data)
}

pub fn load_model(cfg: &RunConfig) -> Result<VelocityNet> {
    let ck = checkpoint::load(&cfg.checkpoint_path(), AdamConfig::default())?;
    if ck.task != cfg.task {
        return Err(CliError::Mismatch(format!(
            "checkpoint was trained on {}, configured task is {}",
            ck.task.name(),
            cfg.task.name()
        )));
    }
    Ok(ck.net)
}

pub fn generate_data(cfg: &RunConfig) -> Result<(PathBuf, usize)> {
    ensure_out_dir(cfg)?;
    let task = cfg.task_spec()?;
    let data = generate_dataset(&task, &cfg.data_config()?)?;
    let path = cfg.dataset_path();
    save_dataset(&data, &path)?;
    Manifest {
        inputs: vec![],
        outputs: vec![path.clone()],
    }
    .write(Command::GenerateData.name(), cfg)?;
    Ok((path, data.tuple_count()))
}

pub struct TrainOutcome {
    pub net: VelocityNet,
    pub checkpoint: PathBuf,
    pub steps: u64,
    pub final_loss: f64,
    pub seconds: f64,
}

fn write_losses(path: &Path, first_step: u64, losses: &[f64]) -> Result<()> {
    let mut text = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(text, "{},{l}", first_step + i as u64 + 1);
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    ensure_out_dir(cfg)?;
    let task = cfg.task_spec()?;
    let data = load_data(cfg, &task)?;
    let train = cfg.train_config()?;
    let net_config = cfg.net_config()?;
    let ck_path = cfg.checkpoint_path();
    let adam_config = AdamConfig {
        lr: train.lr,
        ..Default::default()
    };

    let mut inputs = vec![cfg.dataset_path()];
    let mut trainer = if cfg.flag("train.resume")? && ck_path.exists() {
        let ck = checkpoint::load(&ck_path, adam_config)?;
        if ck.task != cfg.task || ck.net.config != net_config || ck.seed != cfg.seed {
            return Err(CliError::Mismatch(format!(
                "checkpoint {} was written by a different task, network or seed",
                ck_path.display()
            )));
        }
        log::info!("resuming at step {} (epoch {})", ck.cursor.step, ck.cursor.epoch);
        inputs.push(ck_path.clone());
        let mut t = Trainer::new(ck.net, &train);
        if let Some(adam) = ck.adam {
            t.adam = adam;
        }
        t.cursor = ck.cursor;
        t
    } else {
        let net = VelocityNet::init(net_config, &mut stream(cfg.seed, &[tag::INIT]))?;
        log::info!("{} network with {} parameters", net.config.arch.name(), net.parameter_count());
        Trainer::new(net, &train)
    };

    let first_step = trainer.cursor.step;
    let total = Trainer::total_steps(&data, &train);
    let every: u64 = cfg.num("train.checkpoint_every")?;
    let start = std::time::Instant::now();
    let snapshot = |t: &Trainer| Checkpoint {
        task: cfg.task,
        net: t.net.clone(),
        adam: Some(t.adam.clone()),
        cursor: t.cursor,
        seed: cfg.seed,
    };
    let stop_after: u64 = cfg.num("train.stop_after")?;
    let stop_step = if stop_after == 0 { u64::MAX } else { first_step + stop_after };
    trainer.run_until(&task, &data, &train, stop_step, |t| {
        let step = t.cursor.step;
        if step % 100 == 0 || step == total {
            let recent = &t.losses[t.losses.len().saturating_sub(100)..];
            log::info!(
                "step {step}/{total} loss {:.5} ({:.0} s)",
                recent.iter().sum::<f64>() / recent.len() as f64,
                start.elapsed().as_secs_f64()
            );
        }
        if every > 0 && step % every == 0 {
            checkpoint::save(&snapshot(t), &ck_path).map_err(|e| cfm_core::Error::Invalid(e.to_string()))?;
        }
        Ok(())
    })?;
    let seconds = start.elapsed().as_secs_f64();
    checkpoint::save(&snapshot(&trainer), &ck_path)?;
    let loss_path = cfg.output("loss.csv");
    write_losses(&loss_path, first_step, &trainer.losses)?;
    Manifest {
        inputs,
        outputs: vec![ck_path.clone(), loss_path],
    }
    .write(Command::Train.name(), cfg)?;
    Ok(TrainOutcome {
        final_loss: trainer.losses.last().copied().unwrap_or(f64::NAN),
        steps: trainer.cursor.step,
        checkpoint: ck_path,
        net: trainer.net,
        seconds,
    })
}

pub struct SampleOutcome {
    pub ensemble: PosteriorEnsemble,
    pub m_true: Option<Vec<f64>>,
    pub error: Option<f64>,
}

fn write_ensemble(path: &Path, ens: &PosteriorEnsemble, m_true: Option<&[f64]>) -> Result<()> {
    let dim = ens.samples.first().map_or(0, Vec::len);
    let mut text = String::from("row");
    for k in 0..dim {
        let _ = write!(text, ",m{k}");
    }
    text.push('\n');
    let mut row = |label: String, m: &[f64]| {
        text.push_str(&label);
        for v in m {
            let _ = write!(text, ",{v}");
        }
        text.push('\n');
    };
    for (i, s) in ens.samples.iter().enumerate() {
        row(i.to_string(), s);
    }
    row("mean".into(), &ens.mean());
    if let Some(m) = m_true {
        row("truth".into(), m);
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn sample(cfg: &RunConfig) -> Result<SampleOutcome> {
    let net = load_model(cfg)?;
    ensure_out_dir(cfg)?;
    let task = cfg.task_spec()?;
    let sampler = cfg.sampler_config(cfg.num("sample.ensemble")?)?;
    let (d, e) = (cfg.floats("sample.d")?, cfg.floats("sample.e")?);
    let (d, e, m_true) = if d.is_empty() {
        let p = draw_problem(&task, cfg.seed, cfg.num("sample.n_obs")?, cfg.num("sample.trial")?)?;
        (p.d, p.e, Some(p.m_true))
    } else {
        (d, e, None)
    };
    let ensemble = sample_posterior(&net, &task, &d, &e, &sampler)?;
    let mut outputs = vec![cfg.output("ensemble.csv")];
    write_ensemble(&outputs[0], &ensemble, m_true.as_deref())?;
    let error = match &m_true {
        Some(m) => {
            if task.kind == TaskKind::Darcy {
                let path = cfg.output("field.csv");
                write_field_csv(&task, m, &ensemble.mean(), &e, &path)?;
                outputs.push(path);
            }
            Some(relative_error_de(&task, m, &ensemble.mean(), &e)?)
        }
        None => None,
    };
    Manifest {
        inputs: vec![cfg.checkpoint_path()],
        outputs,
    }
    .write(Command::Sample.name(), cfg)?;
    Ok(SampleOutcome {
        ensemble,
        m_true,
        error,
    })
}

pub struct EvaluateOutcome {
    pub report: EvalReport,
    pub reconstruction: Option<Reconstruction>,
}

pub fn evaluate(cfg: &RunConfig) -> Result<EvaluateOutcome> {
    let net = load_model(cfg)?;
    ensure_out_dir(cfg)?;
    let task = cfg.task_spec()?;
    let sampler = cfg.sampler_config(cfg.num("eval.ensemble")?)?;
    let n_list = cfg.list("eval.n_obs")?;
    let report = evaluate_sweep(&net, &task, &n_list, cfg.num("eval.trials")?, &sampler)?;
    let sweep_path = cfg.output("sweep.csv");
    write_sweep_csv(&report.rows, &sweep_path)?;
    let mut outputs = vec![sweep_path];
    let reconstruction = if task.kind == TaskKind::Nonlinear {
        let count = cfg.num("eval.reconstruction")?;
        let n = n_list.first().copied().unwrap_or(1);
        let r = reconstruction_error(&net, &task, count, n, &sampler)?;
        let path = cfg.output("reconstruction.csv");
        let text = format!(
            "count,stacked,per_problem_mean,per_problem_std\n{},{},{},{}\n",
            r.count, r.stacked, r.per_problem_mean, r.per_problem_std
        );
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        outputs.push(path);
        Some(r)
    } else {
        None
    };
    Manifest {
        inputs: vec![cfg.checkpoint_path()],
        outputs,
    }
    .write(Command::Evaluate.name(), cfg)?;
    Ok(EvaluateOutcome { report, reconstruction })
}

/// Chain configuration for one `(n_obs, length, trial)` cell of the MCMC
/// table.
pub fn chain_for(cfg: &RunConfig, n_obs: usize, n_samples: usize, trial: u64) -> Result<ChainConfig> {
    Ok(ChainConfig {
        n_samples,
        seed: stream(cfg.seed, &[tag::MCMC, n_obs as u64, n_samples as u64, trial]).next_u64(),
        ..cfg.chain_config()?
    })
}

/// Chains on the same synthetic problems the sweep evaluates; the error of
/// each chain's posterior mean is averaged over trials.
pub fn mcmc(cfg: &RunConfig) -> Result<Vec<McmcRow>> {
    ensure_out_dir(cfg)?;
    let task = cfg.task_spec()?;
    let trials: u64 = cfg.num("mcmc.trials")?;
    if trials == 0 {
        return Err(CliError::Usage("mcmc.trials must be at least 1".into()));
    }
    let mut rows = Vec::new();
    for n in cfg.list("mcmc.n_obs")? {
        for n_samples in cfg.list("mcmc.n_samples")? {
            let mut errors = Vec::new();
            for trial in 0..trials {
                let p = draw_problem(&task, cfg.seed, n, trial)?;
                let chain = run_chain(&task, &p.d, &p.e, &chain_for(cfg, n, n_samples, trial)?)?;
                if let Some(w) = &chain.warning {
                    log::warn!("N = {n}, trial {trial}: {w}");
                }
                let err = relative_error_de(&task, &p.m_true, &chain.mean, &p.e)?;
                log::info!(
                    "N = {n}, {n_samples} samples, trial {trial}: {:.3}% (acceptance {:.2}, {:.1} s)",
                    100.0 * err,
                    chain.acceptance_rate,
                    chain.seconds
                );
                errors.push(err);
            }
            let row = SweepRow::from_errors(n, errors);
            rows.push(McmcRow {
                n_obs: n,
                n_sample: n_samples,
                error: row.mean,
            });
        }
    }
    let path = cfg.output("mcmc.csv");
    write_mcmc_csv(&rows, &path)?;
    Manifest {
        inputs: vec![],
        outputs: vec![path],
    }
    .write(Command::Mcmc.name(), cfg)?;
    Ok(rows)
}

/// Timing of one flow inference against one chain on the sampled problem.
/// The timing table is the one output that is not reproducible bit for bit.
pub fn benchmark(cfg: &RunConfig) -> Result<Timing> {
    let net = load_model(cfg)?;
    ensure_out_dir(cfg)?;
    let task = cfg.task_spec()?;
    let n: usize = cfg.num("sample.n_obs")?;
    let p = draw_problem(&task, cfg.seed, n, cfg.num("sample.trial")?)?;
    let sampler = cfg.sampler_config(cfg.num("eval.ensemble")?)?;
    let n_samples = cfg.list("mcmc.n_samples")?.first().copied().unwrap_or(10_000);
    let chain = chain_for(cfg, n, n_samples, 0)?;
    let t = benchmark_timing(&net, &task, &p, &sampler, &chain)?;
    let path = cfg.output("timing.csv");
    let text = format!(
        "cfm_seconds,mcmc_seconds,ratio\n{},{},{}\n",
        t.cfm_seconds, t.mcmc_seconds, t.ratio
    );
    std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
    Manifest {
        inputs: vec![cfg.checkpoint_path()],
        outputs: vec![path],
    }
    .write(Command::Benchmark.name(), cfg)?;
    Ok(t)
}

/// Trajectories from prior draws under the conditioning of the sampled
/// problem, with their deviation from straight lines.
pub fn paths(cfg: &RunConfig) -> Result<Straightness> {
    let net = load_model(cfg)?;
    ensure_out_dir(cfg)?;
    let task = cfg.task_spec()?;
    let p = draw_problem(&task, cfg.seed, cfg.num("sample.n_obs")?, cfg.num("sample.trial")?)?;
    let probes: usize = cfg.num("paths.probes")?;
    let field = ConditionedNet::new(&net, &task, &p.d, &p.e, probes)?;
    let sampler = cfg.sampler_config(probes)?;
    let s = path_straightness(&field, &probe_starts(&task, cfg.seed, probes), sampler.steps, sampler.method)?;
    let path = cfg.output("paths.csv");
    write_paths_csv(&s.paths, &path)?;
    Manifest {
        inputs: vec![cfg.checkpoint_path()],
        outputs: vec![path],
    }
    .write(Command::Paths.name(), cfg)?;
    Ok(s)
}
