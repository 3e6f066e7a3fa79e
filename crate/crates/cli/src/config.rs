//! Flat `section.key = value` run configuration.
//!
//! A config file is a list of `key = value` lines grouped under `[section]`
//! headers; `#` starts a comment. Every key has a default. A default of
//! `auto` resolves to a per-task value once the task is known.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use cfm_core::cfm::{LrSchedule, OdeMethod, SamplerConfig, TrainConfig};
use cfm_core::data::DataGenConfig;
use cfm_core::forward::{DarcyConstants, KlBasis, KlConstants, Preconditioner, RateTransition};
use cfm_core::mcmc::ChainConfig;
use cfm_core::net::{Arch, NetConfig};
use cfm_core::{TaskKind, TaskSpec};

use crate::CliError;

pub struct KeySpec {
    pub key: &'static str,
    pub default: &'static str,
    pub doc: &'static str,
}

const fn key(key: &'static str, default: &'static str, doc: &'static str) -> KeySpec {
    KeySpec { key, default, doc }
}

pub const KEYS: &[KeySpec] = &[
    key("run.task", "seir", "nonlinear | seir | darcy"),
    key("run.seed", "0", "master seed for every random stream"),
    key("run.out_dir", "", "output directory; empty uses $CFM_OUT_DIR, then ./out"),
    key("run.dataset", "", "dataset file; empty uses <out_dir>/<task>.cfmd"),
    key("run.checkpoint", "", "checkpoint file; empty uses <out_dir>/<task>.cfmt"),
    key("run.kl_cache", "", "KL basis cache directory; empty uses <out_dir>/kl"),
    key("data.tuples_per_n", "auto", "tuples per observation count (nonlinear 100000, else 50000)"),
    key("data.n_obs", "auto", "observation counts (nonlinear 1, else 4,5,6,7,8)"),
    key("data.noise", "auto", "noise σ (nonlinear 0.001, seir 0.1, darcy 0.01 relative to max|u|)"),
    key("data.verify_fraction", "0.01", "fraction of tuples re-verified when a dataset is loaded"),
    key("net.arch", "transformer", "transformer | mlp"),
    key("net.n_emb", "32", "token embedding width"),
    key("net.n_head", "4", "attention heads"),
    key("net.n_layer", "auto", "transformer blocks (seir 6, else 4)"),
    key("net.rope_base", "10000", "rotary embedding base"),
    key("net.time_scale", "100", "timestep multiplier before the sinusoidal features"),
    key("net.mlp_hidden", "256", "MLP hidden width"),
    key("net.mlp_layers", "3", "MLP hidden layers"),
    key("net.mlp_n_obs", "4", "fixed observation count of the MLP"),
    key("train.lr", "auto", "peak learning rate (darcy 0.0003, else 0.0008)"),
    key("train.lr_schedule", "cosine", "constant | cosine"),
    key("train.epochs", "auto", "epochs (nonlinear 20, seir 60, darcy 100)"),
    key("train.batch_size", "32", "tuples per batch"),
    key("train.accumulate", "4", "batches per optimizer step"),
    key("train.checkpoint_every", "0", "optimizer steps between checkpoints; 0 saves only at the end"),
    key("train.stop_after", "0", "return after this many optimizer steps; 0 runs to the end"),
    key("train.resume", "false", "continue from run.checkpoint when it exists"),
    key("sample.steps", "50", "integration steps"),
    key("sample.method", "euler", "euler | midpoint | rk4"),
    key("sample.ensemble", "auto", "posterior draws per inference (darcy 50, else 10)"),
    key("sample.n_obs", "auto", "observations of the sampled problem (nonlinear 1, else 8)"),
    key("sample.trial", "0", "index of the sampled synthetic problem"),
    key("sample.d", "", "observed values; empty draws a synthetic problem"),
    key("sample.e", "", "design matching sample.d"),
    key("eval.n_obs", "auto", "observation counts of the sweep (nonlinear 1, else 4,5,6,7,8)"),
    key("eval.trials", "100", "problems per observation count"),
    key("eval.ensemble", "10", "posterior draws averaged per problem"),
    key("eval.reconstruction", "10000", "inferences in the nonlinear reconstruction error"),
    key("mcmc.n_samples", "10000", "chain lengths to compare"),
    key("mcmc.n_obs", "8", "observation counts of the compared problems"),
    key("mcmc.trials", "5", "problems per (n_obs, chain length)"),
    key("mcmc.proposal_scale", "0.1", "initial random-walk standard deviation"),
    key("mcmc.burn_in", "0.5", "discarded fraction of each chain"),
    key("mcmc.sigma_obs", "auto", "likelihood noise (the data noise)"),
    key("mcmc.tune_rounds", "20", "100-step rounds of proposal adaptation"),
    key("paths.probes", "100", "trajectories integrated for the straightness probe"),
    key("seir.transition", "smooth", "smooth | printed"),
    key("darcy.grid", "65", "nodes per side"),
    key("darcy.sigma_w", "0.05", "boundary bump width"),
    key("darcy.tolerance", "1e-10", "relative residual of the linear solve"),
    key("darcy.max_iterations", "100000", "iteration cap of the linear solve"),
    key("darcy.preconditioner", "ic", "ic | jacobi"),
    key("darcy.kl_modes", "16", "retained KL modes"),
    key("darcy.kl_length_sq", "0.1", "squared covariance length scale"),
    key("darcy.kl_sigma", "1", "log-permeability standard deviation"),
];

fn spec(key: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|k| k.key == key)
}

/// Usage text listing every key with its default.
pub fn key_listing() -> String {
    let mut out = String::from("valid keys:\n");
    for k in KEYS {
        let default = if k.default.is_empty() { "\"\"" } else { k.default };
        let _ = writeln!(out, "  {:<24} {:<12} {}", k.key, default, k.doc);
    }
    out
}

/// Explicitly set keys, before defaults are applied.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        let mut raw = Self::default();
        let mut section = String::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = || format!("{origin}:{}", no + 1);
            if let Some(name) = line.strip_prefix('[') {
                section = name
                    .strip_suffix(']')
                    .ok_or_else(|| CliError::Usage(format!("{}: unterminated section header", at())))?
                    .trim()
                    .to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("{}: expected `key = value`", at())))?;
            let k = k.trim();
            let full = if section.is_empty() || k.contains('.') {
                k.to_string()
            } else {
                format!("{section}.{k}")
            };
            if raw.values.contains_key(&full) {
                return Err(CliError::Usage(format!("{}: `{full}` set twice", at())));
            }
            raw.set(&full, v.trim())
                .map_err(|e| CliError::Usage(format!("{}: {e}", at())))?;
        }
        Ok(raw)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        if spec(key).is_none() {
            return Err(CliError::Usage(format!("unknown key `{key}`\n{}", key_listing())));
        }
        let value = value.trim().trim_matches('"');
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Apply a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), CliError> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override `{pair}` is not key=value")))?;
        self.set(k.trim(), v)
    }

    fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| spec(key).expect("known key").default)
    }
}

fn auto_default(task: TaskKind, key: &str) -> String {
    use TaskKind::*;
    let s = match (key, task) {
        ("data.tuples_per_n", Nonlinear) => "100000",
        ("data.tuples_per_n", _) => "50000",
        ("data.n_obs" | "eval.n_obs", Nonlinear) => "1",
        ("data.n_obs" | "eval.n_obs", _) => "4,5,6,7,8",
        ("data.noise" | "mcmc.sigma_obs", Nonlinear) => "0.001",
        ("data.noise" | "mcmc.sigma_obs", Seir) => "0.1",
        ("data.noise" | "mcmc.sigma_obs", Darcy) => "0.01",
        ("net.n_layer", Seir) => "6",
        ("net.n_layer", _) => "4",
        ("train.lr", Darcy) => "0.0003",
        ("train.lr", _) => "0.0008",
        ("train.epochs", Nonlinear) => "20",
        ("train.epochs", Seir) => "60",
        ("train.epochs", Darcy) => "100",
        ("sample.ensemble", Darcy) => "50",
        ("sample.ensemble", _) => "10",
        ("sample.n_obs", Nonlinear) => "1",
        ("sample.n_obs", _) => "8",
        _ => unreachable!("no per-task default for {key}"),
    };
    s.to_string()
}

/// A fully resolved configuration: every key has a concrete value.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    pub task: TaskKind,
    pub seed: u64,
}

fn bad(key: &str, value: &str, want: &str) -> CliError {
    CliError::Usage(format!("`{key} = {value}`: expected {want}"))
}

impl RunConfig {
    pub fn resolve(raw: &RawConfig) -> Result<Self, CliError> {
        let task_name = raw.get("run.task");
        let task = TaskKind::parse(task_name).ok_or_else(|| bad("run.task", task_name, "nonlinear, seir or darcy"))?;
        let values: BTreeMap<String, String> = KEYS
            .iter()
            .map(|k| {
                let v = raw.get(k.key);
                let v = if v == "auto" { auto_default(task, k.key) } else { v.to_string() };
                (k.key.to_string(), v)
            })
            .collect();
        let mut cfg = Self { values, task, seed: 0 };
        cfg.seed = cfg.num("run.seed")?;
        // parse everything once so type errors surface before any work starts
        cfg.task_spec_parts()?;
        cfg.net_config()?;
        cfg.train_config()?;
        cfg.sampler_config(cfg.num("sample.ensemble")?)?;
        cfg.chain_config()?;
        cfg.data_config()?;
        cfg.list("eval.n_obs")?;
        cfg.list("mcmc.n_samples")?;
        cfg.list("mcmc.n_obs")?;
        cfg.floats("sample.d")?;
        cfg.floats("sample.e")?;
        Ok(cfg)
    }

    pub fn str(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("known key")
    }

    pub fn num<T: std::str::FromStr>(&self, key: &str) -> Result<T, CliError> {
        let v = self.str(key);
        v.parse().map_err(|_| bad(key, v, "a number"))
    }

    pub fn flag(&self, key: &str) -> Result<bool, CliError> {
        match self.str(key) {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            v => Err(bad(key, v, "true or false")),
        }
    }

    pub fn list(&self, key: &str) -> Result<Vec<usize>, CliError> {
        let v = self.str(key);
        v.split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| s.trim().parse().map_err(|_| bad(key, v, "comma-separated counts")))
            .collect()
    }

    pub fn floats(&self, key: &str) -> Result<Vec<f64>, CliError> {
        let v = self.str(key);
        v.split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| s.trim().parse().map_err(|_| bad(key, v, "comma-separated numbers")))
            .collect()
    }

    /// The resolved configuration in config-file syntax; loading it back
    /// reproduces this configuration.
    pub fn snapshot(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (k, v) in &self.values {
            let (s, name) = k.split_once('.').expect("sectioned key");
            if s != section {
                let _ = writeln!(out, "{}[{s}]", if section.is_empty() { "" } else { "\n" });
                section = s;
            }
            let _ = writeln!(out, "{name} = {v}");
        }
        out
    }

    pub fn out_dir(&self) -> PathBuf {
        match self.str("run.out_dir") {
            "" => std::env::var_os("CFM_OUT_DIR").map_or_else(|| PathBuf::from("out"), PathBuf::from),
            dir => PathBuf::from(dir),
        }
    }

    fn path_or(&self, key: &str, fallback: impl FnOnce() -> PathBuf) -> PathBuf {
        match self.str(key) {
            "" => fallback(),
            p => PathBuf::from(p),
        }
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.path_or("run.dataset", || self.out_dir().join(format!("{}.cfmd", self.task.name())))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.path_or("run.checkpoint", || self.out_dir().join(format!("{}.cfmt", self.task.name())))
    }

    pub fn kl_cache(&self) -> PathBuf {
        self.path_or("run.kl_cache", || self.out_dir().join("kl"))
    }

    /// Path of an output file named `<task>_<stem>` in the output directory.
    pub fn output(&self, stem: &str) -> PathBuf {
        self.out_dir().join(format!("{}_{stem}", self.task.name()))
    }

    fn kl_constants(&self) -> Result<KlConstants, CliError> {
        Ok(KlConstants {
            grid: self.num("darcy.grid")?,
            sigma_v: self.num("darcy.kl_sigma")?,
            length_sq: self.num("darcy.kl_length_sq")?,
            n_modes: self.num("darcy.kl_modes")?,
        })
    }

    fn task_spec_parts(&self) -> Result<(f64, RateTransition, DarcyConstants), CliError> {
        let transition = self.str("seir.transition");
        let transition = RateTransition::parse(transition).ok_or_else(|| bad("seir.transition", transition, "smooth or printed"))?;
        let preconditioner = match self.str("darcy.preconditioner") {
            "ic" => Preconditioner::IncompleteCholesky,
            "jacobi" => Preconditioner::Jacobi,
            v => return Err(bad("darcy.preconditioner", v, "ic or jacobi")),
        };
        let darcy = DarcyConstants {
            grid: self.num("darcy.grid")?,
            sigma_w: self.num("darcy.sigma_w")?,
            tolerance: self.num("darcy.tolerance")?,
            max_iterations: self.num("darcy.max_iterations")?,
            preconditioner,
        };
        self.kl_constants()?;
        Ok((self.num("data.noise")?, transition, darcy))
    }

    /// The forward model and priors; for darcy the KL basis is loaded from
    /// (or built into) the cache directory.
    pub fn task_spec(&self) -> Result<TaskSpec, CliError> {
        let (noise, transition, darcy) = self.task_spec_parts()?;
        let mut spec = match self.task {
            TaskKind::Nonlinear => TaskSpec::nonlinear(),
            TaskKind::Seir => TaskSpec::seir(),
            TaskKind::Darcy => {
                let basis = KlBasis::load_or_build(&self.kl_cache(), &self.kl_constants()?)?;
                TaskSpec::darcy(Arc::new(basis))
            }
        };
        spec.noise = noise;
        spec.seir.transition = transition;
        spec.darcy = darcy;
        Ok(spec)
    }

    pub fn data_config(&self) -> Result<DataGenConfig, CliError> {
        Ok(DataGenConfig {
            tuples_per_n: self.num("data.tuples_per_n")?,
            n_obs: self.list("data.n_obs")?,
            seed: self.seed,
        })
    }

    pub fn net_config(&self) -> Result<NetConfig, CliError> {
        let arch = self.str("net.arch");
        let arch = Arch::parse(arch).ok_or_else(|| bad("net.arch", arch, "transformer or mlp"))?;
        let base = match arch {
            Arch::Transformer => NetConfig::transformer(self.task),
            Arch::Mlp => NetConfig::mlp(self.task, self.num("net.mlp_n_obs")?),
        };
        let config = NetConfig {
            n_emb: self.num("net.n_emb")?,
            n_head: self.num("net.n_head")?,
            n_layer: self.num("net.n_layer")?,
            rope_base: self.num("net.rope_base")?,
            time_scale: self.num("net.time_scale")?,
            mlp_hidden: self.num("net.mlp_hidden")?,
            mlp_layers: self.num("net.mlp_layers")?,
            ..base
        };
        config.validate().map_err(|e| CliError::Usage(format!("net: {e}")))?;
        Ok(config)
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let schedule = self.str("train.lr_schedule");
        let config = TrainConfig {
            lr: self.num("train.lr")?,
            lr_schedule: LrSchedule::parse(schedule)
                .ok_or_else(|| bad("train.lr_schedule", schedule, "constant or cosine"))?,
            epochs: self.num("train.epochs")?,
            batch_size: self.num("train.batch_size")?,
            accumulate: self.num("train.accumulate")?,
            seed: self.seed,
        };
        config.validate().map_err(|e| CliError::Usage(format!("train: {e}")))?;
        Ok(config)
    }

    pub fn sampler_config(&self, ensemble: usize) -> Result<SamplerConfig, CliError> {
        let method = self.str("sample.method");
        Ok(SamplerConfig {
            steps: self.num("sample.steps")?,
            method: OdeMethod::parse(method).ok_or_else(|| bad("sample.method", method, "euler, midpoint or rk4"))?,
            ensemble,
            seed: self.seed,
        })
    }

    pub fn chain_config(&self) -> Result<ChainConfig, CliError> {
        let config = ChainConfig {
            n_samples: 0,
            proposal_scale: self.num("mcmc.proposal_scale")?,
            burn_in: self.num("mcmc.burn_in")?,
            sigma_obs: self.num("mcmc.sigma_obs")?,
            tune_rounds: self.num("mcmc.tune_rounds")?,
            seed: self.seed,
        };
        config.validate().map_err(|e| CliError::Usage(format!("mcmc: {e}")))?;
        Ok(config)
    }
}
