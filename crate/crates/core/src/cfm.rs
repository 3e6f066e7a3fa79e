//! Conditional flow matching: training the velocity field on straight-line
//! interpolants between prior draws and data, and sampling the posterior by
//! integrating the learned field from `t = 0` to `t = 1`.

use cfm_tensor::{AdamConfig, AdamState, Tape, Tensor, Var};

use crate::data::{epoch_batches, Batch, Dataset};
use crate::error::invalid;
use crate::forward::{TaskSpec, TokenFeatures};
use crate::net::{self, NetInput, VelocityNet};
use crate::rng::{stream, tag};
use crate::{Error, Result};
use rand::Rng;

/// `(1 − t)·m0 + t·m1`
pub fn interpolate(m0: &[f64], m1: &[f64], t: f64) -> Result<Vec<f64>> {
    if m0.len() != m1.len() {
        return Err(invalid(format!("interpolating lengths {} and {}", m0.len(), m1.len())));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(invalid(format!("interpolation time {t} outside [0, 1]")));
    }
    Ok(m0.iter().zip(m1).map(|(a, b)| (1.0 - t) * a + t * b).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from the base rate to zero over the run.
    Cosine,
}

impl LrSchedule {
    pub fn name(self) -> &'static str {
        match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Cosine => "cosine",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "constant" => Some(LrSchedule::Constant),
            "cosine" => Some(LrSchedule::Cosine),
            _ => None,
        }
    }

    pub fn rate(self, base: f64, step: u64, total: u64) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let frac = (step as f64 / total.max(1) as f64).min(1.0);
                0.5 * base * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub epochs: u64,
    pub batch_size: usize,
    /// Batches whose gradients are averaged into one optimizer step.
    pub accumulate: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 8e-4,
            lr_schedule: LrSchedule::Cosine,
            epochs: 20,
            batch_size: 32,
            accumulate: 4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || self.batch_size == 0 || self.accumulate == 0 {
            return Err(invalid("need lr ≥ 0, batch size ≥ 1 and accumulation window ≥ 1"));
        }
        Ok(())
    }
}

/// Flattened token features for a set of `(d, e)` pairs sharing `n_obs`.
fn stack_features(features: &[&TokenFeatures]) -> (Vec<f64>, Vec<f64>) {
    let mut obs = Vec::new();
    let mut design = Vec::new();
    for f in features {
        obs.extend_from_slice(&f.observations);
        if let Some(d) = &f.design {
            design.extend_from_slice(d);
        }
    }
    (obs, design)
}

/// Network input and regression target for one training batch. Tuple `i`
/// of shard `s` draws its `(t, m0)` from the stream keyed by
/// `(seed, epoch, s, i)`.
pub fn training_batch(
    task: &TaskSpec,
    data: &Dataset,
    batch: &Batch,
    seed: u64,
    epoch: u64,
) -> Result<(NetInput, Vec<f64>)> {
    let shard = &data.shards[batch.shard];
    let dim = task.dim_m();
    let mut m_t = Vec::with_capacity(batch.indices.len() * dim);
    let mut target = Vec::with_capacity(batch.indices.len() * dim);
    let mut t = Vec::with_capacity(batch.indices.len());
    let mut feats = Vec::with_capacity(batch.indices.len());
    for &i in &batch.indices {
        let tuple = shard.tuple(data.task, i);
        let mut rng = stream(seed, &[tag::TRAIN, epoch, batch.shard as u64, i as u64]);
        let ti: f64 = rng.gen();
        let m0 = task.sample_prior(&mut rng);
        m_t.extend(interpolate(&m0, &tuple.m, ti)?);
        target.extend(tuple.m.iter().zip(&m0).map(|(a, b)| a - b));
        t.push(ti);
        feats.push(task.token_features(&tuple.d, &tuple.e)?);
    }
    let (obs, design) = stack_features(&feats.iter().collect::<Vec<_>>());
    Ok((
        NetInput {
            batch: batch.indices.len(),
            n_obs: shard.n_obs,
            m_t,
            t,
            obs,
            design,
        },
        target,
    ))
}

/// Mean squared error between the predicted velocity and `target`,
/// recorded on `tape`.
pub fn cfm_loss(
    net: &VelocityNet,
    tape: &mut Tape<f32>,
    params: &[Var],
    input: &NetInput,
    target: &[f64],
) -> Result<Var> {
    let out = net::forward(&net.config, tape, params, input)?;
    let tgt = tape.constant(Tensor::from_f64(&[input.batch, net.config.dim_m], target)?);
    Ok(tape.mse(out, tgt)?)
}

/// Loss and parameter gradients for one batch.
pub fn loss_and_grads(net: &VelocityNet, input: &NetInput, target: &[f64]) -> Result<(f64, Vec<Vec<f32>>)> {
    let mut tape = Tape::<f32>::new();
    let vars: Vec<Var> = net.params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = cfm_loss(net, &mut tape, &vars, input, target)?;
    tape.backward(loss)?;
    let value = tape.value(loss).data()[0] as f64;
    let grads = vars
        .iter()
        .zip(&net.params)
        .map(|(&v, p)| tape.grad(v).map_or_else(|| vec![0.0; p.numel()], <[f32]>::to_vec))
        .collect();
    Ok((value, grads))
}

/// Where training resumes: optimizer steps taken and position in the epoch
/// schedule. Together with the master seed this is the full random state.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TrainCursor {
    pub step: u64,
    pub epoch: u64,
    /// Index of the next batch within `epoch`.
    pub batch: u64,
}

pub struct Trainer {
    pub net: VelocityNet,
    pub adam: AdamState,
    pub cursor: TrainCursor,
    /// Mean batch loss of every optimizer step taken so far.
    pub losses: Vec<f64>,
}

impl Trainer {
    pub fn new(net: VelocityNet, config: &TrainConfig) -> Self {
        let adam = AdamState::new(
            AdamConfig {
                lr: config.lr,
                ..Default::default()
            },
            &net.params,
        );
        Self {
            net,
            adam,
            cursor: TrainCursor::default(),
            losses: Vec::new(),
        }
    }

    pub fn total_steps(data: &Dataset, config: &TrainConfig) -> u64 {
        let batches: usize = data
            .shards
            .iter()
            .map(|s| s.len.div_ceil(config.batch_size))
            .sum();
        config.epochs * batches.div_ceil(config.accumulate) as u64
    }

    /// Run until `config.epochs` are complete. `on_step` sees the trainer
    /// after every optimizer step. A non-finite loss aborts before the
    /// update, leaving the last good parameters in place.
    pub fn run(
        &mut self,
        task: &TaskSpec,
        data: &Dataset,
        config: &TrainConfig,
        on_step: impl FnMut(&Trainer) -> Result<()>,
    ) -> Result<()> {
        self.run_until(task, data, config, u64::MAX, on_step)
    }

    /// As [`Trainer::run`], but return once `cursor.step` reaches
    /// `stop_step`. Continuing later gives the same result as an
    /// uninterrupted run.
    pub fn run_until(
        &mut self,
        task: &TaskSpec,
        data: &Dataset,
        config: &TrainConfig,
        stop_step: u64,
        mut on_step: impl FnMut(&Trainer) -> Result<()>,
    ) -> Result<()> {
        config.validate()?;
        if data.task != task.kind {
            return Err(invalid("dataset and task differ"));
        }
        let total = Self::total_steps(data, config);
        while self.cursor.epoch < config.epochs {
            let batches = epoch_batches(data, config.batch_size, config.seed, self.cursor.epoch)?;
            while (self.cursor.batch as usize) < batches.len() {
                if self.cursor.step >= stop_step {
                    return Ok(());
                }
                let start = self.cursor.batch as usize;
                let group = &batches[start..(start + config.accumulate).min(batches.len())];
                let mut sum: Option<Vec<Vec<f32>>> = None;
                let mut loss_sum = 0.0;
                for batch in group {
                    let (input, target) = training_batch(task, data, batch, config.seed, self.cursor.epoch)?;
                    let (loss, grads) = loss_and_grads(&self.net, &input, &target)?;
                    if !loss.is_finite() {
                        return Err(Error::NonFinite {
                            what: "training loss".into(),
                            step: self.cursor.step,
                        });
                    }
                    loss_sum += loss;
                    match &mut sum {
                        None => sum = Some(grads),
                        Some(acc) => {
                            for (a, g) in acc.iter_mut().zip(&grads) {
                                for (x, y) in a.iter_mut().zip(g) {
                                    *x += y;
                                }
                            }
                        }
                    }
                }
                let k = group.len() as f32;
                let grads: Vec<Tensor<f32>> = sum
                    .expect("group is non-empty")
                    .into_iter()
                    .zip(&self.net.params)
                    .map(|(g, p)| Tensor::new(p.shape(), g.into_iter().map(|v| v / k).collect()))
                    .collect::<cfm_tensor::Result<_>>()?;
                let lr = config.lr_schedule.rate(config.lr, self.cursor.step, total);
                self.adam.step_with_lr(lr, &mut self.net.params, &grads)?;
                self.cursor.step += 1;
                self.cursor.batch += group.len() as u64;
                self.losses.push(loss_sum / group.len() as f64);
                on_step(self)?;
            }
            self.cursor.epoch += 1;
            self.cursor.batch = 0;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OdeMethod {
    Euler,
    Midpoint,
    Rk4,
}

impl OdeMethod {
    pub fn name(self) -> &'static str {
        match self {
            OdeMethod::Euler => "euler",
            OdeMethod::Midpoint => "midpoint",
            OdeMethod::Rk4 => "rk4",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "euler" => Some(OdeMethod::Euler),
            "midpoint" => Some(OdeMethod::Midpoint),
            "rk4" => Some(OdeMethod::Rk4),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub method: OdeMethod,
    pub ensemble: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            method: OdeMethod::Euler,
            ensemble: 10,
            seed: 0,
        }
    }
}

/// A time-dependent vector field acting on a batch of states
/// (`batch × dim`, row-major).
pub trait VelocityField {
    fn dim(&self) -> usize;
    fn velocity(&self, x: &[f64], t: f64) -> Result<Vec<f64>>;
}

impl<F: Fn(&[f64], f64) -> Vec<f64>> VelocityField for (usize, F) {
    fn dim(&self) -> usize {
        self.0
    }

    fn velocity(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        Ok((self.1)(x, t))
    }
}

/// The learned field with one fixed conditioning `(d, e)` per state row.
pub struct ConditionedNet<'a> {
    pub net: &'a VelocityNet,
    rows: usize,
    n_obs: usize,
    obs: Vec<f64>,
    design: Vec<f64>,
}

impl<'a> ConditionedNet<'a> {
    /// `copies` rows sharing the conditioning `(d, e)`.
    pub fn new(net: &'a VelocityNet, task: &TaskSpec, d: &[f64], e: &[f64], copies: usize) -> Result<Self> {
        let features = task.token_features(d, e)?;
        Self::from_features(net, task, &vec![&features; copies])
    }

    /// One row per entry of `features`; all must share `n_obs`.
    pub fn from_features(net: &'a VelocityNet, task: &TaskSpec, features: &[&TokenFeatures]) -> Result<Self> {
        if net.config.dim_m != task.dim_m() {
            return Err(invalid("network and task disagree on the parameter dimension"));
        }
        let n_obs = features.first().map_or(0, |f| f.n_obs);
        if features.is_empty() || features.iter().any(|f| f.n_obs != n_obs) {
            return Err(invalid("conditioning rows must be non-empty and share n_obs"));
        }
        let (obs, design) = stack_features(features);
        Ok(Self {
            net,
            rows: features.len(),
            n_obs,
            obs,
            design,
        })
    }
}

impl VelocityField for ConditionedNet<'_> {
    fn dim(&self) -> usize {
        self.net.config.dim_m
    }

    fn velocity(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        if x.len() != self.rows * self.dim() {
            return Err(invalid(format!(
                "{} state values for {} conditioned rows",
                x.len(),
                self.rows
            )));
        }
        let input = NetInput {
            batch: self.rows,
            n_obs: self.n_obs,
            m_t: x.to_vec(),
            t: vec![t.clamp(0.0, 1.0); self.rows],
            obs: self.obs.clone(),
            design: self.design.clone(),
        };
        Ok(self.net.predict(&input)?.into_iter().map(f64::from).collect())
    }
}

fn axpy(x: &[f64], h: f64, v: &[f64]) -> Vec<f64> {
    x.iter().zip(v).map(|(a, b)| a + h * b).collect()
}

/// One fixed step of `method` from `(x, t)` with size `h`.
pub fn ode_step(field: &dyn VelocityField, method: OdeMethod, x: &[f64], t: f64, h: f64) -> Result<Vec<f64>> {
    Ok(match method {
        OdeMethod::Euler => axpy(x, h, &field.velocity(x, t)?),
        OdeMethod::Midpoint => {
            let k1 = field.velocity(x, t)?;
            let k2 = field.velocity(&axpy(x, 0.5 * h, &k1), t + 0.5 * h)?;
            axpy(x, h, &k2)
        }
        OdeMethod::Rk4 => {
            let k1 = field.velocity(x, t)?;
            let k2 = field.velocity(&axpy(x, 0.5 * h, &k1), t + 0.5 * h)?;
            let k3 = field.velocity(&axpy(x, 0.5 * h, &k2), t + 0.5 * h)?;
            let k4 = field.velocity(&axpy(x, h, &k3), t + h)?;
            x.iter()
                .enumerate()
                .map(|(i, &a)| a + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
                .collect()
        }
    })
}

/// Integrate from `t = 0` to `t = 1` in `steps` equal steps, returning the
/// state after every step (`steps + 1` entries including `x0`).
pub fn integrate_path(
    field: &dyn VelocityField,
    x0: &[f64],
    steps: usize,
    method: OdeMethod,
) -> Result<Vec<Vec<f64>>> {
    if steps == 0 {
        return Err(invalid("at least one integration step is required"));
    }
    let h = 1.0 / steps as f64;
    let mut path = Vec::with_capacity(steps + 1);
    path.push(x0.to_vec());
    for k in 0..steps {
        let next = ode_step(field, method, path.last().expect("non-empty"), k as f64 * h, h)?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "sampler state".into(),
                step: k as u64,
            });
        }
        path.push(next);
    }
    Ok(path)
}

pub fn integrate(field: &dyn VelocityField, x0: &[f64], steps: usize, method: OdeMethod) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(invalid("at least one integration step is required"));
    }
    let h = 1.0 / steps as f64;
    let mut x = x0.to_vec();
    for k in 0..steps {
        x = ode_step(field, method, &x, k as f64 * h, h)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "sampler state".into(),
                step: k as u64,
            });
        }
    }
    Ok(x)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorEnsemble {
    /// One row per member.
    pub samples: Vec<Vec<f64>>,
    pub d: Vec<f64>,
    pub e: Vec<f64>,
    pub steps: usize,
    pub method: OdeMethod,
    pub seed: u64,
}

impl PosteriorEnsemble {
    pub fn mean(&self) -> Vec<f64> {
        let n = self.samples.len() as f64;
        let dim = self.samples.first().map_or(0, Vec::len);
        (0..dim)
            .map(|k| self.samples.iter().map(|s| s[k]).sum::<f64>() / n)
            .collect()
    }
}

/// Prior draws for ensemble members `0..count`, member `i` from the stream
/// `(seed, i)` under `purpose`.
pub fn prior_draws(task: &TaskSpec, seed: u64, purpose: u64, count: usize) -> Vec<f64> {
    (0..count)
        .flat_map(|i| task.sample_prior(&mut stream(seed, &[purpose, i as u64])))
        .collect()
}

/// Integrate an ensemble of prior draws through `field`. Members are
/// integrated together as one batch; each row's arithmetic does not depend
/// on the others.
pub fn sample_field(
    field: &dyn VelocityField,
    task: &TaskSpec,
    sampler: &SamplerConfig,
) -> Result<Vec<Vec<f64>>> {
    if sampler.ensemble == 0 {
        return Err(invalid("ensemble size must be at least 1"));
    }
    let x0 = prior_draws(task, sampler.seed, tag::SAMPLE, sampler.ensemble);
    let x1 = integrate(field, &x0, sampler.steps, sampler.method)?;
    Ok(x1.chunks(task.dim_m()).map(<[f64]>::to_vec).collect())
}

pub fn sample_posterior(
    net: &VelocityNet,
    task: &TaskSpec,
    d: &[f64],
    e: &[f64],
    sampler: &SamplerConfig,
) -> Result<PosteriorEnsemble> {
    let field = ConditionedNet::new(net, task, d, e, sampler.ensemble)?;
    Ok(PosteriorEnsemble {
        samples: sample_field(&field, task, sampler)?,
        d: d.to_vec(),
        e: e.to_vec(),
        steps: sampler.steps,
        method: sampler.method,
        seed: sampler.seed,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Straightness {
    /// Mean over non-degenerate paths of the maximal distance to the chord
    /// divided by the chord length.
    pub mean_deviation: f64,
    pub per_path: Vec<f64>,
    /// Paths whose chord is shorter than `1e-9`.
    pub skipped: usize,
    /// `(t, x(t))` for every path, `steps + 1` points each.
    pub paths: Vec<Vec<(f64, Vec<f64>)>>,
}

fn chord_deviation(path: &[Vec<f64>]) -> Option<f64> {
    let (a, b) = (&path[0], path.last().expect("non-empty"));
    let chord: Vec<f64> = b.iter().zip(a).map(|(x, y)| x - y).collect();
    let len2: f64 = chord.iter().map(|v| v * v).sum();
    if len2.sqrt() < 1e-9 {
        return None;
    }
    let worst = path
        .iter()
        .map(|x| {
            let rel: Vec<f64> = x.iter().zip(a).map(|(p, q)| p - q).collect();
            let s = (rel.iter().zip(&chord).map(|(r, c)| r * c).sum::<f64>() / len2).clamp(0.0, 1.0);
            rel.iter()
                .zip(&chord)
                .map(|(r, c)| (r - s * c).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max);
    Some(worst / len2.sqrt())
}

/// Chord deviation of trajectories started at the rows of `x0`.
pub fn path_straightness(
    field: &dyn VelocityField,
    x0: &[f64],
    steps: usize,
    method: OdeMethod,
) -> Result<Straightness> {
    let dim = field.dim();
    let path = integrate_path(field, x0, steps, method)?;
    let probes = x0.len() / dim;
    let mut per_path = Vec::new();
    let mut skipped = 0;
    let mut paths = Vec::with_capacity(probes);
    for p in 0..probes {
        let single: Vec<Vec<f64>> = path.iter().map(|x| x[p * dim..(p + 1) * dim].to_vec()).collect();
        match chord_deviation(&single) {
            Some(dev) => per_path.push(dev),
            None => skipped += 1,
        }
        paths.push(
            single
                .into_iter()
                .enumerate()
                .map(|(k, x)| (k as f64 / steps as f64, x))
                .collect(),
        );
    }
    let mean_deviation = if per_path.is_empty() {
        0.0
    } else {
        per_path.iter().sum::<f64>() / per_path.len() as f64
    };
    Ok(Straightness {
        mean_deviation,
        per_path,
        skipped,
        paths,
    })
}
