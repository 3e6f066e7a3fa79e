//! Samples of the joint distribution of `(m, e, d)`, grouped into shards of
//! equal observation count, plus batching and the binary dataset format.
//!
//! File layout (little endian): magic `CFMD`, `u32` version, task id byte,
//! `u32` shard count; per shard `u32` n_obs, `u64` tuple count, then the
//! `f32` arrays `m`, `e`, `d`, `η`.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};

use crate::error::invalid;
use crate::forward::{TaskKind, TaskSpec};
use crate::rng::{stream, tag};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct DataGenConfig {
    pub tuples_per_n: usize,
    pub n_obs: Vec<usize>,
    pub seed: u64,
}

/// Tuples that all carry `n_obs` observations, stored column-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetShard {
    pub n_obs: usize,
    pub len: usize,
    pub m: Vec<f32>,
    pub e: Vec<f32>,
    pub d: Vec<f32>,
    pub eta: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub task: TaskKind,
    pub shards: Vec<DatasetShard>,
}

/// One tuple, widened to `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleTuple {
    pub m: Vec<f64>,
    pub e: Vec<f64>,
    pub d: Vec<f64>,
    pub eta: Vec<f64>,
    pub n_obs: usize,
}

impl DatasetShard {
    fn widths(task: TaskKind, n_obs: usize) -> (usize, usize, usize) {
        (task.dim_m(), task.e_len(n_obs), task.d_len(n_obs))
    }

    pub fn tuple(&self, task: TaskKind, index: usize) -> SampleTuple {
        let (wm, we, wd) = Self::widths(task, self.n_obs);
        let widen = |v: &[f32], w: usize| v[index * w..(index + 1) * w].iter().map(|&x| x as f64).collect();
        SampleTuple {
            m: widen(&self.m, wm),
            e: widen(&self.e, we),
            d: widen(&self.d, wd),
            eta: widen(&self.eta, wd),
            n_obs: self.n_obs,
        }
    }

    pub fn m_row(&self, task: TaskKind, index: usize) -> &[f32] {
        let w = task.dim_m();
        &self.m[index * w..(index + 1) * w]
    }

    fn check(&self, task: TaskKind) -> Result<()> {
        let (wm, we, wd) = Self::widths(task, self.n_obs);
        if self.n_obs == 0
            || self.m.len() != self.len * wm
            || self.e.len() != self.len * we
            || self.d.len() != self.len * wd
            || self.eta.len() != self.len * wd
        {
            return Err(invalid(format!("shard with n_obs {} has inconsistent array lengths", self.n_obs)));
        }
        Ok(())
    }
}

impl Dataset {
    pub fn tuple_count(&self) -> usize {
        self.shards.iter().map(|s| s.len).sum()
    }
}

/// Draw one tuple from the stream for `(seed, n_obs, index)`. Parameters
/// and designs are rounded to `f32` before the forward model runs, so
/// stored tuples re-verify exactly.
pub fn generate_tuple(task: &TaskSpec, seed: u64, n_obs: usize, index: u64) -> Result<SampleTuple> {
    let mut rng = stream(seed, &[tag::DATA, n_obs as u64, index]);
    let round = |v: Vec<f64>| -> Vec<f64> { v.into_iter().map(|x| x as f32 as f64).collect() };
    let m = round(task.sample_prior(&mut rng));
    let e = round(task.sample_design(&mut rng, n_obs));
    let obs = task.forward(&m, &e).map_err(|source| Error::TupleFailed {
        index,
        seed,
        source: Box::new(source),
    })?;
    let noise = Normal::new(0.0, obs.noise_sigma.max(0.0)).map_err(|e| invalid(e.to_string()))?;
    let eta: Vec<f64> = obs.values.iter().map(|_| noise.sample(&mut rng) as f32 as f64).collect();
    let d = obs.values.iter().zip(&eta).map(|(f, n)| f + n).collect();
    Ok(SampleTuple {
        m,
        e,
        d,
        eta,
        n_obs,
    })
}

fn worker_count() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Every tuple comes from its own counter-derived stream, so the output
/// does not depend on the number of worker threads.
pub fn generate_dataset(task: &TaskSpec, config: &DataGenConfig) -> Result<Dataset> {
    if config.tuples_per_n == 0 || config.n_obs.is_empty() || config.n_obs.contains(&0) {
        return Err(invalid("tuple counts and observation counts must be positive"));
    }
    let kind = task.kind;
    let mut shards = Vec::with_capacity(config.n_obs.len());
    for &n_obs in &config.n_obs {
        let count = config.tuples_per_n;
        let workers = worker_count().min(count);
        let chunk = count.div_ceil(workers);
        let parts: Vec<Result<Vec<SampleTuple>>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    s.spawn(move || {
                        (w * chunk..((w + 1) * chunk).min(count))
                            .map(|i| generate_tuple(task, config.seed, n_obs, i as u64))
                            .collect()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("generator thread panicked")).collect()
        });
        let (wm, we, wd) = DatasetShard::widths(kind, n_obs);
        let mut shard = DatasetShard {
            n_obs,
            len: count,
            m: Vec::with_capacity(count * wm),
            e: Vec::with_capacity(count * we),
            d: Vec::with_capacity(count * wd),
            eta: Vec::with_capacity(count * wd),
        };
        for part in parts {
            for t in part? {
                shard.m.extend(t.m.iter().map(|&x| x as f32));
                shard.e.extend(t.e.iter().map(|&x| x as f32));
                shard.d.extend(t.d.iter().map(|&x| x as f32));
                shard.eta.extend(t.eta.iter().map(|&x| x as f32));
            }
        }
        log::debug!("generated {count} {} tuples with n_obs = {n_obs}", kind.name());
        shards.push(shard);
    }
    Ok(Dataset { task: kind, shards })
}

/// Recompute `F(m, e)` for a deterministic `fraction` of tuples (at least
/// one per shard) and compare it with `d − η`. Returns the number checked.
pub fn verify_dataset(task: &TaskSpec, data: &Dataset, fraction: f64, seed: u64) -> Result<usize> {
    if task.kind != data.task {
        return Err(invalid(format!(
            "dataset holds {} tuples, task is {}",
            data.task.name(),
            task.kind.name()
        )));
    }
    let mut checked = 0;
    for (s, shard) in data.shards.iter().enumerate() {
        if shard.len == 0 {
            continue;
        }
        let take = ((shard.len as f64 * fraction).ceil() as usize).clamp(1, shard.len);
        let mut order: Vec<usize> = (0..shard.len).collect();
        order.shuffle(&mut stream(seed, &[tag::DATA, s as u64]));
        for &i in &order[..take] {
            let t = shard.tuple(data.task, i);
            let clean = task.forward(&t.m, &t.e)?.values;
            for ((f, d), eta) in clean.iter().zip(&t.d).zip(&t.eta) {
                if (f - (d - eta)).abs() > 1e-6 * f.abs().max(1.0) {
                    return Err(invalid(format!(
                        "tuple {i} of shard n_obs = {} fails re-verification: F = {f}, d − η = {}",
                        shard.n_obs,
                        d - eta
                    )));
                }
            }
            checked += 1;
        }
    }
    Ok(checked)
}

/// A batch of tuple indices from one shard.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub shard: usize,
    pub indices: Vec<usize>,
}

/// Batches for one epoch: each shard is shuffled with a stream keyed by the
/// epoch, cut into `batch_size` pieces (the last may be short) and the
/// shards are visited round-robin until all are exhausted.
pub fn epoch_batches(data: &Dataset, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(invalid("batch size must be at least 1"));
    }
    let per_shard: Vec<Vec<Batch>> = data
        .shards
        .iter()
        .enumerate()
        .map(|(s, shard)| {
            let mut order: Vec<usize> = (0..shard.len).collect();
            order.shuffle(&mut stream(seed, &[tag::SHUFFLE, epoch, s as u64]));
            order
                .chunks(batch_size)
                .map(|c| Batch {
                    shard: s,
                    indices: c.to_vec(),
                })
                .collect()
        })
        .collect();
    let rounds = per_shard.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = Vec::new();
    for r in 0..rounds {
        for batches in &per_shard {
            if let Some(b) = batches.get(r) {
                out.push(b.clone());
            }
        }
    }
    Ok(out)
}

const MAGIC: &[u8; 4] = b"CFMD";
pub const DATASET_VERSION: u32 = 1;

fn write_f32s(w: &mut impl Write, v: &[f32]) -> std::io::Result<()> {
    for x in v {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn save_dataset(data: &Dataset, path: &Path) -> Result<()> {
    for s in &data.shards {
        s.check(data.task)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&[data.task.id()])?;
    w.write_all(&(data.shards.len() as u32).to_le_bytes())?;
    for s in &data.shards {
        w.write_all(&(s.n_obs as u32).to_le_bytes())?;
        w.write_all(&(s.len as u64).to_le_bytes())?;
        write_f32s(&mut w, &s.m)?;
        write_f32s(&mut w, &s.e)?;
        write_f32s(&mut w, &s.d)?;
        write_f32s(&mut w, &s.eta)?;
    }
    w.flush()?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Truncated {
            path: self.path.to_path_buf(),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| invalid("array size overflow"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "CFMD".into(),
        });
    }
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let task_id = r.take(1)?[0];
    let task = TaskKind::from_id(task_id).ok_or_else(|| invalid(format!("unknown task id {task_id}")))?;
    let count = r.u32()?;
    let mut shards = Vec::new();
    for _ in 0..count {
        let n_obs = r.u32()? as usize;
        let len = r.u64()? as usize;
        let (wm, we, wd) = DatasetShard::widths(task, n_obs);
        let shard = DatasetShard {
            n_obs,
            len,
            m: r.f32s(len * wm)?,
            e: r.f32s(len * we)?,
            d: r.f32s(len * wd)?,
            eta: r.f32s(len * wd)?,
        };
        shard.check(task)?;
        shards.push(shard);
    }
    if r.pos != bytes.len() {
        return Err(invalid(format!("{} trailing bytes in {}", bytes.len() - r.pos, path.display())));
    }
    Ok(Dataset { task, shards })
}
