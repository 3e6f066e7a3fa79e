//! `CFMT` checkpoint files.
//!
//! Layout, little-endian: magic `CFMT`, `u32` version, `u8` task id, the
//! network config, the training cursor and seed, then named `f32` arrays
//! (`u16` name length, name, `u8` rank, `u32` dims, data). Optimizer
//! moments are stored as arrays named `adam.m.<param>` and `adam.v.<param>`.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use cfm_core::cfm::TrainCursor;
use cfm_core::net::{Arch, NetConfig, VelocityNet};
use cfm_core::TaskKind;
use cfm_tensor::{AdamConfig, AdamState, Tensor};

use crate::CliError;

pub const MAGIC: [u8; 4] = *b"CFMT";
pub const VERSION: u32 = 1;

/// Everything needed to resume training bit-for-bit: the per-tuple random
/// streams are keyed by `(seed, epoch, shard, index)`, so the seed and the
/// cursor are the complete generator state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub task: TaskKind,
    pub net: VelocityNet,
    pub adam: Option<AdamState>,
    pub cursor: TrainCursor,
    pub seed: u64,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn array(&mut self, name: &str, t: &Tensor<f32>) {
        self.u16(name.len() as u16);
        self.0.extend_from_slice(name.as_bytes());
        self.u8(t.shape().len() as u8);
        for &d in t.shape() {
            self.u32(d);
        }
        for v in t.data() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CliError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CliError::Truncated)?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn arr<const N: usize>(&mut self) -> Result<[u8; N], CliError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8, CliError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, CliError> {
        Ok(u16::from_le_bytes(self.arr()?))
    }
    fn u32(&mut self) -> Result<usize, CliError> {
        Ok(u32::from_le_bytes(self.arr()?) as usize)
    }
    fn u64(&mut self) -> Result<u64, CliError> {
        Ok(u64::from_le_bytes(self.arr()?))
    }
    fn f64(&mut self) -> Result<f64, CliError> {
        Ok(f64::from_le_bytes(self.arr()?))
    }
    fn array(&mut self) -> Result<(String, Tensor<f32>), CliError> {
        let len = self.u16()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| CliError::Malformed("parameter name is not UTF-8".into()))?;
        let rank = self.u8()? as usize;
        let shape = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>, _>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| CliError::Malformed(format!("shape of {name} overflows")))?;
        let bytes = self.take(numel.checked_mul(4).ok_or(CliError::Truncated)?)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        Ok((name, Tensor::new(&shape, data)?))
    }
}

fn write_config(w: &mut Writer, c: &NetConfig) {
    w.u8(c.arch.id());
    for v in [c.n_emb, c.n_head, c.n_layer, c.dim_m, c.obs_token_dim, c.design_token_dim] {
        w.u32(v);
    }
    w.f64(c.rope_base);
    w.f64(c.time_scale);
    for v in [c.mlp_hidden, c.mlp_layers, c.mlp_n_obs] {
        w.u32(v);
    }
}

fn read_config(r: &mut Reader) -> Result<NetConfig, CliError> {
    let arch = r.u8()?;
    let arch = Arch::from_id(arch).ok_or_else(|| CliError::Malformed(format!("unknown architecture id {arch}")))?;
    Ok(NetConfig {
        arch,
        n_emb: r.u32()?,
        n_head: r.u32()?,
        n_layer: r.u32()?,
        dim_m: r.u32()?,
        obs_token_dim: r.u32()?,
        design_token_dim: r.u32()?,
        rope_base: r.f64()?,
        time_scale: r.f64()?,
        mlp_hidden: r.u32()?,
        mlp_layers: r.u32()?,
        mlp_n_obs: r.u32()?,
    })
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(&MAGIC);
    w.u32(VERSION as usize);
    w.u8(ck.task.id());
    write_config(&mut w, &ck.net.config);
    w.u64(ck.cursor.step);
    w.u64(ck.cursor.epoch);
    w.u64(ck.cursor.batch);
    w.u64(ck.seed);
    w.u64(ck.adam.as_ref().map_or(0, AdamState::step_count));
    let names = &ck.net.names;
    let arrays = names.len() * if ck.adam.is_some() { 3 } else { 1 };
    w.u32(arrays);
    for (name, p) in names.iter().zip(&ck.net.params) {
        w.array(name, p);
    }
    if let Some(adam) = &ck.adam {
        for (prefix, moments) in [("adam.m.", adam.first_moments()), ("adam.v.", adam.second_moments())] {
            for (name, t) in names.iter().zip(moments) {
                w.array(&format!("{prefix}{name}"), t);
            }
        }
    }
    w.0
}

pub fn decode(bytes: &[u8], adam_config: AdamConfig) -> Result<Checkpoint, CliError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.arr()?;
    if magic != MAGIC {
        return Err(CliError::BadMagic(magic));
    }
    let version = u32::from_le_bytes(r.arr()?);
    if version != VERSION {
        return Err(CliError::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let task_id = r.u8()?;
    let task = TaskKind::from_id(task_id).ok_or_else(|| CliError::Malformed(format!("unknown task id {task_id}")))?;
    let config = read_config(&mut r)?;
    let cursor = TrainCursor {
        step: r.u64()?,
        epoch: r.u64()?,
        batch: r.u64()?,
    };
    let seed = r.u64()?;
    let adam_step = r.u64()?;
    let count = r.u32()?;
    let mut seen = HashSet::new();
    let mut params = Vec::new();
    let (mut first, mut second) = (Vec::new(), Vec::new());
    for _ in 0..count {
        let (name, t) = r.array()?;
        if !seen.insert(name.clone()) {
            return Err(CliError::NameCollision(name));
        }
        if let Some(p) = name.strip_prefix("adam.m.") {
            first.push((p.to_string(), t));
        } else if let Some(p) = name.strip_prefix("adam.v.") {
            second.push((p.to_string(), t));
        } else {
            params.push((name, t));
        }
    }
    if r.pos != bytes.len() {
        return Err(CliError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let net = VelocityNet::from_parts(config, params)?;
    let adam = if first.is_empty() && second.is_empty() {
        None
    } else {
        let ordered = |moments: Vec<(String, Tensor<f32>)>| -> Result<Vec<Tensor<f32>>, CliError> {
            let mut map: std::collections::HashMap<_, _> = moments.into_iter().collect();
            net.names
                .iter()
                .map(|n| map.remove(n).ok_or_else(|| CliError::Malformed(format!("missing optimizer moment for {n}"))))
                .collect()
        };
        Some(AdamState::from_parts(adam_config, adam_step, ordered(first)?, ordered(second)?)?)
    };
    Ok(Checkpoint {
        task,
        net,
        adam,
        cursor,
        seed,
    })
}

/// Write atomically through a sibling temporary file.
pub fn save(ck: &Checkpoint, path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let tmp = path.with_extension("cfmt.tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| CliError::io(&tmp, e))?;
    f.write_all(&encode(ck)).map_err(|e| CliError::io(&tmp, e))?;
    f.sync_all().map_err(|e| CliError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

pub fn load(path: &Path, adam_config: AdamConfig) -> Result<Checkpoint, CliError> {
    if !path.exists() {
        return Err(CliError::CheckpointNotFound(path.to_path_buf()));
    }
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes, adam_config)
}
