//! Demonstration datasets: expert rollouts stored in a length-prefixed
//! little-endian container with a key=value sidecar.

use std::path::{Path, PathBuf};

use super::{
    expert_episode, Action, EnvConfig, EpisodeRecord, FailureReason, ObservationWindow, Phase, TaskId,
    TorqueHistory, ACTION_DIM, HISTORY, JOINTS, VISUAL_DIM,
};
use crate::error::{Error, Result};
use crate::parallel::{map_indexed, Execution};
use crate::rng::stream_seed;
use crate::store::{atomic_write, ByteReader, ByteWriter};

pub const DATASET_MAGIC: &[u8; 4] = b"CFBD";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task: TaskId,
    pub episodes: Vec<EpisodeRecord>,
}

impl Dataset {
    pub fn total_steps(&self) -> usize {
        self.episodes.iter().map(|e| e.steps_used).sum()
    }
}

/// Path of the sidecar written next to a dataset file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

/// Rolls out the scripted expert on `n` episodes whose seeds derive from
/// `seed`, writes the dataset to `out` (when given) and returns it.
pub fn generate_demos(task: TaskId, n: usize, seed: u64, out: Option<&Path>, exec: Execution) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Invalid("demo count must be >= 1".into()));
    }
    let episodes = map_indexed(exec, n, |i| expert_episode(task, stream_seed(seed, "demo", i as u64)));
    let episodes = episodes.into_iter().collect::<Result<Vec<_>>>()?;
    if let Some(bad) = episodes.iter().find(|e| !e.success) {
        return Err(Error::Invalid(format!(
            "scripted expert failed on {task} episode seed {} ({:?})",
            bad.seed, bad.failure_reason
        )));
    }
    let ds = Dataset { task, episodes };
    if let Some(path) = out {
        write_dataset(path, &ds)?;
        let cfg = EnvConfig::default();
        let mean_steps = ds.total_steps() as f64 / n as f64;
        let meta = format!(
            "format = CFBD\nversion = {DATASET_VERSION}\ntask = {task}\nepisodes = {n}\nseed = {seed}\n\
             visual_dim = {VISUAL_DIM}\njoints = {JOINTS}\nhistory = {HISTORY}\naction_dim = {ACTION_DIM}\n\
             horizon_cap = {}\nsigma_free = {}\ninertial_gain = {}\nmean_steps = {mean_steps:.4}\n",
            cfg.horizon_cap, cfg.sigma_free, cfg.inertial_gain
        );
        atomic_write(&sidecar_path(path), meta.as_bytes())?;
    }
    Ok(ds)
}

fn put_array(w: &mut ByteWriter, name: &str, shape: &[usize], data: impl Iterator<Item = f32>) {
    w.u16(name.len() as u16);
    w.bytes(name.as_bytes());
    w.u8(shape.len() as u8);
    for &d in shape {
        w.u32(d as u32);
    }
    for v in data {
        w.f32(v);
    }
}

pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let mut w = ByteWriter::default();
    w.bytes(DATASET_MAGIC);
    w.u32(DATASET_VERSION);
    w.u32(ds.task.code());
    w.u32(ds.episodes.len() as u32);
    for d in [VISUAL_DIM, JOINTS, HISTORY, ACTION_DIM] {
        w.u32(d as u32);
    }
    for ep in &ds.episodes {
        let mut r = ByteWriter::default();
        let n = ep.steps_used;
        r.u64(ep.seed);
        r.u32(n as u32);
        r.u8(ep.success as u8);
        r.u8(ep.failure_reason.code());
        r.u32(6);
        let obs = &ep.observations;
        put_array(&mut r, "visual", &[n, VISUAL_DIM], obs.iter().flat_map(|o| o.visual.iter().copied()));
        put_array(
            &mut r,
            "torque",
            &[n, JOINTS, HISTORY],
            obs.iter().flat_map(|o| o.torque_history.data.iter().copied()),
        );
        put_array(&mut r, "proprio", &[n, JOINTS], obs.iter().flat_map(|o| o.proprio.iter().copied()));
        put_array(
            &mut r,
            "action",
            &[n, ACTION_DIM],
            ep.actions.iter().flat_map(|a| a.delta.iter().map(|&v| v as f32)),
        );
        put_array(&mut r, "contact", &[n], ep.contact_flags.iter().map(|&c| c as u8 as f32));
        put_array(&mut r, "phase", &[n], ep.phases.iter().map(|p| p.code() as f32));
        let body = r.into_inner();
        w.u64(body.len() as u64);
        w.bytes(&body);
    }
    w.into_inner()
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    atomic_write(path, &encode_dataset(ds))
}

fn get_array(r: &mut ByteReader<'_>, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
    let len = r.u16()? as usize;
    let found = r.bytes(len)?;
    if found != name.as_bytes() {
        return Err(r.corrupt(format!(
            "expected array '{name}', found '{}'",
            String::from_utf8_lossy(found)
        )));
    }
    let ndim = r.u8()? as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(r.u32()? as usize);
    }
    if dims != shape {
        return Err(r.corrupt(format!("array '{name}' has shape {dims:?}, expected {shape:?}")));
    }
    let count: usize = shape.iter().product();
    (0..count).map(|_| r.f32()).collect()
}

pub fn decode_dataset(path: &Path, bytes: &[u8]) -> Result<Dataset> {
    let mut r = ByteReader::new(path, bytes);
    if r.bytes(4).map_err(|_| Error::BadMagic(path.to_path_buf()))? != DATASET_MAGIC {
        return Err(Error::BadMagic(path.to_path_buf()));
    }
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::Version { found: version, expected: DATASET_VERSION });
    }
    let task = TaskId::from_code(r.u32()?).ok_or_else(|| r.corrupt("unknown task code".into()))?;
    let n = r.u32()? as usize;
    let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?];
    if dims != [VISUAL_DIM as u32, JOINTS as u32, HISTORY as u32, ACTION_DIM as u32] {
        return Err(r.corrupt(format!("unsupported dimensions {dims:?}")));
    }
    let mut episodes = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let rec_len = r.u64()? as usize;
        let start = r.position();
        let seed = r.u64()?;
        let steps = r.u32()? as usize;
        let success = r.u8()? != 0;
        let failure_reason = FailureReason::from_code(r.u8()?).ok_or_else(|| r.corrupt("bad failure code".into()))?;
        if r.u32()? != 6 {
            return Err(r.corrupt("unexpected array count".into()));
        }
        let visual = get_array(&mut r, "visual", &[steps, VISUAL_DIM])?;
        let torque = get_array(&mut r, "torque", &[steps, JOINTS, HISTORY])?;
        let proprio = get_array(&mut r, "proprio", &[steps, JOINTS])?;
        let action = get_array(&mut r, "action", &[steps, ACTION_DIM])?;
        let contact = get_array(&mut r, "contact", &[steps])?;
        let phase = get_array(&mut r, "phase", &[steps])?;
        if r.position() - start != rec_len {
            return Err(r.corrupt("episode record length mismatch".into()));
        }
        let observations = (0..steps)
            .map(|i| ObservationWindow {
                visual: visual[i * VISUAL_DIM..(i + 1) * VISUAL_DIM].to_vec(),
                torque_history: TorqueHistory {
                    data: torque[i * JOINTS * HISTORY..(i + 1) * JOINTS * HISTORY].to_vec(),
                },
                proprio: proprio[i * JOINTS..(i + 1) * JOINTS].to_vec(),
            })
            .collect();
        let actions = action
            .chunks_exact(ACTION_DIM)
            .map(|c| Action::new(std::array::from_fn(|k| c[k] as f64)))
            .collect();
        let phases = phase
            .iter()
            .map(|&p| Phase::from_code(p as u8).ok_or_else(|| r.corrupt("bad phase code".into())))
            .collect::<Result<Vec<_>>>()?;
        episodes.push(EpisodeRecord {
            observations,
            actions,
            contact_flags: contact.iter().map(|&c| c != 0.0).collect(),
            phases,
            success,
            failure_reason,
            steps_used: steps,
            seed,
        });
    }
    if !r.is_empty() {
        return Err(r.corrupt("trailing bytes after last episode".into()));
    }
    Ok(Dataset { task, episodes })
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_demos_rejected() {
        let err = generate_demos(TaskId::TwistPull, 0, 0, None, Execution::Sequential).unwrap_err();
        assert!(matches!(err, Error::Invalid(_)));
    }

    #[test]
    fn encode_decode_round_trip() {
        let ds = generate_demos(TaskId::LidOpen, 3, 5, None, Execution::Sequential).unwrap();
        let bytes = encode_dataset(&ds);
        let back = decode_dataset(Path::new("mem"), &bytes).unwrap();
        assert_eq!(back.task, ds.task);
        assert_eq!(back.episodes.len(), 3);
        for (a, b) in back.episodes.iter().zip(&ds.episodes) {
            assert_eq!(a.observations, b.observations);
            assert_eq!(a.contact_flags, b.contact_flags);
            assert_eq!(a.phases, b.phases);
            assert_eq!(a.steps_used, b.steps_used);
            for (x, y) in a.actions.iter().zip(&b.actions) {
                for k in 0..ACTION_DIM {
                    assert_eq!(x.delta[k], y.delta[k] as f32 as f64);
                }
            }
        }
    }

    #[test]
    fn truncated_and_foreign_files_rejected() {
        let ds = generate_demos(TaskId::WeighSort, 1, 0, None, Execution::Sequential).unwrap();
        let bytes = encode_dataset(&ds);
        let p = Path::new("mem");
        assert!(matches!(decode_dataset(p, &bytes[..bytes.len() - 3]), Err(Error::Corrupt { .. })));
        assert!(matches!(decode_dataset(p, b"XXXX0000"), Err(Error::BadMagic(_))));
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(matches!(decode_dataset(p, &v), Err(Error::Version { .. })));
    }
}
