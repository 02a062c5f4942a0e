//! Skeleton-sequence datasets: a synthetic generator for desk-scale
//! experiments, a JSONL adapter for external data, node-signal extraction
//! and anatomical adjacency construction.
//!
//! # JSONL format
//!
//! The first line is a header object, every following line one sequence:
//!
//! ```text
//! {"kind":"skeleton-dataset","version":1,"classes":8,"joints":15,"topology":[[0,1],[1,2]]}
//! {"label":3,"joints":15,"coords":[[[x,y,z], ... T frames], ... J joints]}
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("line {line}: label {label} outside the {classes} declared classes")]
    BadLabel {
        line: usize,
        label: usize,
        classes: usize,
    },
    #[error("line {line}: sequence has {got} joints, header declares {want}")]
    InconsistentJoints { line: usize, got: usize, want: usize },
    #[error("dataset is empty")]
    Empty,
    #[error("sequence has no frames")]
    DegenerateSequence,
    #[error("topology edge ({a}, {b}) references a joint outside 0..{joints}")]
    BadEdge { a: usize, b: usize, joints: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// One labeled skeleton sequence: `J x T x 3` joint trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSequence {
    pub label: usize,
    /// `coords[j][t]` is the 3D position of joint `j` at raw frame `t`.
    pub coords: Vec<Vec<[f64; 3]>>,
}

impl SkeletonSequence {
    pub fn joints(&self) -> usize {
        self.coords.len()
    }

    pub fn frames(&self) -> usize {
        self.coords.first().map_or(0, Vec::len)
    }
}

/// A labeled collection of sequences with an anatomical edge list and a
/// fixed train/test split.
#[derive(Debug, Clone)]
pub struct SkeletonDataset {
    pub sequences: Vec<SkeletonSequence>,
    pub n_classes: usize,
    pub joints: usize,
    pub topology: Vec<(usize, usize)>,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

impl SkeletonDataset {
    pub fn train_len(&self) -> usize {
        self.train_idx.len()
    }

    pub fn test_len(&self) -> usize {
        self.test_idx.len()
    }
}

/// Fraction of each class routed to the training split.
const TRAIN_FRACTION: f64 = 0.7;

/// Stratified split: per class, the first `round(0.7 * count)` sequences
/// (in dataset order) go to train, the rest to test.
fn stratified_split(labels: &[usize], n_classes: usize) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in 0..n_classes {
        let members: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect();
        let n_train = (TRAIN_FRACTION * members.len() as f64).round() as usize;
        train.extend_from_slice(&members[..n_train.min(members.len())]);
        test.extend_from_slice(&members[n_train.min(members.len())..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Chain topology `(0,1), (1,2), ...` used by the synthetic generator.
pub fn chain_topology(joints: usize) -> Vec<(usize, usize)> {
    (0..joints.saturating_sub(1)).map(|j| (j, j + 1)).collect()
}

/// Generates a deterministic synthetic dataset: class `k` drives a chain
/// skeleton with class-specific sinusoidal frequency and phase plus seeded
/// noise, stratified 70/30 into train/test.
pub fn generate_synthetic(
    n_classes: usize,
    samples_per_class: usize,
    joints: usize,
    frames: usize,
    seed: u64,
) -> SkeletonDataset {
    assert!(n_classes >= 1 && samples_per_class >= 1 && joints >= 1 && frames >= 1);
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut sequences = Vec::with_capacity(n_classes * samples_per_class);
    for class in 0..n_classes {
        let freq = 1.0 + 0.5 * class as f64;
        let phase = class as f64 * std::f64::consts::FRAC_PI_4;
        for _ in 0..samples_per_class {
            let jitter: f64 = rng.random_range(-0.3..0.3);
            let mut coords = Vec::with_capacity(joints);
            for j in 0..joints {
                let base = j as f64 / joints as f64;
                let mut traj = Vec::with_capacity(frames);
                for t in 0..frames {
                    let u = t as f64 / frames as f64;
                    let arg = 2.0 * std::f64::consts::PI * freq * u + phase + 0.3 * j as f64 + jitter;
                    let noise = |r: &mut ChaCha8Rng| r.random_range(-0.05..0.05);
                    traj.push([
                        base + 0.5 * arg.sin() + noise(&mut rng),
                        0.5 * arg.cos() + noise(&mut rng),
                        0.25 * (2.0 * arg).sin() + noise(&mut rng),
                    ]);
                }
                coords.push(traj);
            }
            sequences.push(SkeletonSequence { label: class, coords });
        }
    }

    let labels: Vec<usize> = sequences.iter().map(|s| s.label).collect();
    let (train_idx, test_idx) = stratified_split(&labels, n_classes);
    SkeletonDataset {
        sequences,
        n_classes,
        joints,
        topology: chain_topology(joints),
        train_idx,
        test_idx,
    }
}

/// Resamples a sequence to `target_frames` by uniform linear interpolation
/// and lays it out as a `(3 * target_frames) x joints` node-signal tensor.
/// Node `u`'s channel column is `(x_1, y_1, z_1, x_2, y_2, z_2, ...)`.
pub fn to_node_signal(seq: &SkeletonSequence, target_frames: usize) -> Result<Tensor, DataError> {
    assert!(target_frames >= 1);
    let raw = seq.frames();
    if raw == 0 {
        return Err(DataError::DegenerateSequence);
    }
    let joints = seq.joints();
    let s = 3 * target_frames;
    let mut data = vec![0.0; s * joints];
    for (j, traj) in seq.coords.iter().enumerate() {
        for t in 0..target_frames {
            let pos = if target_frames == 1 {
                0.0
            } else {
                t as f64 * (raw - 1) as f64 / (target_frames - 1) as f64
            };
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(raw - 1);
            let frac = pos - lo as f64;
            for axis in 0..3 {
                let v = traj[lo][axis] * (1.0 - frac) + traj[hi][axis] * frac;
                data[(3 * t + axis) * joints + j] = v;
            }
        }
    }
    Ok(Tensor::new(vec![s, joints], data)?)
}

/// Symmetric 0/1 adjacency with self-loops from an edge list.
pub fn skeleton_adjacency(topology: &[(usize, usize)], joints: usize) -> Result<Tensor, DataError> {
    let mut data = vec![0.0; joints * joints];
    for j in 0..joints {
        data[j * joints + j] = 1.0;
    }
    for &(a, b) in topology {
        if a >= joints || b >= joints {
            return Err(DataError::BadEdge { a, b, joints });
        }
        data[a * joints + b] = 1.0;
        data[b * joints + a] = 1.0;
    }
    Ok(Tensor::new(vec![joints, joints], data)?)
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    kind: String,
    version: u32,
    classes: usize,
    joints: usize,
    topology: Vec<(usize, usize)>,
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    label: usize,
    joints: usize,
    coords: Vec<Vec<[f64; 3]>>,
}

/// Writes a dataset in the JSONL format documented at the top of this
/// module.
pub fn save_skeleton_jsonl(ds: &SkeletonDataset, path: &Path) -> Result<(), DataError> {
    let mut out = BufWriter::new(File::create(path)?);
    let header = HeaderLine {
        kind: "skeleton-dataset".into(),
        version: 1,
        classes: ds.n_classes,
        joints: ds.joints,
        topology: ds.topology.clone(),
    };
    writeln!(out, "{}", serde_json::to_string(&header).expect("header serializes"))?;
    for seq in &ds.sequences {
        let record = RecordLine {
            label: seq.label,
            joints: seq.joints(),
            coords: seq.coords.clone(),
        };
        writeln!(out, "{}", serde_json::to_string(&record).expect("record serializes"))?;
    }
    Ok(())
}

/// Loads a JSONL dataset, validates it, derives the stratified split, and
/// optionally normalizes each joint axis to zero mean / unit scale using
/// statistics from the training split only.
pub fn load_skeleton_jsonl(path: &Path, normalize: bool) -> Result<SkeletonDataset, DataError> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines().enumerate();

    let header: HeaderLine = match lines.next() {
        None => return Err(DataError::Empty),
        Some((_, line)) => {
            let line = line?;
            serde_json::from_str(&line).map_err(|e| DataError::Parse {
                line: 1,
                message: format!("bad header: {e}"),
            })?
        }
    };
    if header.kind != "skeleton-dataset" || header.version != 1 {
        return Err(DataError::Schema(format!(
            "unsupported header kind `{}` version {}",
            header.kind, header.version
        )));
    }
    for &(a, b) in &header.topology {
        if a >= header.joints || b >= header.joints {
            return Err(DataError::BadEdge {
                a,
                b,
                joints: header.joints,
            });
        }
    }

    let mut sequences = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RecordLine = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if record.label >= header.classes {
            return Err(DataError::BadLabel {
                line: lineno,
                label: record.label,
                classes: header.classes,
            });
        }
        if record.joints != header.joints || record.coords.len() != header.joints {
            return Err(DataError::InconsistentJoints {
                line: lineno,
                got: record.coords.len(),
                want: header.joints,
            });
        }
        let frames = record.coords.first().map_or(0, Vec::len);
        if frames == 0 {
            return Err(DataError::Parse {
                line: lineno,
                message: "sequence has no frames".into(),
            });
        }
        for traj in &record.coords {
            if traj.len() != frames {
                return Err(DataError::Parse {
                    line: lineno,
                    message: "ragged frame counts across joints".into(),
                });
            }
            if traj.iter().flatten().any(|v| !v.is_finite()) {
                return Err(DataError::Parse {
                    line: lineno,
                    message: "non-finite coordinate".into(),
                });
            }
        }
        sequences.push(SkeletonSequence {
            label: record.label,
            coords: record.coords,
        });
    }
    if sequences.is_empty() {
        return Err(DataError::Empty);
    }

    let labels: Vec<usize> = sequences.iter().map(|s| s.label).collect();
    let (train_idx, test_idx) = stratified_split(&labels, header.classes);
    let mut ds = SkeletonDataset {
        sequences,
        n_classes: header.classes,
        joints: header.joints,
        topology: header.topology,
        train_idx,
        test_idx,
    };
    if normalize {
        normalize_per_joint(&mut ds);
    }
    Ok(ds)
}

/// Zero-mean / unit-scale per joint axis; statistics come from the training
/// split only and are applied to every sequence.
fn normalize_per_joint(ds: &mut SkeletonDataset) {
    let joints = ds.joints;
    let mut mean = vec![[0.0f64; 3]; joints];
    let mut count = 0usize;
    for &i in &ds.train_idx {
        for (j, traj) in ds.sequences[i].coords.iter().enumerate() {
            for p in traj {
                for axis in 0..3 {
                    mean[j][axis] += p[axis];
                }
            }
        }
        count += ds.sequences[i].frames();
    }
    if count == 0 {
        return;
    }
    for m in &mut mean {
        for axis in 0..3 {
            m[axis] /= count as f64;
        }
    }
    let mut var = vec![[0.0f64; 3]; joints];
    for &i in &ds.train_idx {
        for (j, traj) in ds.sequences[i].coords.iter().enumerate() {
            for p in traj {
                for axis in 0..3 {
                    let d = p[axis] - mean[j][axis];
                    var[j][axis] += d * d;
                }
            }
        }
    }
    let scale: Vec<[f64; 3]> = var
        .iter()
        .map(|v| {
            let mut s = [1.0; 3];
            for axis in 0..3 {
                let sd = (v[axis] / count as f64).sqrt();
                s[axis] = if sd > 1e-9 { sd } else { 1.0 };
            }
            s
        })
        .collect();
    for seq in &mut ds.sequences {
        for (j, traj) in seq.coords.iter_mut().enumerate() {
            for p in traj {
                for axis in 0..3 {
                    p[axis] = (p[axis] - mean[j][axis]) / scale[j][axis];
                }
            }
        }
    }
}
