//! On-disk artifacts: preprocessed datasets, training checkpoints, graph
//! and embedding exports, evaluation reports, and epoch logs.
//!
//! The two binary formats are little-endian throughout and carry a magic
//! tag plus a version so stale files fail loudly instead of decoding into
//! garbage. Strings are u32-length-prefixed UTF-8; matrices are u64 row
//! and column counts followed by row-major f64 data.
//!
//! - Dataset files (`PRDT`, version 1) hold the filtered corpus: header
//!   (user count, POI count, temporal slot count, split ratio), then user
//!   ids, POIs, and per-user visit sequences with their training prefix
//!   lengths. Everything the training pipeline consumes round-trips
//!   exactly, so save → load → save is byte-identical.
//! - Checkpoints (`PRCK`, version 1) hold the run configuration (as an
//!   embedded JSON document), the epoch counter, every named parameter
//!   matrix, the full optimizer state, and per-view clustering state.
//!   Restoring against the original dataset resumes training bit-for-bit.
//!
//! All writes go through a temp-file-then-rename so a crash never leaves
//! a half-written artifact behind. Text exports (edge lists, embeddings,
//! reports) are deterministic: fixed orderings, fixed precision.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::ingest::{CheckInSequence, Dataset, Poi, Visit, TEMPORAL_SLOTS};
use crate::model::{EpochLog, Model};
use crate::structure::PrototypeSet;
use crate::tensor::Matrix;

const DATASET_MAGIC: &[u8; 4] = b"PRDT";
const DATASET_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &[u8; 4] = b"PRCK";
const CHECKPOINT_VERSION: u32 = 1;

/// Upper bound on any length field read from disk, to keep a corrupt
/// header from requesting an absurd allocation.
const MAX_LEN: u64 = 1 << 32;

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Writes `emit`'s output to `path` via a sibling temp file and rename,
/// so readers never observe a partial artifact.
fn atomic_write(path: &Path, emit: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut w = BufWriter::new(File::create(&tmp)?);
    emit(&mut w)?;
    w.flush()?;
    drop(w);
    fs::rename(&tmp, path)?;
    Ok(())
}

fn write_string<W: Write>(w: &mut W, s: &str) -> Result<()> {
    let bytes = s.as_bytes();
    w.write_u32::<LittleEndian>(bytes.len() as u32)?;
    w.write_all(bytes)?;
    Ok(())
}

fn read_string<R: Read>(r: &mut R, path: &Path) -> Result<String> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| format_err(path, "non-UTF-8 string"))
}

fn read_len<R: Read>(r: &mut R, path: &Path, what: &str) -> Result<usize> {
    let len = r.read_u64::<LittleEndian>()?;
    if len > MAX_LEN {
        return Err(format_err(path, format!("implausible {what} count {len}")));
    }
    Ok(len as usize)
}

fn write_matrix<W: Write>(w: &mut W, m: &Matrix) -> Result<()> {
    w.write_u64::<LittleEndian>(m.nrows() as u64)?;
    w.write_u64::<LittleEndian>(m.ncols() as u64)?;
    for &v in m.iter() {
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_matrix<R: Read>(r: &mut R, path: &Path) -> Result<Matrix> {
    let rows = read_len(r, path, "matrix row")?;
    let cols = read_len(r, path, "matrix column")?;
    let n = rows
        .checked_mul(cols)
        .filter(|&n| (n as u64) <= MAX_LEN)
        .ok_or_else(|| format_err(path, "implausible matrix size"))?;
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(r.read_f64::<LittleEndian>()?);
    }
    Matrix::from_shape_vec((rows, cols), data)
        .map_err(|_| format_err(path, "matrix shape/data mismatch"))
}

fn check_header<R: Read>(r: &mut R, path: &Path, magic: &[u8; 4], version: u32) -> Result<()> {
    let mut tag = [0u8; 4];
    r.read_exact(&mut tag)?;
    if &tag != magic {
        return Err(format_err(
            path,
            format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&tag),
                String::from_utf8_lossy(magic)
            ),
        ));
    }
    let got = r.read_u32::<LittleEndian>()?;
    if got != version {
        return Err(format_err(
            path,
            format!("unsupported version {got}, expected {version}"),
        ));
    }
    Ok(())
}

/// Saves a filtered (and possibly split) corpus. The header carries the
/// corpus dimensions, the temporal slot count, and the split ratio so the
/// file is self-describing.
pub fn save_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    atomic_write(path, |w| {
        w.write_all(DATASET_MAGIC)?;
        w.write_u32::<LittleEndian>(DATASET_VERSION)?;
        w.write_u64::<LittleEndian>(dataset.user_count() as u64)?;
        w.write_u64::<LittleEndian>(dataset.poi_count() as u64)?;
        w.write_u32::<LittleEndian>(TEMPORAL_SLOTS as u32)?;
        w.write_f64::<LittleEndian>(dataset.split_ratio)?;
        for user in &dataset.users {
            write_string(w, user)?;
        }
        for poi in &dataset.pois {
            write_string(w, &poi.id)?;
            w.write_f64::<LittleEndian>(poi.latitude)?;
            w.write_f64::<LittleEndian>(poi.longitude)?;
        }
        for (seq, &train_len) in dataset.sequences.iter().zip(&dataset.train_len) {
            w.write_u64::<LittleEndian>(train_len as u64)?;
            w.write_u64::<LittleEndian>(seq.visits.len() as u64)?;
            for v in &seq.visits {
                w.write_u64::<LittleEndian>(v.poi as u64)?;
                w.write_i64::<LittleEndian>(v.timestamp)?;
            }
        }
        Ok(())
    })
}

/// Loads a dataset file, validating the header and every index.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::file(path, e))?);
    check_header(&mut r, path, DATASET_MAGIC, DATASET_VERSION)?;
    let users_n = read_len(&mut r, path, "user")?;
    let pois_n = read_len(&mut r, path, "POI")?;
    let slots = r.read_u32::<LittleEndian>()? as usize;
    if slots != TEMPORAL_SLOTS {
        return Err(format_err(
            path,
            format!("file uses {slots} temporal slots, this build expects {TEMPORAL_SLOTS}"),
        ));
    }
    let split_ratio = r.read_f64::<LittleEndian>()?;
    if !(0.0..=1.0).contains(&split_ratio) {
        return Err(format_err(path, format!("split ratio {split_ratio}")));
    }

    let mut users = Vec::with_capacity(users_n);
    for _ in 0..users_n {
        users.push(read_string(&mut r, path)?);
    }
    let mut pois = Vec::with_capacity(pois_n);
    for _ in 0..pois_n {
        pois.push(Poi {
            id: read_string(&mut r, path)?,
            latitude: r.read_f64::<LittleEndian>()?,
            longitude: r.read_f64::<LittleEndian>()?,
        });
    }
    let mut sequences = Vec::with_capacity(users_n);
    let mut train_len = Vec::with_capacity(users_n);
    for user in 0..users_n {
        let t = read_len(&mut r, path, "train prefix")?;
        let visits_n = read_len(&mut r, path, "visit")?;
        if t > visits_n {
            return Err(format_err(
                path,
                format!("user {user}: train prefix {t} exceeds {visits_n} visits"),
            ));
        }
        let mut visits = Vec::with_capacity(visits_n);
        for _ in 0..visits_n {
            let poi = read_len(&mut r, path, "POI index")?;
            let timestamp = r.read_i64::<LittleEndian>()?;
            if poi >= pois_n {
                return Err(format_err(
                    path,
                    format!("user {user}: POI index {poi} out of range {pois_n}"),
                ));
            }
            visits.push(Visit { poi, timestamp });
        }
        sequences.push(CheckInSequence { user, visits });
        train_len.push(t);
    }
    Ok(Dataset {
        users,
        pois,
        sequences,
        train_len,
        split_ratio,
    })
}

/// Everything a training run needs to continue exactly where it stopped.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Epochs already completed.
    pub epoch: usize,
    /// Named parameter values, in registration order.
    pub params: Vec<(String, Matrix)>,
    /// Adam first moments, aligned with `params`.
    pub adam_m: Vec<Matrix>,
    /// Adam second moments, aligned with `params`.
    pub adam_v: Vec<Matrix>,
    /// Adam step counter.
    pub adam_t: u64,
    /// Per-view clustering state, absent where the prototype level is off.
    pub prototypes: Vec<Option<PrototypeSet>>,
}

impl Checkpoint {
    /// Snapshots a model's mutable state.
    pub fn of(model: &Model) -> Checkpoint {
        let (m, v, t) = model.adam.state();
        Checkpoint {
            config: model.config.clone(),
            epoch: model.epoch,
            params: model
                .store
                .iter()
                .map(|(name, value)| (name.to_string(), value.clone()))
                .collect(),
            adam_m: m.to_vec(),
            adam_v: v.to_vec(),
            adam_t: t,
            prototypes: model.prototypes.clone(),
        }
    }

    /// Rebuilds a model from this checkpoint against the dataset it was
    /// trained on. The parameter layout is reconstructed from the stored
    /// configuration and must match the stored names and shapes exactly.
    pub fn into_model(self, dataset: &Dataset) -> Result<Model> {
        let mut model = Model::new(self.config, dataset)?;
        if model.store.len() != self.params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters, layout expects {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for (i, (name, value)) in self.params.into_iter().enumerate() {
            let id = crate::optim::ParamId(i);
            if model.store.name(id) != name {
                return Err(Error::Config(format!(
                    "checkpoint parameter {i} is {name:?}, layout expects {:?}",
                    model.store.name(id)
                )));
            }
            if model.store.value(id).dim() != value.dim() {
                return Err(Error::Config(format!(
                    "checkpoint parameter {name:?} has shape {:?}, layout expects {:?}",
                    value.dim(),
                    model.store.value(id).dim()
                )));
            }
            model.store.set(id, value);
        }
        model.adam.restore(self.adam_m, self.adam_v, self.adam_t);
        if self.prototypes.len() != model.prototypes.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} views, layout expects {}",
                self.prototypes.len(),
                model.prototypes.len()
            )));
        }
        model.prototypes = self.prototypes;
        model.epoch = self.epoch;
        Ok(model)
    }
}

/// Saves a checkpoint of the model's current state.
pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    let ckpt = Checkpoint::of(model);
    let config_json = serde_json::to_string(&ckpt.config)
        .map_err(|e| Error::Config(format!("config serialization: {e}")))?;
    atomic_write(path, |w| {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        write_string(w, &config_json)?;
        w.write_u64::<LittleEndian>(ckpt.epoch as u64)?;
        w.write_u64::<LittleEndian>(ckpt.params.len() as u64)?;
        for (name, value) in &ckpt.params {
            write_string(w, name)?;
            write_matrix(w, value)?;
        }
        w.write_u64::<LittleEndian>(ckpt.adam_t)?;
        for m in &ckpt.adam_m {
            write_matrix(w, m)?;
        }
        for v in &ckpt.adam_v {
            write_matrix(w, v)?;
        }
        w.write_u64::<LittleEndian>(ckpt.prototypes.len() as u64)?;
        for proto in &ckpt.prototypes {
            match proto {
                None => w.write_u8(0)?,
                Some(p) => {
                    w.write_u8(1)?;
                    write_matrix(w, &p.centroids)?;
                    w.write_u64::<LittleEndian>(p.assignments.len() as u64)?;
                    for &a in &p.assignments {
                        w.write_u64::<LittleEndian>(a as u64)?;
                    }
                }
            }
        }
        Ok(())
    })
}

/// Loads a checkpoint. Pair with [`Checkpoint::into_model`] to resume.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::file(path, e))?);
    check_header(&mut r, path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let config_json = read_string(&mut r, path)?;
    let config: RunConfig = serde_json::from_str(&config_json)
        .map_err(|e| format_err(path, format!("embedded config: {e}")))?;
    let epoch = read_len(&mut r, path, "epoch")?;
    let params_n = read_len(&mut r, path, "parameter")?;
    let mut params = Vec::with_capacity(params_n);
    for _ in 0..params_n {
        let name = read_string(&mut r, path)?;
        let value = read_matrix(&mut r, path)?;
        params.push((name, value));
    }
    let adam_t = r.read_u64::<LittleEndian>()?;
    let mut adam_m = Vec::with_capacity(params_n);
    for _ in 0..params_n {
        adam_m.push(read_matrix(&mut r, path)?);
    }
    let mut adam_v = Vec::with_capacity(params_n);
    for _ in 0..params_n {
        adam_v.push(read_matrix(&mut r, path)?);
    }
    let views_n = read_len(&mut r, path, "view")?;
    let mut prototypes = Vec::with_capacity(views_n);
    for _ in 0..views_n {
        match r.read_u8()? {
            0 => prototypes.push(None),
            1 => {
                let centroids = read_matrix(&mut r, path)?;
                let n = read_len(&mut r, path, "assignment")?;
                let mut assignments = Vec::with_capacity(n);
                for _ in 0..n {
                    let a = read_len(&mut r, path, "cluster index")?;
                    if a >= centroids.nrows() {
                        return Err(format_err(
                            path,
                            format!("assignment {a} out of range {}", centroids.nrows()),
                        ));
                    }
                    assignments.push(a);
                }
                prototypes.push(Some(PrototypeSet {
                    centroids,
                    assignments,
                }));
            }
            other => return Err(format_err(path, format!("bad prototype tag {other}"))),
        }
    }
    Ok(Checkpoint {
        config,
        epoch,
        params,
        adam_m,
        adam_v,
        adam_t,
        prototypes,
    })
}

/// Writes an adjacency matrix as a sorted edge list: one `src\tdst\tweight`
/// line per structural nonzero, (src, dst) ascending, weights at fixed
/// 6-decimal precision. Returns the number of edges written.
pub fn export_edge_list(path: &Path, adjacency: &Matrix) -> Result<usize> {
    let mut count = 0;
    atomic_write(path, |w| {
        for ((i, j), &v) in adjacency.indexed_iter() {
            if v != 0.0 {
                writeln!(w, "{i}\t{j}\t{v:.6}")?;
                count += 1;
            }
        }
        Ok(())
    })?;
    Ok(count)
}

/// Writes one embedding row per line, tab-separated, 6-decimal precision.
pub fn export_embeddings(path: &Path, embeddings: &Matrix) -> Result<()> {
    atomic_write(path, |w| {
        for row in embeddings.rows() {
            let line = row
                .iter()
                .map(|v| format!("{v:.6}"))
                .collect::<Vec<_>>()
                .join("\t");
            writeln!(w, "{line}")?;
        }
        Ok(())
    })
}

/// The machine-readable evaluation artifact, keyed by run id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub config: RunConfig,
    pub report: crate::eval::EvalReport,
}

fn write_metric_block(w: &mut impl Write, prefix: &str, m: &crate::eval::MetricSet) -> Result<()> {
    for (k, v) in &m.acc_at {
        writeln!(w, "{prefix}acc@{k}\t{v:.6}")?;
    }
    writeln!(w, "{prefix}mrr\t{:.6}", m.mrr)?;
    Ok(())
}

/// Writes `<run_id>.json` (machine-readable) and `<run_id>.txt` (one
/// metric per line) into `dir`. Returns the JSON path.
pub fn write_report(
    dir: &Path,
    run_id: &str,
    config: &RunConfig,
    report: &crate::eval::EvalReport,
) -> Result<std::path::PathBuf> {
    fs::create_dir_all(dir)?;
    let json_path = dir.join(format!("{run_id}.json"));
    let artifact = RunReport {
        run_id: run_id.to_string(),
        config: config.clone(),
        report: report.clone(),
    };
    let body = serde_json::to_string_pretty(&artifact)
        .map_err(|e| Error::Config(format!("report serialization: {e}")))?;
    atomic_write(&json_path, |w| {
        writeln!(w, "{body}")?;
        Ok(())
    })?;

    let text_path = dir.join(format!("{run_id}.txt"));
    atomic_write(&text_path, |w| {
        writeln!(w, "run\t{run_id}")?;
        writeln!(w, "samples\t{}", report.sample_count)?;
        write_metric_block(w, "", &report.metrics)?;
        writeln!(w, "new-samples\t{}", report.n2_sample_count)?;
        match &report.n2 {
            Some(m) => write_metric_block(w, "new-", m)?,
            None => writeln!(w, "new-metrics\tundefined")?,
        }
        Ok(())
    })?;
    Ok(json_path)
}

/// Appends one JSON line per epoch to the run's log file.
pub fn append_epoch_logs(path: &Path, logs: &[EpochLog]) -> Result<()> {
    let mut file = fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut buf = String::new();
    for log in logs {
        let line = serde_json::to_string(log)
            .map_err(|e| Error::Config(format!("epoch log serialization: {e}")))?;
        buf.push_str(&line);
        buf.push('\n');
    }
    file.write_all(buf.as_bytes())?;
    Ok(())
}
