//! Files: JSON checkpoints, CSV datasets, constraint matrices and metrics.
//!
//! Every write goes to a temporary sibling that is renamed into place.
//! Metric bodies are a pure function of the computation; wall-clock data
//! lives only in `*.meta.json` sidecars.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::bregman::SigmoidFamily;
use crate::constraints::ConstraintSet;
use crate::dual::{DualModel, LagrangeLayer};
use crate::error::{Error, Result};
use crate::experiment::{AggregateEpoch, EpochStats, RunSummary, XorSample};
use crate::network::{Activation, DenseLayer, Mlp};

pub const CHECKPOINT_FORMAT: &str = "lagrange-units-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

pub const BASE_CHECKPOINT: &str = "base_checkpoint.json";
pub const CONSTRAINTS_CSV: &str = "constraints.csv";
pub const DATASET_CSV: &str = "dataset.csv";
pub const AGGREGATE_CSV: &str = "aggregate.csv";

pub fn run_epochs_csv(seed: u64) -> String {
    format!("run_{seed}_epochs.csv")
}

pub fn run_summary_json(seed: u64) -> String {
    format!("run_{seed}_summary.json")
}

pub fn run_checkpoint_json(seed: u64) -> String {
    format!("run_{seed}_trunk.json")
}

/// Writes `bytes` to a temporary file beside `path`, then renames it.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Data(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        use std::io::Write;
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".meta.json");
    path.with_file_name(name)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    written_unix_secs: u64,
    wall_clock_secs: f64,
}

fn write_sidecar(path: &Path, wall_clock_secs: f64) -> Result<()> {
    let written_unix_secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let meta = Sidecar {
        written_unix_secs,
        wall_clock_secs,
    };
    write_atomic(&sidecar_path(path), serde_json::to_string_pretty(&meta)?.as_bytes())
}

// ---------------------------------------------------------------- checkpoints

/// Row-major matrix with explicit shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MatrixRecord {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl MatrixRecord {
    fn from_matrix(m: &DMatrix<f64>) -> Self {
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.transpose().as_slice().to_vec(),
        }
    }

    fn into_matrix(self) -> Result<DMatrix<f64>> {
        if self.rows.checked_mul(self.cols) != Some(self.data.len()) {
            return Err(Error::Data(format!(
                "matrix record declares {}x{} but holds {} values",
                self.rows,
                self.cols,
                self.data.len()
            )));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerRecord {
    weights: MatrixRecord,
    bias: Vec<f64>,
    activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LagrangeRecord {
    family: SigmoidFamily,
    constraints: MatrixRecord,
    rhs: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum Body {
    Mlp {
        layers: Vec<LayerRecord>,
    },
    DualModel {
        weights: MatrixRecord,
        bias: Vec<f64>,
        lagrange: LagrangeRecord,
    },
    Constrained {
        layers: Vec<LayerRecord>,
        lagrange: LagrangeRecord,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Wire {
    format: String,
    version: u32,
    body: Body,
}

/// Anything that can be stored as a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Mlp(Mlp),
    DualModel(DualModel),
    /// A trunk network whose output feeds a Lagrange layer.
    Constrained { trunk: Mlp, layer: LagrangeLayer },
}

fn layer_records(mlp: &Mlp) -> Vec<LayerRecord> {
    mlp.layers()
        .iter()
        .map(|l| LayerRecord {
            weights: MatrixRecord::from_matrix(&l.weights),
            bias: l.bias.as_slice().to_vec(),
            activation: l.activation,
        })
        .collect()
}

fn mlp_from_records(layers: Vec<LayerRecord>) -> Result<Mlp> {
    let layers = layers
        .into_iter()
        .map(|r| DenseLayer::new(r.weights.into_matrix()?, DVector::from_vec(r.bias), r.activation))
        .collect::<Result<Vec<_>>>()?;
    Mlp::new(layers)
}

fn lagrange_record(layer: &LagrangeLayer) -> LagrangeRecord {
    LagrangeRecord {
        family: layer.family(),
        constraints: MatrixRecord::from_matrix(layer.constraints().matrix()),
        rhs: layer.constraints().rhs().map(|r| r.as_slice().to_vec()),
    }
}

fn layer_from_record(r: LagrangeRecord) -> Result<LagrangeLayer> {
    let cs = ConstraintSet::new(r.constraints.into_matrix()?, r.rhs.map(DVector::from_vec))?;
    Ok(LagrangeLayer::new(r.family, cs))
}

impl Checkpoint {
    fn body(&self) -> Body {
        match self {
            Checkpoint::Mlp(m) => Body::Mlp { layers: layer_records(m) },
            Checkpoint::DualModel(d) => Body::DualModel {
                weights: MatrixRecord::from_matrix(d.weights()),
                bias: d.bias().as_slice().to_vec(),
                lagrange: lagrange_record(d.layer()),
            },
            Checkpoint::Constrained { trunk, layer } => Body::Constrained {
                layers: layer_records(trunk),
                lagrange: lagrange_record(layer),
            },
        }
    }

    /// Pretty JSON. Fails on non-finite parameters, which JSON cannot carry.
    pub fn to_json(&self) -> Result<String> {
        let wire = Wire {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            body: self.body(),
        };
        let value = serde_json::to_value(&wire)?;
        if has_null(&value) {
            return Err(Error::NonFinite {
                context: "checkpoint parameter",
                value: f64::NAN,
            });
        }
        Ok(serde_json::to_string_pretty(&value)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value.get("format").and_then(|f| f.as_str()) {
            Some(CHECKPOINT_FORMAT) => {}
            other => return Err(Error::Data(format!("not a checkpoint (format {other:?})"))),
        }
        match value.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(CHECKPOINT_VERSION) => {}
            other => return Err(Error::Data(format!("unsupported checkpoint version {other:?}"))),
        }
        let wire: Wire = serde_json::from_value(value)?;
        Ok(match wire.body {
            Body::Mlp { layers } => Checkpoint::Mlp(mlp_from_records(layers)?),
            Body::DualModel {
                weights,
                bias,
                lagrange,
            } => {
                let layer = layer_from_record(lagrange)?;
                Checkpoint::DualModel(DualModel::new(
                    weights.into_matrix()?,
                    DVector::from_vec(bias),
                    layer.family(),
                    layer.constraints().clone(),
                )?)
            }
            Body::Constrained { layers, lagrange } => Checkpoint::Constrained {
                trunk: mlp_from_records(layers)?,
                layer: layer_from_record(lagrange)?,
            },
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

fn has_null(v: &serde_json::Value) -> bool {
    match v {
        serde_json::Value::Null => true,
        serde_json::Value::Array(a) => a.iter().any(has_null),
        serde_json::Value::Object(o) => o.iter().any(|(k, v)| k != "rhs" && has_null(v)),
        _ => false,
    }
}

// ------------------------------------------------------------------------ csv

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn write_dataset(path: &Path, samples: &[XorSample]) -> Result<()> {
    write_atomic(path, &csv_bytes(samples)?)
}

/// Reads `x1,x2,label` rows; labels must be 0 or 1 and inputs finite.
pub fn read_dataset(path: &Path) -> Result<Vec<XorSample>> {
    let samples: Vec<XorSample> = read_csv(path)?;
    if samples.is_empty() {
        return Err(Error::Data(format!("{}: no samples", path.display())));
    }
    for (i, s) in samples.iter().enumerate() {
        if !(s.x1.is_finite() && s.x2.is_finite()) || s.label > 1 {
            return Err(Error::Data(format!("{}: bad sample on row {}", path.display(), i + 1)));
        }
    }
    Ok(samples)
}

/// One row per constraint: columns `a1..aK`, then `b` when a right-hand
/// side is present.
pub fn matrix_csv(a: &DMatrix<f64>, rhs: Option<&DVector<f64>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = (1..=a.ncols()).map(|k| format!("a{k}")).collect();
    if rhs.is_some() {
        header.push("b".into());
    }
    w.write_record(&header)?;
    for i in 0..a.nrows() {
        let mut row: Vec<String> = a.row(i).iter().map(|v| format_float(*v)).collect();
        if let Some(b) = rhs {
            row.push(format_float(b[i]));
        }
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Shortest text that parses back to the same bits.
fn format_float(v: f64) -> String {
    let a = v.abs();
    if a == 0.0 || (1e-5..1e16).contains(&a) {
        v.to_string()
    } else {
        format!("{v:e}")
    }
}

pub fn write_constraints(path: &Path, cs: &ConstraintSet) -> Result<()> {
    write_atomic(path, &matrix_csv(cs.matrix(), cs.rhs())?)
}

/// Parses the layout written by [`write_constraints`] and validates rank.
pub fn read_constraints(path: &Path) -> Result<ConstraintSet> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let has_rhs = header.iter().next_back() == Some("b");
    let k = header.len() - usize::from(has_rhs);
    for (j, name) in header.iter().take(k).enumerate() {
        if name != format!("a{}", j + 1) {
            return Err(Error::Data(format!("{}: unexpected column {name:?}", path.display())));
        }
    }
    let mut data = Vec::new();
    let mut rhs = Vec::new();
    let mut rows = 0;
    for record in r.records() {
        let record = record?;
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::Data(format!("{}: {s:?}: {e}", path.display())))
        };
        for (j, field) in record.iter().enumerate() {
            if j < k {
                data.push(parse(field)?);
            } else {
                rhs.push(parse(field)?);
            }
        }
        rows += 1;
    }
    let a = DMatrix::from_row_slice(rows, k, &data);
    ConstraintSet::new(a, has_rhs.then(|| DVector::from_vec(rhs)))
}

pub fn epoch_stats_csv(stats: &[EpochStats]) -> Result<Vec<u8>> {
    csv_bytes(stats)
}

pub fn write_epoch_stats(path: &Path, stats: &[EpochStats]) -> Result<()> {
    write_atomic(path, &epoch_stats_csv(stats)?)
}

pub fn read_epoch_stats(path: &Path) -> Result<Vec<EpochStats>> {
    read_csv(path)
}

pub fn write_aggregate(path: &Path, rows: &[AggregateEpoch]) -> Result<()> {
    write_atomic(path, &csv_bytes(rows)?)
}

pub fn read_aggregate(path: &Path) -> Result<Vec<AggregateEpoch>> {
    read_csv(path)
}

// ---------------------------------------------------------------- summaries

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SummaryRecord {
    seed: u64,
    epochs: Vec<EpochStats>,
}

/// Writes the summary body and a sidecar holding its wall-clock time.
pub fn write_run_summary(path: &Path, summary: &RunSummary) -> Result<()> {
    let record = SummaryRecord {
        seed: summary.seed,
        epochs: summary.epochs.clone(),
    };
    write_atomic(path, serde_json::to_string_pretty(&record)?.as_bytes())?;
    write_sidecar(path, summary.wall_clock_secs)
}

/// Wall-clock comes from the sidecar when present, else zero.
pub fn read_run_summary(path: &Path) -> Result<RunSummary> {
    let record: SummaryRecord = serde_json::from_str(&fs::read_to_string(path)?)?;
    let wall_clock_secs = fs::read_to_string(sidecar_path(path))
        .ok()
        .and_then(|t| serde_json::from_str::<Sidecar>(&t).ok())
        .map_or(0.0, |s| s.wall_clock_secs);
    Ok(RunSummary {
        seed: record.seed,
        epochs: record.epochs,
        wall_clock_secs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::XorDatasetSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mlp() -> Mlp {
        use Activation::*;
        Mlp::glorot(&mut ChaCha8Rng::seed_from_u64(3), &[2, 5, 10, 4, 1], &[Logistic, Logistic, Logistic, Identity])
            .unwrap()
    }

    fn bits(m: &Mlp) -> Vec<u64> {
        m.layers()
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect()
    }

    #[test]
    fn mlp_checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        let m = mlp();
        Checkpoint::Mlp(m.clone()).write(&path).unwrap();
        let Checkpoint::Mlp(back) = Checkpoint::read(&path).unwrap() else {
            panic!("wrong kind")
        };
        assert_eq!(bits(&back), bits(&m));
        assert_eq!(back, m);
    }

    #[test]
    fn dual_checkpoint_round_trip() {
        let cs = ConstraintSet::from_rows(&[vec![1.0, 2.0, 0.5], vec![0.1, -1.0, 3.0]], Some(vec![0.3, 1e-300])).unwrap();
        let w = DMatrix::from_row_slice(2, 3, &[0.1, std::f64::consts::PI, -2.5e-17, 4.0, 5.0, 6.0]);
        let d = DualModel::new(w, DVector::from_vec(vec![1.0 / 3.0, 0.0, -0.0]), SigmoidFamily::srlu(0.5, 2.0).unwrap(), cs)
            .unwrap();
        let ck = Checkpoint::DualModel(d);
        assert_eq!(Checkpoint::from_json(&ck.to_json().unwrap()).unwrap(), ck);
    }

    #[test]
    fn constrained_checkpoint_round_trip() {
        let base = mlp();
        let cs = ConstraintSet::new(base.layers()[2].weights.transpose(), None).unwrap();
        let ck = Checkpoint::Constrained {
            trunk: base,
            layer: LagrangeLayer::new(SigmoidFamily::Logistic, cs),
        };
        assert_eq!(Checkpoint::from_json(&ck.to_json().unwrap()).unwrap(), ck);
    }

    #[test]
    fn bad_checkpoints_are_rejected() {
        let good = Checkpoint::Mlp(mlp()).to_json().unwrap();
        assert!(Checkpoint::from_json(&good.replace(CHECKPOINT_FORMAT, "other")).is_err());
        assert!(Checkpoint::from_json(&good.replace("\"version\": 1", "\"version\": 2")).is_err());
        assert!(Checkpoint::from_json(&good.replacen("\"rows\": 2", "\"rows\": 3", 1)).is_err());
        assert!(Checkpoint::from_json(&good.replacen("\"activation\"", "\"extra\": 1, \"activation\"", 1)).is_err());
    }

    #[test]
    fn rank_deficient_checkpoint_is_rejected() {
        let rec = Wire {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            body: Body::Constrained {
                layers: layer_records(&mlp())[..2].to_vec(),
                lagrange: LagrangeRecord {
                    family: SigmoidFamily::Logistic,
                    constraints: MatrixRecord {
                        rows: 2,
                        cols: 10,
                        data: [vec![1.0; 10], vec![1.0; 10]].concat(),
                    },
                    rhs: None,
                },
            },
        };
        let text = serde_json::to_string(&rec).unwrap();
        assert!(matches!(Checkpoint::from_json(&text), Err(Error::RankDeficient { .. })));
    }

    #[test]
    fn dataset_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let data = XorDatasetSpec { n_samples: 40, seed: 1 }.generate().unwrap();
        write_dataset(&path, &data).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("x1,x2,label\n"));
        assert_eq!(read_dataset(&path).unwrap(), data);
        fs::write(&path, "x1,x2,label\n0.1,0.2,7\n").unwrap();
        assert!(read_dataset(&path).is_err());
    }

    #[test]
    fn constraint_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        let cs = ConstraintSet::from_rows(&[vec![0.1, 0.2, 0.3], vec![-1.0, 1e-20, 7.0]], Some(vec![1.0, 2.0])).unwrap();
        write_constraints(&path, &cs).unwrap();
        assert!(fs::read_to_string(&path).unwrap().starts_with("a1,a2,a3,b\n"));
        let back = read_constraints(&path).unwrap();
        assert_eq!(back.matrix(), cs.matrix());
        assert_eq!(back.rhs(), cs.rhs());
        fs::write(&path, "a1,a2\n1,1\n1,1\n").unwrap();
        assert!(read_constraints(&path).is_err());
    }

    #[test]
    fn summary_sidecar_holds_timing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.json");
        let s = RunSummary {
            seed: 4,
            epochs: vec![EpochStats {
                epoch: 1,
                mean_iters: 2.5,
                min_iters: 1,
                max_iters: 4,
                mean_loss: 0.1,
                mean_infeasibility: 1e-3,
                max_infeasibility: 2e-3,
                non_converged: 0,
            }],
            wall_clock_secs: 1.25,
        };
        write_run_summary(&path, &s).unwrap();
        let body = fs::read_to_string(&path).unwrap();
        assert!(!body.contains("wall"));
        assert_eq!(read_run_summary(&path).unwrap(), s);
        let csv_path = dir.path().join("e.csv");
        write_epoch_stats(&csv_path, &s.epochs).unwrap();
        assert_eq!(read_epoch_stats(&csv_path).unwrap(), s.epochs);
        let names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert!(names.iter().all(|n| !n.to_string_lossy().contains(".tmp")));
    }
}
