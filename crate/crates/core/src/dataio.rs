//! Dataset ingestion, run configuration files and metrics output.
//!
//! * IDX (MNIST) image and label files, big-endian, uncompressed.
//! * Per-agent delimited tables: `class, x_1, ..., x_J` per line.
//! * Flat `key = value` configuration files with `#` comments.
//! * Metrics CSV with a fixed header and 10 significant digits per float.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::admm::{FeasibleBox, RhoSchedule, Schedules};
use crate::error::{Error, Result};
use crate::federation::{Algorithm, MetricsRecord, RunConfig};
use crate::mechanisms::{MechanismKind, PrivacyConfig};
use crate::model::AgentData;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Pooled examples with class indices rather than one-hot labels.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    /// `I x J`; IDX pixels are scaled into `[0, 1]`.
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
}

impl RawDataset {
    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m + 1)
    }

    pub fn to_agent_data(&self, num_classes: usize) -> Result<AgentData> {
        AgentData::from_class_indices(self.features.clone(), &self.labels, num_classes)
    }
}

fn read_u32_be(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let chunk = bytes.get(offset..offset + 4).ok_or_else(|| Error::Parse {
        location: format!("byte {offset}"),
        reason: format!("truncated header: missing {what}"),
    })?;
    Ok(u32::from_be_bytes(chunk.try_into().expect("4 bytes")))
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let magic = read_u32_be(bytes, 0, "magic number")?;
    if magic != expected {
        return Err(Error::Parse {
            location: "byte 0".into(),
            reason: format!("magic number {magic:#010x}, expected {expected:#010x}"),
        });
    }
    Ok(())
}

fn payload(bytes: &[u8], offset: usize, len: usize) -> Result<&[u8]> {
    let available = bytes.len().saturating_sub(offset);
    if available < len {
        return Err(Error::Parse {
            location: format!("byte {offset}"),
            reason: format!("truncated payload: expected {len} bytes, found {available}"),
        });
    }
    Ok(&bytes[offset..offset + len])
}

/// Parses an IDX3 image file into an `I x (rows * cols)` matrix with pixels
/// divided by 255.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Array2<f64>> {
    check_magic(bytes, IDX_IMAGES_MAGIC)?;
    let count = read_u32_be(bytes, 4, "image count")? as usize;
    let rows = read_u32_be(bytes, 8, "row count")? as usize;
    let cols = read_u32_be(bytes, 12, "column count")? as usize;
    let pixels = rows.checked_mul(cols);
    let total = pixels.and_then(|p| p.checked_mul(count));
    let (Some(pixels), Some(total)) = (pixels, total) else {
        return Err(Error::Parse {
            location: "byte 4".into(),
            reason: format!("dimensions {count} x {rows} x {cols} overflow"),
        });
    };
    let data = payload(bytes, 16, total)?;
    let values = data.iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok(Array2::from_shape_vec((count, pixels), values).expect("length checked"))
}

/// Parses an IDX1 label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    check_magic(bytes, IDX_LABELS_MAGIC)?;
    let count = read_u32_be(bytes, 4, "label count")? as usize;
    Ok(payload(bytes, 8, count)?
        .iter()
        .map(|&b| usize::from(b))
        .collect())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Reads a matching pair of IDX image and label files.
pub fn read_idx_dataset(images: &Path, labels: &Path) -> Result<RawDataset> {
    let features = parse_idx_images(&read_bytes(images)?).map_err(|e| at_path(images, e))?;
    let labels_v = parse_idx_labels(&read_bytes(labels)?).map_err(|e| at_path(labels, e))?;
    if features.nrows() != labels_v.len() {
        return Err(Error::Parse {
            location: labels.display().to_string(),
            reason: format!("{} labels for {} images", labels_v.len(), features.nrows()),
        });
    }
    Ok(RawDataset {
        features,
        labels: labels_v,
    })
}

fn at_path(path: &Path, err: Error) -> Error {
    match err {
        Error::Parse { location, reason } => Error::Parse {
            location: format!("{}: {location}", path.display()),
            reason,
        },
        other => other,
    }
}

/// Parses a per-agent table: one example per line, class index first, then
/// the features. Cells are separated by commas and/or whitespace; blank
/// lines and `#` comments are skipped.
pub fn parse_agent_table(text: &str, origin: &str) -> Result<RawDataset> {
    let mut labels = Vec::new();
    let mut values = Vec::new();
    let mut width = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let location = || format!("{origin}:{}", lineno + 1);
        let cells: Vec<&str> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|c| !c.is_empty())
            .collect();
        let (class, features) = cells.split_first().ok_or_else(|| Error::Parse {
            location: location(),
            reason: "empty row".into(),
        })?;
        let class: usize = class.parse().map_err(|_| Error::Parse {
            location: location(),
            reason: format!("class `{class}` is not a non-negative integer"),
        })?;
        match width {
            None => width = Some(features.len()),
            Some(w) if w != features.len() => {
                return Err(Error::Parse {
                    location: location(),
                    reason: format!("ragged row: {} features, expected {w}", features.len()),
                })
            }
            _ => {}
        }
        for cell in features {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                location: location(),
                reason: format!("`{cell}` is not a number"),
            })?;
            values.push(v);
        }
        labels.push(class);
    }
    let features = Array2::from_shape_vec((labels.len(), width.unwrap_or(0)), values)
        .expect("rows have equal width");
    Ok(RawDataset { features, labels })
}

pub fn read_agent_table(path: &Path) -> Result<RawDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_agent_table(&text, &path.display().to_string())
}

/// Reads a per-agent table and converts its labels to one-hot rows.
pub fn load_agent_table(path: &Path, num_classes: usize) -> Result<AgentData> {
    let raw = read_agent_table(path)?;
    if raw.labels.is_empty() {
        return Ok(AgentData::empty(raw.features.ncols(), num_classes));
    }
    raw.to_agent_data(num_classes)
}

/// Loads every `*.csv` table in `dir`, in file-name order, one agent per
/// file. Without `num_classes`, `K` is one more than the largest label seen.
/// Empty tables become agents without data.
pub fn load_agent_dir(dir: &Path, num_classes: Option<usize>) -> Result<Vec<AgentData>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "csv"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::invalid(format!(
            "no .csv agent tables in {}",
            dir.display()
        )));
    }
    let raws = paths
        .iter()
        .map(|p| read_agent_table(p))
        .collect::<Result<Vec<_>>>()?;
    let classes =
        num_classes.unwrap_or_else(|| raws.iter().map(RawDataset::num_classes).max().unwrap_or(0));
    let width = raws
        .iter()
        .find(|r| !r.labels.is_empty())
        .map_or(0, |r| r.features.ncols());
    raws.iter()
        .zip(&paths)
        .map(|(raw, path)| {
            if raw.labels.is_empty() {
                Ok(AgentData::empty(width, classes))
            } else {
                raw.to_agent_data(classes).map_err(|e| match e {
                    Error::Invalid(reason) => Error::Parse {
                        location: path.display().to_string(),
                        reason,
                    },
                    other => other,
                })
            }
        })
        .collect()
}

/// Writes an agent table readable by [`load_agent_table`].
pub fn write_agent_table(path: &Path, data: &AgentData) -> Result<()> {
    let mut out = String::new();
    for (i, row) in data.features().rows().into_iter().enumerate() {
        write!(out, "{}", data.class_of(i)).expect("string write");
        for v in row {
            write!(out, ",{v}").expect("string write");
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub const METRICS_HEADER: &str =
    "t,test_error,avg_noise_mag,consensus_violation,objective,rho_t,prox_t";

fn sig10(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.9e}")
    } else {
        format!("{v}")
    }
}

pub fn format_metrics(records: &[MetricsRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        let fields = [
            r.test_error,
            r.avg_noise_mag,
            r.consensus_violation,
            r.objective,
            r.rho_t,
            r.prox_t,
        ];
        out.push_str(&r.t.to_string());
        for f in fields {
            out.push(',');
            out.push_str(&sig10(f));
        }
        out.push('\n');
    }
    out
}

pub fn write_metrics(records: &[MetricsRecord], path: &Path) -> Result<()> {
    fs::write(path, format_metrics(records)).map_err(|e| Error::io(path, e))
}

pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == METRICS_HEADER => {}
        _ => {
            return Err(Error::Parse {
                location: "line 1".into(),
                reason: "missing metrics header".into(),
            })
        }
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let location = || format!("line {}", n + 1);
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            if cells.len() != 7 {
                return Err(Error::Parse {
                    location: location(),
                    reason: format!("{} columns, expected 7", cells.len()),
                });
            }
            let num = |i: usize| -> Result<f64> {
                cells[i].parse().map_err(|_| Error::Parse {
                    location: location(),
                    reason: format!("`{}` is not a number", cells[i]),
                })
            };
            Ok(MetricsRecord {
                t: cells[0].parse().map_err(|_| Error::Parse {
                    location: location(),
                    reason: format!("`{}` is not an iteration index", cells[0]),
                })?,
                test_error: num(1)?,
                avg_noise_mag: num(2)?,
                consensus_violation: num(3)?,
                objective: num(4)?,
                rho_t: num(5)?,
                prox_t: num(6)?,
            })
        })
        .collect()
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_metrics(&text)
}

/// Every key accepted in a configuration file, in canonical order.
pub const CONFIG_KEYS: [&str; 22] = [
    "algorithm",
    "T",
    "eps_bar",
    "delta_bar",
    "mechanism",
    "sigma_scale",
    "rho.c1",
    "rho.c2",
    "rho.Tc",
    "rho.cap",
    "prox.a",
    "box.B",
    "beta",
    "P",
    "seed",
    "log_every",
    "train.images",
    "train.labels",
    "agents.dir",
    "test.images",
    "test.labels",
    "bias_column",
];

/// Where a run's data comes from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DataSources {
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    /// Directory of per-agent tables; takes precedence over the pooled
    /// training files and is never re-partitioned.
    pub agents_dir: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
}

/// A fully resolved configuration file.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub run: RunConfig,
    pub data: DataSources,
    pub bias_column: bool,
}

/// Parses `key = value` lines. Keys must be known and appear once.
pub fn parse_key_values(text: &str, origin: &str) -> Result<Vec<(String, String)>> {
    let mut seen = BTreeMap::new();
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            location: format!("{origin}:{}", n + 1),
            reason: "expected `key = value`".into(),
        })?;
        let (key, value) = (key.trim(), value.trim());
        if !CONFIG_KEYS.contains(&key) {
            return Err(Error::config(key, "unknown configuration key"));
        }
        if seen.insert(key.to_string(), n + 1).is_some() {
            return Err(Error::config(key, "key appears more than once"));
        }
        pairs.push((key.to_string(), value.to_string()));
    }
    Ok(pairs)
}

fn parse_num(key: &str, value: &str) -> Result<f64> {
    value
        .parse::<f64>()
        .map_err(|_| Error::config(key, format!("`{value}` is not a number")))
}

fn parse_count(key: &str, value: &str) -> Result<usize> {
    if let Ok(v) = value.parse::<usize>() {
        return Ok(v);
    }
    // Allow scientific notation such as `2e4` for integral values.
    let v = parse_num(key, value)?;
    if v >= 0.0 && v.fract() == 0.0 && v <= usize::MAX as f64 {
        Ok(v as usize)
    } else {
        Err(Error::config(
            key,
            format!("`{value}` is not a non-negative integer"),
        ))
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::config(key, format!("`{value}` is not a boolean"))),
    }
}

impl ExperimentConfig {
    /// Builds a configuration from key-value pairs; later pairs override
    /// earlier ones. `algorithm` is required; every other key has a default.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut map: BTreeMap<&str, &str> = BTreeMap::new();
        for (k, v) in pairs {
            let key = CONFIG_KEYS
                .iter()
                .find(|known| **known == k.as_str())
                .ok_or_else(|| Error::config(k.as_str(), "unknown configuration key"))?;
            map.insert(key, v.as_str());
        }
        let algorithm: Algorithm = map
            .get("algorithm")
            .ok_or_else(|| Error::config("algorithm", "required key is missing"))?
            .parse()?;
        let mut run = RunConfig::new(algorithm);
        let mut data = DataSources::default();
        let mut bias_column = false;
        let mut privacy = PrivacyConfig {
            mechanism: algorithm.default_mechanism(),
            ..PrivacyConfig::default()
        };
        let mut rho = RhoSchedule::default();
        let mut schedules = Schedules::default();

        for (&key, &value) in &map {
            match key {
                "algorithm" => {}
                "T" => run.iterations = parse_count(key, value)?,
                "eps_bar" => privacy.eps_bar = parse_num(key, value)?,
                "delta_bar" => privacy.delta_bar = parse_num(key, value)?,
                "mechanism" => privacy.mechanism = value.parse::<MechanismKind>()?,
                "sigma_scale" => privacy.sigma_scale = parse_num(key, value)?,
                "rho.c1" => rho.c1 = parse_num(key, value)?,
                "rho.c2" => rho.c2 = parse_num(key, value)?,
                "rho.Tc" => rho.period = parse_count(key, value)?,
                "rho.cap" => rho.cap = parse_num(key, value)?,
                "prox.a" => schedules.prox_scale = parse_num(key, value)?,
                "box.B" => {
                    run.feasible = match value.to_ascii_lowercase().as_str() {
                        "inf" | "unbounded" | "none" => FeasibleBox::Unbounded,
                        _ => FeasibleBox::Bounded(parse_num(key, value)?),
                    }
                }
                "beta" => run.beta = parse_num(key, value)?,
                "P" => run.agents = parse_count(key, value)?,
                "seed" => {
                    run.seed = value
                        .parse()
                        .map_err(|_| Error::config(key, format!("`{value}` is not a u64 seed")))?
                }
                "log_every" => run.log_every = parse_count(key, value)?,
                "train.images" => data.train_images = Some(PathBuf::from(value)),
                "train.labels" => data.train_labels = Some(PathBuf::from(value)),
                "agents.dir" => data.agents_dir = Some(PathBuf::from(value)),
                "test.images" => data.test_images = Some(PathBuf::from(value)),
                "test.labels" => data.test_labels = Some(PathBuf::from(value)),
                "bias_column" => bias_column = parse_bool(key, value)?,
                _ => unreachable!("keys are checked against CONFIG_KEYS"),
            }
        }
        schedules.rho = rho;
        run.schedules = schedules;
        run.privacy = privacy;
        run.validate()?;
        Ok(Self {
            run,
            data,
            bias_column,
        })
    }

    /// Every key with its resolved value, in [`CONFIG_KEYS`] order. Unset
    /// data paths are omitted.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let run = &self.run;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let values: [Option<String>; 22] = [
            Some(run.algorithm.to_string()),
            Some(run.iterations.to_string()),
            Some(format!("{:?}", run.privacy.eps_bar)),
            Some(format!("{:?}", run.privacy.delta_bar)),
            Some(run.privacy.mechanism.to_string()),
            Some(format!("{:?}", run.privacy.sigma_scale)),
            Some(format!("{:?}", run.schedules.rho.c1)),
            Some(format!("{:?}", run.schedules.rho.c2)),
            Some(run.schedules.rho.period.to_string()),
            Some(format!("{:?}", run.schedules.rho.cap)),
            Some(format!("{:?}", run.schedules.prox_scale)),
            Some(match run.feasible {
                FeasibleBox::Bounded(b) => format!("{b:?}"),
                FeasibleBox::Unbounded => "unbounded".into(),
            }),
            Some(format!("{:?}", run.beta)),
            Some(run.agents.to_string()),
            Some(run.seed.to_string()),
            Some(run.log_every.to_string()),
            path(&self.data.train_images),
            path(&self.data.train_labels),
            path(&self.data.agents_dir),
            path(&self.data.test_images),
            path(&self.data.test_labels),
            Some(self.bias_column.to_string()),
        ];
        CONFIG_KEYS
            .iter()
            .zip(values)
            .filter_map(|(k, v)| v.map(|v| (k.to_string(), v)))
            .collect()
    }

    pub fn to_config_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Resolves relative data paths against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let data = &mut self.data;
        for p in [
            &mut data.train_images,
            &mut data.train_labels,
            &mut data.agents_dir,
            &mut data.test_images,
            &mut data.test_labels,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

/// Parses configuration text (no path resolution).
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    ExperimentConfig::from_pairs(&parse_key_values(text, "config")?)
}

/// Loads a configuration file; relative data paths are taken relative to
/// the file's directory.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let pairs = parse_key_values(&text, &path.display().to_string())?;
    let mut cfg = ExperimentConfig::from_pairs(&pairs)?;
    cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    Ok(cfg)
}
