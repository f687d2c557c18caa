//! File formats: dataset CSV, model and mixture JSON, trace CSV.
//!
//! CSV floats use the shortest representation that round-trips, so
//! parse(emit(x)) == x bit for bit. JSON files carry a format version and
//! are written with a stable field order, which makes byte-level
//! determinism checks possible.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::poe::ProductModel;
use crate::trainer::Dataset;
use crate::variational::Mixture;

pub const FORMAT_VERSION: u32 = 1;

pub fn write_dataset_csv(path: &Path, data: &Dataset) -> Result<()> {
    let d = data.dof();
    let mut out = String::new();
    for c in 0..d {
        if c > 0 {
            out.push(',');
        }
        out.push_str(&format!("q{c}"));
    }
    if data.situations.is_some() {
        out.push_str(",situation");
    }
    out.push('\n');
    for r in 0..data.n() {
        for c in 0..d {
            if c > 0 {
                out.push(',');
            }
            out.push_str(&format!("{}", data.samples[(r, c)]));
        }
        if let Some(labels) = &data.situations {
            out.push_str(&format!(",{}", labels[r]));
        }
        out.push('\n');
    }
    let mut f = fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

pub fn read_dataset_csv(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Invalid(format!("{}: empty file", path.display())))?;
    let cols: Vec<&str> = header.split(',').collect();
    let has_situation = cols.last() == Some(&"situation");
    let d = cols.len() - usize::from(has_situation);
    for (c, name) in cols.iter().take(d).enumerate() {
        if *name != format!("q{c}") {
            return Err(Error::Invalid(format!(
                "{}: unexpected column {name} at position {c}",
                path.display()
            )));
        }
    }
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut rows = 0;
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::Invalid(format!(
                "{}: row {} has {} fields, expected {}",
                path.display(),
                i + 2,
                fields.len(),
                cols.len()
            )));
        }
        for field in &fields[..d] {
            let v: f64 = field.parse().map_err(|_| {
                Error::Invalid(format!("{}: bad float {field:?} on row {}", path.display(), i + 2))
            })?;
            values.push(v);
        }
        if has_situation {
            let s: usize = fields[d].parse().map_err(|_| {
                Error::Invalid(format!(
                    "{}: bad situation {:?} on row {}",
                    path.display(),
                    fields[d],
                    i + 2
                ))
            })?;
            labels.push(s);
        }
        rows += 1;
    }
    let samples = DMatrix::from_row_iterator(rows, d, values);
    Dataset::new(samples, has_situation.then_some(labels))
}

#[derive(Serialize, Deserialize)]
struct Versioned<T> {
    version: u32,
    #[serde(flatten)]
    payload: T,
}

#[derive(Serialize, Deserialize)]
pub struct ModelFile {
    pub model: ProductModel,
}

#[derive(Serialize, Deserialize)]
pub struct MixtureFile {
    /// One mixture per situation, in situation order.
    pub mixtures: Vec<Mixture>,
}

pub fn write_json<T: Serialize>(path: &Path, payload: T) -> Result<()> {
    let file = Versioned {
        version: FORMAT_VERSION,
        payload,
    };
    let mut text = serde_json::to_string_pretty(&file)
        .map_err(|e| Error::Invalid(format!("serialization failed: {e}")))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    let file: Versioned<T> = serde_json::from_str(&text).map_err(|e| {
        Error::Invalid(format!("{}: {e}", path.display()))
    })?;
    if file.version != FORMAT_VERSION {
        return Err(Error::Invalid(format!(
            "{}: format version {} not supported (expected {})",
            path.display(),
            file.version,
            FORMAT_VERSION
        )));
    }
    Ok(file.payload)
}

pub fn write_model_json(path: &Path, model: &ProductModel) -> Result<()> {
    write_json(path, ModelFile { model: model.clone() })
}

pub fn read_model_json(path: &Path) -> Result<ProductModel> {
    let file: ModelFile = read_json(path)?;
    file.model.validate()?;
    Ok(file.model)
}

pub fn write_mixtures_json(path: &Path, mixtures: &[Mixture]) -> Result<()> {
    write_json(
        path,
        MixtureFile {
            mixtures: mixtures.to_vec(),
        },
    )
}

pub fn read_mixtures_json(path: &Path) -> Result<Vec<Mixture>> {
    let file: MixtureFile = read_json(path)?;
    Ok(file.mixtures)
}

/// Long-format trace CSV `step,series,value`; non-finite values (for
/// example from targets without a density) are skipped.
pub fn write_trace_csv(path: &Path, traces: &[Vec<f64>]) -> Result<()> {
    let mut out = String::from("step,series,value\n");
    for (series, trace) in traces.iter().enumerate() {
        for (step, v) in trace.iter().enumerate() {
            if v.is_finite() {
                out.push_str(&format!("{step},{series},{v}\n"));
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Rollout trajectory as `t,q*,u*,log_unnorm` rows. The final row has no
/// control; its u columns are empty.
pub fn write_trajectory_csv(path: &Path, roll: &crate::control::Rollout, dt: f64) -> Result<()> {
    let dof = roll.qs.ncols();
    let mut out = String::from("t");
    for c in 0..dof {
        out.push_str(&format!(",q{c}"));
    }
    for c in 0..dof {
        out.push_str(&format!(",u{c}"));
    }
    out.push_str(",log_unnorm\n");
    for r in 0..roll.qs.nrows() {
        out.push_str(&format!("{}", dt * r as f64));
        for c in 0..dof {
            out.push_str(&format!(",{}", roll.qs[(r, c)]));
        }
        for c in 0..dof {
            if r < roll.us.nrows() {
                out.push_str(&format!(",{}", roll.us[(r, c)]));
            } else {
                out.push(',');
            }
        }
        out.push_str(&format!(",{}\n", roll.log_unnorm[r]));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Waypoint matrix as `t,q*` rows.
pub fn write_waypoints_csv(path: &Path, waypoints: &DMatrix<f64>) -> Result<()> {
    let mut out = String::from("t");
    for c in 0..waypoints.ncols() {
        out.push_str(&format!(",q{c}"));
    }
    out.push('\n');
    for r in 0..waypoints.nrows() {
        out.push_str(&format!("{r}"));
        for c in 0..waypoints.ncols() {
            out.push_str(&format!(",{}", waypoints[(r, c)]));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}
