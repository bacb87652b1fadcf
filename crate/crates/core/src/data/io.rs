//! Dataset persistence: one CSV of normalized rows plus a JSON sidecar with
//! the task id, dimensions and bounds.

use std::fs::File;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{DatasetBounds, NormalizedDataset};
use crate::error::{Error, Result};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub task_id: String,
    pub state_dim: usize,
    pub action_dim: usize,
    pub bounds: DatasetBounds,
    pub rows: usize,
    #[serde(default)]
    pub clamp_count: usize,
}

/// `data.csv` → `data.meta.json`.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("meta.json")
}

fn header(sd: usize, ad: usize) -> Vec<String> {
    (0..sd)
        .map(|i| format!("s_{i}"))
        .chain((0..ad).map(|i| format!("a_{i}")))
        .chain(["r".to_string()])
        .chain((0..sd).map(|i| format!("sn_{i}")))
        .chain(["restart".to_string()])
        .collect()
}

pub fn save_dataset(d: &NormalizedDataset, csv_path: &Path) -> Result<()> {
    let (sd, ad) = (d.state_dim(), d.action_dim());
    let meta = DatasetMeta {
        format_version: DATASET_FORMAT_VERSION,
        task_id: d.task_id.clone(),
        state_dim: sd,
        action_dim: ad,
        bounds: d.bounds.clone(),
        rows: d.len(),
        clamp_count: d.clamp_count,
    };
    let sidecar = sidecar_path(csv_path);
    let json = serde_json::to_string_pretty(&meta)?;
    std::fs::write(&sidecar, json).map_err(|e| Error::io(&sidecar, e))?;

    let file = File::create(csv_path).map_err(|e| Error::io(csv_path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let csv_err = |e: csv::Error| Error::parse(csv_path, e.to_string());
    w.write_record(header(sd, ad)).map_err(csv_err)?;
    let mut rec: Vec<String> = Vec::with_capacity(2 * sd + ad + 2);
    for i in 0..d.len() {
        rec.clear();
        rec.extend(d.states.row(i).iter().map(f64::to_string));
        rec.extend(d.actions.row(i).iter().map(f64::to_string));
        rec.push(d.rewards[i].to_string());
        rec.extend(d.next_states.row(i).iter().map(f64::to_string));
        rec.push(if d.restarts[i] { "1" } else { "0" }.to_string());
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(csv_path, e))?;
    Ok(())
}

pub fn load_dataset(csv_path: &Path) -> Result<NormalizedDataset> {
    let sidecar = sidecar_path(csv_path);
    let text = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let meta: DatasetMeta = serde_json::from_str(&text).map_err(|e| Error::parse(&sidecar, e.to_string()))?;
    if meta.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::parse(&sidecar, format!("unsupported format_version {}", meta.format_version)));
    }
    meta.bounds.validate()?;
    let (sd, ad) = (meta.state_dim, meta.action_dim);
    if meta.bounds.state.len() != sd || meta.bounds.action.len() != ad {
        return Err(Error::parse(
            &sidecar,
            format!(
                "declared dims ({sd}, {ad}) disagree with {} state and {} action bounds",
                meta.bounds.state.len(),
                meta.bounds.action.len()
            ),
        ));
    }

    let mut d = NormalizedDataset::empty(&meta.task_id, meta.bounds.clone());
    d.clamp_count = meta.clamp_count;
    if meta.rows == 0 && !csv_path.exists() {
        return Ok(d);
    }

    let file = File::open(csv_path).map_err(|e| Error::io(csv_path, e))?;
    let mut r = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(file);
    let expected = header(sd, ad);
    let found: Vec<String> =
        r.headers().map_err(|e| Error::parse(csv_path, e.to_string()))?.iter().map(str::to_string).collect();
    if !(found.is_empty() && meta.rows == 0) && found != expected {
        return Err(Error::parse(csv_path, format!("header {found:?} does not match expected {expected:?}")));
    }

    let width = expected.len();
    let mut flat: Vec<f64> = Vec::with_capacity(meta.rows * (width - 1));
    let mut restarts = Vec::with_capacity(meta.rows);
    for (row, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::parse(csv_path, format!("row {row}: {e}")))?;
        if rec.len() != width {
            return Err(Error::parse(csv_path, format!("row {row}: expected {width} columns, got {}", rec.len())));
        }
        for (col, field) in rec.iter().take(width - 1).enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::parse(csv_path, format!("row {row}, column `{}`: `{field}` is not a number", expected[col]))
            })?;
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::parse(
                    csv_path,
                    format!("row {row}, column `{}`: {v} outside [0, 1]", expected[col]),
                ));
            }
            flat.push(v);
        }
        restarts.push(match rec[width - 1].trim() {
            "0" | "false" => false,
            "1" | "true" => true,
            other => {
                return Err(Error::parse(csv_path, format!("row {row}, column `restart`: `{other}` is not a flag")))
            }
        });
    }
    let n = restarts.len();
    if n != meta.rows {
        return Err(Error::parse(csv_path, format!("sidecar declares {} rows, file has {n}", meta.rows)));
    }
    let table = Array2::from_shape_vec((n, width - 1), flat).expect("row widths checked");
    d.states = table.slice(ndarray::s![.., 0..sd]).to_owned();
    d.actions = table.slice(ndarray::s![.., sd..sd + ad]).to_owned();
    d.rewards = Array1::from(table.column(sd + ad).to_vec());
    d.next_states = table.slice(ndarray::s![.., sd + ad + 1..]).to_owned();
    d.restarts = restarts;
    Ok(d)
}
