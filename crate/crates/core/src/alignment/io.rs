//! Alignment checkpoints: one network file per role, a JSON manifest, and a
//! CSV loss trace.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AlignmentConfig, AlignmentModelSet, GroupNets, LossTerms, PairDims};
use crate::error::{Error, Result};
use crate::nn::{Mlp, MlpCheckpoint};

pub const ALIGNMENT_FORMAT_VERSION: u32 = 1;

const TRACE_FILE: &str = "loss_trace.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignmentManifest {
    pub format_version: u32,
    pub source_id: String,
    pub target_id: String,
    pub dims: PairDims,
    pub config: Option<AlignmentConfig>,
    pub seed: Option<u64>,
    /// Role name (`theta_x_s`, `phi_y_a`, …) to network file.
    pub roles: BTreeMap<String, String>,
    pub trace_file: String,
}

const ROLES: [&str; 8] =
    ["theta_x_s", "phi_x_s", "theta_y_s", "phi_y_s", "theta_x_a", "phi_x_a", "theta_y_a", "phi_y_a"];

fn role_nets(m: &AlignmentModelSet) -> [&Mlp; 8] {
    let [a, b, c, d] = m.state.nets();
    let [e, f, g, h] = m.action.nets();
    [a, b, c, d, e, f, g, h]
}

pub fn save_alignment(
    m: &AlignmentModelSet,
    dir: &Path,
    config: Option<&AlignmentConfig>,
    seed: Option<u64>,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut roles = BTreeMap::new();
    for (role, net) in ROLES.iter().zip(role_nets(m)) {
        let file = format!("{role}.json");
        MlpCheckpoint::from_mlp(net)
            .with_tag("role", role)
            .with_tag("source_id", &m.source_id)
            .with_tag("target_id", &m.target_id)
            .save(&dir.join(&file))?;
        roles.insert(role.to_string(), file);
    }
    let manifest = AlignmentManifest {
        format_version: ALIGNMENT_FORMAT_VERSION,
        source_id: m.source_id.clone(),
        target_id: m.target_id.clone(),
        dims: m.dims(),
        config: config.cloned(),
        seed,
        roles,
        trace_file: TRACE_FILE.to_string(),
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;

    let path = dir.join(TRACE_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::parse(&path, e.to_string()))?;
    let err = |e: csv::Error| Error::parse(dir.join(TRACE_FILE), e.to_string());
    w.write_record(["group", "epoch", "alignment", "geometry", "reconstruction", "cycle", "latent_norm", "total"])
        .map_err(err)?;
    for (group, trace) in [("state", &m.state_trace), ("action", &m.action_trace)] {
        for (epoch, t) in trace.iter().enumerate() {
            w.write_record([
                group.to_string(),
                epoch.to_string(),
                t.alignment.to_string(),
                t.geometry.to_string(),
                t.reconstruction.to_string(),
                t.cycle.to_string(),
                t.latent_norm.to_string(),
                t.total.to_string(),
            ])
            .map_err(err)?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

fn load_trace(path: &Path) -> Result<(Vec<LossTerms>, Vec<LossTerms>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
    let (mut state, mut action) = (Vec::new(), Vec::new());
    for (row, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::parse(path, format!("row {row}: {e}")))?;
        if rec.len() != 8 {
            return Err(Error::parse(path, format!("row {row}: expected 8 columns, got {}", rec.len())));
        }
        let f = |i: usize| -> Result<f64> {
            rec[i]
                .parse()
                .map_err(|_| Error::parse(path, format!("row {row}, column {i}: `{}` is not a number", &rec[i])))
        };
        let t = LossTerms {
            alignment: f(2)?,
            geometry: f(3)?,
            reconstruction: f(4)?,
            cycle: f(5)?,
            latent_norm: f(6)?,
            total: f(7)?,
        };
        match &rec[0] {
            "state" => state.push(t),
            "action" => action.push(t),
            other => return Err(Error::parse(path, format!("row {row}: unknown group `{other}`"))),
        }
    }
    Ok((state, action))
}

pub fn load_alignment(dir: &Path) -> Result<(AlignmentModelSet, AlignmentManifest)> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: AlignmentManifest = serde_json::from_str(&text).map_err(|e| Error::parse(&path, e.to_string()))?;
    if manifest.format_version != ALIGNMENT_FORMAT_VERSION {
        return Err(Error::parse(&path, format!("unsupported format_version {}", manifest.format_version)));
    }
    let mut nets = Vec::with_capacity(8);
    for role in ROLES {
        let file = manifest
            .roles
            .get(role)
            .ok_or_else(|| Error::MissingComponent(format!("alignment role `{role}` in {}", path.display())))?;
        nets.push(MlpCheckpoint::load(&dir.join(file))?.to_mlp()?);
    }
    let mut it = nets.into_iter();
    let mut next = || it.next().expect("eight roles");
    let state = GroupNets { enc_x: next(), dec_x: next(), enc_y: next(), dec_y: next() };
    let action = GroupNets { enc_x: next(), dec_x: next(), enc_y: next(), dec_y: next() };
    let (state_trace, action_trace) = load_trace(&dir.join(&manifest.trace_file))?;
    let set = AlignmentModelSet {
        source_id: manifest.source_id.clone(),
        target_id: manifest.target_id.clone(),
        state,
        action,
        state_trace,
        action_trace,
    };
    if set.dims() != manifest.dims {
        return Err(Error::parse(
            &path,
            format!("declared dims {:?} disagree with networks {:?}", manifest.dims, set.dims()),
        ));
    }
    Ok((set, manifest))
}
