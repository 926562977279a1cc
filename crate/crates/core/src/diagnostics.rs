//! Where in the layer stack a stage changed the model.
//!
//! Weight deltas are L2 norms of the flattened difference between two
//! snapshots of effective weights. Gradient reports give, per layer,
//! `log10((Σ_steps Σ_elements |g|) / elements / steps)`. Layers are indexed
//! by depth in forward order, embedding first and head last.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::StageSnapshot;
use crate::phases::StageRecord;

/// Mean absolute gradients below this are reported as [`GradientValue::BelowFloor`].
pub const GRADIENT_FLOOR: f64 = 1e-12;

pub const DELTA_COLUMNS: [&str; 3] = ["layer", "depth", "l2_delta"];
pub const GRADIENT_COLUMNS: [&str; 3] = ["layer", "depth", "log10_mean_abs_grad_per_element_per_step"];
const BELOW_FLOOR: &str = "below_floor";

#[derive(Debug, Clone, PartialEq)]
pub struct LayerDelta {
    pub layer: String,
    pub depth: usize,
    pub l2_delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerDeltaReport {
    pub from_stage: String,
    pub to_stage: String,
    pub entries: Vec<LayerDelta>,
}

/// Per-layer L2 norm of `after − before`.
pub fn layer_l2_delta(before: &StageSnapshot, after: &StageSnapshot) -> Result<LayerDeltaReport> {
    if before.entries.len() != after.entries.len() {
        return Err(Error::contract(format!(
            "snapshots {:?} and {:?} have {} and {} layers",
            before.label,
            after.label,
            before.entries.len(),
            after.entries.len()
        )));
    }
    let entries = before
        .entries
        .iter()
        .zip(&after.entries)
        .map(|(b, a)| {
            if b.name != a.name || b.weights.shape() != a.weights.shape() {
                return Err(Error::contract(format!(
                    "layer {} does not match layer {} of the other snapshot",
                    b.name, a.name
                )));
            }
            let sq: f64 = b
                .weights
                .data()
                .iter()
                .zip(a.weights.data())
                .map(|(x, y)| (y - x) * (y - x))
                .sum();
            Ok(LayerDelta {
                layer: b.name.clone(),
                depth: b.depth,
                l2_delta: sq.sqrt(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(LayerDeltaReport {
        from_stage: before.label.clone(),
        to_stage: after.label.clone(),
        entries,
    })
}

/// Change-weighted mean of normalized depth: 0 when all change sits in the
/// shallowest layer, 1 when it sits in the deepest.
pub fn depth_center_of_mass(report: &LayerDeltaReport) -> Result<f64> {
    let n = report.entries.len();
    let total: f64 = report.entries.iter().map(|e| e.l2_delta).sum();
    if n < 2 || total <= 0.0 {
        return Err(Error::contract(format!(
            "no weight change between {:?} and {:?}",
            report.from_stage, report.to_stage
        )));
    }
    let max_depth = (n - 1) as f64;
    let weighted: f64 = report
        .entries
        .iter()
        .map(|e| e.depth as f64 / max_depth * e.l2_delta)
        .sum();
    Ok(weighted / total)
}

/// Running per-layer sums of absolute gradient over a stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientAccumulator {
    pub layers: Vec<LayerGradient>,
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGradient {
    pub name: String,
    pub depth: usize,
    pub elements: usize,
    pub abs_sum: f64,
}

impl GradientAccumulator {
    /// One zeroed entry per `(name, element count)`, depth by position.
    pub fn new<I, S>(layers: I) -> Self
    where
        I: IntoIterator<Item = (S, usize)>,
        S: Into<String>,
    {
        Self {
            layers: layers
                .into_iter()
                .enumerate()
                .map(|(depth, (name, elements))| LayerGradient {
                    name: name.into(),
                    depth,
                    elements,
                    abs_sum: 0.0,
                })
                .collect(),
            steps: 0,
        }
    }

    /// Adds one step's gradients, given in layer order; `None` counts as zero.
    pub fn record<'a, I>(&mut self, grads: I) -> Result<()>
    where
        I: IntoIterator<Item = Option<&'a [f64]>>,
    {
        let mut seen = 0;
        for (layer, g) in self.layers.iter_mut().zip(grads) {
            seen += 1;
            if let Some(g) = g {
                if g.len() != layer.elements {
                    return Err(Error::contract(format!(
                        "gradient for {} has {} values, expected {}",
                        layer.name,
                        g.len(),
                        layer.elements
                    )));
                }
                layer.abs_sum += g.iter().map(|v| v.abs()).sum::<f64>();
            }
        }
        if seen != self.layers.len() {
            return Err(Error::contract(format!(
                "gradients for {seen} of {} layers",
                self.layers.len()
            )));
        }
        self.steps += 1;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GradientValue {
    Log10(f64),
    BelowFloor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientLogEntry {
    pub layer: String,
    pub depth: usize,
    pub value: GradientValue,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientLogReport {
    pub stage: String,
    pub entries: Vec<GradientLogEntry>,
}

pub fn log_avg_gradient(acc: &GradientAccumulator, stage: &str) -> Result<GradientLogReport> {
    if acc.steps == 0 {
        return Err(Error::contract(format!("stage {stage:?} took no steps")));
    }
    let entries = acc
        .layers
        .iter()
        .map(|l| {
            let mean = l.abs_sum / l.elements as f64 / acc.steps as f64;
            GradientLogEntry {
                layer: l.name.clone(),
                depth: l.depth,
                value: if mean < GRADIENT_FLOOR {
                    GradientValue::BelowFloor
                } else {
                    GradientValue::Log10(mean.log10())
                },
            }
        })
        .collect();
    Ok(GradientLogReport {
        stage: stage.to_string(),
        entries,
    })
}

/// Stage label made safe for file names (`F→L` becomes `F-L`).
pub fn file_label(label: &str) -> String {
    label.replace('→', "-")
}

pub fn delta_file_name(report: &LayerDeltaReport) -> String {
    format!(
        "delta_{}__{}.csv",
        file_label(&report.from_stage),
        file_label(&report.to_stage)
    )
}

pub fn gradient_file_name(report: &GradientLogReport) -> String {
    format!("grad_{}.csv", file_label(&report.stage))
}

pub fn write_delta_csv(report: &LayerDeltaReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(DELTA_COLUMNS).map_err(csv_io)?;
    for e in &report.entries {
        w.write_record([e.layer.clone(), e.depth.to_string(), format!("{:e}", e.l2_delta)])
            .map_err(csv_io)?;
    }
    fs::write(path, w.into_inner().map_err(|e| Error::Io(e.into_error()))?)?;
    Ok(())
}

pub fn write_gradient_csv(report: &GradientLogReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(GRADIENT_COLUMNS).map_err(csv_io)?;
    for e in &report.entries {
        let value = match e.value {
            GradientValue::Log10(v) => format!("{v:e}"),
            GradientValue::BelowFloor => BELOW_FLOOR.to_string(),
        };
        w.write_record([e.layer.clone(), e.depth.to_string(), value])
            .map_err(csv_io)?;
    }
    fs::write(path, w.into_inner().map_err(|e| Error::Io(e.into_error()))?)?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(e.into())
}

fn read_rows(path: &Path, columns: [&str; 3]) -> Result<Vec<(String, usize, String)>> {
    let parse = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut r = csv::ReaderBuilder::new().from_path(path).map_err(csv_io)?;
    let header = r.headers().map_err(csv_io)?.clone();
    if header.iter().ne(columns) {
        return Err(parse(1, format!("expected columns {columns:?}")));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| parse(line, e.to_string()))?;
        if rec.len() != 3 {
            return Err(parse(line, format!("{} fields, expected 3", rec.len())));
        }
        let depth = rec[1]
            .parse()
            .map_err(|_| parse(line, format!("bad depth {:?}", &rec[1])))?;
        rows.push((rec[0].to_string(), depth, rec[2].to_string()));
    }
    Ok(rows)
}

/// Reads a delta CSV back; stage labels are not stored in the file.
pub fn read_delta_csv(path: &Path) -> Result<Vec<LayerDelta>> {
    read_rows(path, DELTA_COLUMNS)?
        .into_iter()
        .enumerate()
        .map(|(i, (layer, depth, v))| {
            let l2_delta = v.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: i + 2,
                message: format!("bad value {v:?}"),
            })?;
            Ok(LayerDelta { layer, depth, l2_delta })
        })
        .collect()
}

pub fn read_gradient_csv(path: &Path) -> Result<Vec<GradientLogEntry>> {
    read_rows(path, GRADIENT_COLUMNS)?
        .into_iter()
        .enumerate()
        .map(|(i, (layer, depth, v))| {
            let value = if v == BELOW_FLOOR {
                GradientValue::BelowFloor
            } else {
                GradientValue::Log10(v.parse().map_err(|_| Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 2,
                    message: format!("bad value {v:?}"),
                })?)
            };
            Ok(GradientLogEntry { layer, depth, value })
        })
        .collect()
}

/// Reports derived from a run: deltas between consecutive records and one
/// gradient report per trained stage.
#[derive(Debug, Clone, PartialEq)]
pub struct RunDiagnostics {
    pub deltas: Vec<LayerDeltaReport>,
    pub gradients: Vec<GradientLogReport>,
}

pub fn run_diagnostics(records: &[StageRecord]) -> Result<RunDiagnostics> {
    let deltas = records
        .windows(2)
        .map(|w| {
            let mut r = layer_l2_delta(&w[0].snapshot, &w[1].snapshot)?;
            r.from_stage.clone_from(&w[0].label);
            r.to_stage.clone_from(&w[1].label);
            Ok(r)
        })
        .collect::<Result<_>>()?;
    let gradients = records
        .iter()
        .filter_map(|r| r.gradients.as_ref().map(|g| (r, g)))
        .filter(|(_, g)| g.steps > 0)
        .map(|(r, g)| log_avg_gradient(g, &r.label))
        .collect::<Result<_>>()?;
    Ok(RunDiagnostics { deltas, gradients })
}

/// Writes every report of `records` into `out_dir`, returning the paths.
pub fn export_reports(records: &[StageRecord], out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let diag = run_diagnostics(records)?;
    let mut paths = Vec::new();
    for r in &diag.deltas {
        let p = out_dir.join(delta_file_name(r));
        write_delta_csv(r, &p)?;
        paths.push(p);
    }
    for r in &diag.gradients {
        let p = out_dir.join(gradient_file_name(r));
        write_gradient_csv(r, &p)?;
        paths.push(p);
    }
    Ok(paths)
}
