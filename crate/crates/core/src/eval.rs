//! AUC computation and result reporting.
//!
//! AUC is the Mann–Whitney statistic — the probability that a random
//! anomalous clip outscores a random normal one, with half credit for ties.
//! It is computed by exact pair counting over sorted groups (integers until
//! the final division), so the result is identical to the naive O(n²)
//! definition for any input, ties included.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::Condition;
use crate::error::{Error, Result};
use crate::manifest::{DatasetManifest, Split};
use crate::scorer::ScoreRow;

/// Probability that an anomaly outscores a normal (ties count half).
///
/// `labels[i]` is true for anomalous clips. Higher score = more anomalous.
pub fn compute_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Eval(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Eval(format!("non-finite score {bad}")));
    }
    let n_anom = labels.iter().filter(|&&l| l).count();
    let n_norm = labels.len() - n_anom;
    if n_anom == 0 || n_norm == 0 {
        return Err(Error::Eval(format!(
            "AUC needs both classes; got {n_anom} anomalous and {n_norm} normal"
        )));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());

    // Walk tied groups in ascending score order. Every anomaly in a group
    // beats all normals strictly below it and ties the normals beside it.
    let mut wins_x2: u128 = 0;
    let mut normals_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let group_anom = order[i..j].iter().filter(|&&k| labels[k]).count() as u128;
        let group_norm = (j - i) as u128 - group_anom;
        wins_x2 += 2 * group_anom * normals_below + group_anom * group_norm;
        normals_below += group_norm;
        i = j;
    }
    Ok(wins_x2 as f64 / (2 * n_anom as u128 * n_norm as u128) as f64)
}

/// A score column the report can evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScoreColumn {
    Out,
    Arc,
    Maha,
    Combined,
}

impl ScoreColumn {
    pub const ALL: [ScoreColumn; 4] =
        [ScoreColumn::Out, ScoreColumn::Arc, ScoreColumn::Maha, ScoreColumn::Combined];

    pub fn name(self) -> &'static str {
        match self {
            ScoreColumn::Out => "out",
            ScoreColumn::Arc => "arc",
            ScoreColumn::Maha => "maha",
            ScoreColumn::Combined => "combined",
        }
    }

    fn extract(self, row: &ScoreRow) -> f64 {
        match self {
            ScoreColumn::Out => row.a_out,
            ScoreColumn::Arc => row.a_arc,
            ScoreColumn::Maha => row.a_maha,
            ScoreColumn::Combined => row.combined,
        }
    }
}

/// One evaluated cell: the AUC of one score column for one machine ID.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReportCell {
    pub machine_type: String,
    pub machine_id: u32,
    pub kind: ScoreColumn,
    pub auc: f64,
}

/// Per-ID AUCs plus per-type and overall means (IDs weighted equally).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub cells: Vec<ReportCell>,
    pub kinds: Vec<ScoreColumn>,
}

impl EvalReport {
    pub fn auc(&self, machine_type: &str, machine_id: u32, kind: ScoreColumn) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| {
                c.machine_type == machine_type && c.machine_id == machine_id && c.kind == kind
            })
            .map(|c| c.auc)
    }

    /// Mean AUC over the IDs of one machine type.
    pub fn type_mean(&self, machine_type: &str, kind: ScoreColumn) -> Option<f64> {
        let vals: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.machine_type == machine_type && c.kind == kind)
            .map(|c| c.auc)
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }

    /// Mean AUC over every (type, ID) cell of one kind.
    pub fn overall_mean(&self, kind: ScoreColumn) -> Option<f64> {
        let vals: Vec<f64> =
            self.cells.iter().filter(|c| c.kind == kind).map(|c| c.auc).collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }

    /// Aligned text table: one row per (type, ID) plus mean rows, one column
    /// per evaluated kind, AUC in percent.
    pub fn render(&self) -> String {
        let mut ids: Vec<(String, u32)> = self
            .cells
            .iter()
            .map(|c| (c.machine_type.clone(), c.machine_id))
            .collect();
        ids.sort();
        ids.dedup();
        let mut types: Vec<String> = ids.iter().map(|(t, _)| t.clone()).collect();
        types.dedup();

        let label_width = ids
            .iter()
            .map(|(t, i)| format!("{t} id_{i:02}").len())
            .chain(types.iter().map(|t| format!("{t} mean").len()))
            .chain(["overall mean".len()])
            .max()
            .unwrap_or(12);
        let mut out = String::new();
        let _ = write!(out, "{:label_width$}", "machine");
        for k in &self.kinds {
            let _ = write!(out, "  {:>8}", k.name());
        }
        out.push('\n');
        let fmt_cell = |out: &mut String, v: Option<f64>| {
            match v {
                Some(a) => {
                    let _ = write!(out, "  {:>8.2}", 100.0 * a);
                }
                None => {
                    let _ = write!(out, "  {:>8}", "-");
                }
            };
        };
        for t in &types {
            for (ty, id) in ids.iter().filter(|(ty, _)| ty == t) {
                let _ = write!(out, "{:label_width$}", format!("{ty} id_{id:02}"));
                for &k in &self.kinds {
                    fmt_cell(&mut out, self.auc(ty, *id, k));
                }
                out.push('\n');
            }
            let _ = write!(out, "{:label_width$}", format!("{t} mean"));
            for &k in &self.kinds {
                fmt_cell(&mut out, self.type_mean(t, k));
            }
            out.push('\n');
        }
        let _ = write!(out, "{:label_width$}", "overall mean");
        for &k in &self.kinds {
            fmt_cell(&mut out, self.overall_mean(k));
        }
        out.push('\n');
        out
    }

    /// Machine-readable rows: `machine_type,machine_id,kind,auc`, with
    /// per-type `mean` and an overall `mean` row appended.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let err = |e: csv::Error| Error::Eval(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        w.write_record(["machine_type", "machine_id", "kind", "auc"]).map_err(err)?;
        for c in &self.cells {
            w.write_record([
                c.machine_type.as_str(),
                &c.machine_id.to_string(),
                c.kind.name(),
                &c.auc.to_string(),
            ])
            .map_err(err)?;
        }
        let mut types: Vec<String> = self.cells.iter().map(|c| c.machine_type.clone()).collect();
        types.sort();
        types.dedup();
        for t in &types {
            for &k in &self.kinds {
                if let Some(m) = self.type_mean(t, k) {
                    w.write_record([t.as_str(), "mean", k.name(), &m.to_string()])
                        .map_err(err)?;
                }
            }
        }
        for &k in &self.kinds {
            if let Some(m) = self.overall_mean(k) {
                w.write_record(["all", "mean", k.name(), &m.to_string()]).map_err(err)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Joins scored rows to manifest labels and computes every per-ID AUC.
///
/// Every test-split clip in the manifest must have a score row; extra rows
/// (e.g. scored training normals) are ignored.
pub fn build_report(
    rows: &[ScoreRow],
    manifest: &DatasetManifest,
    kinds: &[ScoreColumn],
) -> Result<EvalReport> {
    if kinds.is_empty() {
        return Err(Error::Eval("no score kinds requested".into()));
    }
    let by_path: BTreeMap<&str, &ScoreRow> =
        rows.iter().map(|r| (r.path.as_str(), r)).collect();

    let mut missing = Vec::new();
    let mut groups: BTreeMap<(String, u32), Vec<(&ScoreRow, bool)>> = BTreeMap::new();
    for e in manifest.entries.iter().filter(|e| e.split == Split::Test) {
        let key = e.path.to_string_lossy();
        match by_path.get(key.as_ref()) {
            Some(row) => groups
                .entry((e.machine_type.0.clone(), e.machine_id))
                .or_default()
                .push((row, e.condition == Condition::Anomaly)),
            None => missing.push(key.into_owned()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Eval(format!(
            "{} test clips have no score row: {}",
            missing.len(),
            missing.join(", ")
        )));
    }

    let mut cells = Vec::new();
    for ((machine_type, machine_id), group) in &groups {
        let labels: Vec<bool> = group.iter().map(|(_, anom)| *anom).collect();
        for &kind in kinds {
            let scores: Vec<f64> = group.iter().map(|(r, _)| kind.extract(r)).collect();
            let auc = compute_auc(&scores, &labels).map_err(|e| {
                Error::Eval(format!("{machine_type} id {machine_id} ({}): {e}", kind.name()))
            })?;
            cells.push(ReportCell {
                machine_type: machine_type.clone(),
                machine_id: *machine_id,
                kind,
                auc,
            });
        }
    }
    Ok(EvalReport { cells, kinds: kinds.to_vec() })
}
