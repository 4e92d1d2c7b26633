//! Session export: `entry_<k>_raw.png`, `entry_<k>_annotated.png` and
//! `session.csv` inside `export_<session start>/`.
//!
//! CSV layout: `entry_id,task,model_id,tile_count,area_mm2,timestamp_ns`,
//! then payload columns for each task present in the session
//! (classification: `p_<class>...,predicted`; mitosis:
//! `model_count,final_count`; ki67: `pos,neg,index`), then
//! `density_per_mm2,aggregate_ki67_index`. Cells that do not apply are empty.
//! The last row has `entry_id = AGGREGATE` and holds summed columns plus the
//! derived metrics where defined.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use super::{mitotic_density, AggregateError, AggregateSession, EntryMetrics, Totals};
use crate::scalar::Scalar;

pub const CSV_NAME: &str = "session.csv";
pub const AGGREGATE_ID: &str = "AGGREGATE";
const BASE_COLUMNS: [&str; 6] = [
    "entry_id",
    "task",
    "model_id",
    "tile_count",
    "area_mm2",
    "timestamp_ns",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ExportManifest {
    pub dir: PathBuf,
    pub csv: PathBuf,
    pub images: Vec<PathBuf>,
}

/// Values carried by the AGGREGATE row.
#[derive(Debug, Clone, PartialEq)]
pub struct ExportTotals<S> {
    pub tile_count: u64,
    pub area_mm2: S,
    pub class_prob_sums: Vec<(String, S)>,
    pub predicted: Option<String>,
    pub model_count: Option<u64>,
    pub final_count: Option<u64>,
    pub positive: Option<u64>,
    pub negative: Option<u64>,
    pub density_per_mm2: Option<S>,
    pub aggregate_ki67_index: Option<S>,
}

impl<S: Scalar> ExportTotals<S> {
    pub fn from_totals(t: &Totals<S>) -> Self {
        let has_mitosis = t.mitosis_entries > 0;
        let has_ki67 = t.ki67_entries > 0;
        ExportTotals {
            tile_count: t.tile_count,
            area_mm2: t.area_mm2,
            class_prob_sums: t.class_prob_sums.clone(),
            predicted: t.predicted_class().map(str::to_string),
            model_count: has_mitosis.then_some(t.mitosis_model_count),
            final_count: has_mitosis.then_some(t.mitosis_final_count),
            positive: has_ki67.then_some(t.ki67_positive),
            negative: has_ki67.then_some(t.ki67_negative),
            density_per_mm2: mitotic_density(t),
            aggregate_ki67_index: t.aggregate_ki67_index(),
        }
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn columns<S: Scalar>(session: &AggregateSession<S>) -> Vec<String> {
    let t = session.totals();
    let mut cols: Vec<String> = BASE_COLUMNS.iter().map(|s| s.to_string()).collect();
    if t.classification_entries > 0 {
        cols.extend(t.class_prob_sums.iter().map(|(n, _)| format!("p_{n}")));
        cols.push("predicted".into());
    }
    if t.mitosis_entries > 0 {
        cols.extend(["model_count".into(), "final_count".into()]);
    }
    if t.ki67_entries > 0 {
        cols.extend(["pos".into(), "neg".into(), "index".into()]);
    }
    cols.extend(["density_per_mm2".into(), "aggregate_ki67_index".into()]);
    cols
}

fn render_rows<S: Scalar>(session: &AggregateSession<S>, cols: &[String]) -> Vec<Vec<String>> {
    let col = |name: &str| cols.iter().position(|c| c == name);
    let mut rows = Vec::new();
    for e in session.entries() {
        let mut row = vec![String::new(); cols.len()];
        row[0] = e.entry_id.to_string();
        row[1] = e.task.export_name().to_string();
        row[2] = e.model_id.clone();
        row[3] = e.tile_count.to_string();
        row[4] = opt(e.area_mm2);
        row[5] = e.timestamp_ns.to_string();
        match &e.metrics {
            EntryMetrics::Classification {
                class_names,
                probs,
                predicted,
            } => {
                for (n, p) in class_names.iter().zip(probs) {
                    row[col(&format!("p_{n}")).expect("class column")] = p.to_string();
                }
                row[col("predicted").expect("predicted column")] = class_names[*predicted].clone();
            }
            EntryMetrics::Mitosis {
                model_count,
                final_count,
            } => {
                row[col("model_count").expect("mitosis column")] = model_count.to_string();
                row[col("final_count").expect("mitosis column")] = final_count.to_string();
            }
            EntryMetrics::Ki67 {
                positive,
                negative,
                index,
            } => {
                row[col("pos").expect("ki67 column")] = positive.to_string();
                row[col("neg").expect("ki67 column")] = negative.to_string();
                row[col("index").expect("ki67 column")] = opt(*index);
            }
        }
        rows.push(row);
    }
    let agg = ExportTotals::from_totals(session.totals());
    let mut row = vec![String::new(); cols.len()];
    row[0] = AGGREGATE_ID.to_string();
    row[3] = agg.tile_count.to_string();
    row[4] = agg.area_mm2.to_string();
    for (n, s) in &agg.class_prob_sums {
        row[col(&format!("p_{n}")).expect("class column")] = s.to_string();
    }
    let mut set = |name: &str, v: String| {
        if let Some(i) = col(name) {
            row[i] = v;
        }
    };
    set("predicted", opt(agg.predicted));
    set("model_count", opt(agg.model_count));
    set("final_count", opt(agg.final_count));
    set("pos", opt(agg.positive));
    set("neg", opt(agg.negative));
    set("density_per_mm2", opt(agg.density_per_mm2));
    set("aggregate_ki67_index", opt(agg.aggregate_ki67_index));
    rows.push(row);
    rows
}

fn io(e: impl std::fmt::Display) -> AggregateError {
    AggregateError::IoFailure(e.to_string())
}

/// Directory name for a session, basic ISO 8601 UTC.
pub fn export_dir_name<S: Scalar>(session: &AggregateSession<S>) -> String {
    format!("export_{}", session.started().format("%Y%m%dT%H%M%S%.3fZ"))
}

/// Writes the session under `out_dir`. On failure nothing is left behind.
pub fn export_session<S: Scalar>(
    session: &AggregateSession<S>,
    out_dir: &Path,
) -> Result<ExportManifest, AggregateError> {
    std::fs::create_dir_all(out_dir).map_err(io)?;
    let name = export_dir_name(session);
    let staging = out_dir.join(format!(".{name}.partial"));
    let result = write_export(session, &staging);
    if let Err(e) = result {
        let _ = std::fs::remove_dir_all(&staging);
        return Err(e);
    }
    let dir = out_dir.join(&name);
    if dir.exists() {
        std::fs::remove_dir_all(&dir).map_err(io)?;
    }
    if let Err(e) = std::fs::rename(&staging, &dir) {
        let _ = std::fs::remove_dir_all(&staging);
        return Err(io(e));
    }
    let mut images = Vec::new();
    for k in 1..=session.entries().len() {
        images.push(dir.join(format!("entry_{k}_raw.png")));
        images.push(dir.join(format!("entry_{k}_annotated.png")));
    }
    Ok(ExportManifest {
        csv: dir.join(CSV_NAME),
        dir,
        images,
    })
}

fn write_export<S: Scalar>(session: &AggregateSession<S>, dir: &Path) -> Result<(), AggregateError> {
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(io)?;
    }
    std::fs::create_dir_all(dir).map_err(io)?;
    for (i, e) in session.entries().iter().enumerate() {
        let k = i + 1;
        for (frame, kind) in [(&e.raw_frame, "raw"), (&e.annotated_frame, "annotated")] {
            let png = frame.encode_png().map_err(io)?;
            std::fs::write(dir.join(format!("entry_{k}_{kind}.png")), png).map_err(io)?;
        }
    }
    let cols = columns(session);
    let mut w = csv::Writer::from_path(dir.join(CSV_NAME)).map_err(io)?;
    w.write_record(&cols).map_err(io)?;
    for row in render_rows(session, &cols) {
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(())
}

/// A parsed `session.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedExport<S> {
    pub columns: Vec<String>,
    /// Data rows as column name -> cell.
    pub rows: Vec<HashMap<String, String>>,
    pub aggregate: ExportTotals<S>,
}

pub fn parse_export<S: Scalar>(csv_path: &Path) -> Result<ParsedExport<S>, AggregateError> {
    let bad = |m: String| AggregateError::MalformedExport(m);
    let mut r = csv::Reader::from_path(csv_path).map_err(io)?;
    let columns: Vec<String> = r.headers().map_err(io)?.iter().map(str::to_string).collect();
    if columns.len() < BASE_COLUMNS.len() || columns[..BASE_COLUMNS.len()] != BASE_COLUMNS {
        return Err(bad(format!("unexpected header {columns:?}")));
    }
    let mut records: Vec<HashMap<String, String>> = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(io)?;
        records.push(
            columns
                .iter()
                .cloned()
                .zip(rec.iter().map(str::to_string))
                .collect(),
        );
    }
    let agg = records
        .pop()
        .filter(|r| r["entry_id"] == AGGREGATE_ID)
        .ok_or_else(|| bad("missing AGGREGATE row".into()))?;
    let num = |name: &str| -> Result<Option<S>, AggregateError> {
        match agg.get(name).map(String::as_str) {
            None | Some("") => Ok(None),
            Some(v) => v
                .parse::<S>()
                .map(Some)
                .map_err(|_| bad(format!("{name}: {v:?} is not a number"))),
        }
    };
    let int = |name: &str| -> Result<Option<u64>, AggregateError> {
        match agg.get(name).map(String::as_str) {
            None | Some("") => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| bad(format!("{name}: {v:?} is not an integer"))),
        }
    };
    let class_prob_sums = columns
        .iter()
        .filter_map(|c| c.strip_prefix("p_").map(|n| (c, n)))
        .map(|(c, n)| Ok((n.to_string(), num(c)?.unwrap_or_else(S::zero))))
        .collect::<Result<Vec<_>, AggregateError>>()?;
    let aggregate = ExportTotals {
        tile_count: int("tile_count")?.ok_or_else(|| bad("tile_count missing".into()))?,
        area_mm2: num("area_mm2")?.ok_or_else(|| bad("area_mm2 missing".into()))?,
        class_prob_sums,
        predicted: agg.get("predicted").filter(|v| !v.is_empty()).cloned(),
        model_count: int("model_count")?,
        final_count: int("final_count")?,
        positive: int("pos")?,
        negative: int("neg")?,
        density_per_mm2: num("density_per_mm2")?,
        aggregate_ki67_index: num("aggregate_ki67_index")?,
    };
    Ok(ParsedExport {
        columns,
        rows: records,
        aggregate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    use chrono::TimeZone;

    #[test]
    fn empty_session_exports_header_and_zero_aggregate() {
        let dir = tempfile::tempdir().unwrap();
        let s = AggregateSession::<f64>::new(chrono::Utc.with_ymd_and_hms(2025, 3, 4, 5, 6, 7).unwrap());
        let m = export_session(&s, dir.path()).unwrap();
        assert_eq!(m.dir.file_name().unwrap(), "export_20250304T050607.000Z");
        assert!(m.images.is_empty());
        let text = std::fs::read_to_string(&m.csv).unwrap();
        assert_eq!(
            text,
            "entry_id,task,model_id,tile_count,area_mm2,timestamp_ns,density_per_mm2,aggregate_ki67_index\n\
             AGGREGATE,,,0,0,,,\n"
        );
        let files: Vec<_> = std::fs::read_dir(&m.dir).unwrap().collect();
        assert_eq!(files.len(), 1);
        let parsed = parse_export::<f64>(&m.csv).unwrap();
        assert_eq!(parsed.aggregate, ExportTotals::from_totals(s.totals()));
    }

    #[test]
    fn unwritable_directory_fails_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        std::fs::write(&blocker, b"x").unwrap();
        let s = AggregateSession::<f64>::default();
        assert!(matches!(
            export_session(&s, &blocker.join("sub")),
            Err(AggregateError::IoFailure(_))
        ));
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn malformed_csv_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        std::fs::write(&p, "a,b\n1,2\n").unwrap();
        assert!(matches!(parse_export::<f64>(&p), Err(AggregateError::MalformedExport(_))));
    }
}
