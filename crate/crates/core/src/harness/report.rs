//! Per-image rows, their CSV form, and the metrics aggregated from them.
//!
//! Column order of the per-image CSV (one header row):
//!
//! ```text
//! index, path, true_label, clean_label, status, error,
//! then for m in (edgefool, fgsm):
//!   m_success, m_success_q, m_label, m_label_q, m_iterations,
//!   m_warmup_iterations, m_epsilon, m_loss_total, m_loss_smooth,
//!   m_loss_adv, m_mean_abs_diff, m_clamp_fraction,
//!   m_transfer:<model>..., m_transfer_q:<model>...,
//!   m_score:<squeezer>..., m_flag:<squeezer>..., m_joint_flag
//! ```
//!
//! `_q` columns refer to the 8-bit quantized adversarial (the saved PNG).
//! Optional values are empty cells. Metrics recomputed from a CSV equal the
//! ones computed from the in-memory rows.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowStatus {
    Attacked,
    /// The target model misclassifies the clean image.
    Skipped,
    /// A sub-step failed; see the row's error.
    Error,
}

impl RowStatus {
    fn as_str(&self) -> &'static str {
        match self {
            RowStatus::Attacked => "attacked",
            RowStatus::Skipped => "skipped",
            RowStatus::Error => "error",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "attacked" => Ok(RowStatus::Attacked),
            "skipped" => Ok(RowStatus::Skipped),
            "error" => Ok(RowStatus::Error),
            other => Err(Error::Format(format!("unknown row status '{other}'"))),
        }
    }
}

/// Outcome of one attack method on one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub success: bool,
    pub success_quantized: bool,
    pub label: usize,
    pub label_quantized: usize,
    pub iterations: usize,
    pub warmup_iterations: usize,
    pub epsilon: Option<f64>,
    pub loss_total: Option<f64>,
    pub loss_smooth: Option<f64>,
    pub loss_adversarial: Option<f64>,
    pub mean_abs_diff: f64,
    pub clamp_fraction: f64,
    /// Per transfer model: attack succeeded and that model also misclassifies.
    pub transfer: Vec<bool>,
    pub transfer_quantized: Vec<bool>,
    /// Per squeezer, on the quantized adversarial.
    pub scores: Vec<f64>,
    pub flags: Vec<bool>,
    pub joint_flag: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRow {
    pub index: usize,
    pub path: String,
    pub true_label: usize,
    pub clean_label: usize,
    pub status: RowStatus,
    pub error: Option<String>,
    pub edgefool: Option<MethodRow>,
    pub fgsm: Option<MethodRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub attacked: usize,
    pub successes: usize,
    pub successes_quantized: usize,
    pub misleading_rate: Option<f64>,
    pub misleading_rate_quantized: Option<f64>,
    pub transferability: BTreeMap<String, Option<f64>>,
    pub transferability_quantized: BTreeMap<String, Option<f64>>,
    /// Flagged fraction of the quantized successful adversarials.
    pub detectability: BTreeMap<String, Option<f64>>,
    pub joint_detectability: Option<f64>,
    pub mean_abs_diff: Option<f64>,
    pub mean_iterations: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub total: usize,
    pub attacked: usize,
    pub skipped: usize,
    pub errors: usize,
    pub edgefool: MethodMetrics,
    pub fgsm: Option<MethodMetrics>,
}

/// Names of the transfer models and squeezers that index the row vectors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowSchema {
    pub transfer_models: Vec<String>,
    pub squeezers: Vec<String>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn method_metrics<'a>(rows: impl Iterator<Item = &'a MethodRow> + Clone, schema: &RowSchema) -> MethodMetrics {
    let attacked = rows.clone().count();
    let successes = rows.clone().filter(|r| r.success).count();
    let successes_quantized = rows.clone().filter(|r| r.success_quantized).count();
    let per_model = |quantized: bool| -> BTreeMap<String, Option<f64>> {
        schema
            .transfer_models
            .iter()
            .enumerate()
            .map(|(j, name)| {
                let n = rows
                    .clone()
                    .filter(|r| if quantized { r.transfer_quantized[j] } else { r.transfer[j] })
                    .count();
                (name.clone(), ratio(n, attacked))
            })
            .collect()
    };
    let detectability = schema
        .squeezers
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let n = rows.clone().filter(|r| r.success_quantized && r.flags[j]).count();
            (name.clone(), ratio(n, successes_quantized))
        })
        .collect();
    let joint = rows.clone().filter(|r| r.success_quantized && r.joint_flag).count();
    MethodMetrics {
        attacked,
        successes,
        successes_quantized,
        misleading_rate: ratio(successes, attacked),
        misleading_rate_quantized: ratio(successes_quantized, attacked),
        transferability: per_model(false),
        transferability_quantized: per_model(true),
        detectability,
        joint_detectability: if schema.squeezers.is_empty() { None } else { ratio(joint, successes_quantized) },
        mean_abs_diff: (attacked > 0).then(|| rows.clone().map(|r| r.mean_abs_diff).sum::<f64>() / attacked as f64),
        mean_iterations: (attacked > 0).then(|| rows.clone().map(|r| r.iterations as f64).sum::<f64>() / attacked as f64),
    }
}

pub fn compute_metrics(rows: &[ImageRow], schema: &RowSchema) -> Metrics {
    let count = |s: RowStatus| rows.iter().filter(|r| r.status == s).count();
    let has_fgsm = rows.iter().any(|r| r.fgsm.is_some());
    Metrics {
        total: rows.len(),
        attacked: count(RowStatus::Attacked),
        skipped: count(RowStatus::Skipped),
        errors: count(RowStatus::Error),
        edgefool: method_metrics(rows.iter().filter_map(|r| r.edgefool.as_ref()), schema),
        fgsm: has_fgsm.then(|| method_metrics(rows.iter().filter_map(|r| r.fgsm.as_ref()), schema)),
    }
}

const METHODS: [&str; 2] = ["edgefool", "fgsm"];

pub fn csv_header(schema: &RowSchema) -> Vec<String> {
    let mut h: Vec<String> = ["index", "path", "true_label", "clean_label", "status", "error"]
        .map(String::from)
        .to_vec();
    for m in METHODS {
        for col in [
            "success",
            "success_q",
            "label",
            "label_q",
            "iterations",
            "warmup_iterations",
            "epsilon",
            "loss_total",
            "loss_smooth",
            "loss_adv",
            "mean_abs_diff",
            "clamp_fraction",
        ] {
            h.push(format!("{m}_{col}"));
        }
        for t in &schema.transfer_models {
            h.push(format!("{m}_transfer:{t}"));
        }
        for t in &schema.transfer_models {
            h.push(format!("{m}_transfer_q:{t}"));
        }
        for s in &schema.squeezers {
            h.push(format!("{m}_score:{s}"));
        }
        for s in &schema.squeezers {
            h.push(format!("{m}_flag:{s}"));
        }
        h.push(format!("{m}_joint_flag"));
    }
    h
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn method_cells(m: Option<&MethodRow>, schema: &RowSchema) -> Vec<String> {
    let width = 13 + 2 * schema.transfer_models.len() + 2 * schema.squeezers.len();
    let Some(m) = m else {
        return vec![String::new(); width];
    };
    let mut c = vec![
        m.success.to_string(),
        m.success_quantized.to_string(),
        m.label.to_string(),
        m.label_quantized.to_string(),
        m.iterations.to_string(),
        m.warmup_iterations.to_string(),
        opt(m.epsilon),
        opt(m.loss_total),
        opt(m.loss_smooth),
        opt(m.loss_adversarial),
        m.mean_abs_diff.to_string(),
        m.clamp_fraction.to_string(),
    ];
    c.extend(m.transfer.iter().map(bool::to_string));
    c.extend(m.transfer_quantized.iter().map(bool::to_string));
    c.extend(m.scores.iter().map(f64::to_string));
    c.extend(m.flags.iter().map(bool::to_string));
    c.push(m.joint_flag.to_string());
    c
}

pub fn write_rows_csv(path: &Path, rows: &[ImageRow], schema: &RowSchema) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(csv_header(schema))?;
    for r in rows {
        let mut rec = vec![
            r.index.to_string(),
            r.path.clone(),
            r.true_label.to_string(),
            r.clean_label.to_string(),
            r.status.as_str().to_string(),
            r.error.clone().unwrap_or_default(),
        ];
        rec.extend(method_cells(r.edgefool.as_ref(), schema));
        rec.extend(method_cells(r.fgsm.as_ref(), schema));
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

struct Cells<'a> {
    rec: &'a csv::StringRecord,
    header: &'a csv::StringRecord,
    pos: usize,
}

impl Cells<'_> {
    fn next(&mut self) -> Result<&str> {
        let v = self
            .rec
            .get(self.pos)
            .ok_or_else(|| Error::Format(format!("row has {} cells, header {}", self.rec.len(), self.header.len())))?;
        self.pos += 1;
        Ok(v)
    }

    fn parse<T: std::str::FromStr>(&mut self) -> Result<T> {
        let col = self.header.get(self.pos).unwrap_or("?").to_string();
        let v = self.next()?;
        v.parse().map_err(|_| Error::Format(format!("column {col}: cannot parse '{v}'")))
    }

    fn parse_opt<T: std::str::FromStr>(&mut self) -> Result<Option<T>> {
        if self.rec.get(self.pos) == Some("") {
            self.pos += 1;
            Ok(None)
        } else {
            self.parse().map(Some)
        }
    }

    fn parse_n<T: std::str::FromStr>(&mut self, n: usize) -> Result<Vec<T>> {
        (0..n).map(|_| self.parse()).collect()
    }
}

fn schema_from_header(header: &csv::StringRecord) -> RowSchema {
    let collect = |prefix: &str| -> Vec<String> {
        header
            .iter()
            .filter_map(|h| h.strip_prefix(prefix).map(String::from))
            .collect()
    };
    RowSchema {
        transfer_models: collect("edgefool_transfer:"),
        squeezers: collect("edgefool_score:"),
    }
}

fn parse_method(cells: &mut Cells<'_>, schema: &RowSchema) -> Result<Option<MethodRow>> {
    let width = 13 + 2 * schema.transfer_models.len() + 2 * schema.squeezers.len();
    if cells.rec.get(cells.pos) == Some("") {
        cells.pos += width;
        return Ok(None);
    }
    let (nt, ns) = (schema.transfer_models.len(), schema.squeezers.len());
    Ok(Some(MethodRow {
        success: cells.parse()?,
        success_quantized: cells.parse()?,
        label: cells.parse()?,
        label_quantized: cells.parse()?,
        iterations: cells.parse()?,
        warmup_iterations: cells.parse()?,
        epsilon: cells.parse_opt()?,
        loss_total: cells.parse_opt()?,
        loss_smooth: cells.parse_opt()?,
        loss_adversarial: cells.parse_opt()?,
        mean_abs_diff: cells.parse()?,
        clamp_fraction: cells.parse()?,
        transfer: cells.parse_n(nt)?,
        transfer_quantized: cells.parse_n(nt)?,
        scores: cells.parse_n(ns)?,
        flags: cells.parse_n(ns)?,
        joint_flag: cells.parse()?,
    }))
}

/// Reads rows written by [`write_rows_csv`]; the schema comes from the header.
pub fn read_rows_csv(path: &Path) -> Result<(RowSchema, Vec<ImageRow>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let schema = schema_from_header(&header);
    if header.iter().map(String::from).collect::<Vec<_>>() != csv_header(&schema) {
        return Err(Error::Format(format!("{}: unexpected CSV header", path.display())));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let mut c = Cells {
            rec: &rec,
            header: &header,
            pos: 0,
        };
        let index = c.parse()?;
        let path = c.next()?.to_string();
        let true_label = c.parse()?;
        let clean_label = c.parse()?;
        let status = RowStatus::parse(c.next()?)?;
        let error = Some(c.next()?.to_string()).filter(|e| !e.is_empty());
        rows.push(ImageRow {
            index,
            path,
            true_label,
            clean_label,
            status,
            error,
            edgefool: parse_method(&mut c, &schema)?,
            fgsm: parse_method(&mut c, &schema)?,
        });
    }
    Ok((schema, rows))
}

fn fmt_rate(r: Option<f64>) -> String {
    r.map(|v| format!("{v:.3}")).unwrap_or_else(|| "n/a".into())
}

/// Plain-text summary table.
pub fn render_metrics(m: &Metrics) -> String {
    use std::fmt::Write;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "images {}  attacked {}  skipped {}  errors {}",
        m.total, m.attacked, m.skipped, m.errors
    );
    let methods = std::iter::once(("edgefool", &m.edgefool)).chain(m.fgsm.as_ref().map(|f| ("fgsm", f)));
    for (name, mm) in methods {
        let _ = writeln!(
            s,
            "{name}: misleading {} (quantized {})  mean |diff| {}",
            fmt_rate(mm.misleading_rate),
            fmt_rate(mm.misleading_rate_quantized),
            mm.mean_abs_diff.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into())
        );
        for (model, r) in &mm.transferability {
            let _ = writeln!(
                s,
                "  transfer {model}: {} (quantized {})",
                fmt_rate(*r),
                fmt_rate(mm.transferability_quantized[model])
            );
        }
        for (sq, r) in &mm.detectability {
            let _ = writeln!(s, "  detect {sq}: {}", fmt_rate(*r));
        }
        if mm.joint_detectability.is_some() {
            let _ = writeln!(s, "  detect joint: {}", fmt_rate(mm.joint_detectability));
        }
    }
    s
}
