//! Panel CSV ingestion.
//!
//! Rows are grouped by subject in order of first appearance and, when a time
//! column is declared, ordered by time within each subject. Modifiers are
//! min-max rescaled to `[0, 1]`, either with a map fitted here or with the map
//! stored alongside a fit.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use crate::config::DataSection;
use crate::data::{ColumnNames, ModifierScaling, PanelDataset};
use crate::error::{data_err, Result};

/// One parsed CSV row before grouping.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRow {
    pub subject: String,
    pub time: Option<f64>,
    pub y: Option<f64>,
    pub x: Vec<f64>,
    /// Modifiers on their original scale.
    pub z: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub names: ColumnNames,
    pub rows: Vec<RawRow>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IngestReport {
    /// Modifier columns with a single value, mapped to 0.5.
    pub constant_modifiers: Vec<String>,
    /// Modifier cells outside the stored range that were clamped.
    pub clamped: usize,
}

fn numbered(headers: &[String], prefix: char) -> Vec<String> {
    headers
        .iter()
        .filter(|h| {
            let mut c = h.chars();
            c.next() == Some(prefix) && {
                let rest = c.as_str();
                !rest.is_empty() && rest.chars().all(|d| d.is_ascii_digit())
            }
        })
        .cloned()
        .collect()
}

fn column(headers: &[String], name: &str) -> Result<usize> {
    headers.iter().position(|h| h == name).ok_or_else(|| data_err(format!("missing column `{name}`")))
}

fn cell(rec: &csv::StringRecord, idx: usize, line: usize, name: &str) -> Result<f64> {
    let s = rec.get(idx).unwrap_or("").trim();
    if s.is_empty() {
        return Err(data_err(format!("line {line}: empty cell in column `{name}`")));
    }
    let v: f64 = s.parse().map_err(|_| data_err(format!("line {line}: non-numeric value `{s}` in column `{name}`")))?;
    if !v.is_finite() {
        return Err(data_err(format!("line {line}: non-finite value in column `{name}`")));
    }
    Ok(v)
}

/// Parse a panel CSV. Lines starting with `#` are skipped. With
/// `require_outcome = false` a missing outcome column is allowed (points to
/// predict at).
pub fn read_table<R: Read>(reader: R, schema: &DataSection, require_outcome: bool) -> Result<RawTable> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let covariates = if schema.covariates.is_empty() { numbered(&headers, 'x') } else { schema.covariates.clone() };
    let modifiers = if schema.modifiers.is_empty() { numbered(&headers, 'z') } else { schema.modifiers.clone() };
    if modifiers.is_empty() {
        return Err(data_err("no modifier columns declared or found"));
    }
    let subject = column(&headers, &schema.subject)?;
    let time = schema.time.as_deref().map(|t| column(&headers, t)).transpose()?;
    let outcome = match column(&headers, &schema.outcome) {
        Ok(i) => Some(i),
        Err(e) if require_outcome => return Err(e),
        Err(_) => None,
    };
    let xi = covariates.iter().map(|c| column(&headers, c)).collect::<Result<Vec<_>>>()?;
    let zi = modifiers.iter().map(|c| column(&headers, c)).collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(k + 2);
        let id = rec.get(subject).unwrap_or("").trim();
        if id.is_empty() {
            return Err(data_err(format!("line {line}: empty subject id")));
        }
        rows.push(RawRow {
            subject: id.to_string(),
            time: time.map(|t| cell(&rec, t, line, schema.time.as_deref().unwrap())).transpose()?,
            y: outcome.map(|o| cell(&rec, o, line, &schema.outcome)).transpose()?,
            x: xi.iter().zip(&covariates).map(|(&i, n)| cell(&rec, i, line, n)).collect::<Result<_>>()?,
            z: zi.iter().zip(&modifiers).map(|(&i, n)| cell(&rec, i, line, n)).collect::<Result<_>>()?,
        });
    }
    if rows.is_empty() {
        return Err(data_err("no data rows"));
    }
    Ok(RawTable { names: ColumnNames { outcome: schema.outcome.clone(), covariates, modifiers }, rows })
}

impl RawTable {
    /// Row indices grouped by subject (first-appearance order), sorted by time.
    pub fn groups(&self) -> (Vec<String>, Vec<Vec<usize>>) {
        let mut ids = Vec::new();
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for (k, row) in self.rows.iter().enumerate() {
            let g = *index.entry(&row.subject).or_insert_with(|| {
                ids.push(row.subject.clone());
                groups.push(Vec::new());
                groups.len() - 1
            });
            groups[g].push(k);
        }
        for g in &mut groups {
            g.sort_by(|&a, &b| {
                let (ta, tb) = (self.rows[a].time, self.rows[b].time);
                ta.unwrap_or(0.0).total_cmp(&tb.unwrap_or(0.0))
            });
        }
        (ids, groups)
    }

    pub fn fit_scaling(&self) -> ModifierScaling {
        let r = self.names.modifiers.len();
        let cols: Vec<Vec<f64>> = (0..r).map(|v| self.rows.iter().map(|row| row.z[v]).collect()).collect();
        ModifierScaling::fit(&cols)
    }

    /// Assemble a dataset using `scaling` for the modifiers.
    pub fn to_dataset(&self, scaling: &ModifierScaling) -> Result<(PanelDataset, IngestReport)> {
        if scaling.len() != self.names.modifiers.len() {
            return Err(data_err("modifier scaling does not match the declared modifiers"));
        }
        let mut report = IngestReport {
            constant_modifiers: (0..scaling.len())
                .filter(|&v| scaling.is_constant(v))
                .map(|v| self.names.modifiers[v].clone())
                .collect(),
            clamped: 0,
        };
        let (ids, groups) = self.groups();
        let mut y = Vec::with_capacity(self.rows.len());
        let mut x = Vec::new();
        let mut z = Vec::new();
        for &k in groups.iter().flatten() {
            let row = &self.rows[k];
            y.push(row.y.unwrap_or(0.0));
            x.extend_from_slice(&row.x);
            let (s, c) = scaling.rescale_point(&row.z);
            report.clamped += c;
            z.extend(s);
        }
        let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
        let data = PanelDataset::from_rows(ids, &sizes, y, &x, z, scaling.clone(), self.names.clone())?;
        Ok((data, report))
    }
}

/// Read a training panel, fitting the modifier rescaling from its rows.
pub fn ingest(path: &Path, schema: &DataSection) -> Result<(PanelDataset, IngestReport)> {
    let file = std::fs::File::open(path).map_err(|e| data_err(format!("cannot open {}: {e}", path.display())))?;
    let table = read_table(file, schema, true)?;
    let scaling = table.fit_scaling();
    let (data, report) = table.to_dataset(&scaling)?;
    for name in &report.constant_modifiers {
        log::warn!("modifier `{name}` is constant; every value is mapped to 0.5");
    }
    Ok((data, report))
}

/// Read rows to score with a stored rescaling; out-of-range modifiers clamp.
pub fn read_points(path: &Path, schema: &DataSection, scaling: &ModifierScaling) -> Result<(RawTable, IngestReport)> {
    let file = std::fs::File::open(path).map_err(|e| data_err(format!("cannot open {}: {e}", path.display())))?;
    let table = read_table(file, schema, false)?;
    if table.names.modifiers.len() != scaling.len() {
        return Err(data_err(format!(
            "expected {} modifier columns, found {}",
            scaling.len(),
            table.names.modifiers.len()
        )));
    }
    let clamped = table.rows.iter().map(|r| scaling.rescale_point(&r.z).1).sum();
    if clamped > 0 {
        log::warn!("{clamped} modifier values fell outside the training range and were clamped");
    }
    Ok((table, IngestReport { constant_modifiers: Vec::new(), clamped }))
}
