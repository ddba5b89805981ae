//! Flat result tables, run manifests and the synthetic panel writer.
//!
//! Every CSV written here starts with a `# config_hash=<hex>` comment line.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::benchmark::ResultRow;
use crate::data::PanelDataset;
use crate::error::{data_err, Error, Result};
use crate::synthetic::{SyntheticConfig, SyntheticTruth};

pub const HASH_PREFIX: &str = "# config_hash=";

/// Write a CSV with the hash comment line first.
pub fn write_csv<T: Serialize>(path: &Path, config_hash: &str, rows: &[T]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(file, "{HASH_PREFIX}{config_hash}")?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a CSV written by [`write_csv`], returning the embedded hash and rows.
pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<(Option<String>, Vec<T>)> {
    let text = std::fs::read_to_string(path)?;
    let hash = read_hash_line(&text);
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let rows = rdr.deserialize().collect::<std::result::Result<Vec<T>, _>>()?;
    Ok((hash, rows))
}

pub fn read_hash_line(text: &str) -> Option<String> {
    text.lines().next().and_then(|l| l.strip_prefix(HASH_PREFIX)).map(|h| h.trim().to_string())
}

/// Hash embedded in the first line of a file, if any.
pub fn embedded_hash(path: &Path) -> Result<Option<String>> {
    use std::io::BufRead;
    let mut first = String::new();
    std::io::BufReader::new(std::fs::File::open(path)?).read_line(&mut first)?;
    Ok(read_hash_line(&first))
}

pub fn write_results(path: &Path, config_hash: &str, rows: &[ResultRow]) -> Result<()> {
    write_csv(path, config_hash, rows)
}

pub fn read_results(path: &Path) -> Result<(Option<String>, Vec<ResultRow>)> {
    read_csv(path)
}

/// Machine-readable description of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    #[serde(default)]
    pub details: serde_json::Value,
}

impl RunManifest {
    pub fn new(command: &str, config_hash: &str, seed: u64, details: serde_json::Value) -> Self {
        RunManifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_hash: config_hash.into(),
            seed,
            details,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| data_err(e.to_string()))?;
        std::fs::write(path, json + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("bad manifest {}: {e}", path.display())))
    }
}

/// Write a dataset in the panel CSV layout the ingester reads, with a
/// `time` column counting observations within each subject from 1.
pub fn write_panel_csv(path: &Path, config_hash: &str, data: &PanelDataset) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(file, "{HASH_PREFIX}{config_hash}")?;
    let mut w = csv::Writer::from_writer(file);
    let mut header = vec!["subject_id".to_string(), "time".into(), data.names.outcome.clone()];
    header.extend(data.names.covariates.iter().cloned());
    header.extend(data.names.modifiers.iter().cloned());
    w.write_record(&header)?;
    for i in 0..data.n_subjects() {
        for (t, row) in data.subject_rows(i).enumerate() {
            let mut rec = vec![data.subject_ids()[i].clone(), (t + 1).to_string(), data.y()[row].to_string()];
            rec.extend(data.covariate_row(row).iter().map(f64::to_string));
            rec.extend(
                data.modifiers(row).iter().enumerate().map(|(v, &s)| data.scaling.unscale(v, s).to_string()),
            );
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Per-row true coefficients, aligned with [`write_panel_csv`].
pub fn write_truth_csv(path: &Path, config_hash: &str, data: &PanelDataset, truth: &SyntheticTruth) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(file, "{HASH_PREFIX}{config_hash}")?;
    let mut w = csv::Writer::from_writer(file);
    let mut header = vec!["subject_id".to_string(), "time".into()];
    header.extend((0..truth.beta.len()).map(|j| format!("beta{j}")));
    w.write_record(&header)?;
    for i in 0..data.n_subjects() {
        for (t, row) in data.subject_rows(i).enumerate() {
            let mut rec = vec![data.subject_ids()[i].clone(), (t + 1).to_string()];
            rec.extend(truth.beta.iter().map(|b| b[row].to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Manifest details for a simulated dataset: generation settings and the
/// modifiers each coefficient truly depends on (column names).
pub fn synthetic_details(config: &SyntheticConfig, data: &PanelDataset, truth: &SyntheticTruth) -> serde_json::Value {
    let support: serde_json::Map<String, serde_json::Value> = (0..truth.beta.len())
        .map(|j| {
            let names: Vec<&str> = truth.support(j).iter().map(|&v| data.names.modifiers[v].as_str()).collect();
            (format!("beta{j}"), serde_json::json!(names))
        })
        .collect();
    serde_json::json!({
        "synthetic": config,
        "rows": data.n_obs(),
        "support": support,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DataSection;
    use crate::io::ingest::ingest;
    use crate::synthetic::gen_panel;

    #[test]
    fn results_round_trip() {
        let rows = vec![
            ResultRow { replicate: 0, method: "vcbart".into(), metric: "beta_mse".into(), value: 0.125 },
            ResultRow { replicate: 1, method: "linear".into(), metric: "beta_coverage".into(), value: 1.0 / 3.0 },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        write_results(&path, "h1", &rows).unwrap();
        let (hash, back) = read_results(&path).unwrap();
        assert_eq!(hash.as_deref(), Some("h1"));
        assert_eq!(back, rows);
        assert_eq!(embedded_hash(&path).unwrap().as_deref(), Some("h1"));
    }

    #[test]
    fn manifest_round_trip() {
        let m = RunManifest::new("simulate", "h", 3, serde_json::json!({"rho": 0.5}));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        m.write(&path).unwrap();
        assert_eq!(RunManifest::read(&path).unwrap(), m);
    }

    #[test]
    fn simulated_panel_reingests_exactly() {
        let cfg = SyntheticConfig { n: 12, n_i: 3, seed: 4, ..Default::default() };
        let (data, truth) = gen_panel(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("panel.csv");
        write_panel_csv(&path, "h", &data).unwrap();
        let schema = DataSection { time: Some("time".into()), ..Default::default() };
        let (back, _) = ingest(&path, &schema).unwrap();
        assert_eq!(back.y(), data.y());
        assert_eq!(back.subject_ids(), data.subject_ids());
        for row in 0..data.n_obs() {
            assert_eq!(back.covariate_row(row), data.covariate_row(row));
            // the refitted min-max map differs from the identity, but maps back
            for (v, (a, b)) in back.modifiers(row).iter().zip(data.modifiers(row)).enumerate() {
                assert!((back.scaling.unscale(v, *a) - b).abs() < 1e-12);
            }
        }
        let tpath = dir.path().join("truth.csv");
        write_truth_csv(&tpath, "h", &data, &truth).unwrap();
        let text = std::fs::read_to_string(&tpath).unwrap();
        assert_eq!(text.lines().count(), 2 + data.n_obs());
        let details = synthetic_details(&cfg, &data, &truth);
        assert_eq!(details["support"]["beta3"], serde_json::json!(["z1", "z3", "z4"]));
    }
}
