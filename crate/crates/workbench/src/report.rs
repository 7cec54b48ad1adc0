//! Result records: one metric per row, fixed column order, written as CSV
//! and mirrored as JSON lines. Every row carries the config hash.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, WorkbenchError};

/// Documented column order of `results.csv`.
pub const CSV_COLUMNS: [&str; 19] = [
    "config_hash",
    "stage",
    "dataset",
    "split",
    "network",
    "init",
    "seed",
    "provenance",
    "ratio",
    "pattern",
    "attack",
    "attacker",
    "defender",
    "adaptive",
    "estimator",
    "eps",
    "n",
    "metric",
    "value",
];

/// One metric observation. Empty strings mean "not applicable".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub config_hash: String,
    pub stage: String,
    pub dataset: String,
    pub split: String,
    pub network: String,
    pub init: String,
    pub seed: u64,
    pub provenance: String,
    pub ratio: String,
    pub pattern: String,
    pub attack: String,
    pub attacker: String,
    pub defender: String,
    pub adaptive: String,
    pub estimator: String,
    pub eps: String,
    pub n: usize,
    pub metric: String,
    pub value: f64,
}

impl Row {
    fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{:.6}\n",
            self.config_hash,
            self.stage,
            self.dataset,
            self.split,
            self.network,
            self.init,
            self.seed,
            self.provenance,
            self.ratio,
            self.pattern,
            self.attack,
            self.attacker,
            self.defender,
            self.adaptive,
            self.estimator,
            self.eps,
            self.n,
            self.metric,
            self.value
        )
    }
}

/// Formats a ratio for row fields: fixed 4 decimals so rows sort and match
/// deterministically.
pub fn ratio_field(ratio: f64) -> String {
    format!("{ratio:.4}")
}

pub fn eps_field(eps: f64) -> String {
    format!("{eps:.6}")
}

/// Writes the whole result set: `results.csv` (with header) and
/// `results.jsonl`, truncating previous contents. Row order is the caller's,
/// so identical runs produce byte-identical files.
pub fn write_all(dir: &Path, rows: &[Row]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| WorkbenchError::io(dir, e))?;
    let csv_path = dir.join("results.csv");
    let mut csv = String::new();
    csv.push_str(&CSV_COLUMNS.join(","));
    csv.push('\n');
    for row in rows {
        csv.push_str(&row.csv_line());
    }
    std::fs::write(&csv_path, csv).map_err(|e| WorkbenchError::io(&csv_path, e))?;

    let json_path = dir.join("results.jsonl");
    let mut out = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut out, row).expect("row serializes");
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(&json_path).map_err(|e| WorkbenchError::io(&json_path, e))?;
    f.write_all(&out).map_err(|e| WorkbenchError::io(&json_path, e))?;
    Ok(())
}

/// Reads a results CSV back into rows (used by the plot stage).
pub fn read_csv(path: &Path) -> Result<Vec<Row>> {
    let text = std::fs::read_to_string(path).map_err(|e| WorkbenchError::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| WorkbenchError::PlotSchema("empty csv".into()))?;
    let have: Vec<&str> = header.split(',').collect();
    if have != CSV_COLUMNS {
        let missing: Vec<&str> = CSV_COLUMNS
            .iter()
            .filter(|c| !have.contains(c))
            .copied()
            .collect();
        return Err(WorkbenchError::PlotSchema(format!(
            "csv header mismatch; missing columns: {missing:?}"
        )));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != CSV_COLUMNS.len() {
            return Err(WorkbenchError::PlotSchema(format!(
                "line {}: {} fields, expected {}",
                i + 2,
                f.len(),
                CSV_COLUMNS.len()
            )));
        }
        rows.push(Row {
            config_hash: f[0].into(),
            stage: f[1].into(),
            dataset: f[2].into(),
            split: f[3].into(),
            network: f[4].into(),
            init: f[5].into(),
            seed: f[6]
                .parse()
                .map_err(|_| WorkbenchError::PlotSchema(format!("line {}: bad seed", i + 2)))?,
            provenance: f[7].into(),
            ratio: f[8].into(),
            pattern: f[9].into(),
            attack: f[10].into(),
            attacker: f[11].into(),
            defender: f[12].into(),
            adaptive: f[13].into(),
            estimator: f[14].into(),
            eps: f[15].into(),
            n: f[16]
                .parse()
                .map_err(|_| WorkbenchError::PlotSchema(format!("line {}: bad n", i + 2)))?,
            metric: f[17].into(),
            value: f[18]
                .parse()
                .map_err(|_| WorkbenchError::PlotSchema(format!("line {}: bad value", i + 2)))?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample_row() -> Row {
        Row {
            config_hash: "abc123".into(),
            stage: "search".into(),
            dataset: "desk-digits".into(),
            split: "test".into(),
            network: "desk_cnn:1x8x8:10".into(),
            init: "signed_kaiming_constant".into(),
            seed: 17,
            provenance: "rst".into(),
            ratio: ratio_field(0.1),
            pattern: "element".into(),
            attack: "pgd20-linf-eps0.1".into(),
            attacker: String::new(),
            defender: String::new(),
            adaptive: String::new(),
            estimator: String::new(),
            eps: eps_field(0.1),
            n: 297,
            metric: "robust_acc".into(),
            value: 0.5432109,
        }
    }

    #[test]
    fn csv_round_trip() {
        let dir = std::env::temp_dir().join(format!("rst-report-{}", std::process::id()));
        let rows = vec![sample_row()];
        write_all(&dir, &rows).unwrap();
        let back = read_csv(&dir.join("results.csv")).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].config_hash, "abc123");
        assert!((back[0].value - 0.543211).abs() < 1e-9, "6-decimal rounding");
        // Byte-identical rewrite.
        let first = std::fs::read(dir.join("results.csv")).unwrap();
        write_all(&dir, &rows).unwrap();
        assert_eq!(first, std::fs::read(dir.join("results.csv")).unwrap());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn schema_mismatch_lists_missing_columns() {
        let dir = std::env::temp_dir().join(format!("rst-report2-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.csv");
        std::fs::write(&path, "a,b,c\n1,2,3\n").unwrap();
        match read_csv(&path) {
            Err(WorkbenchError::PlotSchema(msg)) => {
                assert!(msg.contains("config_hash") && msg.contains("metric"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
        std::fs::remove_dir_all(&dir).ok();
    }
}
