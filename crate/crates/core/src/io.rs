//! JSON-lines round records and CSV summaries.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::SummaryRow;
use crate::orchestrator::RoundRecord;

/// One JSON object per line, snake_case keys, `\n` terminated.
pub fn records_to_jsonl(records: &[RoundRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_records_jsonl(mut writer: impl Write, records: &[RoundRecord]) -> Result<()> {
    writer.write_all(records_to_jsonl(records)?.as_bytes())?;
    Ok(())
}

pub fn read_records_jsonl(path: &Path) -> Result<Vec<RoundRecord>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut records = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}

pub fn summary_to_csv(rows: &[SummaryRow]) -> Result<String> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        writer.write_record([
            "strategy",
            "delta",
            "beta",
            "seed",
            "status",
            "final_accuracy",
            "best_accuracy",
            "rounds_to_target",
            "aggregations_to_target",
            "speedup",
            "mean_drift_variance",
            "gamma",
        ])?;
    }
    for row in rows {
        writer.serialize(row)?;
    }
    let bytes = writer.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn read_summary_csv(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    reader.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!("{}.tmp", path.extension().and_then(|e| e.to_str()).unwrap_or_default()));
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orchestrator::Action;

    #[test]
    fn jsonl_uses_snake_case_keys() {
        let r = RoundRecord {
            round: 2,
            action: Action::Skip,
            test_accuracy: None,
            drift_variance: Some(0.5),
            aggregations_so_far: 2,
            comm_rounds_so_far: 3,
            wall_time_ms: 0,
        };
        let text = records_to_jsonl(std::slice::from_ref(&r)).unwrap();
        assert_eq!(
            text,
            "{\"round\":2,\"action\":\"skip\",\"test_accuracy\":null,\"drift_variance\":0.5,\"aggregations_so_far\":2,\"comm_rounds_so_far\":3,\"wall_time_ms\":0}\n"
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        write_atomic(&path, text.as_bytes()).unwrap();
        assert_eq!(read_records_jsonl(&path).unwrap(), vec![r]);
    }

    #[test]
    fn summary_csv_round_trips() {
        let row = SummaryRow {
            strategy: "fedskip-3".into(),
            delta: 3,
            beta: "inf".into(),
            seed: 1,
            status: "ok".into(),
            final_accuracy: Some(0.75),
            best_accuracy: Some(0.8),
            rounds_to_target: None,
            aggregations_to_target: None,
            speedup: None,
            mean_drift_variance: Some(0.01),
            gamma: None,
        };
        let text = summary_to_csv(std::slice::from_ref(&row)).unwrap();
        assert!(text.starts_with("strategy,delta,beta,seed,status,final_accuracy,"));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        std::fs::write(&path, &text).unwrap();
        assert_eq!(read_summary_csv(&path).unwrap(), vec![row]);
    }
}
