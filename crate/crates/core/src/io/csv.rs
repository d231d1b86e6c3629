//! CSV exports. Each file opens with `# key=value` lines echoing the flags
//! that produced it.

use std::path::Path;

use super::{write_bytes, Echo};
use crate::error::Error;
use crate::metrics::MetricReport;
use crate::model::AttentionRecord;
use crate::train::LogRow;

pub const ATTENTION_COLUMNS: &str = "scale,slice_z,head,depth_index,weight";

fn echo_lines(echo: &Echo) -> String {
    echo.iter().map(|(k, v)| format!("# {k}={v}\n")).collect()
}

pub fn write_text(path: &Path, echo: &Echo, body: &str) -> Result<(), Error> {
    write_bytes(path, format!("{}{body}", echo_lines(echo)).as_bytes())
}

/// One row per depth position; weights are written at f32 precision.
pub fn attention_csv(records: &[AttentionRecord]) -> String {
    let mut s = format!("{ATTENTION_COLUMNS}\n");
    for r in records {
        for (k, w) in r.weights.iter().enumerate() {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.scale, r.slice_z, r.head, k, *w as f32
            ));
        }
    }
    s
}

/// Inverse of [`attention_csv`], skipping `#` lines. Consecutive rows with the
/// same `(scale, slice_z, head)` and depth indices `0, 1, ...` form a record.
pub fn parse_attention(text: &str) -> Result<Vec<AttentionRecord>, Error> {
    let mut out: Vec<AttentionRecord> = Vec::new();
    let mut seen_header = false;
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !seen_header {
            if line != ATTENTION_COLUMNS {
                return Err(Error::parse(
                    n,
                    format!("expected header '{ATTENTION_COLUMNS}'"),
                ));
            }
            seen_header = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::parse(
                n,
                format!("expected 5 fields, found {}", fields.len()),
            ));
        }
        let int = |k: usize| -> Result<usize, Error> {
            fields[k]
                .trim()
                .parse()
                .map_err(|_| Error::parse(n, format!("bad integer '{}'", fields[k])))
        };
        let (scale, slice_z, head, depth) = (int(0)?, int(1)?, int(2)?, int(3)?);
        let weight: f32 = fields[4]
            .trim()
            .parse()
            .map_err(|_| Error::parse(n, format!("bad weight '{}'", fields[4])))?;
        if !weight.is_finite() {
            return Err(Error::parse(n, "weight must be finite"));
        }
        match out.last_mut() {
            Some(r) if depth > 0 => {
                if (r.scale, r.slice_z, r.head) != (scale, slice_z, head)
                    || r.weights.len() != depth
                {
                    return Err(Error::parse(
                        n,
                        format!("depth index {depth} out of sequence"),
                    ));
                }
                r.weights.push(weight as f64);
            }
            _ if depth == 0 => out.push(AttentionRecord {
                scale,
                slice_z,
                head,
                weights: vec![weight as f64],
            }),
            _ => {
                return Err(Error::parse(
                    n,
                    format!("record starts at depth index {depth}"),
                ))
            }
        }
    }
    if !seen_header {
        return Err(Error::parse(0, "missing header"));
    }
    Ok(out)
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("step,l2d,l3d,total,wall_ms\n");
    for r in rows {
        let wall = r.wall_ms.map(|w| format!("{w:.3}")).unwrap_or_default();
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step, r.l2d, r.l3d, r.total, wall
        ));
    }
    s
}

pub fn metrics_csv(report: &MetricReport) -> String {
    report.to_csv()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attention_round_trip() {
        let recs = vec![
            AttentionRecord {
                scale: 2,
                slice_z: 3,
                head: 0,
                weights: vec![0.1, 0.2, 0.7],
            },
            AttentionRecord {
                scale: 5,
                slice_z: 3,
                head: 1,
                weights: vec![1.0],
            },
        ];
        let text = attention_csv(&recs);
        assert_eq!(text.lines().count(), 1 + 4);
        let back = parse_attention(&format!("# seed=1\n{text}")).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in recs.iter().zip(&back) {
            for (x, y) in a.weights.iter().zip(&b.weights) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
    }

    #[test]
    fn out_of_sequence_depth_is_an_error() {
        let text = format!("{ATTENTION_COLUMNS}\n2,0,0,0,0.5\n2,0,0,2,0.5\n");
        assert!(matches!(
            parse_attention(&text),
            Err(Error::Parse { line: 3, .. })
        ));
    }

    #[test]
    fn missing_wall_time_is_an_empty_cell() {
        let rows = [LogRow {
            step: 1,
            l2d: 0.5,
            l3d: 0.25,
            total: 0.75,
            wall_ms: None,
        }];
        assert_eq!(
            log_csv(&rows),
            "step,l2d,l3d,total,wall_ms\n1,0.5,0.25,0.75,\n"
        );
    }
}
