//! GPS probe records and their JSON-lines encoding.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub trace_id: String,
    /// Seconds since the epoch.
    pub t: f64,
    pub lon: f64,
    pub lat: f64,
    /// Compass bearing of travel in [0, 360).
    pub heading: f64,
    pub modality: String,
}

pub fn write_jsonl(mut out: impl Write, probes: &[ProbeRecord]) -> Result<()> {
    for p in probes {
        serde_json::to_writer(&mut out, p)?;
        out.write_all(b"\n").map_err(|e| Error::io("<probe stream>", e))?;
    }
    Ok(())
}

/// Reads one record per non-empty line.
pub fn read_jsonl(input: impl BufRead) -> Result<Vec<ProbeRecord>> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<probe stream>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ProbeRecord = serde_json::from_str(&line)
            .map_err(|e| Error::format("probe record", format!("line {}: {e}", n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_roundtrip() {
        let probes = vec![
            ProbeRecord { trace_id: "a".into(), t: 1.5, lon: -122.4, lat: 37.7, heading: 359.9, modality: "driving".into() },
            ProbeRecord { trace_id: "b".into(), t: 2.0, lon: 0.1, lat: -0.2, heading: 0.0, modality: "walking".into() },
        ];
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &probes).unwrap();
        assert_eq!(String::from_utf8_lossy(&buf).lines().count(), 2);
        assert_eq!(read_jsonl(buf.as_slice()).unwrap(), probes);
    }

    #[test]
    fn bad_line_names_its_position() {
        let err = read_jsonl("{\"trace_id\":\"a\"}\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
    }
}
