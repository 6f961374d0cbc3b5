//! CSV form of [`TrialRecord`] lists.
//!
//! Columns: `trial_id, epsilon, exit_time, exit_face, exit_sign,
//! exit_x1..exit_xd, inner_exit_time, max_transverse_dist, steps, seed`.
//! Floats use the shortest decimal that parses back to the same value; an
//! absent inner exit time is an empty field.

use std::io::{Read, Write};

use crate::error::{invalid, Error, Result};
use crate::simulate::TrialRecord;

pub fn header(d: usize) -> Vec<String> {
    let mut h: Vec<String> =
        ["trial_id", "epsilon", "exit_time", "exit_face", "exit_sign"].iter().map(|s| s.to_string()).collect();
    h.extend((1..=d).map(|i| format!("exit_x{i}")));
    h.extend(["inner_exit_time", "max_transverse_dist", "steps", "seed"].iter().map(|s| s.to_string()));
    h
}

fn io_err(e: impl std::fmt::Display) -> Error {
    Error::Io(e.to_string())
}

pub fn write_records<W: Write>(out: W, d: usize, records: &[TrialRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header(d)).map_err(io_err)?;
    for r in records {
        if r.exit_point.len() != d {
            return Err(invalid(format!("record {} has dimension {}, expected {d}", r.trial_id, r.exit_point.len())));
        }
        let mut row = vec![
            r.trial_id.to_string(),
            format!("{:?}", r.epsilon),
            format!("{:?}", r.exit_time),
            r.exit_face.to_string(),
            r.exit_sign.to_string(),
        ];
        row.extend(r.exit_point.iter().map(|v| format!("{v:?}")));
        row.push(r.inner_exit_time.map(|v| format!("{v:?}")).unwrap_or_default());
        row.push(format!("{:?}", r.max_transverse_dist));
        row.push(r.steps.to_string());
        row.push(r.seed.to_string());
        w.write_record(&row).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn records_to_string(d: usize, records: &[TrialRecord]) -> Result<String> {
    let mut buf = Vec::new();
    write_records(&mut buf, d, records)?;
    String::from_utf8(buf).map_err(io_err)
}

fn field<T: std::str::FromStr>(row: &csv::StringRecord, i: usize, name: &str) -> Result<T> {
    let raw = row.get(i).ok_or_else(|| invalid(format!("missing column {name}")))?;
    raw.parse().map_err(|_| invalid(format!("column {name}: cannot parse {raw:?}")))
}

/// Reads records back; the dimension is taken from the header.
pub fn read_records<R: Read>(input: R) -> Result<(usize, Vec<TrialRecord>)> {
    let mut rd = csv::Reader::from_reader(input);
    let head = rd.headers().map_err(io_err)?.clone();
    let d = head.iter().filter(|h| h.starts_with("exit_x")).count();
    let expected = header(d);
    if d == 0 || head.iter().ne(expected.iter().map(String::as_str)) {
        return Err(invalid("unexpected records header"));
    }
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row.map_err(|e| invalid(e.to_string()))?;
        let exit_point = (0..d).map(|i| field(&row, 5 + i, &expected[5 + i])).collect::<Result<Vec<f64>>>()?;
        let inner_raw = row.get(5 + d).unwrap_or("");
        let inner_exit_time =
            if inner_raw.is_empty() { None } else { Some(field(&row, 5 + d, "inner_exit_time")?) };
        out.push(TrialRecord {
            trial_id: field(&row, 0, "trial_id")?,
            epsilon: field(&row, 1, "epsilon")?,
            exit_time: field(&row, 2, "exit_time")?,
            exit_face: field(&row, 3, "exit_face")?,
            exit_sign: field(&row, 4, "exit_sign")?,
            exit_point,
            inner_exit_time,
            max_transverse_dist: field(&row, 6 + d, "max_transverse_dist")?,
            steps: field(&row, 7 + d, "steps")?,
            seed: field(&row, 8 + d, "seed")?,
        });
    }
    Ok((d, out))
}
