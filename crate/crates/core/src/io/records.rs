//! Records and curve CSV files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{Protocol, RunRecord, TradeoffCurve};
use crate::io::{read_to_string, write_atomic};

pub const RECORDS_HEADER: &str =
    "run_id,protocol,method,granularity,signal,flop_fraction,task_id,task_kind,seed,step,train_flops_cum,eval_accuracy,status";
pub const CURVE_HEADER: &str = "protocol,kind,method,flops,mean_accuracy,stderr,n";

fn to_csv<T: Serialize>(header: &str, rows: impl IntoIterator<Item = T>) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header.split(','))?;
    for row in rows {
        w.serialize(row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io("<csv buffer>", e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn check_header(rdr: &mut csv::Reader<&[u8]>, expected: &str) -> Result<()> {
    let found = rdr.headers()?.iter().collect::<Vec<_>>().join(",");
    if found != expected {
        return Err(Error::InvalidSpec(format!("CSV header `{found}` does not match `{expected}`")));
    }
    Ok(())
}

pub fn records_to_csv(records: &[RunRecord]) -> Result<String> {
    to_csv(RECORDS_HEADER, records)
}

/// Parses a records CSV. An empty file (or header only) yields no records.
pub fn records_from_csv(text: &str) -> Result<Vec<RunRecord>> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    check_header(&mut rdr, RECORDS_HEADER)?;
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub fn save_records(records: &[RunRecord], path: &Path) -> Result<()> {
    write_atomic(path, records_to_csv(records)?.as_bytes())
}

pub fn load_records(path: &Path) -> Result<Vec<RunRecord>> {
    records_from_csv(&read_to_string(path)?)
}

#[derive(Debug, Serialize, Deserialize)]
struct CurveRow<'a> {
    protocol: Protocol,
    kind: &'a str,
    method: &'a str,
    flops: f64,
    mean_accuracy: f64,
    stderr: f64,
    n: usize,
}

pub fn curves_to_csv(curves: &[TradeoffCurve]) -> Result<String> {
    to_csv(
        CURVE_HEADER,
        curves.iter().flat_map(|c| {
            c.points.iter().map(move |p| CurveRow {
                protocol: c.protocol,
                kind: &c.kind,
                method: &c.method,
                flops: p.flops,
                mean_accuracy: p.mean_accuracy,
                stderr: p.stderr,
                n: p.n,
            })
        }),
    )
}
