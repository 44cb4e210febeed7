//! Sample path files.
//!
//! CSV: header `t,x_1,...,x_d,y`, one row per time point. The step is taken
//! from the first two times and the horizon from the last time; the seed is
//! not recorded and reads back as 0.
//!
//! Binary (little-endian): `d: u64`, `delta: f64`, `T: f64`, `seed: u64`,
//! then `n` rows of `d + 2` `f64` values `(t, x_1..x_d, y)`, row-major. The
//! row count follows from the file length.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::process_sim::SamplePath;

const HEADER_BYTES: usize = 32;

pub fn write_csv<W: Write>(path: &SamplePath, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["t".to_string()];
    header.extend((1..=path.dim).map(|l| format!("x_{l}")));
    header.push("y".into());
    w.write_record(&header)?;
    let mut row = Vec::with_capacity(path.dim + 2);
    for i in 0..path.len() {
        row.clear();
        row.push(fmt_f64(path.times[i]));
        row.extend(path.x_row(i).iter().map(|v| fmt_f64(*v)));
        row.push(fmt_f64(path.y[i]));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Shortest representation that round-trips exactly.
fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn read_csv<R: Read>(input: R) -> Result<SamplePath> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers()?.clone();
    let cols = headers.len();
    if cols < 3 || &headers[0] != "t" || &headers[cols - 1] != "y" {
        return Err(Error::Format("expected header t,x_1..x_d,y".into()));
    }
    let dim = cols - 2;
    for (l, h) in headers.iter().skip(1).take(dim).enumerate() {
        if h != format!("x_{}", l + 1) {
            return Err(Error::Format(format!("unexpected column '{h}'")));
        }
    }
    let mut times = Vec::new();
    let mut x = Vec::new();
    let mut y = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let vals: Vec<f64> = rec
            .iter()
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Format(format!("bad number '{s}': {e}")))
            })
            .collect::<Result<_>>()?;
        if vals.len() != cols {
            return Err(Error::Format("ragged row".into()));
        }
        times.push(vals[0]);
        x.extend_from_slice(&vals[1..=dim]);
        y.push(vals[cols - 1]);
    }
    if times.len() < 2 {
        return Err(Error::EmptyPath);
    }
    let path = SamplePath {
        dim,
        delta: times[1] - times[0],
        horizon: *times.last().unwrap(),
        seed: 0,
        times,
        x,
        y,
    };
    path.validate()?;
    Ok(path)
}

pub fn write_binary<W: Write>(path: &SamplePath, mut out: W) -> Result<()> {
    let mut buf = Vec::with_capacity(HEADER_BYTES + path.len() * (path.dim + 2) * 8);
    buf.extend_from_slice(&(path.dim as u64).to_le_bytes());
    buf.extend_from_slice(&path.delta.to_le_bytes());
    buf.extend_from_slice(&path.horizon.to_le_bytes());
    buf.extend_from_slice(&path.seed.to_le_bytes());
    for i in 0..path.len() {
        buf.extend_from_slice(&path.times[i].to_le_bytes());
        for v in path.x_row(i) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&path.y[i].to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_binary<R: Read>(mut input: R) -> Result<SamplePath> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < HEADER_BYTES {
        return Err(Error::Format("truncated header".into()));
    }
    let word = |i: usize| -> [u8; 8] { bytes[i * 8..(i + 1) * 8].try_into().unwrap() };
    let dim = u64::from_le_bytes(word(0)) as usize;
    let delta = f64::from_le_bytes(word(1));
    let horizon = f64::from_le_bytes(word(2));
    let seed = u64::from_le_bytes(word(3));
    if dim == 0 || dim > 64 {
        return Err(Error::Format(format!("implausible dimension {dim}")));
    }
    let row_bytes = (dim + 2) * 8;
    let body = &bytes[HEADER_BYTES..];
    if body.len() % row_bytes != 0 {
        return Err(Error::Format("body is not a whole number of rows".into()));
    }
    let n = body.len() / row_bytes;
    if n == 0 {
        return Err(Error::EmptyPath);
    }
    let mut times = Vec::with_capacity(n);
    let mut x = Vec::with_capacity(n * dim);
    let mut y = Vec::with_capacity(n);
    for row in body.chunks_exact(row_bytes) {
        let mut vals = row
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        times.push(vals.next().unwrap());
        x.extend(vals.by_ref().take(dim));
        y.push(vals.next().unwrap());
    }
    let path = SamplePath {
        dim,
        delta,
        horizon,
        seed,
        times,
        x,
        y,
    };
    path.validate()?;
    Ok(path)
}
