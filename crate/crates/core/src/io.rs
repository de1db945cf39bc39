//! On-disk formats: binary records for banks and controls, decimal
//! formatting, `key = value` reports and dataset CSV files.

use std::collections::BTreeMap;
use std::io::{BufRead, Read, Write};

use nalgebra::DVector;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"RKFW";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u16)]
pub enum RecordKind {
    FeatureBank = 1,
    ControlPath = 2,
}

pub(crate) fn write_header<W: Write>(w: &mut W, kind: RecordKind) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(kind as u16).to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_header<R: Read>(r: &mut R, kind: RecordKind) -> Result<()> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format("truncated header".into()))?;
    if &buf[..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = u16::from_le_bytes([buf[4], buf[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let found = u16::from_le_bytes([buf[6], buf[7]]);
    if found != kind as u16 {
        return Err(Error::Format(format!("record kind {found}, expected {}", kind as u16)));
    }
    Ok(())
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| Error::Format("truncated record".into()))?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    Ok(f64::from_bits(read_u64(r)?))
}

/// 17 significant digits, scientific notation; round-trips every f64.
pub fn fmt17(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        format!("{x}")
    }
}

/// Writes one `key = value` line per entry.
pub fn write_key_values<W: Write>(mut w: W, entries: &[(String, String)]) -> Result<()> {
    for (k, v) in entries {
        writeln!(w, "{k} = {v}")?;
    }
    Ok(())
}

pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("line {}: expected 'key = value'", lineno + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// Dataset CSV with header `x1..xd,y1..yd'`.
pub fn write_dataset_csv<W: Write>(mut w: W, inputs: &[DVector<f64>], targets: &[DVector<f64>]) -> Result<()> {
    let d = inputs.first().map_or(0, |x| x.len());
    let d_out = targets.first().map_or(0, |y| y.len());
    let header: Vec<String> = (1..=d)
        .map(|i| format!("x{i}"))
        .chain((1..=d_out).map(|i| format!("y{i}")))
        .collect();
    writeln!(w, "{}", header.join(","))?;
    for (x, y) in inputs.iter().zip(targets) {
        let row: Vec<String> = x.iter().chain(y.iter()).map(|v| fmt17(*v)).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

pub type Samples = (Vec<DVector<f64>>, Vec<DVector<f64>>);

pub fn read_dataset_csv<R: BufRead>(r: R) -> Result<Samples> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty dataset file".into()))??;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let d = cols.iter().take_while(|c| c.starts_with('x')).count();
    let d_out = cols.len() - d;
    let well_formed = cols[..d].iter().enumerate().all(|(i, c)| *c == format!("x{}", i + 1))
        && cols[d..].iter().enumerate().all(|(i, c)| *c == format!("y{}", i + 1));
    if d == 0 || d_out == 0 || !well_formed {
        return Err(Error::Format(format!(
            "dataset header must be x1..xd,y1..yd', got '{header}'"
        )));
    }
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("dataset line {}: {e}", lineno + 2)))?;
        if vals.len() != d + d_out {
            return Err(Error::Format(format!(
                "dataset line {}: {} values, expected {}",
                lineno + 2,
                vals.len(),
                d + d_out
            )));
        }
        xs.push(DVector::from_column_slice(&vals[..d]));
        ys.push(DVector::from_column_slice(&vals[d..]));
    }
    Ok((xs, ys))
}
