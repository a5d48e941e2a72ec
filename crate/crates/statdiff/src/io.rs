//! File-format helpers shared by checkpoints, task bundles, and reports.
//!
//! Floating-point parameters that must survive a save/load round trip
//! bit-exactly are stored as C99-style hex float strings (`0x1.8p-3`);
//! bulk numeric tables (datasets, traces, reports) are CSV with Rust's
//! shortest round-trip decimal formatting.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::{Error, Result};

/// Formats an `f64` as a C99 hex float literal (`[-]0x1.<mant>p<exp>`).
///
/// Normal, subnormal, zero, infinite, and NaN values all round-trip through
/// [`parse_hex_f64`] bit-exactly (NaN up to payload, which we never rely on).
pub fn format_hex_f64(v: f64) -> String {
    if v.is_nan() {
        return "nan".to_string();
    }
    let sign = if v.is_sign_negative() { "-" } else { "" };
    if v.is_infinite() {
        return format!("{sign}inf");
    }
    let bits = v.to_bits();
    let exp_bits = ((bits >> 52) & 0x7ff) as i64;
    let mant = bits & 0xf_ffff_ffff_ffff;
    if exp_bits == 0 {
        if mant == 0 {
            return format!("{sign}0x0p+0");
        }
        // subnormal: leading digit 0, exponent fixed at -1022
        return format!("{sign}0x0.{mant:013x}p-1022");
    }
    let exp = exp_bits - 1023;
    if mant == 0 {
        format!("{sign}0x1p{exp:+}")
    } else {
        let digits = format!("{mant:013x}");
        let digits = digits.trim_end_matches('0');
        format!("{sign}0x1.{digits}p{exp:+}")
    }
}

/// Parses the hex float format produced by [`format_hex_f64`].
pub fn parse_hex_f64(s: &str) -> Result<f64> {
    let bad = || Error::Format(format!("invalid hex float: {s:?}"));
    let (sign, rest) = match s.strip_prefix('-') {
        Some(r) => (-1.0, r),
        None => (1.0, s),
    };
    match rest {
        "inf" => return Ok(sign * f64::INFINITY),
        "nan" => return Ok(f64::NAN),
        _ => {}
    }
    let rest = rest.strip_prefix("0x").ok_or_else(bad)?;
    let pidx = rest.find(['p', 'P']).ok_or_else(bad)?;
    let (mantissa, exp_str) = rest.split_at(pidx);
    let exp: i64 = exp_str[1..].parse().map_err(|_| bad())?;
    let (int_part, frac_part) = match mantissa.find('.') {
        Some(didx) => (&mantissa[..didx], &mantissa[didx + 1..]),
        None => (mantissa, ""),
    };
    if int_part.is_empty() && frac_part.is_empty() {
        return Err(bad());
    }
    let mut value = if int_part.is_empty() {
        0.0
    } else {
        u64::from_str_radix(int_part, 16).map_err(|_| bad())? as f64
    };
    let mut scale = 1.0f64 / 16.0;
    for ch in frac_part.chars() {
        let digit = ch.to_digit(16).ok_or_else(bad)? as f64;
        value += digit * scale;
        scale /= 16.0;
    }
    Ok(sign * value * (exp as f64).exp2())
}

pub fn hex_vec(values: &[f64]) -> Vec<String> {
    values.iter().map(|&v| format_hex_f64(v)).collect()
}

pub fn parse_hex_vec(values: &[String]) -> Result<Vec<f64>> {
    values.iter().map(|s| parse_hex_f64(s)).collect()
}

/// Writes a sample matrix as CSV with one row per sample and header
/// `x1..xd`.
pub fn write_matrix_csv(path: &Path, data: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let header: Vec<String> = (1..=data.ncols()).map(|j| format!("x{j}")).collect();
    w.write_record(&header)?;
    let mut record = Vec::with_capacity(data.ncols());
    for i in 0..data.nrows() {
        record.clear();
        record.extend((0..data.ncols()).map(|j| data[(i, j)].to_string()));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a CSV written by [`write_matrix_csv`] back into a matrix.
pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    if !path.exists() {
        return Err(Error::MissingData(path.display().to_string()));
    }
    let mut r = csv::Reader::from_path(path)?;
    let ncols = r.headers()?.len();
    let mut rows: Vec<f64> = Vec::new();
    let mut nrows = 0;
    for record in r.records() {
        let record = record?;
        if record.len() != ncols {
            return Err(Error::Format(format!(
                "{}: row {} has {} fields, expected {ncols}",
                path.display(),
                nrows + 1,
                record.len()
            )));
        }
        for field in record.iter() {
            rows.push(field.parse::<f64>().map_err(|_| {
                Error::Format(format!("{}: invalid number {field:?}", path.display()))
            })?);
        }
        nrows += 1;
    }
    Ok(DMatrix::from_row_slice(nrows, ncols, &rows))
}

/// Serializes `value` as pretty JSON to `path` (with trailing newline).
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut buf = serde_json::to_vec_pretty(value)?;
    buf.push(b'\n');
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingData(path.display().to_string()));
    }
    let data = fs::read(path)?;
    Ok(serde_json::from_slice(&data)?)
}

/// Run metadata written next to command outputs. The timestamp is the only
/// field that differs between reruns of an identical configuration.
#[derive(Debug, Serialize)]
pub struct RunMetadata {
    pub tool: String,
    pub version: String,
    pub created_unix_secs: u64,
}

impl RunMetadata {
    pub fn current() -> Self {
        let created = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self {
            tool: "statdiff".to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            created_unix_secs: created,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join("metadata.json"), self)
    }
}

/// Creates parent directories as needed, then writes `contents`.
pub fn write_text(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(contents.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hex_float_round_trip_special_values() {
        for v in [
            0.0,
            -0.0,
            1.0,
            -1.0,
            0.5,
            f64::MIN_POSITIVE,
            f64::MAX,
            5e-324, // smallest subnormal
            -4.9e-310,
            f64::INFINITY,
            f64::NEG_INFINITY,
            std::f64::consts::PI,
        ] {
            let s = format_hex_f64(v);
            let back = parse_hex_f64(&s).unwrap();
            assert_eq!(v.to_bits(), back.to_bits(), "{v} -> {s} -> {back}");
        }
        assert!(parse_hex_f64(&format_hex_f64(f64::NAN)).unwrap().is_nan());
    }

    #[test]
    fn hex_float_round_trip_random_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..2000 {
            let v = f64::from_bits(rng.gen::<u64>());
            if v.is_nan() {
                continue;
            }
            let back = parse_hex_f64(&format_hex_f64(v)).unwrap();
            assert_eq!(v.to_bits(), back.to_bits());
        }
    }

    #[test]
    fn hex_float_known_encodings() {
        assert_eq!(format_hex_f64(1.0), "0x1p+0");
        assert_eq!(format_hex_f64(-0.1875), "-0x1.8p-3");
        assert_eq!(parse_hex_f64("0x1.8p-3").unwrap(), 0.1875);
        assert!(parse_hex_f64("0x1.8q-3").is_err());
        assert!(parse_hex_f64("1.8p-3").is_err());
    }

    #[test]
    fn matrix_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let m = DMatrix::from_row_slice(3, 2, &[0.1, -2.5e-17, 3.0, 4.0, 1e300, -0.0]);
        write_matrix_csv(&path, &m).unwrap();
        let back = read_matrix_csv(&path).unwrap();
        assert_eq!(m, back);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("x1,x2\n"));
    }

    #[test]
    fn missing_csv_is_missing_data_error() {
        let err = read_matrix_csv(Path::new("/nonexistent/never.csv")).unwrap_err();
        assert!(matches!(err, Error::MissingData(_)));
    }
}
