//! File formats: the `HSIB` binary matrix container and the small CSV
//! dialects (named columns, headerless point clouds).
//!
//! `HSIB` layout, little-endian throughout:
//!
//! ```text
//! magic   b"HSIB"        4 bytes
//! version u16 = 1
//! rows    u32
//! cols    u32
//! data    rows*cols f64, row-major
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const HSIB_MAGIC: &[u8; 4] = b"HSIB";
pub const HSIB_VERSION: u16 = 1;
const HSIB_HEADER_LEN: usize = 4 + 2 + 4 + 4;

pub fn encode_hsib(m: &Matrix) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HSIB_HEADER_LEN + 8 * m.data().len());
    buf.extend_from_slice(HSIB_MAGIC);
    buf.extend_from_slice(&HSIB_VERSION.to_le_bytes());
    buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for v in m.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_hsib(bytes: &[u8], path: &Path) -> Result<Matrix> {
    let bad = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    if bytes.len() < HSIB_HEADER_LEN {
        return Err(bad(format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[0..4] != HSIB_MAGIC {
        return Err(bad(format!("bad magic {:?}, expected \"HSIB\"", &bytes[0..4])));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != HSIB_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let rows = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let payload = &bytes[HSIB_HEADER_LEN..];
    let expected = rows
        .checked_mul(cols)
        .and_then(|c| c.checked_mul(8))
        .ok_or_else(|| bad(format!("dimensions {rows}x{cols} overflow")))?;
    if payload.len() != expected {
        return Err(bad(format!(
            "payload is {} bytes, a {rows}x{cols} matrix needs {expected}",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

pub fn write_hsib(path: &Path, m: &Matrix) -> Result<()> {
    fs::write(path, encode_hsib(m)).map_err(|e| Error::io(path, e))
}

pub fn read_hsib(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_hsib(&bytes, path)
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Formats a real so that parsing it back yields the same bits.
pub fn fmt_real(v: f64) -> String {
    format!("{v:?}")
}

/// Writes a header of column names followed by one comma-separated row per matrix row.
pub fn write_named_columns_csv(path: &Path, names: &[String], m: &Matrix) -> Result<()> {
    if names.len() != m.cols() {
        return Err(Error::invalid(format!(
            "{} column names for a matrix with {} columns",
            names.len(),
            m.cols()
        )));
    }
    let mut out = String::new();
    out.push_str(&names.join(","));
    out.push('\n');
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|&v| fmt_real(v)).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Reads a CSV with a header row of names and rows of reals.
pub fn read_named_columns_csv(path: &Path) -> Result<(Vec<String>, Matrix)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_named_columns_csv(&text, path)
}

pub fn parse_named_columns_csv(text: &str, path: &Path) -> Result<(Vec<String>, Matrix)> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty file".to_string()))?;
    let names: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    if names.iter().any(String::is_empty) {
        return Err(parse_err(1, "empty column name in header".to_string()));
    }
    let mut data = Vec::new();
    let mut rows = 0;
    for (idx, line) in lines {
        let lineno = idx + 1;
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != names.len() {
            return Err(parse_err(
                lineno,
                format!("row has {} cells, header has {}", cells.len(), names.len()),
            ));
        }
        for cell in cells {
            data.push(parse_real(cell).map_err(|msg| parse_err(lineno, msg))?);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(parse_err(1, "no data rows after header".to_string()));
    }
    Ok((names, Matrix::from_vec(rows, data.len() / rows, data)?))
}

/// Reads a headerless CSV point cloud, one point per row. Blank lines and
/// lines starting with `#` are skipped.
pub fn read_points_csv(path: &Path) -> Result<Matrix> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_points_csv(&text, path)
}

pub fn parse_points_csv(text: &str, path: &Path) -> Result<Matrix> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let lineno = idx + 1;
        let row = line
            .split(',')
            .map(parse_real)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|msg| Error::Parse {
                path: path.to_path_buf(),
                line: lineno,
                msg,
            })?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno,
                    msg: format!("point has {} coordinates, expected {}", row.len(), first.len()),
                });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: "no points".to_string(),
        });
    }
    Matrix::from_rows(&rows)
}

fn parse_real(cell: &str) -> std::result::Result<f64, String> {
    let cell = cell.trim();
    let v: f64 = cell.parse().map_err(|_| format!("not a number: {cell:?}"))?;
    if !v.is_finite() {
        return Err(format!("non-finite value: {cell:?}"));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hsib_rejects_bad_magic() {
        let mut bytes = encode_hsib(&Matrix::identity(2));
        bytes[0] = b'X';
        let err = decode_hsib(&bytes, Path::new("Y.hsib")).unwrap_err();
        assert!(err.to_string().contains("Y.hsib"));
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn hsib_rejects_truncation() {
        let bytes = encode_hsib(&Matrix::identity(3));
        assert!(decode_hsib(&bytes[..bytes.len() - 1], Path::new("a")).is_err());
        assert!(decode_hsib(&bytes[..5], Path::new("a")).is_err());
    }

    #[test]
    fn hsib_header_layout() {
        let bytes = encode_hsib(&Matrix::zeros(2, 3));
        assert_eq!(&bytes[..4], b"HSIB");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[6..10], &[2, 0, 0, 0]);
        assert_eq!(&bytes[10..14], &[3, 0, 0, 0]);
        assert_eq!(bytes.len(), 14 + 48);
    }

    proptest! {
        #[test]
        fn hsib_round_trip_bit_exact(rows in 0usize..6, cols in 0usize..6, seed in any::<u64>()) {
            let mut rng = crate::numerics::Rng::seed_from_u64(seed);
            let data = (0..rows * cols).map(|_| f64::from_bits(rng.next_u64() >> 2)).collect();
            let m = Matrix::from_vec(rows, cols, data).unwrap();
            let back = decode_hsib(&encode_hsib(&m), Path::new("x")).unwrap();
            prop_assert_eq!(back.shape(), m.shape());
            for (a, b) in back.data().iter().zip(m.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }

        #[test]
        fn csv_reals_round_trip(v in -1e300f64..1e300) {
            prop_assert_eq!(fmt_real(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
    }

    #[test]
    fn named_csv_errors_carry_line_numbers() {
        let err = parse_named_columns_csv("a,b\n1,2\n3\n", Path::new("lib.csv")).unwrap_err();
        assert!(err.to_string().contains("lib.csv:3"), "{err}");
        let err = parse_named_columns_csv("a,b\n1,x\n", Path::new("lib.csv")).unwrap_err();
        assert!(err.to_string().contains("lib.csv:2"), "{err}");
        assert!(parse_named_columns_csv("", Path::new("e.csv")).is_err());
        assert!(parse_named_columns_csv("a,b\n", Path::new("e.csv")).is_err());
    }

    #[test]
    fn points_csv() {
        let m = parse_points_csv("# pts\n0,0\n3,4\n\n", Path::new("p")).unwrap();
        assert_eq!(m.shape(), (2, 2));
        assert!(parse_points_csv("1,2\n1\n", Path::new("p")).is_err());
        assert!(parse_points_csv("", Path::new("p")).is_err());
    }
}
