//! File formats: CSV with 17-significant-digit numbers, JSON configs, design loading.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{is_sorted_ascending, logspace};
use crate::spectral::DesignData;

/// Formats a float so that parsing it back gives the same `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn write_csv<P: AsRef<Path>>(path: P, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a CSV into its header and raw string records.
pub fn read_csv<P: AsRef<Path>>(path: P) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()))
        .collect::<std::result::Result<_, _>>()?;
    Ok((header, rows))
}

pub fn write_json<P: AsRef<Path>, T: Serialize + ?Sized>(path: P, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Parses a JSON config; schema errors become [`Error::Config`] with serde's message,
/// which names the offending key.
pub fn parse_config<T: DeserializeOwned>(text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
}

pub fn read_config<T: DeserializeOwned, P: AsRef<Path>>(path: P) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text)
}

/// A grid given either as explicit values or as `count` log-spaced points in `[min, max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridSpec {
    Values(Vec<f64>),
    Logspace { min: f64, max: f64, count: usize },
}

impl GridSpec {
    pub fn logspace(min: f64, max: f64, count: usize) -> Self {
        GridSpec::Logspace { min, max, count }
    }

    /// Materializes the grid; it must be nonempty, finite, positive and strictly ascending.
    pub fn values(&self) -> Result<Vec<f64>> {
        let v = match self {
            GridSpec::Values(v) => v.clone(),
            GridSpec::Logspace { min, max, count } => {
                if !(*min > 0.0 && max >= min && *count >= 1) {
                    return Err(Error::Config(format!(
                        "logspace grid needs 0 < min <= max and count >= 1 (got {min}, {max}, {count})"
                    )));
                }
                logspace(*min, *max, *count)
            }
        };
        if v.is_empty() || v.iter().any(|x| !(x.is_finite() && *x > 0.0)) || !is_sorted_ascending(&v) {
            return Err(Error::Config("grid must be nonempty, positive and strictly ascending".into()));
        }
        Ok(v)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DesignJson {
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    beta0: Option<Vec<f64>>,
    sigma_eta: Option<f64>,
}

/// Loads a design from JSON (`x` rows, `y`, optional `beta0` and `sigma_eta`)
/// or from CSV with header `x1,…,xd,y`.
pub fn load_design<P: AsRef<Path>>(path: P) -> Result<DesignData> {
    let path = path.as_ref();
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let (rows, y, truth) = if is_csv {
        let (header, records) = read_csv(path)?;
        let d = header.len().saturating_sub(1);
        let expected: Vec<String> = (1..=d).map(|i| format!("x{i}")).chain(["y".to_string()]).collect();
        if d == 0 || header != expected {
            return Err(Error::Input(format!("design CSV header must be x1..x{d},y")));
        }
        let mut rows = Vec::with_capacity(records.len());
        let mut y = Vec::with_capacity(records.len());
        for (k, rec) in records.iter().enumerate() {
            let vals: Vec<f64> = rec
                .iter()
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Input(format!("design CSV row {}: {e}", k + 1)))?;
            y.push(vals[d]);
            rows.push(vals[..d].to_vec());
        }
        (rows, y, None)
    } else {
        let text = fs::read_to_string(path)?;
        let j: DesignJson = serde_json::from_str(&text).map_err(|e| Error::Input(format!("design JSON: {e}")))?;
        let truth = match (j.beta0, j.sigma_eta) {
            (Some(b), Some(s)) => Some((b, s)),
            (None, None) => None,
            _ => return Err(Error::Input("beta0 and sigma_eta must be given together".into())),
        };
        (j.x, j.y, truth)
    };
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if n == 0 || d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::Input("design rows must be nonempty and of equal length".into()));
    }
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let data = DesignData::new(x, DVector::from_vec(y))?;
    match truth {
        Some((b, s)) => data.with_truth(DVector::from_vec(b), s),
        None => Ok(data),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, f64::MIN_POSITIVE, 0.0] {
            assert_eq!(fmt_f64(x).parse::<f64>().unwrap(), x);
        }
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        let rows = vec![vec!["a".to_string(), fmt_f64(0.1 + 0.2)]];
        write_csv(&p, &["name", "value"], &rows).unwrap();
        let (h, back) = read_csv(&p).unwrap();
        assert_eq!(h, vec!["name", "value"]);
        assert_eq!(back[0][1].parse::<f64>().unwrap(), 0.1 + 0.2);
    }

    #[test]
    fn grid_specs() {
        let g: GridSpec = serde_json::from_str(r#"{"min": 0.01, "max": 100, "count": 5}"#).unwrap();
        assert_eq!(g.values().unwrap(), vec![0.01, 0.1, 1.0, 10.0, 100.0]);
        let g: GridSpec = serde_json::from_str("[1, 2, 3]").unwrap();
        assert_eq!(g.values().unwrap().len(), 3);
        assert!(GridSpec::Values(vec![2.0, 1.0]).values().is_err());
        assert!(GridSpec::logspace(0.0, 1.0, 3).values().is_err());
    }

    #[test]
    fn config_errors_name_the_key() {
        #[derive(Deserialize, Debug)]
        #[serde(deny_unknown_fields)]
        #[allow(dead_code)]
        struct C {
            seed: u64,
        }
        let err = parse_config::<C>(r#"{"sed": 1}"#).unwrap_err().to_string();
        assert!(err.contains("sed"), "{err}");
    }

    #[test]
    fn designs_load_from_json_and_csv() {
        let dir = tempfile::tempdir().unwrap();
        let j = dir.path().join("d.json");
        fs::write(&j, r#"{"x": [[1, 0], [0, 1], [1, 1]], "y": [1, 2, 3]}"#).unwrap();
        let d = load_design(&j).unwrap();
        assert_eq!((d.n(), d.d()), (3, 2));
        let c = dir.path().join("d.csv");
        fs::write(&c, "x1,x2,y\n1,0,1\n0,1,2\n1,1,3\n").unwrap();
        let e = load_design(&c).unwrap();
        assert_eq!(d.x, e.x);
        assert_eq!(d.y, e.y);
        fs::write(&c, "a,b,y\n1,0,1\n").unwrap();
        assert!(load_design(&c).is_err());
        fs::write(&j, r#"{"x": [[1, 0], [0]], "y": [1, 2]}"#).unwrap();
        assert!(load_design(&j).is_err());
    }
}
