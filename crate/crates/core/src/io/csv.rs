//! Sample, point and metric-log CSV files.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SAMPLES_HEADER: &str = "x,y,prototype";

/// `x,y,prototype` rows; unconditional samples carry prototype `-1`.
pub fn samples_csv(points: &Tensor, prototypes: &[Option<usize>]) -> String {
    let mut out = String::from(SAMPLES_HEADER);
    out.push('\n');
    for r in 0..points.rows() {
        let p = prototypes.get(r).copied().flatten().map_or(-1, |p| p as i64);
        out.push_str(&format!("{},{},{p}\n", points.get(r, 0), points.get(r, 1)));
    }
    out
}

pub fn write_samples(path: &Path, points: &Tensor, prototypes: &[Option<usize>]) -> Result<()> {
    std::fs::write(path, samples_csv(points, prototypes)).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_f64(path: &Path, line: usize, raw: &str) -> Result<f64> {
    raw.trim()
        .parse()
        .map_err(|_| Error::parse(path, format!("line {line}: `{raw}` is not a number")))
}

/// Reads a samples file written by [`write_samples`].
pub fn read_samples(path: &Path) -> Result<(Tensor, Vec<Option<usize>>)> {
    let text = read(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == SAMPLES_HEADER => {}
        _ => return Err(Error::parse(path, format!("expected header `{SAMPLES_HEADER}`"))),
    }
    let mut data = Vec::new();
    let mut protos = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::parse(path, format!("line {}: expected 3 fields", i + 1)));
        }
        data.push(parse_f64(path, i + 1, fields[0])?);
        data.push(parse_f64(path, i + 1, fields[1])?);
        let p: i64 = fields[2]
            .trim()
            .parse()
            .map_err(|_| Error::parse(path, format!("line {}: bad prototype `{}`", i + 1, fields[2])))?;
        protos.push(usize::try_from(p).ok());
    }
    let n = protos.len();
    if n == 0 {
        return Err(Error::parse(path, "no samples"));
    }
    let t = Tensor::matrix(n, 2, data).map_err(|e| Error::parse(path, e.to_string()))?;
    Ok((t, protos))
}

/// Reads 2-D points, one `x,y` per line. A non-numeric first line is taken
/// as a header; extra columns are ignored.
pub fn read_points(path: &Path) -> Result<Tensor> {
    let text = read(path)?;
    let mut data = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 2 {
            return Err(Error::parse(path, format!("line {}: expected x,y", i + 1)));
        }
        if i == 0 && fields[0].trim().parse::<f64>().is_err() {
            continue;
        }
        data.push(parse_f64(path, i + 1, fields[0])?);
        data.push(parse_f64(path, i + 1, fields[1])?);
    }
    if data.is_empty() {
        return Err(Error::parse(path, "no points"));
    }
    Tensor::matrix(data.len() / 2, 2, data).map_err(|e| Error::parse(path, e.to_string()))
}

/// A numeric CSV table with a header row.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let columns: Vec<String> = lines
            .next()
            .ok_or("empty table")?
            .split(',')
            .map(|s| s.trim().to_string())
            .collect();
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let row = line
                .split(',')
                .map(|s| s.trim().parse::<f64>().map_err(|_| format!("row {}: bad number `{s}`", i + 1)))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            if row.len() != columns.len() {
                return Err(format!("row {}: {} fields, header has {}", i + 1, row.len(), columns.len()));
            }
            rows.push(row);
        }
        Ok(Self { columns, rows })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read(path)?).map_err(|m| Error::parse(path, m))
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }
}

/// One label per line.
pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let text: String = labels.iter().map(|l| format!("{l}\n")).collect();
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    read(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse()
                .map_err(|_| Error::parse(path, format!("line {}: bad label `{l}`", i + 1)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn samples_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        let pts = Tensor::from_rows(&[[0.1, -2.5], [1e-17, 3.0]]).unwrap();
        write_samples(&p, &pts, &[Some(3), None]).unwrap();
        let (back, protos) = read_samples(&p).unwrap();
        assert_eq!(back, pts);
        assert_eq!(protos, vec![Some(3), None]);
    }

    #[test]
    fn points_with_and_without_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.csv");
        std::fs::write(&p, "x,y\n1,2\n3,4,9\n").unwrap();
        assert_eq!(read_points(&p).unwrap(), Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap());
        std::fs::write(&p, "0.5,0.25\n").unwrap();
        assert_eq!(read_points(&p).unwrap().rows(), 1);
    }

    #[test]
    fn table_parse() {
        let t = Table::parse("a,b\n1,2\n3,NaN\n").unwrap();
        assert_eq!(t.column("a").unwrap(), vec![1.0, 3.0]);
        assert!(t.column("b").unwrap()[1].is_nan());
        assert!(t.column("c").is_none());
        assert!(Table::parse("a,b\n1\n").is_err());
    }

    #[test]
    fn missing_file_names_path() {
        let e = read_samples(Path::new("/nonexistent/s.csv")).unwrap_err().to_string();
        assert!(e.contains("/nonexistent/s.csv"), "{e}");
    }
}
