//! Dataset files and result records.
//!
//! * `locations.csv`: header `x,y`, one site per row; the row order defines
//!   the location ids `0..n`.
//! * `replicates.csv`: header `loc_id,rep_id,value`, one row per cell in any
//!   order; every `(loc_id, rep_id)` in `0..n × 0..m` must appear exactly once.
//! * Records: `key=value` lines, `#` comments, keys unique.
//!
//! Floats are written with Rust's shortest round-trip formatting, so reading a
//! file back gives the same bits.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::likelihood::ReplicateSet;
use crate::matern::LocationSet;
use crate::variogram::VariogramCurve;

fn parse_err(file: &str, line: u64, column: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        file: file.to_string(),
        line,
        column,
        msg: msg.into(),
    }
}

fn reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(r)
}

/// Reads all records, checking the header line against `header`.
fn records<R: Read>(r: R, name: &str, header: &[&str]) -> Result<Vec<(u64, csv::StringRecord)>> {
    let mut rdr = reader(r);
    let mut out = Vec::new();
    let mut saw_header = false;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(name, line, 1, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        if !saw_header {
            let got: Vec<&str> = rec.iter().collect();
            if got != header {
                return Err(parse_err(
                    name,
                    line,
                    1,
                    format!("missing header: expected `{}`, found `{}`", header.join(","), got.join(",")),
                ));
            }
            saw_header = true;
            continue;
        }
        if rec.len() != header.len() {
            return Err(parse_err(
                name,
                line,
                rec.len().min(header.len()) + 1,
                format!("expected {} fields, found {}", header.len(), rec.len()),
            ));
        }
        out.push((line, rec));
    }
    if !saw_header {
        return Err(parse_err(name, 1, 1, format!("missing header `{}`", header.join(","))));
    }
    Ok(out)
}

fn field_f64(name: &str, line: u64, col: usize, s: &str) -> Result<f64> {
    let v: f64 = s
        .parse()
        .map_err(|_| parse_err(name, line, col, format!("`{s}` is not a number")))?;
    if !v.is_finite() {
        return Err(parse_err(name, line, col, format!("non-finite value `{s}`")));
    }
    Ok(v)
}

fn field_usize(name: &str, line: u64, col: usize, s: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| parse_err(name, line, col, format!("`{s}` is not a non-negative integer")))
}

pub fn parse_locations<R: Read>(r: R, name: &str) -> Result<LocationSet> {
    let mut pts = Vec::new();
    for (line, rec) in records(r, name, &["x", "y"])? {
        pts.push([field_f64(name, line, 1, &rec[0])?, field_f64(name, line, 2, &rec[1])?]);
    }
    if pts.is_empty() {
        return Err(parse_err(name, 2, 1, "no locations"));
    }
    LocationSet::new(pts)
}

pub fn parse_replicates<R: Read>(r: R, name: &str) -> Result<ReplicateSet> {
    let mut cells = Vec::new();
    let (mut n, mut m) = (0, 0);
    for (line, rec) in records(r, name, &["loc_id", "rep_id", "value"])? {
        let i = field_usize(name, line, 1, &rec[0])?;
        let j = field_usize(name, line, 2, &rec[1])?;
        let v = field_f64(name, line, 3, &rec[2])?;
        n = n.max(i + 1);
        m = m.max(j + 1);
        cells.push((line, i, j, v));
    }
    if cells.is_empty() {
        return Err(parse_err(name, 2, 1, "no values"));
    }
    let mut data = DMatrix::from_element(n, m, f64::NAN);
    let mut seen = DMatrix::from_element(n, m, false);
    for &(line, i, j, v) in &cells {
        if seen[(i, j)] {
            return Err(parse_err(name, line, 1, format!("duplicate cell loc_id={i}, rep_id={j}")));
        }
        seen[(i, j)] = true;
        data[(i, j)] = v;
    }
    if let Some(idx) = seen.iter().position(|s| !s) {
        let (i, j) = (idx % n, idx / n);
        return Err(Error::dimension(format!("{name}: no value for loc_id={i}, rep_id={j}")));
    }
    ReplicateSet::new(data)
}

fn name_of(path: &Path) -> String {
    path.display().to_string()
}

pub fn read_locations(path: &Path) -> Result<LocationSet> {
    parse_locations(File::open(path)?, &name_of(path))
}

pub fn read_replicates(path: &Path) -> Result<ReplicateSet> {
    parse_replicates(File::open(path)?, &name_of(path))
}

/// Reads a locations/replicates pair and checks they agree on `n`.
pub fn read_dataset(locations: &Path, replicates: &Path) -> Result<(LocationSet, ReplicateSet)> {
    let locs = read_locations(locations)?;
    let reps = read_replicates(replicates)?;
    reps.check_locations(&locs)?;
    Ok((locs, reps))
}

pub fn write_locations_to<W: Write>(w: W, locs: &LocationSet) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["x", "y"])?;
    for p in locs.coords() {
        wtr.write_record([p[0].to_string(), p[1].to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_replicates_to<W: Write>(w: W, reps: &ReplicateSet) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["loc_id", "rep_id", "value"])?;
    for j in 0..reps.m() {
        for i in 0..reps.n() {
            wtr.write_record([i.to_string(), j.to_string(), reps.data()[(i, j)].to_string()])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_locations(path: &Path, locs: &LocationSet) -> Result<()> {
    write_locations_to(BufWriter::new(File::create(path)?), locs)
}

pub fn write_replicates(path: &Path, reps: &ReplicateSet) -> Result<()> {
    write_replicates_to(BufWriter::new(File::create(path)?), reps)
}

/// Curves as `replicate_id,bin_center,gamma,count`; empty bins have `gamma=NaN`.
pub fn write_variograms_to<W: Write>(w: W, curves: &[VariogramCurve]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["replicate_id", "bin_center", "gamma", "count"])?;
    for (r, c) in curves.iter().enumerate() {
        for b in 0..c.counts.len() {
            wtr.write_record([
                r.to_string(),
                c.bin_centers[b].to_string(),
                c.gamma[b].to_string(),
                c.counts[b].to_string(),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// An ordered `key=value` record.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvRecord {
    entries: Vec<(String, String)>,
}

impl KvRecord {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) -> &mut Self {
        self.entries.push((key.into(), value.to_string()));
        self
    }

    pub fn extend(&mut self, other: &KvRecord) -> &mut Self {
        self.entries.extend(other.entries.iter().cloned());
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn parse(text: &str, name: &str) -> Result<Self> {
        let mut seen = BTreeMap::new();
        let mut entries = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx as u64 + 1;
            let s = raw.trim();
            if s.is_empty() || s.starts_with('#') {
                continue;
            }
            let Some((k, v)) = s.split_once('=') else {
                return Err(parse_err(name, line, 1, "expected key=value"));
            };
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(parse_err(name, line, 1, "empty key"));
            }
            if seen.insert(k.to_string(), line).is_some() {
                return Err(parse_err(name, line, 1, format!("duplicate key `{k}`")));
            }
            entries.push((k.to_string(), v.to_string()));
        }
        Ok(KvRecord { entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, &name_of(path))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let locs = LocationSet::new((0..13).map(|_| [rng.random(), rng.random::<f64>() * 1e-7]).collect()).unwrap();
        let reps = ReplicateSet::new(DMatrix::from_fn(13, 4, |_, _| rng.random_range(-1e3..1e3) / 7.0)).unwrap();
        let mut a = Vec::new();
        write_locations_to(&mut a, &locs).unwrap();
        let mut b = Vec::new();
        write_replicates_to(&mut b, &reps).unwrap();
        let locs2 = parse_locations(a.as_slice(), "l").unwrap();
        let reps2 = parse_replicates(b.as_slice(), "r").unwrap();
        assert_eq!(locs.coords(), locs2.coords());
        assert_eq!(reps, reps2);
    }

    #[test]
    fn long_format_any_order() {
        let text = "loc_id,rep_id,value\n1,1,4\n0,0,1\n1,0,2\n0,1,3\n";
        let r = parse_replicates(text.as_bytes(), "r").unwrap();
        assert_eq!(r.data(), &DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 2.0, 4.0]));
    }

    fn parse_error_at(res: Result<impl std::fmt::Debug>) -> (u64, usize, String) {
        match res {
            Err(Error::Parse { line, column, msg, .. }) => (line, column, msg),
            other => panic!("expected a parse error, got {other:?}"),
        }
    }

    #[test]
    fn errors_name_line_and_column() {
        let (l, c, msg) = parse_error_at(parse_locations("0.1,0.2\n".as_bytes(), "l"));
        assert_eq!((l, c), (1, 1));
        assert!(msg.contains("missing header"));
        let (l, c, _) = parse_error_at(parse_locations("x,y\n0.1,0.2\n0.3,abc\n".as_bytes(), "l"));
        assert_eq!((l, c), (3, 2));
        let (l, c, msg) = parse_error_at(parse_replicates("loc_id,rep_id,value\n0,0,NaN\n".as_bytes(), "r"));
        assert_eq!((l, c), (2, 3));
        assert!(msg.contains("non-finite"));
        let (l, _, _) = parse_error_at(parse_replicates("loc_id,rep_id,value\n0,0,1\n0,0,2\n".as_bytes(), "r"));
        assert_eq!(l, 3);
        let (l, c, _) = parse_error_at(parse_replicates("loc_id,rep_id,value\n0,-1,1\n".as_bytes(), "r"));
        assert_eq!((l, c), (2, 2));
        assert!(parse_error_at(parse_locations("".as_bytes(), "l")).2.contains("header"));
        assert!(matches!(
            parse_replicates("loc_id,rep_id,value\n0,0,1\n1,1,2\n".as_bytes(), "r"),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            parse_locations("x,y\n0,0\n0,0\n".as_bytes(), "l"),
            Err(Error::DuplicateLocation(0, 1))
        ));
    }

    #[test]
    fn kv_records() {
        let mut r = KvRecord::new();
        r.push("a.b", 1.5).push("name", "x y");
        let p = KvRecord::parse(&r.to_text(), "k").unwrap();
        assert_eq!(p, r);
        assert_eq!(p.get("a.b"), Some("1.5"));
        assert!(KvRecord::parse("# c\n\na=1\nb=2\n", "k").is_ok());
        let (l, _, _) = parse_error_at(KvRecord::parse("a=1\nbogus\n", "k"));
        assert_eq!(l, 2);
        let (l, _, msg) = parse_error_at(KvRecord::parse("a=1\na=2\n", "k"));
        assert_eq!(l, 2);
        assert!(msg.contains("duplicate"));
    }
}
