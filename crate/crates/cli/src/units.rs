//! Units file (one row of margins per unit) and its truth sidecar.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use marglik::likelihood::CondProbMatrix;
use marglik::tables::MarginPair;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq)]
pub struct UnitsFile {
    pub ids: Vec<String>,
    pub margins: Vec<MarginPair>,
}

fn column_count(header: &csv::StringRecord, prefix: char) -> usize {
    header
        .iter()
        .filter(|h| {
            h.strip_prefix(prefix)
                .is_some_and(|rest| !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()))
        })
        .count()
}

impl UnitsFile {
    /// Parses `unit,r1..rR,c1..cC`; `R` and `C` come from the header.
    pub fn read(reader: impl Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let header = rdr.headers().context("missing header")?.clone();
        let (nrows, ncols) = (column_count(&header, 'r'), column_count(&header, 'c'));
        let expected: Vec<String> = std::iter::once("unit".to_string())
            .chain((1..=nrows).map(|i| format!("r{i}")))
            .chain((1..=ncols).map(|j| format!("c{j}")))
            .collect();
        if nrows == 0 || ncols == 0 || header.iter().ne(expected.iter().map(String::as_str)) {
            bail!(
                "header must read unit,r1..rR,c1..cC, found {:?}",
                header.iter().collect::<Vec<_>>()
            );
        }
        let mut ids = Vec::new();
        let mut margins = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.with_context(|| format!("record {}", line + 1))?;
            let nums = rec
                .iter()
                .skip(1)
                .map(|f| f.parse::<u32>())
                .collect::<Result<Vec<_>, _>>()
                .with_context(|| {
                    format!("unit {:?}: totals must be non-negative integers", &rec[0])
                })?;
            let m = MarginPair::new(nums[..nrows].to_vec(), nums[nrows..].to_vec())
                .with_context(|| format!("unit {:?}", &rec[0]))?;
            ids.push(rec[0].to_string());
            margins.push(m);
        }
        if margins.is_empty() {
            bail!("no units");
        }
        Ok(Self { ids, margins })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file =
            std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
        Self::read(file).with_context(|| format!("reading {}", path.display()))
    }

    pub fn write(&self, writer: impl Write) -> Result<()> {
        let (nrows, ncols) = (self.margins[0].nrows(), self.margins[0].ncols());
        let mut w = csv::Writer::from_writer(writer);
        let header: Vec<String> = std::iter::once("unit".to_string())
            .chain((1..=nrows).map(|i| format!("r{i}")))
            .chain((1..=ncols).map(|j| format!("c{j}")))
            .collect();
        w.write_record(&header)?;
        for (id, m) in self.ids.iter().zip(&self.margins) {
            let row: Vec<String> = std::iter::once(id.clone())
                .chain(m.rows().iter().chain(m.cols()).map(u32::to_string))
                .collect();
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Generating truth written next to a simulated units file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub pi: Vec<Vec<f64>>,
    pub seed: u64,
    pub units: usize,
    pub unit_size: u32,
    pub rejections: usize,
}

impl Truth {
    pub fn probs(&self) -> Result<CondProbMatrix> {
        Ok(CondProbMatrix::from_rows(&self.pi)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("opening {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// `data/units.csv` -> `data/units.truth.json`.
pub fn sidecar_path(units: &Path) -> PathBuf {
    let stem = units.file_stem().unwrap_or_default().to_string_lossy();
    units.with_file_name(format!("{stem}.truth.json"))
}

/// Reads a probability matrix: one row per line, comma separated.
pub fn read_pi(path: &Path) -> Result<CondProbMatrix> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("opening {}", path.display()))?;
    let rows = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()
        .with_context(|| format!("parsing {}", path.display()))?;
    Ok(CondProbMatrix::from_rows(&rows)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let text = "unit,r1,r2,c1,c2,c3\na,3,2,1,1,3\nb,1,1,1,0,1\n";
        let file = UnitsFile::read(text.as_bytes());
        // b has a zero column total
        assert!(file.is_err());
        let text = "unit,r1,r2,c1,c2,c3\na,3,2,1,1,3\nb,1,2,1,1,1\n";
        let file = UnitsFile::read(text.as_bytes()).unwrap();
        assert_eq!(file.margins.len(), 2);
        let mut out = Vec::new();
        file.write(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), text);
    }

    #[test]
    fn rejects_bad_headers_and_sums() {
        assert!(UnitsFile::read("unit,r1,c1,r2\nx,1,1,1\n".as_bytes()).is_err());
        assert!(UnitsFile::read("unit,r1,r2,c1,c2\nx,1,1,1,2\n".as_bytes()).is_err());
        assert!(UnitsFile::read("unit,r1,r2,c1,c2\n".as_bytes()).is_err());
    }

    #[test]
    fn sidecar_next_to_file() {
        assert_eq!(
            sidecar_path(Path::new("/tmp/x/units.csv")),
            PathBuf::from("/tmp/x/units.truth.json")
        );
    }
}
