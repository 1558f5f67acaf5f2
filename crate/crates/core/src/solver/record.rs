use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image_io::ImageGrid;

pub const CSV_HEADER: [&str; 5] = ["iteration", "energy", "mae_inpaint", "mae_full", "lr"];

/// Window of the median filter applied to the plotted series.
pub const MEDIAN_WINDOW: usize = 101;

#[derive(Clone, Debug, PartialEq)]
pub struct LogEntry {
    pub iteration: u64,
    /// Energy of the remasked iterate at this iteration.
    pub energy: f64,
    /// Mean absolute error over the inpainting domain, if ground truth is known.
    pub mae_inpaint: Option<f64>,
    /// Mean absolute error over the whole image, if ground truth is known.
    pub mae_full: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BestIterate {
    pub iteration: u64,
    pub mae: f64,
    pub image: ImageGrid,
}

/// Metrics of one run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunRecord {
    pub entries: Vec<LogEntry>,
    /// Iterate with the lowest inpainting-domain MAE, tracked at every
    /// iteration when ground truth is known.
    pub best: Option<BestIterate>,
}

impl RunRecord {
    pub fn last(&self) -> Option<&LogEntry> {
        self.entries.last()
    }

    pub fn entry_at(&self, iteration: u64) -> Option<&LogEntry> {
        self.entries.iter().find(|e| e.iteration == iteration)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_rows(path.as_ref(), self.entries.iter().map(row))
    }

    /// The same table with energy and both MAE columns median-filtered.
    pub fn write_filtered_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let energy = median_filter(
            &self.entries.iter().map(|e| e.energy).collect::<Vec<_>>(),
            MEDIAN_WINDOW,
        );
        let filter_opt = |f: fn(&LogEntry) -> Option<f64>| -> Vec<Option<f64>> {
            let values: Vec<f64> = self.entries.iter().filter_map(f).collect();
            if values.len() != self.entries.len() {
                return vec![None; self.entries.len()];
            }
            median_filter(&values, MEDIAN_WINDOW).into_iter().map(Some).collect()
        };
        let mae_in = filter_opt(|e| e.mae_inpaint);
        let mae_full = filter_opt(|e| e.mae_full);
        let rows = self.entries.iter().enumerate().map(|(k, e)| {
            row(&LogEntry {
                energy: energy[k],
                mae_inpaint: mae_in[k],
                mae_full: mae_full[k],
                ..e.clone()
            })
        });
        write_rows(path.as_ref(), rows)
    }

    /// Reads a table written by [`RunRecord::write_csv`].
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<LogEntry>> {
        let path = path.as_ref();
        let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let bad = |detail: String| Error::Format {
            path: path.into(),
            detail,
        };
        let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
        if header.iter().ne(CSV_HEADER) {
            return Err(bad(format!("unexpected header {header:?}")));
        }
        let mut out = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| csv_error(path, e))?;
            let num = |i: usize| {
                record[i]
                    .parse::<f64>()
                    .map_err(|e| bad(format!("{e}: {:?}", &record[i])))
            };
            let opt = |i: usize| {
                if record[i].is_empty() {
                    Ok(None)
                } else {
                    num(i).map(Some)
                }
            };
            out.push(LogEntry {
                iteration: record[0].parse().map_err(|e| bad(format!("{e}")))?,
                energy: num(1)?,
                mae_inpaint: opt(2)?,
                mae_full: opt(3)?,
                lr: num(4)?,
            });
        }
        Ok(out)
    }
}

fn row(e: &LogEntry) -> [String; 5] {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    [
        e.iteration.to_string(),
        e.energy.to_string(),
        opt(e.mae_inpaint),
        opt(e.mae_full),
        e.lr.to_string(),
    ]
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!("checked is_io_error"),
        }
    } else {
        Error::Format {
            path: path.into(),
            detail: e.to_string(),
        }
    }
}

fn write_rows(path: &Path, rows: impl Iterator<Item = [String; 5]>) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    writer.write_record(CSV_HEADER).map_err(|e| csv_error(path, e))?;
    for r in rows {
        writer.write_record(&r).map_err(|e| csv_error(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Running median with a centred window, shrunk symmetrically at the ends.
pub fn median_filter(values: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    let n = values.len();
    (0..n)
        .map(|i| {
            let r = half.min(i).min(n - 1 - i);
            let mut w: Vec<f64> = values[i - r..=i + r].to_vec();
            w.sort_by(f64::total_cmp);
            w[r]
        })
        .collect()
}

/// Ordered `key=value` lines describing a run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> &mut Self {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn remove(&mut self, key: &str) -> Option<String> {
        let pos = self.entries.iter().position(|(k, _)| k == key)?;
        Some(self.entries.remove(pos).1)
    }

    /// Sets every entry of `other`, in its order.
    pub fn extend(&mut self, other: &Manifest) -> &mut Self {
        for (k, v) in &other.entries {
            self.set(k, v);
        }
        self
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            writeln!(out, "{k}={v}").expect("writing to a string");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Manifest::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("manifest line without '=': {line:?}")))?;
            m.set(k, v);
        }
        Ok(m)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_filter_removes_isolated_spikes() {
        let mut v = vec![1.0; 9];
        v[4] = 100.0;
        assert_eq!(median_filter(&v, 3), vec![1.0; 9]);
        // ends shrink the window instead of padding
        assert_eq!(median_filter(&[5.0, 1.0, 2.0], 101), vec![5.0, 2.0, 2.0]);
        assert!(median_filter(&[], 101).is_empty());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        let record = RunRecord {
            entries: vec![
                LogEntry {
                    iteration: 0,
                    energy: 2.5,
                    mae_inpaint: Some(0.125),
                    mae_full: Some(0.0125),
                    lr: 0.001,
                },
                LogEntry {
                    iteration: 10,
                    energy: 1.0 / 3.0,
                    mae_inpaint: None,
                    mae_full: None,
                    lr: 0.0005,
                },
            ],
            best: None,
        };
        record.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("iteration,energy,mae_inpaint,mae_full,lr\n0,2.5,0.125,0.0125,0.001\n"));
        assert_eq!(RunRecord::read_csv(&path).unwrap(), record.entries);
    }

    #[test]
    fn filtered_csv_keeps_iterations() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("smooth.csv");
        let entries = (0..5)
            .map(|i| LogEntry {
                iteration: i * 2,
                energy: if i == 2 { 50.0 } else { 1.0 },
                mae_inpaint: Some(0.1),
                mae_full: Some(0.01),
                lr: 0.1,
            })
            .collect();
        RunRecord { entries, best: None }.write_filtered_csv(&path).unwrap();
        let back = RunRecord::read_csv(&path).unwrap();
        assert_eq!(
            back.iter().map(|e| e.iteration).collect::<Vec<_>>(),
            vec![0, 2, 4, 6, 8]
        );
        assert!(back.iter().all(|e| e.energy == 1.0));
    }

    #[test]
    fn manifest_round_trip() {
        let mut m = Manifest::new();
        m.set("mode", "deep-prior").set("b", 0.175).set("mode", "direct");
        assert_eq!(m.render(), "mode=direct\nb=0.175\n");
        assert_eq!(Manifest::parse(&m.render()).unwrap(), m);
        assert!(Manifest::parse("nonsense").is_err());
        let mut base = Manifest::new();
        base.set("preset", "paper-natural").set("b", 0.5);
        base.extend(&m);
        assert_eq!(base.render(), "preset=paper-natural\nb=0.175\nmode=direct\n");
    }
}
