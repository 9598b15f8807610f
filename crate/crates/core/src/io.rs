//! Chain and potential files.
//!
//! JSON chains hold `{"labels": [...], "P": [[...]], "Q": [...]}` with labels
//! and `Q` optional. CSV chains are edge lists with header `from,to,prob`;
//! states are named by label (integers are labels too, ordered numerically
//! when every label is an integer), missing diagonal mass becomes holding
//! probability, and an optional second file lists `state,q`.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::chain::ChainModel;
use crate::error::{Error, Result};
use crate::landscape::PotentialSpec;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
    #[serde(rename = "P")]
    pub p: Vec<Vec<f64>>,
    #[serde(rename = "Q", default, skip_serializing_if = "Option::is_none")]
    pub q: Option<Vec<f64>>,
}

impl ChainFile {
    pub fn from_chain(chain: &ChainModel) -> Self {
        let n = chain.n();
        let mut p = vec![vec![0.0; n]; n];
        for (x, row) in p.iter_mut().enumerate() {
            for &(y, v) in chain.row(x) {
                row[y] = v;
            }
        }
        Self { labels: chain.labels().map(|l| l.to_vec()), p, q: Some(chain.q().to_vec()) }
    }

    pub fn into_chain(self) -> Result<ChainModel> {
        ChainModel::from_dense(self.p, self.q, self.labels)
    }
}

pub fn read_chain_json(path: &Path) -> Result<ChainModel> {
    let file: ChainFile = serde_json::from_reader(std::io::BufReader::new(File::open(path)?))?;
    file.into_chain()
}

pub fn write_chain_json(chain: &ChainModel, path: &Path) -> Result<()> {
    let text = crate::report::to_canonical(&ChainFile::from_chain(chain))?;
    std::fs::write(path, text)?;
    Ok(())
}

#[derive(Debug, Deserialize)]
struct EdgeRecord {
    from: String,
    to: String,
    prob: f64,
}

#[derive(Debug, Deserialize)]
struct MeasureRecord {
    state: String,
    q: f64,
}

/// Orders labels numerically when all are integers, else lexicographically.
fn order_labels(labels: impl IntoIterator<Item = String>) -> Vec<String> {
    let mut set: Vec<String> = labels.into_iter().collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    if set.iter().all(|s| s.parse::<u64>().is_ok()) {
        set.sort_by_key(|s| s.parse::<u64>().expect("checked"));
    }
    set
}

pub fn read_chain_csv(edges: &Path, measure: Option<&Path>) -> Result<ChainModel> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(edges)?;
    let records: Vec<EdgeRecord> = reader.deserialize().collect::<std::result::Result<_, _>>()?;
    if records.is_empty() {
        return Err(Error::Structural("edge list is empty".into()));
    }
    let labels = order_labels(records.iter().flat_map(|r| [r.from.clone(), r.to.clone()]));
    let index: BTreeMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let n = labels.len();
    let mut rows: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n];
    for r in &records {
        let (i, j) = (index[r.from.as_str()], index[r.to.as_str()]);
        if rows[i].insert(j, r.prob).is_some() {
            return Err(Error::Structural(format!("edge {} -> {} listed twice", r.from, r.to)));
        }
    }
    for (i, row) in rows.iter_mut().enumerate() {
        if !row.contains_key(&i) {
            let off: f64 = row.values().sum();
            if off > 1.0 + 1e-12 {
                return Err(Error::Data(format!("row {} sums to {off} > 1", labels[i])));
            }
            row.insert(i, (1.0 - off).max(0.0));
        }
    }
    let q = match measure {
        Some(path) => {
            let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
            let recs: Vec<MeasureRecord> = reader.deserialize().collect::<std::result::Result<_, _>>()?;
            let mut q = vec![f64::NAN; n];
            for r in recs {
                let i = *index
                    .get(r.state.as_str())
                    .ok_or_else(|| Error::Structural(format!("measure names unknown state {}", r.state)))?;
                q[i] = r.q;
            }
            if let Some(i) = q.iter().position(|v| v.is_nan()) {
                return Err(Error::Structural(format!("measure file misses state {}", labels[i])));
            }
            Some(q)
        }
        None => None,
    };
    let rows = rows.into_iter().map(|r| r.into_iter().collect()).collect();
    ChainModel::from_rows(n, rows, q, Some(labels))
}

/// Chain from a `.json` or `.csv` path; CSV may carry a measure file.
pub fn read_chain(path: &Path, measure: Option<&Path>) -> Result<ChainModel> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("csv") => read_chain_csv(path, measure),
        _ => {
            if measure.is_some() {
                return Err(Error::Argument("a measure file only applies to CSV edge lists".into()));
            }
            read_chain_json(path)
        }
    }
}

pub fn read_potential(path: &Path) -> Result<PotentialSpec> {
    Ok(serde_json::from_reader(std::io::BufReader::new(File::open(path)?))?)
}

/// Writes rows of numbers under a header. Floats use 17 significant digits.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row.iter().map(|v| format!("{v:.16e}")))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_fills_diagonal() {
        let dir = std::env::temp_dir().join(format!("metaspec-io-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let edges = dir.join("edges.csv");
        std::fs::write(&edges, "from,to,prob\n0,1,0.25\n1,0,0.5\n").unwrap();
        let c = read_chain(&edges, None).unwrap();
        assert_eq!(c.p(0, 0), 0.75);
        assert_eq!(c.p(1, 1), 0.5);
        assert!((c.q()[0] - 2.0 / 3.0).abs() < 1e-15);
        let q = dir.join("Q.csv");
        std::fs::write(&q, "state,q\n0,0.5\n1,0.5\n").unwrap();
        let bad = read_chain(&edges, Some(&q)).unwrap();
        assert!(!bad.validate(&Default::default()).is_valid());

        let json = dir.join("chain.json");
        write_chain_json(&c, &json).unwrap();
        let back = read_chain(&json, None).unwrap();
        assert_eq!(back, c);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
