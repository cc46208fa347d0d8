use std::collections::BTreeSet;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn other(self) -> Self {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        }
    }
}

impl std::str::FromStr for Side {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "left" => Ok(Side::Left),
            "right" => Ok(Side::Right),
            other => Err(Error::Contract(format!("side must be left or right, got {other:?}"))),
        }
    }
}

/// One 2AFC trial as logged. Simulated trials leave `session_id` empty and
/// `response_ms` unset; practice trials are kept but `excluded`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoiceRecord {
    pub trial_id: u64,
    pub pair_id: String,
    pub left_model: String,
    pub right_model: String,
    pub chosen_side: Side,
    pub observer_id: String,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
    #[serde(default)]
    pub session_id: String,
    #[serde(default)]
    pub response_ms: Option<u64>,
    #[serde(default)]
    pub excluded: bool,
}

impl ChoiceRecord {
    pub fn chosen_model(&self) -> &str {
        match self.chosen_side {
            Side::Left => &self.left_model,
            Side::Right => &self.right_model,
        }
    }

    pub fn rejected_model(&self) -> &str {
        match self.chosen_side {
            Side::Left => &self.right_model,
            Side::Right => &self.left_model,
        }
    }
}

/// Append records to a choice log, writing the header when the file is new
/// or empty. Existing rows are never touched.
pub fn append_choices(path: impl AsRef<Path>, records: &[ChoiceRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let fresh = file.metadata().map_err(|e| Error::io(path, e))?.len() == 0;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(Vec::new());
    for r in records {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    file.flush().map_err(|e| Error::io(path, e))
}

pub fn write_choices(path: impl AsRef<Path>, records: &[ChoiceRecord]) -> Result<()> {
    let path = path.as_ref();
    if path.exists() {
        std::fs::remove_file(path).map_err(|e| Error::io(path, e))?;
    }
    append_choices(path, records)
}

pub fn read_choices(path: impl AsRef<Path>) -> Result<Vec<ChoiceRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_choices_from(file)
}

pub fn read_choices_from(reader: impl std::io::Read) -> Result<Vec<ChoiceRecord>> {
    let mut r = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for row in r.deserialize() {
        let rec: ChoiceRecord = row?;
        ensure!(rec.left_model != rec.right_model, Format, "trial {} compares {} with itself", rec.trial_id, rec.left_model);
        out.push(rec);
    }
    Ok(out)
}

/// Pairwise win counts: `counts[i][j]` is how often model `i` was chosen
/// over model `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChoiceMatrix {
    models: Vec<String>,
    counts: Vec<Vec<u64>>,
}

impl ChoiceMatrix {
    pub fn new(models: Vec<String>, counts: Vec<Vec<u64>>) -> Result<Self> {
        let n = models.len();
        ensure!(n > 0, Config, "choice matrix needs at least one model");
        let unique: BTreeSet<&String> = models.iter().collect();
        ensure!(unique.len() == n, Config, "duplicate model ids");
        ensure!(counts.len() == n && counts.iter().all(|r| r.len() == n), Config, "counts must be {n}x{n}");
        ensure!((0..n).all(|i| counts[i][i] == 0), Config, "diagonal counts must be zero");
        Ok(Self { models, counts })
    }

    pub fn zeros(models: Vec<String>) -> Result<Self> {
        let n = models.len();
        Self::new(models, vec![vec![0; n]; n])
    }

    /// Tally non-excluded records. Models are the given list, or every
    /// model seen in the log, sorted.
    pub fn from_records(records: &[ChoiceRecord], models: Option<&[String]>) -> Result<Self> {
        let models: Vec<String> = match models {
            Some(m) => m.to_vec(),
            None => records
                .iter()
                .filter(|r| !r.excluded)
                .flat_map(|r| [r.left_model.clone(), r.right_model.clone()])
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect(),
        };
        let mut m = Self::zeros(models)?;
        for r in records.iter().filter(|r| !r.excluded) {
            m.record(r.chosen_model(), r.rejected_model())?;
        }
        Ok(m)
    }

    pub fn models(&self) -> &[String] {
        &self.models
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn index(&self, model: &str) -> Result<usize> {
        self.models
            .iter()
            .position(|m| m == model)
            .ok_or_else(|| Error::NotFound(format!("model {model} is not in the choice matrix")))
    }

    pub fn record(&mut self, winner: &str, loser: &str) -> Result<()> {
        let (i, j) = (self.index(winner)?, self.index(loser)?);
        ensure!(i != j, Contract, "a model cannot be chosen over itself");
        self.counts[i][j] += 1;
        Ok(())
    }

    pub fn wins(&self, i: usize, j: usize) -> u64 {
        self.counts[i][j]
    }

    pub fn trials(&self, i: usize, j: usize) -> u64 {
        self.counts[i][j] + self.counts[j][i]
    }

    pub fn total_trials(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Empirical probability that `i` is chosen over `j`, where compared.
    pub fn prob(&self, i: usize, j: usize) -> Option<f64> {
        let n = self.trials(i, j);
        (i != j && n > 0).then(|| self.counts[i][j] as f64 / n as f64)
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    /// Connected components of the comparison graph, as model ids.
    pub fn components(&self) -> Vec<Vec<String>> {
        let n = self.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], i: usize) -> usize {
            let mut r = i;
            while p[r] != r {
                r = p[r];
            }
            let mut i = i;
            while p[i] != r {
                let next = p[i];
                p[i] = r;
                i = next;
            }
            r
        }
        for i in 0..n {
            for j in i + 1..n {
                if self.trials(i, j) > 0 {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
        let mut groups: Vec<Vec<String>> = Vec::new();
        let mut root_slot: Vec<Option<usize>> = vec![None; n];
        for i in 0..n {
            let r = find(&mut parent, i);
            let slot = *root_slot[r].get_or_insert_with(|| {
                groups.push(Vec::new());
                groups.len() - 1
            });
            groups[slot].push(self.models[i].clone());
        }
        groups
    }

    /// The same data with models listed in `order` (a permutation of the
    /// current ids).
    pub fn reordered(&self, order: &[String]) -> Result<Self> {
        ensure!(order.len() == self.len(), Config, "reordering must list every model once");
        let idx = order.iter().map(|m| self.index(m)).collect::<Result<Vec<_>>>()?;
        let counts = idx.iter().map(|&i| idx.iter().map(|&j| self.counts[i][j]).collect()).collect();
        Self::new(order.to_vec(), counts)
    }

    /// Square CSV: header `model,<id>...`, then one row of win counts per model.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["model".to_string()];
        header.extend(self.models.iter().cloned());
        w.write_record(&header)?;
        for (m, row) in self.models.iter().zip(&self.counts) {
            let mut rec = vec![m.clone()];
            rec.extend(row.iter().map(|c| c.to_string()));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let header = r.headers()?.clone();
        ensure!(header.get(0) == Some("model"), Format, "choice matrix header must start with 'model'");
        let models: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut counts = Vec::with_capacity(models.len());
        for (i, row) in r.records().enumerate() {
            let row = row?;
            ensure!(i < models.len(), Format, "more rows than models");
            ensure!(row.get(0) == Some(models[i].as_str()), Format, "row {i} must be labelled {}", models[i]);
            let vals = row
                .iter()
                .skip(1)
                .map(|v| v.trim().parse::<u64>().map_err(|_| Error::Format(format!("count {v:?} is not a non-negative integer"))))
                .collect::<Result<Vec<_>>>()?;
            counts.push(vals);
        }
        ensure!(counts.len() == models.len(), Format, "expected {} rows, found {}", models.len(), counts.len());
        Self::new(models, counts).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_csv(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(trial: u64, left: &str, right: &str, side: Side, excluded: bool) -> ChoiceRecord {
        ChoiceRecord {
            trial_id: trial,
            pair_id: format!("p{trial}"),
            left_model: left.into(),
            right_model: right.into(),
            chosen_side: side,
            observer_id: "o1".into(),
            timestamp: 1000 * trial,
            session_id: String::new(),
            response_ms: None,
            excluded,
        }
    }

    #[test]
    fn single_trial_tally() {
        let m = ChoiceMatrix::from_records(&[rec(0, "B", "A", Side::Right, false)], None).unwrap();
        let (a, b) = (m.index("A").unwrap(), m.index("B").unwrap());
        assert_eq!(m.wins(a, b), 1);
        assert_eq!(m.wins(b, a), 0);
        assert_eq!(m.prob(a, b), Some(1.0));
        assert_eq!(m.prob(a, a), None);
    }

    #[test]
    fn excluded_trials_do_not_count() {
        let records = [rec(0, "A", "B", Side::Left, true), rec(1, "A", "B", Side::Right, false)];
        let m = ChoiceMatrix::from_records(&records, None).unwrap();
        assert_eq!(m.total_trials(), 1);
        assert_eq!(m.wins(1, 0), 1);
    }

    #[test]
    fn probabilities_are_complementary() {
        let mut m = ChoiceMatrix::zeros(vec!["a".into(), "b".into(), "c".into()]).unwrap();
        for _ in 0..3 {
            m.record("a", "b").unwrap();
        }
        m.record("b", "a").unwrap();
        assert_eq!(m.prob(0, 1).unwrap() + m.prob(1, 0).unwrap(), 1.0);
        assert_eq!(m.prob(0, 2), None);
        assert_eq!(m.components(), vec![vec!["a".to_string(), "b".to_string()], vec!["c".to_string()]]);
    }

    #[test]
    fn csv_round_trips_and_rejects_garbage() {
        let m = ChoiceMatrix::new(vec!["x".into(), "y".into()], vec![vec![0, 7], vec![3, 0]]).unwrap();
        let text = m.to_csv().unwrap();
        assert_eq!(text, "model,x,y\nx,0,7\ny,3,0\n");
        assert_eq!(ChoiceMatrix::from_csv(&text).unwrap(), m);
        assert!(ChoiceMatrix::from_csv("model,x,y\nx,0,-1\ny,3,0\n").is_err());
        assert!(ChoiceMatrix::from_csv("model,x,y\nx,1,1\ny,3,0\n").is_err());
        assert!(ChoiceMatrix::from_csv("model,x,y\nx,0,1\n").is_err());
    }

    #[test]
    fn log_is_append_only_with_one_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("choices.csv");
        append_choices(&path, &[rec(0, "A", "B", Side::Left, false)]).unwrap();
        append_choices(&path, &[rec(1, "B", "A", Side::Right, true)]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.matches("trial_id").count(), 1);
        assert!(text.starts_with("trial_id,pair_id,left_model,right_model,chosen_side,observer_id,timestamp,"));
        let back = read_choices(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert!(back[1].excluded);
        assert_eq!(back[0].chosen_model(), "A");
    }
}
