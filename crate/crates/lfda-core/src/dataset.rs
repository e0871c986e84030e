//! Data model and CSV ingestion for longitudinal functional data: curves on a
//! shared grid of functional argument `s`, observed repeatedly per subject at
//! sparse visit times `t`.
//!
//! The canonical interchange format is long CSV with header `subject,t,s,y`;
//! an empty `y` encodes a missing grid cell. A visit is identified by the
//! `(subject, t)` pair, so two visits of one subject at the identical time are
//! not representable.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mean::MeanSurface;

/// Trapezoid quadrature weights for an increasing grid of at least two points.
pub fn quadrature_weights(points: &[f64]) -> Result<Vec<f64>> {
    let r = points.len();
    if r < 2 {
        return Err(Error::domain("quadrature needs at least two grid points"));
    }
    let mut weights = vec![0.0; r];
    weights[0] = (points[1] - points[0]) / 2.0;
    weights[r - 1] = (points[r - 1] - points[r - 2]) / 2.0;
    for i in 1..r - 1 {
        weights[i] = (points[i + 1] - points[i - 1]) / 2.0;
    }
    Ok(weights)
}

/// The shared grid of the functional argument together with its quadrature
/// weights.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GridSpec {
    points: Vec<f64>,
    quad_weights: Vec<f64>,
}

impl GridSpec {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::domain("grid points must be strictly increasing"));
        }
        if points.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::domain("grid points must lie in [0, 1]"));
        }
        let quad_weights = quadrature_weights(&points)?;
        Ok(Self { points, quad_weights })
    }

    /// `n` equispaced points spanning [0, 1].
    pub fn equispaced(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::domain("grid needs at least two points"));
        }
        let points = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        Self::new(points)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.quad_weights
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Length of the covered interval.
    pub fn range(&self) -> f64 {
        self.points[self.points.len() - 1] - self.points[0]
    }

    /// Quadrature integral of a curve sampled on this grid.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.len());
        values
            .iter()
            .zip(self.quad_weights.iter())
            .map(|(v, w)| v * w)
            .sum()
    }

    /// Quadrature inner product of two curves on this grid.
    pub fn inner(&self, a: &[f64], b: &[f64]) -> f64 {
        debug_assert_eq!(a.len(), self.len());
        debug_assert_eq!(b.len(), self.len());
        (0..self.len()).map(|i| a[i] * b[i] * self.quad_weights[i]).sum()
    }
}

/// One recorded profile: visit time, curve values on the grid, and an
/// observation mask (`false` marks a missing cell; its value is NaN).
#[derive(Debug, Clone, PartialEq)]
pub struct Visit {
    pub t: f64,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl Visit {
    pub fn new(t: f64, values: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::domain(format!("visit time {t} outside [0, 1]")));
        }
        if values.len() != mask.len() {
            return Err(Error::schema("visit values and mask lengths differ"));
        }
        for (v, &m) in values.iter().zip(mask.iter()) {
            if m && !v.is_finite() {
                return Err(Error::domain("observed visit value is not finite"));
            }
        }
        Ok(Self { t, values, mask })
    }

    /// Fully observed visit.
    pub fn dense(t: f64, values: Vec<f64>) -> Result<Self> {
        let mask = vec![true; values.len()];
        Self::new(t, values, mask)
    }

    pub fn n_observed(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    pub visits: Vec<Visit>,
}

/// Longitudinal functional dataset: immutable after construction.
#[derive(Debug, Clone)]
pub struct LFDataset {
    grid: GridSpec,
    subjects: Vec<Subject>,
    index: HashMap<String, usize>,
}

impl LFDataset {
    pub fn new(grid: GridSpec, subjects: Vec<Subject>) -> Result<Self> {
        let mut index = HashMap::with_capacity(subjects.len());
        for (i, subject) in subjects.iter().enumerate() {
            if subject.visits.is_empty() {
                return Err(Error::schema(format!("subject `{}` has no visits", subject.id)));
            }
            for visit in &subject.visits {
                if visit.values.len() != grid.len() {
                    return Err(Error::schema(format!(
                        "subject `{}` visit t={} has {} values, grid has {}",
                        subject.id,
                        visit.t,
                        visit.values.len(),
                        grid.len()
                    )));
                }
            }
            if index.insert(subject.id.clone(), i).is_some() {
                return Err(Error::schema(format!("duplicate subject id `{}`", subject.id)));
            }
        }
        Ok(Self { grid, subjects, index })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    pub fn subject(&self, id: &str) -> Option<&Subject> {
        self.index.get(id).map(|&i| &self.subjects[i])
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_visits(&self) -> usize {
        self.subjects.iter().map(|s| s.visits.len()).sum()
    }

    /// Iterate `(subject, visit)` pairs in dataset order.
    pub fn visits(&self) -> impl Iterator<Item = (&Subject, &Visit)> {
        self.subjects
            .iter()
            .flat_map(|s| s.visits.iter().map(move |v| (s, v)))
    }

    /// Subtract an estimated mean surface from every observed cell.
    pub fn demean(&self, mean: &MeanSurface) -> Result<LFDataset> {
        let points = self.grid.points().to_vec();
        let mut subjects = Vec::with_capacity(self.subjects.len());
        for subject in &self.subjects {
            let mut visits = Vec::with_capacity(subject.visits.len());
            for visit in &subject.visits {
                let mut values = visit.values.clone();
                for (r, value) in values.iter_mut().enumerate() {
                    if visit.mask[r] {
                        *value -= mean.evaluate(points[r], visit.t)?;
                    }
                }
                visits.push(Visit {
                    t: visit.t,
                    values,
                    mask: visit.mask.clone(),
                });
            }
            subjects.push(Subject {
                id: subject.id.clone(),
                visits,
            });
        }
        LFDataset::new(self.grid.clone(), subjects)
    }
}

/// A train/test partition holding out selected subjects' last visits.
#[derive(Debug, Clone)]
pub struct TrainTestSplit {
    pub train: LFDataset,
    pub test: Vec<(String, Visit)>,
}

/// Hold out the last visit of `n_test` randomly chosen subjects (only
/// subjects with at least two visits are eligible). "Last" means the final
/// visit in the subject's recorded sequence. Deterministic given the seed.
pub fn split_last_visit(data: &LFDataset, n_test: usize, rng_seed: u64) -> Result<TrainTestSplit> {
    let eligible: Vec<usize> = data
        .subjects
        .iter()
        .enumerate()
        .filter(|(_, s)| s.visits.len() >= 2)
        .map(|(i, _)| i)
        .collect();
    if eligible.len() < n_test {
        return Err(Error::domain(format!(
            "{} subjects with >= 2 visits, cannot hold out {n_test}",
            eligible.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut chosen: Vec<usize> = rand::seq::index::sample(&mut rng, eligible.len(), n_test)
        .into_iter()
        .map(|j| eligible[j])
        .collect();
    chosen.sort_unstable();

    let mut test = Vec::with_capacity(n_test);
    let mut subjects = data.subjects.clone();
    for &idx in &chosen {
        let subject = &mut subjects[idx];
        let visit = subject.visits.pop().expect("eligible subject has visits");
        test.push((subject.id.clone(), visit));
    }
    Ok(TrainTestSplit {
        train: LFDataset::new(data.grid.clone(), subjects)?,
        test,
    })
}

fn parse_field(value: &str, name: &str, line: u64) -> Result<f64> {
    value.trim().parse::<f64>().map_err(|_| Error::Parse {
        line,
        message: format!("cannot parse {name} value `{value}`"),
    })
}

/// Load a long-format CSV (`subject,t,s,y`; empty `y` = missing cell).
pub fn load_csv(path: impl AsRef<Path>) -> Result<LFDataset> {
    let file = std::fs::File::open(path)?;
    load_csv_from(file)
}

/// CSV ingestion from any reader; see [`load_csv`].
pub fn load_csv_from<R: Read>(reader: R) -> Result<LFDataset> {
    let mut csv_reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    {
        let headers = csv_reader.headers()?;
        let expected = ["subject", "t", "s", "y"];
        if headers.len() != 4 || headers.iter().zip(expected.iter()).any(|(h, e)| h != *e) {
            return Err(Error::schema(format!(
                "expected header `subject,t,s,y`, found `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
    }

    // subject order and visit order are first-appearance order.
    let mut subject_order: Vec<String> = Vec::new();
    let mut visit_map: HashMap<String, Vec<(f64, Vec<(f64, Option<f64>)>)>> = HashMap::new();

    for record in csv_reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != 4 {
            return Err(Error::Parse {
                line,
                message: format!("expected 4 fields, found {}", record.len()),
            });
        }
        let subject = record[0].to_string();
        if subject.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty subject id".into(),
            });
        }
        let t = parse_field(&record[1], "t", line)?;
        let s = parse_field(&record[2], "s", line)?;
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::domain(format!("line {line}: t={t} outside [0, 1]")));
        }
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::domain(format!("line {line}: s={s} outside [0, 1]")));
        }
        let y = if record[3].is_empty() {
            None
        } else {
            let v = parse_field(&record[3], "y", line)?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    message: format!("non-finite y value `{}`", &record[3]),
                });
            }
            Some(v)
        };

        let visits = visit_map.entry(subject.clone()).or_insert_with(|| {
            subject_order.push(subject.clone());
            Vec::new()
        });
        match visits.iter_mut().find(|(vt, _)| *vt == t) {
            Some((_, cells)) => cells.push((s, y)),
            None => visits.push((t, vec![(s, y)])),
        }
    }

    if subject_order.is_empty() {
        return Err(Error::schema("no data rows"));
    }

    // The grid comes from the first visit encountered; all visits must match.
    let mut grid_points: Option<Vec<f64>> = None;
    let mut subjects = Vec::with_capacity(subject_order.len());
    for id in &subject_order {
        let mut visits_raw = visit_map.remove(id).expect("subject recorded");
        let mut visits = Vec::with_capacity(visits_raw.len());
        for (t, mut cells) in visits_raw.drain(..) {
            cells.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
            if cells.windows(2).any(|w| w[0].0 == w[1].0) {
                return Err(Error::schema(format!(
                    "subject `{id}` visit t={t} has duplicate s values"
                )));
            }
            let s_values: Vec<f64> = cells.iter().map(|(s, _)| *s).collect();
            match &grid_points {
                None => grid_points = Some(s_values),
                Some(expected) => {
                    if *expected != s_values {
                        return Err(Error::schema(format!(
                            "subject `{id}` visit t={t} grid differs from the first visit"
                        )));
                    }
                }
            }
            let mut values = Vec::with_capacity(cells.len());
            let mut mask = Vec::with_capacity(cells.len());
            for (_, y) in cells {
                match y {
                    Some(v) => {
                        values.push(v);
                        mask.push(true);
                    }
                    None => {
                        values.push(f64::NAN);
                        mask.push(false);
                    }
                }
            }
            visits.push(Visit::new(t, values, mask)?);
        }
        subjects.push(Subject {
            id: id.clone(),
            visits,
        });
    }

    let grid = GridSpec::new(grid_points.expect("at least one visit"))?;
    LFDataset::new(grid, subjects)
}

/// Write a dataset in the long CSV format; inverse of [`load_csv`].
pub fn write_csv(data: &LFDataset, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_csv_to(data, file)
}

pub fn write_csv_to<W: Write>(data: &LFDataset, writer: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(["subject", "t", "s", "y"])?;
    let points = data.grid().points();
    for (subject, visit) in data.visits() {
        for (r, &s) in points.iter().enumerate() {
            let y = if visit.mask[r] {
                visit.values[r].to_string()
            } else {
                String::new()
            };
            out.write_record([subject.id.as_str(), &visit.t.to_string(), &s.to_string(), &y])?;
        }
    }
    out.flush()?;
    Ok(())
}
