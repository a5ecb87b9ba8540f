//! Trajectories, feature dictionaries, submodel index sets and fold
//! partitions.

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Decision stage of the two-stage regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Stage {
    One,
    Two,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

impl From<Stage> for u8 {
    fn from(s: Stage) -> u8 {
        s.number()
    }
}

impl TryFrom<u8> for Stage {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            other => Err(format!("stage must be 1 or 2, got {other}")),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

/// One observed trajectory `(X1, A1, X2, A2, Y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub x1: Vec<f64>,
    pub a1: bool,
    pub x2: Vec<f64>,
    pub a2: bool,
    pub y: f64,
}

impl Trajectory {
    pub fn new(x1: Vec<f64>, a1: bool, x2: Vec<f64>, a2: bool, y: f64) -> Result<Self> {
        if !x1.iter().chain(x2.iter()).all(|v| v.is_finite()) || !y.is_finite() {
            return Err(Error::config("trajectory entries must be finite"));
        }
        Ok(Self { x1, a1, x2, a2, y })
    }

    /// Stage-1 history, which is just `X1`.
    pub fn history1(&self) -> Vec<f64> {
        self.x1.clone()
    }

    /// Stage-2 history laid out as `(X1, A1, X2)`.
    pub fn history2(&self) -> Vec<f64> {
        let mut h = Vec::with_capacity(self.x1.len() + 1 + self.x2.len());
        h.extend_from_slice(&self.x1);
        h.push(indicator(self.a1));
        h.extend_from_slice(&self.x2);
        h
    }
}

#[inline]
pub fn indicator(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// A single column of a stage's working-model basis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "term")]
pub enum Term {
    Intercept,
    Main { index: usize },
    Interaction { i: usize, j: usize },
}

impl Term {
    fn evaluate(&self, row: &[f64]) -> f64 {
        match *self {
            Term::Intercept => 1.0,
            Term::Main { index } => row[index],
            Term::Interaction { i, j } => row[i] * row[j],
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Intercept => write!(f, "(intercept)"),
            Term::Main { index } => write!(f, "h{}", index + 1),
            Term::Interaction { i, j } => write!(f, "h{}:h{}", i + 1, j + 1),
        }
    }
}

/// Ordered dictionary of basis terms evaluated on a stage's raw history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDictionary {
    stage: Stage,
    input_dim: usize,
    terms: Vec<Term>,
}

impl FeatureDictionary {
    pub fn new(stage: Stage, input_dim: usize, terms: Vec<Term>) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::config("feature dictionary has no terms"));
        }
        let mut normalized = Vec::with_capacity(terms.len());
        for (pos, term) in terms.into_iter().enumerate() {
            let term = match term {
                Term::Intercept if pos != 0 => {
                    return Err(Error::config("intercept must be the first dictionary term"))
                }
                Term::Main { index } if index >= input_dim => {
                    return Err(Error::config(format!(
                        "main effect index {index} out of range for input dimension {input_dim}"
                    )))
                }
                Term::Interaction { i, j } => {
                    let (i, j) = (i.min(j), i.max(j));
                    if i == j || j >= input_dim {
                        return Err(Error::config(format!("invalid interaction ({i}, {j})")));
                    }
                    Term::Interaction { i, j }
                }
                t => t,
            };
            if normalized.contains(&term) {
                return Err(Error::config(format!("duplicate dictionary term {term}")));
            }
            normalized.push(term);
        }
        Ok(Self {
            stage,
            input_dim,
            terms: normalized,
        })
    }

    /// Intercept followed by main effects of the given raw coordinates.
    pub fn main_effects(stage: Stage, input_dim: usize, coords: impl IntoIterator<Item = usize>, intercept: bool) -> Result<Self> {
        let mut terms = Vec::new();
        if intercept {
            terms.push(Term::Intercept);
        }
        terms.extend(coords.into_iter().map(|index| Term::Main { index }));
        Self::new(stage, input_dim, terms)
    }

    /// Adds all pairwise interactions among the main effects already present.
    pub fn with_pairwise_interactions(mut self) -> Result<Self> {
        let mains: Vec<usize> = self
            .terms
            .iter()
            .filter_map(|t| match t {
                Term::Main { index } => Some(*index),
                _ => None,
            })
            .collect();
        for (a, &i) in mains.iter().enumerate() {
            for &j in &mains[a + 1..] {
                self.terms.push(Term::Interaction { i, j });
            }
        }
        Self::new(self.stage, self.input_dim, self.terms)
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn p(&self) -> usize {
        self.terms.len()
    }

    pub fn intercept_index(&self) -> Option<usize> {
        (self.terms.first() == Some(&Term::Intercept)).then_some(0)
    }

    pub fn position(&self, term: &Term) -> Option<usize> {
        self.terms.iter().position(|t| t == term)
    }

    pub fn evaluate_into(&self, row: &[f64], out: &mut [f64]) {
        for (o, t) in out.iter_mut().zip(&self.terms) {
            *o = t.evaluate(row);
        }
    }

    pub fn evaluate(&self, row: &[f64]) -> Vec<f64> {
        self.terms.iter().map(|t| t.evaluate(row)).collect()
    }
}

/// Which raw history feeds the stage-2 dictionary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage2History {
    /// Main effects of the `X2` block only.
    #[default]
    X2,
    /// Main effects of the whole `(X1, A1, X2)` history.
    Full,
}

/// Recipe for the two stage dictionaries given covariate dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DictionaryPlan {
    pub intercept: bool,
    pub interactions: bool,
    pub stage2_history: Stage2History,
}

impl Default for DictionaryPlan {
    fn default() -> Self {
        Self {
            intercept: true,
            interactions: false,
            stage2_history: Stage2History::X2,
        }
    }
}

impl DictionaryPlan {
    pub fn build(&self, q1: usize, q2: usize) -> Result<(FeatureDictionary, FeatureDictionary)> {
        let d1 = FeatureDictionary::main_effects(Stage::One, q1, 0..q1, self.intercept)?;
        let coords2: Vec<usize> = match self.stage2_history {
            Stage2History::X2 => (q1 + 1..q1 + 1 + q2).collect(),
            Stage2History::Full => (0..q1 + 1 + q2).collect(),
        };
        let d2 = FeatureDictionary::main_effects(Stage::Two, q1 + 1 + q2, coords2, self.intercept)?;
        if self.interactions {
            Ok((d1.with_pairwise_interactions()?, d2.with_pairwise_interactions()?))
        } else {
            Ok((d1, d2))
        }
    }
}

/// Evaluates the dictionary on every raw row, giving an `n x p` basis.
pub fn build_basis(raw_rows: &[Vec<f64>], dict: &FeatureDictionary) -> Result<DMatrix<f64>> {
    for (i, row) in raw_rows.iter().enumerate() {
        if row.len() != dict.input_dim() {
            return Err(Error::config(format!(
                "row {i} has dimension {}, dictionary expects {}",
                row.len(),
                dict.input_dim()
            )));
        }
    }
    let p = dict.p();
    let mut m = DMatrix::zeros(raw_rows.len(), p);
    let mut buf = vec![0.0; p];
    for (i, row) in raw_rows.iter().enumerate() {
        dict.evaluate_into(row, &mut buf);
        for (j, v) in buf.iter().enumerate() {
            m[(i, j)] = *v;
        }
    }
    Ok(m)
}

/// Sorted, duplicate-free subset of a stage's dictionary columns.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModelSet {
    indices: Vec<usize>,
    stage: Stage,
}

impl ModelSet {
    pub fn new(stage: Stage, mut indices: Vec<usize>) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if indices.is_empty() {
            return Err(Error::config("a model must contain at least one index"));
        }
        Ok(Self { indices, stage })
    }

    /// Builds a model from 1-based user-facing indices.
    pub fn from_one_based(stage: Stage, indices: &[usize]) -> Result<Self> {
        if indices.iter().any(|&i| i == 0) {
            return Err(Error::config("model indices are 1-based"));
        }
        Self::new(stage, indices.iter().map(|i| i - 1).collect())
    }

    pub fn full(stage: Stage, p: usize) -> Self {
        Self {
            indices: (0..p.max(1)).collect(),
            stage,
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, idx: usize) -> bool {
        self.indices.binary_search(&idx).is_ok()
    }

    pub fn one_based(&self) -> Vec<usize> {
        self.indices.iter().map(|i| i + 1).collect()
    }

    pub(crate) fn check_bounds(&self, p: usize) -> Result<()> {
        match self.indices.last() {
            Some(&last) if last >= p => Err(Error::config(format!(
                "model {self} has index out of range for dimension {p}"
            ))),
            _ => Ok(()),
        }
    }

    /// Compact `1;3;5` rendering (1-based) for CSV cells.
    pub fn to_cell(&self) -> String {
        self.one_based()
            .iter()
            .map(|i| i.to_string())
            .collect::<Vec<_>>()
            .join(";")
    }
}

impl fmt::Display for ModelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{{}}}", self.to_cell().replace(';', ","))
    }
}

pub fn subset_vector(v: &DVector<f64>, m: &ModelSet) -> Result<DVector<f64>> {
    m.check_bounds(v.len())?;
    Ok(DVector::from_iterator(m.len(), m.indices().iter().map(|&i| v[i])))
}

pub fn subset_matrix(a: &DMatrix<f64>, m: &ModelSet) -> Result<DMatrix<f64>> {
    if a.nrows() != a.ncols() {
        return Err(Error::config("subset_matrix expects a square matrix"));
    }
    m.check_bounds(a.nrows())?;
    let idx = m.indices();
    Ok(DMatrix::from_fn(idx.len(), idx.len(), |r, c| a[(idx[r], idx[c])]))
}

/// Trajectories together with both stages' evaluated bases.
#[derive(Debug, Clone)]
pub struct Dataset {
    trajectories: Vec<Trajectory>,
    dict1: FeatureDictionary,
    dict2: FeatureDictionary,
    phi1: DMatrix<f64>,
    phi2: DMatrix<f64>,
}

impl Dataset {
    pub fn new(trajectories: Vec<Trajectory>, dict1: FeatureDictionary, dict2: FeatureDictionary) -> Result<Self> {
        if trajectories.len() < 2 {
            return Err(Error::config("a dataset needs at least two trajectories"));
        }
        let q1 = trajectories[0].x1.len();
        let q2 = trajectories[0].x2.len();
        if trajectories.iter().any(|t| t.x1.len() != q1 || t.x2.len() != q2) {
            return Err(Error::config("trajectories have inconsistent covariate dimensions"));
        }
        if dict1.stage() != Stage::One || dict2.stage() != Stage::Two {
            return Err(Error::config("dictionaries are attached to the wrong stages"));
        }
        let h1: Vec<Vec<f64>> = trajectories.iter().map(Trajectory::history1).collect();
        let h2: Vec<Vec<f64>> = trajectories.iter().map(Trajectory::history2).collect();
        let phi1 = build_basis(&h1, &dict1)?;
        let phi2 = build_basis(&h2, &dict2)?;
        Ok(Self {
            trajectories,
            dict1,
            dict2,
            phi1,
            phi2,
        })
    }

    pub fn n(&self) -> usize {
        self.trajectories.len()
    }

    pub fn q1(&self) -> usize {
        self.trajectories[0].x1.len()
    }

    pub fn q2(&self) -> usize {
        self.trajectories[0].x2.len()
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn dictionary(&self, stage: Stage) -> &FeatureDictionary {
        match stage {
            Stage::One => &self.dict1,
            Stage::Two => &self.dict2,
        }
    }

    pub fn basis(&self, stage: Stage) -> &DMatrix<f64> {
        match stage {
            Stage::One => &self.phi1,
            Stage::Two => &self.phi2,
        }
    }

    /// Raw stage history as an `n x d` matrix: `X1` for stage 1 and
    /// `(X1, A1, X2)` for stage 2.
    pub fn history_matrix(&self, stage: Stage) -> DMatrix<f64> {
        let rows: Vec<Vec<f64>> = match stage {
            Stage::One => self.trajectories.iter().map(Trajectory::history1).collect(),
            Stage::Two => self.trajectories.iter().map(Trajectory::history2).collect(),
        };
        let d = rows[0].len();
        DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j])
    }

    pub fn treatments(&self, stage: Stage) -> Vec<f64> {
        self.trajectories
            .iter()
            .map(|t| indicator(if stage == Stage::One { t.a1 } else { t.a2 }))
            .collect()
    }

    pub fn outcomes(&self) -> Vec<f64> {
        self.trajectories.iter().map(|t| t.y).collect()
    }
}

/// Partition of `0..n` into `K` folds of near-equal size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPartition {
    folds: Vec<Vec<usize>>,
    n: usize,
}

impl FoldPartition {
    /// Wraps an explicit fold assignment after checking the partition
    /// invariants.
    pub fn from_folds(mut folds: Vec<Vec<usize>>) -> Result<Self> {
        if folds.len() < 2 {
            return Err(Error::config("folds: K must be at least 2"));
        }
        let n: usize = folds.iter().map(Vec::len).sum();
        let mut seen = vec![false; n];
        for f in folds.iter_mut() {
            f.sort_unstable();
            for &i in f.iter() {
                if i >= n || std::mem::replace(&mut seen[i], true) {
                    return Err(Error::config(format!("folds: index {i} is repeated or out of range")));
                }
            }
        }
        let lo = folds.iter().map(Vec::len).min().unwrap_or(0);
        let hi = folds.iter().map(Vec::len).max().unwrap_or(0);
        if lo == 0 || hi - lo > 1 {
            return Err(Error::config("folds: sizes must be nonzero and differ by at most one"));
        }
        Ok(Self { folds, n })
    }

    pub fn folds(&self) -> &[Vec<usize>] {
        &self.folds
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.folds.len()
    }

    /// Indices outside fold `k`, in increasing order.
    pub fn complement(&self, k: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .folds
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != k)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        out.sort_unstable();
        out
    }
}

/// Shuffles `0..n` with a seeded stream and slices it into `k` contiguous
/// blocks; the first `n % k` blocks get one extra element.
pub fn make_folds(n: usize, k: usize, seed: u64) -> Result<FoldPartition> {
    if k < 2 {
        return Err(Error::config(format!("folds: K must be at least 2, got {k}")));
    }
    if k > n {
        return Err(Error::config(format!("folds: K = {k} exceeds n = {n}")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::stream(seed, rng::DOMAIN_FOLDS, n as u64));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        let mut fold = perm[start..start + len].to_vec();
        fold.sort_unstable();
        folds.push(fold);
        start += len;
    }
    Ok(FoldPartition { folds, n })
}

fn column_names(q1: usize, q2: usize) -> Vec<String> {
    let mut names: Vec<String> = (1..=q1).map(|j| format!("x1_{j}")).collect();
    names.push("a1".into());
    names.extend((1..=q2).map(|j| format!("x2_{j}")));
    names.push("a2".into());
    names.push("y".into());
    names
}

fn parse_header(header: &csv::StringRecord) -> Result<(usize, usize)> {
    let cols: Vec<&str> = header.iter().map(str::trim).collect();
    let q1 = cols.iter().take_while(|c| c.starts_with("x1_")).count();
    let q2 = cols.iter().skip(q1 + 1).take_while(|c| c.starts_with("x2_")).count();
    let expected = column_names(q1, q2);
    if cols.len() != expected.len() || cols.iter().zip(&expected).any(|(a, b)| a != b) {
        let (col, found) = cols
            .iter()
            .zip(&expected)
            .enumerate()
            .find(|(_, (a, b))| *a != *b)
            .map(|(c, (a, _))| (c + 1, a.to_string()))
            .unwrap_or((cols.len().min(expected.len()) + 1, "<missing>".to_string()));
        return Err(Error::Input {
            line: 1,
            message: format!(
                "header column {col}: found '{found}', expected layout {}",
                expected.join(",")
            ),
        });
    }
    if q1 == 0 || q2 == 0 {
        return Err(Error::Input {
            line: 1,
            message: "header needs at least one x1_ and one x2_ column".into(),
        });
    }
    Ok((q1, q2))
}

fn parse_binary(field: &str, name: &str, line: u64) -> Result<bool> {
    match field.trim() {
        "0" | "0.0" => Ok(false),
        "1" | "1.0" => Ok(true),
        other => Err(Error::Input {
            line,
            message: format!("column '{name}': treatment must be 0 or 1, got '{other}'"),
        }),
    }
}

/// Reads trajectories from the CSV layout
/// `x1_1..x1_q1, a1, x2_1..x2_q2, a2, y` (header required).
pub fn read_trajectories_csv(path: &Path) -> Result<Vec<Trajectory>> {
    let file = std::fs::File::open(path)?;
    read_trajectories(file)
}

pub fn read_trajectories(reader: impl std::io::Read) -> Result<Vec<Trajectory>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .comment(Some(b'#'))
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::Input {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let (q1, q2) = parse_header(&header)?;
    let names = column_names(q1, q2);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Input {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != names.len() {
            return Err(Error::Input {
                line,
                message: format!(
                    "expected {} columns, found {} (first missing column: '{}')",
                    names.len(),
                    rec.len(),
                    names.get(rec.len()).map_or("-", |s| s.as_str())
                ),
            });
        }
        let num = |c: usize| -> Result<f64> {
            let v: f64 = rec[c].trim().parse().map_err(|_| Error::Input {
                line,
                message: format!("column {} ('{}'): cannot parse '{}'", c + 1, names[c], &rec[c]),
            })?;
            if !v.is_finite() {
                return Err(Error::Input {
                    line,
                    message: format!("column {} ('{}'): non-finite value", c + 1, names[c]),
                });
            }
            Ok(v)
        };
        let x1 = (0..q1).map(num).collect::<Result<Vec<_>>>()?;
        let a1 = parse_binary(&rec[q1], "a1", line)?;
        let x2 = (q1 + 1..q1 + 1 + q2).map(num).collect::<Result<Vec<_>>>()?;
        let a2 = parse_binary(&rec[q1 + 1 + q2], "a2", line)?;
        let y = num(q1 + q2 + 2)?;
        out.push(Trajectory { x1, a1, x2, a2, y });
    }
    Ok(out)
}

/// Writes trajectories in the same layout `read_trajectories` accepts, with
/// shortest round-trip float formatting.
pub fn write_trajectories(writer: impl std::io::Write, trajectories: &[Trajectory]) -> Result<()> {
    let (q1, q2) = trajectories
        .first()
        .map_or((0, 0), |t| (t.x1.len(), t.x2.len()));
    let mut w = csv::Writer::from_writer(writer);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(column_names(q1, q2)).map_err(csv_err)?;
    for t in trajectories {
        let mut row: Vec<String> = t.x1.iter().map(|v| v.to_string()).collect();
        row.push(u8::from(t.a1).to_string());
        row.extend(t.x2.iter().map(|v| v.to_string()));
        row.push(u8::from(t.a2).to_string());
        row.push(t.y.to_string());
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dict(stage: Stage, dim: usize, terms: Vec<Term>) -> FeatureDictionary {
        FeatureDictionary::new(stage, dim, terms).unwrap()
    }

    #[test]
    fn basis_examples() {
        let d = dict(
            Stage::One,
            2,
            vec![Term::Intercept, Term::Main { index: 0 }, Term::Main { index: 1 }],
        );
        let b = build_basis(&[vec![0.5, -1.0]], &d).unwrap();
        assert_eq!(b.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.5, -1.0]);

        let d = dict(Stage::One, 2, vec![Term::Main { index: 0 }, Term::Interaction { i: 0, j: 1 }]);
        let b = build_basis(&[vec![2.0, 3.0]], &d).unwrap();
        assert_eq!(b.row(0).iter().copied().collect::<Vec<_>>(), vec![2.0, 6.0]);

        let d = dict(Stage::One, 2, vec![Term::Intercept]);
        let b = build_basis(&[vec![-7.5, 11.0]], &d).unwrap();
        assert_eq!(b[(0, 0)], 1.0);
    }

    #[test]
    fn basis_dimension_mismatch() {
        let d = dict(Stage::One, 3, vec![Term::Intercept]);
        assert!(matches!(build_basis(&[vec![1.0]], &d), Err(Error::Config(_))));
    }

    #[test]
    fn default_plan_dimensions() {
        let (d1, d2) = DictionaryPlan::default().build(10, 10).unwrap();
        assert_eq!((d1.p(), d2.p()), (11, 11));
        assert_eq!(d2.terms()[1], Term::Main { index: 11 });
        let (_, full) = DictionaryPlan { stage2_history: Stage2History::Full, ..Default::default() }.build(2, 2).unwrap();
        assert_eq!(full.p(), 6);
        let (i1, _) = DictionaryPlan { interactions: true, ..Default::default() }.build(3, 3).unwrap();
        assert_eq!(i1.p(), 1 + 3 + 3);
    }

    #[test]
    fn dictionary_rejects_bad_terms() {
        assert!(FeatureDictionary::new(Stage::One, 2, vec![Term::Main { index: 0 }, Term::Intercept]).is_err());
        assert!(FeatureDictionary::new(Stage::One, 2, vec![Term::Main { index: 0 }, Term::Main { index: 0 }]).is_err());
        assert!(FeatureDictionary::new(Stage::One, 2, vec![Term::Interaction { i: 1, j: 1 }]).is_err());
        let d = FeatureDictionary::new(Stage::One, 3, vec![Term::Interaction { i: 2, j: 0 }]).unwrap();
        assert_eq!(d.terms()[0], Term::Interaction { i: 0, j: 2 });
    }

    #[test]
    fn subset_examples() {
        let v = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let m = ModelSet::new(Stage::One, vec![0, 1]).unwrap();
        assert_eq!(subset_vector(&v, &m).unwrap().as_slice(), &[1.0, 2.0]);

        let a = DMatrix::from_fn(5, 5, |i, j| (10 * i + j) as f64);
        let s = subset_matrix(&a, &m).unwrap();
        assert_eq!(s, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 10.0, 11.0]));

        let full = ModelSet::full(Stage::One, 5);
        assert_eq!(subset_vector(&v, &full).unwrap(), v);
        assert_eq!(subset_matrix(&a, &full).unwrap(), a);

        let bad = ModelSet::new(Stage::One, vec![5]).unwrap();
        assert!(subset_vector(&v, &bad).is_err());
        assert!(subset_matrix(&a, &bad).is_err());
    }

    #[test]
    fn model_set_normalizes_and_renders() {
        let m = ModelSet::new(Stage::Two, vec![4, 0, 2, 2]).unwrap();
        assert_eq!(m.indices(), &[0, 2, 4]);
        assert_eq!(m.to_string(), "{1,3,5}");
        assert_eq!(m.to_cell(), "1;3;5");
        assert_eq!(ModelSet::from_one_based(Stage::Two, &[1, 3, 5]).unwrap(), m);
        assert!(ModelSet::new(Stage::Two, vec![]).is_err());
    }

    #[test]
    fn fold_examples() {
        let f = make_folds(6, 3, 11).unwrap();
        assert!(f.folds().iter().all(|x| x.len() == 2));
        let f = make_folds(7, 3, 11).unwrap();
        let mut sizes: Vec<usize> = f.folds().iter().map(Vec::len).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![2, 2, 3]);
        assert_eq!(make_folds(7, 3, 11).unwrap(), f);
        assert!(make_folds(3, 4, 0).is_err());
        assert!(make_folds(3, 1, 0).is_err());
    }

    #[test]
    fn csv_round_trip_and_diagnostics() {
        let trajs = vec![
            Trajectory::new(vec![0.1, -0.2], true, vec![0.3], false, 1.25).unwrap(),
            Trajectory::new(vec![1.0 / 3.0, 2.0], false, vec![-0.5], true, -0.75).unwrap(),
        ];
        let mut buf = Vec::new();
        write_trajectories(&mut buf, &trajs).unwrap();
        assert_eq!(read_trajectories(buf.as_slice()).unwrap(), trajs);

        let missing = "x1_1,x1_2,a1,x2_1,a2,y\n0.1,0.2,1,0.3,0\n";
        match read_trajectories(missing.as_bytes()) {
            Err(Error::Input { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("'y'"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
        let bad_header = "x1_1,a1,x2_1,treat,y\n";
        assert!(matches!(read_trajectories(bad_header.as_bytes()), Err(Error::Input { line: 1, .. })));
        let bad_a = "x1_1,a1,x2_1,a2,y\n0.1,2,0.3,0,1\n";
        assert!(matches!(read_trajectories(bad_a.as_bytes()), Err(Error::Input { line: 2, .. })));
    }

    proptest! {
        #[test]
        fn folds_partition(n in 2usize..80, k_raw in 2usize..20, seed in any::<u64>()) {
            let k = k_raw.min(n);
            let f = make_folds(n, k, seed).unwrap();
            let mut all: Vec<usize> = f.folds().iter().flatten().copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            let lo = f.folds().iter().map(Vec::len).min().unwrap();
            let hi = f.folds().iter().map(Vec::len).max().unwrap();
            prop_assert!(hi - lo <= 1);
        }

        #[test]
        fn subset_preserves_symmetry_and_nesting(
            vals in proptest::collection::vec(-5.0f64..5.0, 36),
            picks in proptest::collection::vec(any::<bool>(), 6),
        ) {
            let a = DMatrix::from_vec(6, 6, vals.clone());
            let sym = &a + a.transpose();
            let mut idx: Vec<usize> = (0..6).filter(|&i| picks[i]).collect();
            if idx.is_empty() { idx.push(0); }
            let m = ModelSet::new(Stage::One, idx.clone()).unwrap();
            let s = subset_matrix(&sym, &m).unwrap();
            prop_assert_eq!(s.clone(), s.transpose());

            // nesting: m ⊂ full, positions of m inside full are m itself
            let v = DVector::from_vec(vals[..6].to_vec());
            let big = ModelSet::new(Stage::One, (0..6).collect()).unwrap();
            let outer = subset_vector(&v, &big).unwrap();
            let inner = subset_vector(&v, &m).unwrap();
            let positions = ModelSet::new(Stage::One, idx.iter().map(|i| big.indices().iter().position(|j| j == i).unwrap()).collect()).unwrap();
            prop_assert_eq!(subset_vector(&outer, &positions).unwrap(), inner);
        }
    }
}
