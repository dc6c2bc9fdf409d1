//! Synthetic biased data generation, CSV ingestion, subgroup skew and
//! member/non-member/shadow splits.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;

use crate::rng::{rng_from_seed, sample_without_replacement, shuffled_indices};
use crate::scalar::Scalar;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Membership {
    Member,
    NonMember,
    Unassigned,
}

/// Feature rows with binary target label, binary sensitive attribute and
/// a membership flag per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset<S: Scalar> {
    pub features: Array2<S>,
    pub labels: Vec<u8>,
    pub groups: Vec<u8>,
    pub membership: Vec<Membership>,
}

impl<S: Scalar> LabeledDataset<S> {
    pub fn new(features: Array2<S>, labels: Vec<u8>, groups: Vec<u8>) -> Result<Self> {
        let n = features.nrows();
        let membership = vec![Membership::Unassigned; n];
        let ds = Self {
            features,
            labels,
            groups,
            membership,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.features.nrows();
        if n == 0 {
            return Err(Error::Validation("dataset must have n >= 1 rows".into()));
        }
        if self.labels.len() != n || self.groups.len() != n || self.membership.len() != n {
            return Err(Error::Validation(format!(
                "row count mismatch: features {n}, labels {}, groups {}, membership {}",
                self.labels.len(),
                self.groups.len(),
                self.membership.len()
            )));
        }
        if self.labels.iter().any(|&y| y > 1) {
            return Err(Error::Domain("labels must be 0 or 1".into()));
        }
        if self.groups.iter().any(|&s| s > 1) {
            return Err(Error::Domain("groups must be 0 or 1".into()));
        }
        Ok(())
    }

    /// New dataset holding the given rows, in the given order.
    pub fn subset(&self, rows: &[usize]) -> Self {
        let d = self.dim();
        let mut features = Array2::zeros((rows.len(), d));
        for (i, &r) in rows.iter().enumerate() {
            features.row_mut(i).assign(&self.features.row(r));
        }
        Self {
            features,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            groups: rows.iter().map(|&r| self.groups[r]).collect(),
            membership: rows.iter().map(|&r| self.membership[r]).collect(),
        }
    }

    pub fn with_membership(mut self, m: Membership) -> Self {
        self.membership = vec![m; self.n()];
        self
    }

    pub fn group_count(&self, group: u8) -> usize {
        self.groups.iter().filter(|&&s| s == group).count()
    }
}

/// Recipe for the synthetic stand-in data: Gaussian noise around
/// class-plus-group mean shifts, with subgroup skew per label class.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SyntheticSpec {
    pub dim: usize,
    pub n: usize,
    /// Additive mean shift per group (index by s), each of length `dim`.
    pub group_mean_shift: [Vec<f64>; 2],
    /// Additive mean shift per class (index by y), each of length `dim`.
    pub class_mean_shift: [Vec<f64>; 2],
    pub noise_std: f64,
    /// Fraction of each label class assigned to group 0 (the majority).
    pub skew_ratio: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Validation("dim must be positive".into()));
        }
        if self.n == 0 {
            return Err(Error::Validation("n must be positive".into()));
        }
        if !(self.noise_std > 0.0) {
            return Err(Error::Validation("noise_std must be > 0".into()));
        }
        if !(0.5..1.0).contains(&self.skew_ratio) {
            return Err(Error::Validation("skew_ratio must lie in [0.5, 1.0)".into()));
        }
        for (name, shifts) in [
            ("group_mean_shift", &self.group_mean_shift),
            ("class_mean_shift", &self.class_mean_shift),
        ] {
            if shifts.iter().any(|v| v.len() != self.dim) {
                return Err(Error::Validation(format!(
                    "{name} vectors must have length dim={}",
                    self.dim
                )));
            }
        }
        Ok(())
    }
}

/// Fractions for the member / non-member / shadow partition.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SplitSpec {
    pub member_fraction: f64,
    pub nonmember_fraction: f64,
    pub shadow_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, f) in [
            ("member_fraction", self.member_fraction),
            ("nonmember_fraction", self.nonmember_fraction),
            ("shadow_fraction", self.shadow_fraction),
        ] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::Validation(format!("{name} must lie in (0, 1)")));
            }
        }
        let sum = self.member_fraction + self.nonmember_fraction + self.shadow_fraction;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!(
                "split fractions must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }
}

/// Column-name mapping for CSV ingestion.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CsvSchema {
    pub label: String,
    pub group: String,
    /// Feature columns, in order. When `None`, every non-label,
    /// non-group column is a feature, in file order.
    pub features: Option<Vec<String>>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            label: "label".into(),
            group: "group".into(),
            features: None,
        }
    }
}

/// Generates `spec.n` rows of x = class_mean_shift[y] + group_mean_shift[s]
/// + noise_std * z. Label classes are balanced within one row; within each
/// class a `skew_ratio` fraction goes to group 0.
pub fn generate_synthetic<S: Scalar>(spec: &SyntheticSpec) -> Result<LabeledDataset<S>> {
    spec.validate()?;
    let mut rng = rng_from_seed(spec.seed);
    let n1 = spec.n / 2;
    let n0 = spec.n - n1;
    let mut features = Array2::zeros((spec.n, spec.dim));
    let mut labels = Vec::with_capacity(spec.n);
    let mut groups = Vec::with_capacity(spec.n);
    let mut row = 0usize;
    for (y, n_class) in [(0u8, n0), (1u8, n1)] {
        let n_majority = (spec.skew_ratio * n_class as f64).round() as usize;
        for i in 0..n_class {
            let s = u8::from(i >= n_majority);
            for j in 0..spec.dim {
                let mean = spec.class_mean_shift[y as usize][j]
                    + spec.group_mean_shift[s as usize][j];
                let z = S::sample_standard_normal(&mut rng).as_f64();
                features[[row, j]] = S::from_f64(mean + spec.noise_std * z);
            }
            labels.push(y);
            groups.push(s);
            row += 1;
        }
    }
    LabeledDataset::new(features, labels, groups)
}

/// Reads a header-row CSV into a dataset. Features parse as reals, label
/// and group columns must be literal 0 or 1; membership starts
/// unassigned and row order is preserved.
pub fn ingest_csv<S: Scalar>(path: &Path, schema: &CsvSchema) -> Result<LabeledDataset<S>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Io(std::io::Error::new(std::io::ErrorKind::Other, e.to_string())))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Schema(format!("cannot read header row: {e}")))?
        .iter()
        .map(str::to_owned)
        .collect();
    let col_index = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
    };
    let label_col = col_index(&schema.label)?;
    let group_col = col_index(&schema.group)?;
    let feature_cols: Vec<(usize, String)> = match &schema.features {
        Some(names) => names
            .iter()
            .map(|n| col_index(n).map(|i| (i, n.clone())))
            .collect::<Result<_>>()?,
        None => headers
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != label_col && *i != group_col)
            .map(|(i, h)| (i, h.clone()))
            .collect(),
    };
    if feature_cols.is_empty() {
        return Err(Error::Schema("at least one feature column required".into()));
    }

    let mut rows: Vec<Vec<S>> = Vec::new();
    let mut labels = Vec::new();
    let mut groups = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            row: row_idx,
            column: "<record>".into(),
            message: e.to_string(),
        })?;
        let parse_binary = |col: usize, name: &str| -> Result<u8> {
            match record.get(col).map(str::trim) {
                Some("0") => Ok(0),
                Some("1") => Ok(1),
                Some(other) => Err(Error::Domain(format!(
                    "column `{name}` row {row_idx}: value `{other}` is not 0 or 1"
                ))),
                None => Err(Error::Parse {
                    row: row_idx,
                    column: name.into(),
                    message: "missing cell".into(),
                }),
            }
        };
        labels.push(parse_binary(label_col, &schema.label)?);
        groups.push(parse_binary(group_col, &schema.group)?);
        let mut row = Vec::with_capacity(feature_cols.len());
        for (col, name) in &feature_cols {
            let cell = record.get(*col).unwrap_or("").trim();
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row: row_idx,
                column: name.clone(),
                message: format!("non-numeric cell `{cell}`"),
            })?;
            row.push(S::from_f64(v));
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Validation("CSV file has no data rows".into()));
    }
    let d = feature_cols.len();
    let mut features = Array2::zeros((rows.len(), d));
    for (i, row) in rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            features[[i, j]] = *v;
        }
    }
    LabeledDataset::new(features, labels, groups)
}

/// Subsamples to the requested majority/minority group ratio within
/// every label class, preserving the input's within-class label balance.
/// Sampling is seeded and without replacement.
pub fn apply_skew<S: Scalar>(
    data: &LabeledDataset<S>,
    ratio: f64,
    majority_group: u8,
    seed: u64,
) -> Result<LabeledDataset<S>> {
    if !(0.5..1.0).contains(&ratio) {
        return Err(Error::Validation("skew ratio must lie in [0.5, 1.0)".into()));
    }
    if majority_group > 1 {
        return Err(Error::Domain("majority_group must be 0 or 1".into()));
    }
    let minority_group = 1 - majority_group;
    // Cell indices keyed by (label, group).
    let mut cells: BTreeMap<(u8, u8), Vec<usize>> = BTreeMap::new();
    for i in 0..data.n() {
        cells
            .entry((data.labels[i], data.groups[i]))
            .or_default()
            .push(i);
    }
    let classes: Vec<u8> = {
        let mut c: Vec<u8> = data.labels.iter().copied().collect();
        c.sort_unstable();
        c.dedup();
        c
    };
    for &y in &classes {
        for g in [majority_group, minority_group] {
            if !cells.contains_key(&(y, g)) {
                return Err(Error::InfeasibleSkew(format!(
                    "no rows with label {y} in group {g}"
                )));
            }
        }
    }
    // Largest per-class size t such that round(ratio*t) majority rows and
    // t - round(ratio*t) minority rows are available.
    let class_max = |y: u8| -> usize {
        let m_avail = cells[&(y, majority_group)].len();
        let o_avail = cells[&(y, minority_group)].len();
        let mut t = m_avail + o_avail;
        while t > 0 {
            let m = (ratio * t as f64).round() as usize;
            if m <= m_avail && t - m <= o_avail {
                break;
            }
            t -= 1;
        }
        t
    };
    // Preserve the input class proportions: scale every class by the
    // tightest per-class constraint.
    let class_counts: BTreeMap<u8, usize> = classes
        .iter()
        .map(|&y| (y, data.labels.iter().filter(|&&l| l == y).count()))
        .collect();
    let alpha = classes
        .iter()
        .map(|&y| class_max(y) as f64 / class_counts[&y] as f64)
        .fold(f64::INFINITY, f64::min)
        .min(1.0);

    let mut rng = rng_from_seed(seed);
    let mut picked: Vec<usize> = Vec::new();
    for &y in &classes {
        let mut t = (alpha * class_counts[&y] as f64).floor() as usize;
        // Guard against rounding pushing a cell past its pool.
        loop {
            let m = (ratio * t as f64).round() as usize;
            if m <= cells[&(y, majority_group)].len()
                && t - m <= cells[&(y, minority_group)].len()
            {
                break;
            }
            t -= 1;
        }
        let m = (ratio * t as f64).round() as usize;
        for (g, want) in [(majority_group, m), (minority_group, t - m)] {
            let pool = &cells[&(y, g)];
            let chosen = sample_without_replacement(pool.len(), want, &mut rng);
            picked.extend(chosen.into_iter().map(|k| pool[k]));
        }
    }
    picked.sort_unstable();
    Ok(data.subset(&picked))
}

/// Disjoint member / non-member / shadow partition plus the rows of
/// the source dataset each split came from.
#[derive(Debug, Clone)]
pub struct Splits<S: Scalar> {
    pub members: LabeledDataset<S>,
    pub nonmembers: LabeledDataset<S>,
    pub shadow: LabeledDataset<S>,
    pub member_indices: Vec<usize>,
    pub nonmember_indices: Vec<usize>,
    pub shadow_indices: Vec<usize>,
}

/// Seeded partition into disjoint member / non-member / shadow sets whose
/// union is the input.
pub fn make_splits<S: Scalar>(data: &LabeledDataset<S>, spec: &SplitSpec) -> Result<Splits<S>> {
    spec.validate()?;
    let n = data.n();
    if n < 10 {
        return Err(Error::Validation(format!(
            "make_splits needs n >= 10 rows, got {n}"
        )));
    }
    let mut rng = rng_from_seed(spec.seed);
    let order = shuffled_indices(n, &mut rng);
    let n_member = (spec.member_fraction * n as f64).round() as usize;
    let n_nonmember = (spec.nonmember_fraction * n as f64).round() as usize;
    let n_nonmember = n_nonmember.min(n - n_member);
    let member_indices = order[..n_member].to_vec();
    let nonmember_indices = order[n_member..n_member + n_nonmember].to_vec();
    let shadow_indices = order[n_member + n_nonmember..].to_vec();
    Ok(Splits {
        members: data
            .subset(&member_indices)
            .with_membership(Membership::Member),
        nonmembers: data
            .subset(&nonmember_indices)
            .with_membership(Membership::NonMember),
        shadow: data
            .subset(&shadow_indices)
            .with_membership(Membership::Unassigned),
        member_indices,
        nonmember_indices,
        shadow_indices,
    })
}
