//! Dataset containers, indicator matrices, and preprocessing.
//!
//! A cohort is described by one or more omics views, each a features-by-samples
//! matrix over a subset of the global sample set. Indicator matrices align each
//! view's columns with the global ordering so that solvers can reconcile views
//! with different (possibly incomplete) sample coverage.

use std::collections::{HashMap, HashSet};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

/// Errors raised while constructing or transforming datasets.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("sample `{id}` of view `{view}` is not in the global sample set")]
    UnknownSample { view: String, id: String },
    #[error("duplicate sample id `{id}` in {context}")]
    DuplicateSample { context: String, id: String },
    #[error("view `{view}`: matrix has {ncols} columns but {nids} sample ids")]
    ColumnCountMismatch {
        view: String,
        ncols: usize,
        nids: usize,
    },
    #[error("view `{view}`: non-finite entry at ({row}, {col})")]
    NonFiniteEntry {
        view: String,
        row: usize,
        col: usize,
    },
    #[error("z-score normalization needs at least 2 samples, got {0}")]
    DegenerateShape(usize),
    #[error("no view named `{0}`")]
    UnknownView(String),
    #[error("removing samples from view `{view}` would leave `{id}` in zero views")]
    OrphanedSample { view: String, id: String },
    #[error("global sample `{0}` appears in no view")]
    UncoveredSample(String),
    #[error("dataset must contain at least one view")]
    EmptyDataset,
    #[error("missing rate must lie in [0, 1), got {0}")]
    InvalidRate(f64),
}

/// One omics measurement modality: a features-by-samples matrix plus the ids
/// of the samples present in it.
#[derive(Debug, Clone, PartialEq)]
pub struct OmicsView {
    name: String,
    matrix: DMatrix<f64>,
    sample_ids: Vec<String>,
}

impl OmicsView {
    /// Validates and wraps a features-by-samples matrix.
    pub fn new(
        name: impl Into<String>,
        matrix: DMatrix<f64>,
        sample_ids: Vec<String>,
    ) -> Result<Self, DataError> {
        let name = name.into();
        if matrix.ncols() != sample_ids.len() {
            return Err(DataError::ColumnCountMismatch {
                view: name,
                ncols: matrix.ncols(),
                nids: sample_ids.len(),
            });
        }
        let mut seen = HashSet::new();
        for id in &sample_ids {
            if !seen.insert(id.as_str()) {
                return Err(DataError::DuplicateSample {
                    context: format!("view `{name}`"),
                    id: id.clone(),
                });
            }
        }
        for col in 0..matrix.ncols() {
            for row in 0..matrix.nrows() {
                if !matrix[(row, col)].is_finite() {
                    return Err(DataError::NonFiniteEntry {
                        view: name,
                        row,
                        col,
                    });
                }
            }
        }
        Ok(Self {
            name,
            matrix,
            sample_ids,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Features-by-samples data matrix.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn n_features(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.matrix.ncols()
    }

    /// Returns a copy of this view with z-scored feature rows.
    pub fn zscored(&self) -> Result<Self, DataError> {
        Ok(Self {
            name: self.name.clone(),
            matrix: zscore_normalize(&self.matrix)?,
            sample_ids: self.sample_ids.clone(),
        })
    }
}

/// A multi-omics cohort: the views plus the global sample universe (the union
/// of all views' samples, in first-appearance order unless supplied explicitly).
#[derive(Debug, Clone, PartialEq)]
pub struct MultiOmicsDataset {
    views: Vec<OmicsView>,
    global_ids: Vec<String>,
}

impl MultiOmicsDataset {
    /// Builds a dataset whose global sample set is the union of the views'
    /// samples, ordered by first appearance across views.
    pub fn new(views: Vec<OmicsView>) -> Result<Self, DataError> {
        if views.is_empty() {
            return Err(DataError::EmptyDataset);
        }
        let mut global_ids = Vec::new();
        let mut seen = HashSet::new();
        for view in &views {
            for id in view.sample_ids() {
                if seen.insert(id.clone()) {
                    global_ids.push(id.clone());
                }
            }
        }
        Self::with_global_ids(views, global_ids)
    }

    /// Builds a dataset with an explicit global ordering. Every view's samples
    /// must belong to `global_ids` and every global sample must be covered by
    /// at least one view.
    pub fn with_global_ids(
        views: Vec<OmicsView>,
        global_ids: Vec<String>,
    ) -> Result<Self, DataError> {
        if views.is_empty() {
            return Err(DataError::EmptyDataset);
        }
        let mut seen = HashSet::new();
        for id in &global_ids {
            if !seen.insert(id.as_str()) {
                return Err(DataError::DuplicateSample {
                    context: "global sample set".to_string(),
                    id: id.clone(),
                });
            }
        }
        let mut covered: HashSet<&str> = HashSet::new();
        for view in &views {
            for id in view.sample_ids() {
                if !seen.contains(id.as_str()) {
                    return Err(DataError::UnknownSample {
                        view: view.name().to_string(),
                        id: id.clone(),
                    });
                }
                covered.insert(id.as_str());
            }
        }
        for id in &global_ids {
            if !covered.contains(id.as_str()) {
                return Err(DataError::UncoveredSample(id.clone()));
            }
        }
        Ok(Self { views, global_ids })
    }

    pub fn views(&self) -> &[OmicsView] {
        &self.views
    }

    pub fn global_ids(&self) -> &[String] {
        &self.global_ids
    }

    pub fn n_views(&self) -> usize {
        self.views.len()
    }

    /// Size of the global sample universe.
    pub fn n_samples(&self) -> usize {
        self.global_ids.len()
    }

    pub fn view(&self, name: &str) -> Result<&OmicsView, DataError> {
        self.views
            .iter()
            .find(|v| v.name() == name)
            .ok_or_else(|| DataError::UnknownView(name.to_string()))
    }

    /// Indicator matrix aligning one view's columns with the global ordering.
    pub fn indicator(&self, view: &OmicsView) -> Result<IndicatorMatrix, DataError> {
        build_indicator(view.name(), view.sample_ids(), &self.global_ids)
    }

    /// Indicators for every view, in view order.
    pub fn indicators(&self) -> Result<Vec<IndicatorMatrix>, DataError> {
        self.views.iter().map(|v| self.indicator(v)).collect()
    }

    /// Returns a copy with every view's feature rows z-scored.
    pub fn zscored(&self) -> Result<Self, DataError> {
        let views = self
            .views
            .iter()
            .map(OmicsView::zscored)
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            views,
            global_ids: self.global_ids.clone(),
        })
    }
}

/// Binary selector aligning a view's present samples to the global sample
/// slots. Column `j` carries a single 1 in the row of the global sample that
/// the view's `j`-th column measures.
#[derive(Debug, Clone, PartialEq)]
pub struct IndicatorMatrix {
    view_name: String,
    /// `rows[j]` = global row index of the view's `j`-th sample.
    rows: Vec<usize>,
    n_global: usize,
}

/// Builds the indicator for one view against the global ordering.
pub fn build_indicator(
    view_name: &str,
    view_ids: &[String],
    global_ids: &[String],
) -> Result<IndicatorMatrix, DataError> {
    let mut index = HashMap::with_capacity(global_ids.len());
    for (i, id) in global_ids.iter().enumerate() {
        if index.insert(id.as_str(), i).is_some() {
            return Err(DataError::DuplicateSample {
                context: "global sample set".to_string(),
                id: id.clone(),
            });
        }
    }
    let mut rows = Vec::with_capacity(view_ids.len());
    let mut seen = HashSet::new();
    for id in view_ids {
        if !seen.insert(id.as_str()) {
            return Err(DataError::DuplicateSample {
                context: format!("view `{view_name}`"),
                id: id.clone(),
            });
        }
        match index.get(id.as_str()) {
            Some(&i) => rows.push(i),
            None => {
                return Err(DataError::UnknownSample {
                    view: view_name.to_string(),
                    id: id.clone(),
                })
            }
        }
    }
    Ok(IndicatorMatrix {
        view_name: view_name.to_string(),
        rows,
        n_global: global_ids.len(),
    })
}

impl IndicatorMatrix {
    pub fn view_name(&self) -> &str {
        &self.view_name
    }

    /// Number of global sample slots (rows of the dense form).
    pub fn n_global(&self) -> usize {
        self.n_global
    }

    /// Number of samples present in the view (columns of the dense form).
    pub fn n_view(&self) -> usize {
        self.rows.len()
    }

    /// Global row index selected by each view column.
    pub fn global_rows(&self) -> &[usize] {
        &self.rows
    }

    /// True when the selector is the identity (full view, same ordering).
    pub fn is_identity(&self) -> bool {
        self.n_global == self.rows.len() && self.rows.iter().enumerate().all(|(j, &i)| i == j)
    }

    /// Dense binary form, shape `n_global x n_view`.
    pub fn dense(&self) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(self.n_global, self.rows.len());
        for (j, &i) in self.rows.iter().enumerate() {
            g[(i, j)] = 1.0;
        }
        g
    }

    /// `M * G`: keeps the columns of `m` (one per global sample) that are
    /// present in the view, in view order. Exact column gather, no arithmetic.
    pub fn select_columns(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(m.ncols(), self.n_global, "column count != global samples");
        let mut out = DMatrix::zeros(m.nrows(), self.rows.len());
        for (j, &i) in self.rows.iter().enumerate() {
            out.set_column(j, &m.column(i));
        }
        out
    }

    /// `M * G^T`: places the view's columns into their global slots, leaving
    /// uncovered slots zero. Exact column scatter.
    pub fn scatter_columns(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(m.ncols(), self.rows.len(), "column count != view samples");
        let mut out = DMatrix::zeros(m.nrows(), self.n_global);
        for (j, &i) in self.rows.iter().enumerate() {
            out.set_column(i, &m.column(j));
        }
        out
    }
}

/// Per-global-sample view coverage counts: the diagonal of `sum_v G_v G_v^T`.
pub fn view_counts(indicators: &[IndicatorMatrix]) -> Vec<usize> {
    let n = indicators.first().map_or(0, IndicatorMatrix::n_global);
    let mut counts = vec![0usize; n];
    for g in indicators {
        for &i in g.global_rows() {
            counts[i] += 1;
        }
    }
    counts
}

/// Standardizes each feature row to mean 0 and unit population standard
/// deviation. Rows with zero variance map to all-zero rows.
pub fn zscore_normalize(matrix: &DMatrix<f64>) -> Result<DMatrix<f64>, DataError> {
    let n = matrix.ncols();
    if n < 2 {
        return Err(DataError::DegenerateShape(n));
    }
    let mut out = matrix.clone();
    for r in 0..out.nrows() {
        let mean = out.row(r).sum() / n as f64;
        let var = out.row(r).iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        if var == 0.0 {
            for c in 0..n {
                out[(r, c)] = 0.0;
            }
        } else {
            let std = var.sqrt();
            for c in 0..n {
                out[(r, c)] = (out[(r, c)] - mean) / std;
            }
        }
    }
    Ok(out)
}

/// Deletes `floor(missing_rate * N_v)` uniformly chosen samples from the named
/// view, leaving all other views and the global ordering untouched.
/// Deterministic under `seed`.
pub fn mask_view(
    dataset: &MultiOmicsDataset,
    view_name: &str,
    missing_rate: f64,
    seed: u64,
) -> Result<MultiOmicsDataset, DataError> {
    if !(0.0..1.0).contains(&missing_rate) {
        return Err(DataError::InvalidRate(missing_rate));
    }
    let target = dataset.view(view_name)?;
    let n_view = target.n_samples();
    let n_remove = (missing_rate * n_view as f64).floor() as usize;
    if n_remove == 0 {
        return Ok(dataset.clone());
    }

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut removed: Vec<usize> = rand::seq::index::sample(&mut rng, n_view, n_remove).into_vec();
    removed.sort_unstable();
    let removed_set: HashSet<usize> = removed.iter().copied().collect();

    // A removed sample must survive in some other view.
    for &j in &removed {
        let id = &target.sample_ids()[j];
        let covered_elsewhere = dataset
            .views()
            .iter()
            .any(|v| v.name() != view_name && v.sample_ids().iter().any(|s| s == id));
        if !covered_elsewhere {
            return Err(DataError::OrphanedSample {
                view: view_name.to_string(),
                id: id.clone(),
            });
        }
    }

    let kept: Vec<usize> = (0..n_view).filter(|j| !removed_set.contains(j)).collect();
    let mut matrix = DMatrix::zeros(target.n_features(), kept.len());
    let mut sample_ids = Vec::with_capacity(kept.len());
    for (new_j, &old_j) in kept.iter().enumerate() {
        matrix.set_column(new_j, &target.matrix().column(old_j));
        sample_ids.push(target.sample_ids()[old_j].clone());
    }
    let masked = OmicsView::new(view_name, matrix, sample_ids)?;

    let views = dataset
        .views()
        .iter()
        .map(|v| {
            if v.name() == view_name {
                masked.clone()
            } else {
                v.clone()
            }
        })
        .collect();
    MultiOmicsDataset::with_global_ids(views, dataset.global_ids().to_vec())
}
