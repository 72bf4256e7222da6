//! Configuration ensembles: averaging per-fold predictions and exhaustive
//! subset search by cross-validated mean sensitivity.
//!
//! A configuration is one training recipe instantiated as `m` per-fold
//! models. Each fold model predicts its own validation images (and,
//! optionally, the test set). On disk a configuration is a directory with
//! `val_fold{j}.csv` and optionally `test_fold{j}.csv`, `j = 0..m`.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classes::{Label, KNOWN_CLASSES, NUM_CLASSES};
use crate::par::{self, Execution};
use crate::predictions::{PredictionMatrix, Probs};

/// Largest pool enumerated by default (2^20 subsets).
pub const DEFAULT_GUARD: usize = 20;

/// Fixed-point scale for summing probabilities: integer sums make the
/// argmax independent of the order configurations are added in.
const FIXED_ONE: f64 = (1u64 << 32) as f64;

#[derive(Debug, thiserror::Error)]
pub enum EnsembleError {
    #[error("configuration `{config}`: {reason}")]
    IdMismatch { config: String, reason: String },
    #[error("pool of {n} configurations exceeds the enumeration guard of {guard}")]
    PoolTooLarge { n: usize, guard: usize },
    #[error("empty configuration subset")]
    EmptySubset,
    #[error("configuration index {0} out of range")]
    BadIndex(usize),
    #[error("configuration `{0}` has no test predictions")]
    NoTestPredictions(String),
    #[error("configuration `{config}`: {reason}")]
    Layout { config: String, reason: String },
    #[error("no label for image `{0}`")]
    MissingLabel(String),
    #[error("image `{image}` has label {label}, which is not evaluated")]
    UnknownLabel { image: String, label: Label },
    #[error(transparent)]
    Predictions(#[from] crate::predictions::PredictionError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scoring {
    /// One mean sensitivity over all validation folds concatenated.
    #[default]
    Pooled,
    /// Mean of the per-fold mean sensitivities.
    PerFoldMean,
}

impl std::str::FromStr for Scoring {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "pooled" => Ok(Scoring::Pooled),
            "per-fold-mean" => Ok(Scoring::PerFoldMean),
            other => Err(format!("unknown scoring `{other}` (pooled | per-fold-mean)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Validation,
    Test,
}

#[derive(Debug, Clone)]
pub struct Configuration {
    pub name: String,
    /// Per-fold predictions on that fold's validation images.
    pub val: Vec<PredictionMatrix>,
    /// Per-fold predictions on the test set, if any.
    pub test: Option<Vec<PredictionMatrix>>,
}

impl Configuration {
    pub fn num_folds(&self) -> usize {
        self.val.len()
    }

    /// Read `val_fold{j}.csv` (and `test_fold{j}.csv`) for `j = 0, 1, ...`
    /// until the first missing validation file.
    pub fn load_dir(dir: &Path) -> crate::Result<Self> {
        let name = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        let layout = |reason: String| EnsembleError::Layout {
            config: name.clone(),
            reason,
        };
        if !dir.is_dir() {
            return Err(crate::Error::io(
                dir,
                std::io::Error::new(std::io::ErrorKind::NotFound, "configuration directory not found"),
            ));
        }
        let mut val = Vec::new();
        let mut test = Vec::new();
        loop {
            let j = val.len();
            let vp = dir.join(format!("val_fold{j}.csv"));
            if !vp.exists() {
                break;
            }
            val.push(PredictionMatrix::read_path(&vp)?);
            let tp = dir.join(format!("test_fold{j}.csv"));
            if tp.exists() {
                test.push(PredictionMatrix::read_path(&tp)?);
            }
        }
        if val.is_empty() {
            return Err(layout("no val_fold0.csv".into()).into());
        }
        let test = match test.len() {
            0 => None,
            n if n == val.len() => Some(test),
            n => return Err(layout(format!("{n} test files for {} folds", val.len())).into()),
        };
        Ok(Configuration { name, val, test })
    }
}

/// Pool of configurations sharing validation and test image sets.
#[derive(Debug, Clone)]
pub struct ConfigurationSet {
    configs: Vec<Configuration>,
    /// Validation image ids, sorted.
    val_ids: Vec<String>,
    /// Fold of each entry of `val_ids` (taken from the first configuration).
    val_folds: Vec<usize>,
    /// Per configuration, validation rows aligned with `val_ids`.
    val_rows: Vec<Vec<Probs>>,
}

fn sorted_ids(parts: &[PredictionMatrix]) -> Vec<String> {
    let mut ids: Vec<String> = parts.iter().flat_map(|p| p.ids().iter().cloned()).collect();
    ids.sort();
    ids
}

impl ConfigurationSet {
    pub fn new(configs: Vec<Configuration>) -> Result<Self, EnsembleError> {
        let Some(first) = configs.first() else {
            return Err(EnsembleError::EmptySubset);
        };
        let val_ids = sorted_ids(&first.val);
        let mut fold_of: HashMap<&str, usize> = HashMap::new();
        for (j, part) in first.val.iter().enumerate() {
            for id in part.ids() {
                if fold_of.insert(id, j).is_some() {
                    return Err(EnsembleError::IdMismatch {
                        config: first.name.clone(),
                        reason: format!("image `{id}` is in more than one validation fold"),
                    });
                }
            }
        }
        let val_folds = val_ids.iter().map(|id| fold_of[id.as_str()]).collect();
        let test_ids = first.test.as_ref().map(|t| t[0].ids().to_vec());
        let mut val_rows = Vec::with_capacity(configs.len());
        for cfg in &configs {
            let mismatch = |reason: String| EnsembleError::IdMismatch {
                config: cfg.name.clone(),
                reason,
            };
            if cfg.num_folds() != first.num_folds() {
                return Err(mismatch(format!("{} folds, expected {}", cfg.num_folds(), first.num_folds())));
            }
            if sorted_ids(&cfg.val) != val_ids {
                return Err(mismatch("validation image ids differ from the first configuration".into()));
            }
            let mut index: HashMap<&str, &Probs> = HashMap::new();
            for part in &cfg.val {
                for (id, p) in part.ids().iter().zip(part.probs()) {
                    index.insert(id, p);
                }
            }
            val_rows.push(val_ids.iter().map(|id| *index[id.as_str()]).collect());
            if let (Some(tests), Some(want)) = (&cfg.test, &test_ids) {
                let want: HashSet<&String> = want.iter().collect();
                for t in tests {
                    if t.len() != want.len() || !t.ids().iter().all(|id| want.contains(id)) {
                        return Err(mismatch("test image ids differ between matrices".into()));
                    }
                }
            }
        }
        Ok(Self {
            configs,
            val_ids,
            val_folds,
            val_rows,
        })
    }

    pub fn load_dirs(dirs: &[PathBuf]) -> crate::Result<Self> {
        let configs = dirs.iter().map(|d| Configuration::load_dir(d)).collect::<crate::Result<Vec<_>>>()?;
        Ok(Self::new(configs)?)
    }

    pub fn len(&self) -> usize {
        self.configs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.configs.is_empty()
    }

    pub fn configs(&self) -> &[Configuration] {
        &self.configs
    }

    pub fn names(&self) -> Vec<&str> {
        self.configs.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn val_ids(&self) -> &[String] {
        &self.val_ids
    }

    /// Validation predictions of one configuration, aligned with `val_ids`.
    pub fn val_rows(&self, config: usize) -> &[Probs] {
        &self.val_rows[config]
    }
}

fn check_subset(subset: &[usize], n: usize) -> Result<(), EnsembleError> {
    if subset.is_empty() {
        return Err(EnsembleError::EmptySubset);
    }
    match subset.iter().find(|&&i| i >= n) {
        Some(&i) => Err(EnsembleError::BadIndex(i)),
        None => Ok(()),
    }
}

fn mean_rows(rows: &[&[Probs]]) -> Vec<Probs> {
    let k = rows.len() as f64;
    (0..rows[0].len())
        .map(|i| {
            let mut acc = [0.0; NUM_CLASSES];
            for r in rows {
                for (a, v) in acc.iter_mut().zip(&r[i]) {
                    *a += v;
                }
            }
            acc.map(|a| a / k)
        })
        .collect()
}

/// Average of the chosen configurations.
///
/// For validation each image uses, per configuration, the fold model that
/// held it out; rows are sorted by image id. For the test set every
/// configuration contributes the mean of its fold models, in the first
/// configuration's row order.
pub fn ensemble_average(
    subset: &[usize],
    cfgs: &ConfigurationSet,
    target: Target,
) -> Result<PredictionMatrix, EnsembleError> {
    check_subset(subset, cfgs.len())?;
    match target {
        Target::Validation => {
            let rows: Vec<&[Probs]> = subset.iter().map(|&c| cfgs.val_rows(c)).collect();
            Ok(PredictionMatrix::new(cfgs.val_ids.clone(), mean_rows(&rows))?)
        }
        Target::Test => {
            let order: Vec<String> = cfgs.configs[subset[0]]
                .test
                .as_ref()
                .ok_or_else(|| EnsembleError::NoTestPredictions(cfgs.configs[subset[0]].name.clone()))?[0]
                .ids()
                .to_vec();
            let mut per_config = Vec::with_capacity(subset.len());
            for &c in subset {
                let cfg = &cfgs.configs[c];
                let tests = cfg
                    .test
                    .as_ref()
                    .ok_or_else(|| EnsembleError::NoTestPredictions(cfg.name.clone()))?;
                let aligned: Vec<Vec<Probs>> = tests
                    .iter()
                    .map(|t| {
                        let index = t.row_index();
                        order
                            .iter()
                            .map(|id| {
                                index.get(id.as_str()).map(|&i| t.probs()[i]).ok_or_else(|| {
                                    EnsembleError::IdMismatch {
                                        config: cfg.name.clone(),
                                        reason: format!("test image `{id}` missing"),
                                    }
                                })
                            })
                            .collect()
                    })
                    .collect::<Result<_, _>>()?;
                let refs: Vec<&[Probs]> = aligned.iter().map(|v| v.as_slice()).collect();
                per_config.push(mean_rows(&refs));
            }
            let refs: Vec<&[Probs]> = per_config.iter().map(|v| v.as_slice()).collect();
            Ok(PredictionMatrix::new(order, mean_rows(&refs))?)
        }
    }
}

/// Score of one evaluated subset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubsetScore {
    pub subset: Vec<String>,
    #[serde(rename = "S")]
    pub s: f64,
}

/// Result of the exhaustive search.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchReport {
    /// Names of the chosen configurations, in pool order.
    pub subset: Vec<String>,
    #[serde(skip)]
    pub indices: Vec<usize>,
    #[serde(rename = "S_star")]
    pub s_star: f64,
    pub scoring: Scoring,
    pub pool: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_subset_scores: Option<Vec<SubsetScore>>,
}

/// Precomputed fixed-point validation data for subset scoring.
struct Scorer<'a> {
    /// Per configuration, `rows * NUM_CLASSES` quantized probabilities.
    fixed: Vec<Vec<u64>>,
    labels: Vec<usize>,
    folds: &'a [usize],
    num_folds: usize,
    scoring: Scoring,
}

impl Scorer<'_> {
    fn score(&self, mask: u64) -> f64 {
        let rows = self.labels.len();
        let members: Vec<&[u64]> = (0..self.fixed.len())
            .filter(|&c| mask >> c & 1 == 1)
            .map(|c| self.fixed[c].as_slice())
            .collect();
        let groups = match self.scoring {
            Scoring::Pooled => 1,
            Scoring::PerFoldMean => self.num_folds,
        };
        let mut hits = vec![[0u64; KNOWN_CLASSES]; groups];
        let mut totals = vec![[0u64; KNOWN_CLASSES]; groups];
        let mut acc = [0u64; NUM_CLASSES];
        for i in 0..rows {
            acc.fill(0);
            for m in &members {
                for (a, v) in acc.iter_mut().zip(&m[i * NUM_CLASSES..(i + 1) * NUM_CLASSES]) {
                    *a += v;
                }
            }
            // argmax, lowest index on ties
            let mut best = 0;
            for c in 1..NUM_CLASSES {
                if acc[c] > acc[best] {
                    best = c;
                }
            }
            let g = match self.scoring {
                Scoring::Pooled => 0,
                Scoring::PerFoldMean => self.folds[i],
            };
            let label = self.labels[i];
            totals[g][label] += 1;
            if best == label {
                hits[g][label] += 1;
            }
        }
        let group_scores: Vec<f64> = hits
            .iter()
            .zip(&totals)
            .filter_map(|(h, t)| {
                let present: Vec<f64> = (0..KNOWN_CLASSES)
                    .filter(|&c| t[c] > 0)
                    .map(|c| h[c] as f64 / t[c] as f64)
                    .collect();
                (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
            })
            .collect();
        group_scores.iter().sum::<f64>() / group_scores.len() as f64
    }
}

fn mask_indices(mask: u64, n: usize) -> Vec<usize> {
    (0..n).filter(|&c| mask >> c & 1 == 1).collect()
}

/// `a` beats `b`: higher score, then fewer members, then the
/// lexicographically smaller sorted index list.
fn better(a: (f64, &[usize]), b: (f64, &[usize])) -> bool {
    if a.0 != b.0 {
        return a.0 > b.0;
    }
    if a.1.len() != b.1.len() {
        return a.1.len() < b.1.len();
    }
    a.1 < b.1
}

/// Enumerate every nonempty subset of the pool and return the one whose
/// averaged validation predictions maximize mean sensitivity.
///
/// Scores are computed (in parallel when enabled) into a vector and reduced
/// sequentially, so the result does not depend on scheduling.
pub fn search_optimal_subset(
    cfgs: &ConfigurationSet,
    labels: &HashMap<String, Label>,
    guard: usize,
    scoring: Scoring,
    keep_scores: bool,
    exec: Execution,
) -> Result<SearchReport, EnsembleError> {
    let n = cfgs.len();
    if n == 0 {
        return Err(EnsembleError::EmptySubset);
    }
    if n > guard || n > 63 {
        return Err(EnsembleError::PoolTooLarge { n, guard });
    }
    let label_idx = cfgs
        .val_ids
        .iter()
        .map(|id| {
            let l = *labels.get(id).ok_or_else(|| EnsembleError::MissingLabel(id.clone()))?;
            if l.is_known() {
                Ok(l.index())
            } else {
                Err(EnsembleError::UnknownLabel { image: id.clone(), label: l })
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    let fixed = cfgs
        .val_rows
        .iter()
        .map(|rows| rows.iter().flatten().map(|p| (p * FIXED_ONE).round() as u64).collect())
        .collect();
    let scorer = Scorer {
        fixed,
        labels: label_idx,
        folds: &cfgs.val_folds,
        num_folds: cfgs.configs[0].num_folds(),
        scoring,
    };
    let count = (1usize << n) - 1;
    let scores = par::map_range(exec, count, |k| scorer.score(k as u64 + 1));
    let mut best_mask = 1u64;
    let mut best_idx = mask_indices(1, n);
    for (k, &s) in scores.iter().enumerate() {
        let mask = k as u64 + 1;
        let idx = mask_indices(mask, n);
        if better((s, &idx), (scores[best_mask as usize - 1], &best_idx)) {
            best_mask = mask;
            best_idx = idx;
        }
    }
    let names = cfgs.names();
    let per_subset_scores = keep_scores.then(|| {
        scores
            .iter()
            .enumerate()
            .map(|(k, &s)| SubsetScore {
                subset: mask_indices(k as u64 + 1, n).iter().map(|&i| names[i].to_string()).collect(),
                s,
            })
            .collect()
    });
    Ok(SearchReport {
        subset: best_idx.iter().map(|&i| names[i].to_string()).collect(),
        indices: best_idx,
        s_star: scores[best_mask as usize - 1],
        scoring,
        pool: names.iter().map(|s| s.to_string()).collect(),
        per_subset_scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn onehot(c: usize) -> Probs {
        let mut p = [0.0; NUM_CLASSES];
        p[c] = 1.0;
        p
    }

    fn config(name: &str, folds: Vec<Vec<(&str, Probs)>>) -> Configuration {
        let val = folds
            .into_iter()
            .map(|f| {
                let (ids, probs): (Vec<String>, Vec<Probs>) = f.into_iter().map(|(i, p)| (i.to_string(), p)).unzip();
                PredictionMatrix::new(ids, probs).unwrap()
            })
            .collect();
        Configuration {
            name: name.into(),
            val,
            test: None,
        }
    }

    fn labels(pairs: &[(&str, Label)]) -> HashMap<String, Label> {
        pairs.iter().map(|(i, l)| (i.to_string(), *l)).collect()
    }

    #[test]
    fn excludes_useless_configuration() {
        // images 1..3 are MEL, NV, BCC; A is right on 1,2; B on 2,3; C on none
        let truth = labels(&[("1", Label::Mel), ("2", Label::Nv), ("3", Label::Bcc)]);
        let a = config("A", vec![vec![("1", onehot(0)), ("2", onehot(1))], vec![("3", onehot(4))]]);
        let b = config("B", vec![vec![("1", onehot(4)), ("2", onehot(1))], vec![("3", onehot(2))]]);
        let c = config("C", vec![vec![("1", onehot(5)), ("2", onehot(5))], vec![("3", onehot(5))]]);
        let set = ConfigurationSet::new(vec![a, b, c]).unwrap();
        let r = search_optimal_subset(&set, &truth, DEFAULT_GUARD, Scoring::Pooled, true, Execution::Sequential)
            .unwrap();
        assert!(!r.subset.contains(&"C".to_string()));
        // {A,B}: image 1 ties MEL/BKL -> MEL wins (lowest index); all correct
        assert_eq!(r.subset, vec!["A", "B"]);
        assert_eq!(r.s_star, 1.0);
        assert_eq!(r.per_subset_scores.unwrap().len(), 7);
    }

    #[test]
    fn singleton_pool_and_guard() {
        let truth = labels(&[("x", Label::Mel), ("y", Label::Nv)]);
        let a = config("A", vec![vec![("x", onehot(0))], vec![("y", onehot(0))]]);
        let set = ConfigurationSet::new(vec![a.clone()]).unwrap();
        let r = search_optimal_subset(&set, &truth, 20, Scoring::Pooled, false, Execution::Parallel).unwrap();
        assert_eq!(r.subset, vec!["A"]);
        assert_eq!(r.s_star, 0.5);
        let dup = ConfigurationSet::new(vec![a.clone(), a]).unwrap();
        let r2 = search_optimal_subset(&dup, &truth, 20, Scoring::Pooled, false, Execution::Parallel).unwrap();
        assert_eq!(r2.s_star, r.s_star);
        assert_eq!(r2.indices, vec![0]);
        assert!(matches!(
            search_optimal_subset(&dup, &truth, 1, Scoring::Pooled, false, Execution::Sequential),
            Err(EnsembleError::PoolTooLarge { n: 2, guard: 1 })
        ));
    }

    #[test]
    fn averages_by_hand() {
        let p = |a: f64| {
            let mut v = [0.0; NUM_CLASSES];
            v[0] = a;
            v[1] = 1.0 - a;
            v
        };
        let cfgs: Vec<Configuration> = [(0.2, 0.9), (0.4, 0.5), (0.9, 0.1)]
            .iter()
            .enumerate()
            .map(|(k, &(u, v))| {
                let mut c = config(&format!("c{k}"), vec![vec![("u", p(u))], vec![("v", p(v))]]);
                let t0 = PredictionMatrix::new(vec!["t".into()], vec![p(u)]).unwrap();
                let t1 = PredictionMatrix::new(vec!["t".into()], vec![p(v)]).unwrap();
                c.test = Some(vec![t0, t1]);
                c
            })
            .collect();
        let set = ConfigurationSet::new(cfgs).unwrap();
        let val = ensemble_average(&[0, 1, 2], &set, Target::Validation).unwrap();
        assert!((val.probs()[0][0] - 0.5).abs() < 1e-12);
        assert!((val.probs()[1][0] - 0.5).abs() < 1e-12);
        let test = ensemble_average(&[0, 2], &set, Target::Test).unwrap();
        // ((0.2 + 0.9) / 2 + (0.9 + 0.1) / 2) / 2
        assert!((test.probs()[0][0] - 0.525).abs() < 1e-12);
        let single = ensemble_average(&[1], &set, Target::Test).unwrap();
        assert!((single.probs()[0][0] - 0.45).abs() < 1e-12);
        assert!(matches!(ensemble_average(&[], &set, Target::Test), Err(EnsembleError::EmptySubset)));
    }

    #[test]
    fn rejects_mismatched_ids() {
        let a = config("A", vec![vec![("x", onehot(0))]]);
        let b = config("B", vec![vec![("z", onehot(0))]]);
        assert!(matches!(ConfigurationSet::new(vec![a, b]), Err(EnsembleError::IdMismatch { .. })));
    }
}
