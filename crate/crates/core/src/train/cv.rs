use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::model::{accuracy, train_model, DataShape, PreparedGraph, TrainOutcome};
use super::HyperParams;
use crate::data::Dataset;
use crate::error::{Error, Result};

/// Fraction of each class in the non-test pool held out for validation.
pub const VALIDATION_FRACTION: f64 = 0.1;

/// Index sets of one fold, each ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

fn by_class(labels: &[usize], members: impl Iterator<Item = usize>) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in members {
        groups.entry(labels[i]).or_default().push(i);
    }
    groups
}

/// Stratified, seeded k-fold split.
///
/// Each class is shuffled, classes are concatenated and positions dealt to
/// folds round-robin, so every fold's per-class count differs by at most one.
/// Validation takes 10% of each class from the remaining pool. When some
/// class has fewer members than `folds`, stratification is dropped with a
/// warning.
pub fn kfold_split(labels: &[usize], folds: usize, seed: u64) -> Result<Vec<Split>> {
    if folds < 2 {
        return Err(Error::Argument(format!("need at least 2 folds, got {folds}")));
    }
    if labels.len() < folds {
        return Err(Error::Argument(format!(
            "{} graphs cannot fill {folds} folds",
            labels.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups = by_class(labels, 0..labels.len());
    if groups.values().any(|g| g.len() < folds) {
        log::warn!("a class has fewer than {folds} members; falling back to unstratified folds");
        groups = BTreeMap::from([(0, (0..labels.len()).collect())]);
    }
    let stratified = groups.len() > 1 || by_class(labels, 0..labels.len()).len() == 1;

    let mut order = Vec::with_capacity(labels.len());
    for members in groups.values_mut() {
        members.shuffle(&mut rng);
        order.extend_from_slice(members);
    }
    let mut fold_of = vec![0; labels.len()];
    for (pos, &i) in order.iter().enumerate() {
        fold_of[i] = pos % folds;
    }

    let mut splits = Vec::with_capacity(folds);
    for f in 0..folds {
        let test: Vec<usize> = (0..labels.len()).filter(|&i| fold_of[i] == f).collect();
        let pool = (0..labels.len()).filter(|&i| fold_of[i] != f);
        let pool_groups = if stratified {
            by_class(labels, pool)
        } else {
            BTreeMap::from([(0, pool.collect())])
        };
        let mut val = Vec::new();
        let mut train = Vec::new();
        let mut fold_rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(f as u64 + 1)));
        for (_, mut members) in pool_groups {
            members.shuffle(&mut fold_rng);
            let n_val = if members.len() >= 2 {
                ((members.len() as f64 * VALIDATION_FRACTION).round() as usize).max(1)
            } else {
                0
            };
            val.extend_from_slice(&members[..n_val]);
            train.extend_from_slice(&members[n_val..]);
        }
        val.sort_unstable();
        train.sort_unstable();
        splits.push(Split { train, val, test });
    }
    Ok(splits)
}

#[derive(Clone, Debug)]
pub struct CvOptions {
    pub folds: usize,
    pub seed: u64,
    /// Worker threads; 0 uses the global rayon pool.
    pub jobs: usize,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self {
            folds: 5,
            seed: 0,
            jobs: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FoldResult {
    pub train_curve: Vec<f64>,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub best_epoch: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct CvReport {
    pub folds: Vec<FoldResult>,
    pub mean: f64,
    /// Population standard deviation over folds.
    pub std: f64,
    pub winner: HyperParams,
    /// Mean validation accuracy of every grid point, in grid order.
    pub grid_val_means: Vec<f64>,
}

impl CvReport {
    pub fn test_accuracies(&self) -> Vec<f64> {
        self.folds.iter().map(|f| f.test_accuracy).collect()
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed.wrapping_mul(6_364_136_223_846_793_005)
        .wrapping_add(fold as u64 + 1)
}

/// Grid search with k-fold cross-validation.
///
/// Every grid point is trained on every fold's training split and scored on
/// its validation split. The point with the best mean validation accuracy
/// (earliest on ties) is then scored on each fold's test split.
pub fn cross_validate(grid: &[HyperParams], dataset: &Dataset, opts: &CvOptions) -> Result<CvReport> {
    if grid.is_empty() {
        return Err(Error::Argument("empty hyperparameter grid".into()));
    }
    for hp in grid {
        hp.validate()?;
    }
    let prepared = dataset
        .graphs
        .iter()
        .map(PreparedGraph::new)
        .collect::<Result<Vec<_>>>()?;
    let shape = DataShape::of(&prepared, dataset.num_classes);
    let splits = kfold_split(&dataset.labels(), opts.folds, opts.seed)?;

    let jobs: Vec<(usize, usize)> = (0..splits.len())
        .flat_map(|f| (0..grid.len()).map(move |h| (f, h)))
        .collect();
    let run = |&(f, h): &(usize, usize)| -> Result<TrainOutcome> {
        let split = &splits[f];
        let pick = |idx: &[usize]| idx.iter().map(|&i| &prepared[i]).collect::<Vec<_>>();
        let hp = HyperParams {
            seed: fold_seed(grid[h].seed ^ opts.seed, f),
            ..grid[h].clone()
        };
        let out = train_model(&hp, shape, &pick(&split.train), &pick(&split.val))?;
        log::info!("fold {f} {hp}: val {:.4}", out.best_val_accuracy);
        Ok(out)
    };
    let outcomes: Vec<TrainOutcome> = if opts.jobs == 1 {
        jobs.iter().map(run).collect::<Result<_>>()?
    } else if opts.jobs == 0 {
        jobs.par_iter().map(run).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.jobs)
            .build()
            .map_err(|e| Error::Argument(format!("thread pool: {e}")))?;
        pool.install(|| jobs.par_iter().map(run).collect::<Result<_>>())?
    };

    let folds = splits.len();
    let grid_val_means: Vec<f64> = (0..grid.len())
        .map(|h| {
            (0..folds)
                .map(|f| outcomes[f * grid.len() + h].best_val_accuracy)
                .sum::<f64>()
                / folds as f64
        })
        .collect();
    let winner = (0..grid.len()).fold(0, |b, h| if grid_val_means[h] > grid_val_means[b] { h } else { b });

    let mut fold_results = Vec::with_capacity(folds);
    for (f, split) in splits.iter().enumerate() {
        let out = &outcomes[f * grid.len() + winner];
        let test: Vec<&PreparedGraph> = split.test.iter().map(|&i| &prepared[i]).collect();
        fold_results.push(FoldResult {
            train_curve: out.train_curve.clone(),
            val_accuracy: out.best_val_accuracy,
            test_accuracy: accuracy(&out.model, &test)?,
            best_epoch: out.best_epoch,
        });
    }
    let tests: Vec<f64> = fold_results.iter().map(|f| f.test_accuracy).collect();
    let (mean, std) = mean_std(&tests);
    Ok(CvReport {
        folds: fold_results,
        mean,
        std,
        winner: grid[winner].clone(),
        grid_val_means,
    })
}
