use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::{fit_rows, predict_proba, Acquisition, LogRegModel, Rows, TrainConfig};
use crate::backend::FeatureMatrix;
use crate::error::{Error, Result};
use crate::evaluator::{ConfusionMatrix, Ratio};
use crate::store::{split_index, FeatureStore};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvScore {
    pub c: f64,
    pub mean_accuracy: f64,
    pub fold_accuracies: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub cv_scores: Vec<CvScore>,
    pub chosen_c: f64,
    pub holdout: ConfusionMatrix,
    pub train_rows: usize,
    pub holdout_rows: usize,
    pub elapsed_secs: f64,
}

impl TrainReport {
    pub fn holdout_accuracy(&self) -> Ratio {
        self.holdout.accuracy()
    }
}

impl fmt::Display for TrainReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "cross-validation accuracy by C:")?;
        for s in &self.cv_scores {
            let mark = if s.c == self.chosen_c {
                "  <- chosen"
            } else {
                ""
            };
            writeln!(f, "  C={:<10} {:.4}{mark}", s.c, s.mean_accuracy)?;
        }
        writeln!(
            f,
            "trained on {} rows, evaluated on {} held-out rows in {:.1}s",
            self.train_rows, self.holdout_rows, self.elapsed_secs
        )?;
        write!(f, "{}", self.holdout.render_table())
    }
}

/// Assigns the members of each class round-robin to `folds` folds, in the
/// order they appear in `indices`, so each fold keeps that order. Every fold
/// must receive every class.
pub fn stratified_folds(
    indices: &[usize],
    labels: &[u32],
    classes: usize,
    folds: usize,
) -> Result<Vec<Vec<usize>>> {
    let mut out = vec![Vec::new(); folds];
    let mut seen = vec![0usize; classes];
    for &i in indices {
        let l = labels[i] as usize;
        out[seen[l] % folds].push(i);
        seen[l] += 1;
    }
    for (class, &n) in seen.iter().enumerate() {
        if n < folds {
            return Err(Error::Stratification(format!(
                "class {class} has {n} training rows, fewer than {folds} folds"
            )));
        }
    }
    Ok(out)
}

fn accuracy_on(
    model: &LogRegModel,
    features: &FeatureMatrix,
    labels: &[u32],
    rows: &[usize],
) -> Result<f64> {
    let probs = predict_proba(model, &features.select(rows))?;
    let correct = rows
        .iter()
        .enumerate()
        .filter(|(j, &i)| probs.argmax(*j).0 == labels[i] as usize)
        .count();
    Ok(correct as f64 / rows.len() as f64)
}

/// Grid search over an in-memory feature matrix.
pub fn grid_search_matrix(
    features: &FeatureMatrix,
    labels: &[u32],
    label_names: &[String],
    config: &TrainConfig,
    acquisition: &Acquisition,
) -> Result<(LogRegModel, TrainReport)> {
    let started = Instant::now();
    config.validate()?;
    acquisition.validate()?;
    let n = features.rows();
    let k = label_names.len();
    if labels.len() != n {
        return Err(Error::Dimension(format!(
            "{} labels for {n} rows",
            labels.len()
        )));
    }
    if n < config.folds * k {
        return Err(Error::InvalidArgument(format!(
            "{n} rows are too few for {} folds over {k} classes",
            config.folds
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.shuffle_seed));
    let split = split_index(n, config.split_ratio)?;
    let (train, holdout) = order.split_at(split);

    let folds = stratified_folds(train, labels, k, config.folds)?;
    let mut fold_of = vec![usize::MAX; n];
    for (f, members) in folds.iter().enumerate() {
        for &i in members {
            fold_of[i] = f;
        }
    }
    let complements: Vec<Vec<usize>> = (0..folds.len())
        .map(|f| train.iter().copied().filter(|&i| fold_of[i] != f).collect())
        .collect();

    let cells: Vec<(usize, usize)> = (0..config.c_grid.len())
        .flat_map(|c| (0..folds.len()).map(move |f| (c, f)))
        .collect();
    let scores: Vec<f64> = cells
        .par_iter()
        .map(|&(ci, f)| {
            let rows = Rows {
                features,
                labels,
                indices: &complements[f],
            };
            let (model, _) = fit_rows(rows, label_names, config.c_grid[ci], config, acquisition)?;
            accuracy_on(&model, features, labels, &folds[f])
        })
        .collect::<Result<_>>()?;

    let cv_scores: Vec<CvScore> = config
        .c_grid
        .iter()
        .enumerate()
        .map(|(ci, &c)| {
            let fold_accuracies = scores[ci * folds.len()..(ci + 1) * folds.len()].to_vec();
            let mean_accuracy = fold_accuracies.iter().sum::<f64>() / fold_accuracies.len() as f64;
            CvScore {
                c,
                mean_accuracy,
                fold_accuracies,
            }
        })
        .collect();
    // Grid is increasing, so the first maximum is the smallest C.
    let best = cv_scores.iter().fold(&cv_scores[0], |best, s| {
        if s.mean_accuracy > best.mean_accuracy {
            s
        } else {
            best
        }
    });
    let chosen_c = best.c;

    let rows = Rows {
        features,
        labels,
        indices: train,
    };
    let (model, _) = fit_rows(rows, label_names, chosen_c, config, acquisition)?;

    let mut holdout_cm = ConfusionMatrix::new(label_names.to_vec());
    if !holdout.is_empty() {
        let probs = predict_proba(&model, &features.select(holdout))?;
        for (j, &i) in holdout.iter().enumerate() {
            holdout_cm.add(labels[i] as usize, probs.argmax(j).0);
        }
    }

    let report = TrainReport {
        cv_scores,
        chosen_c,
        holdout: holdout_cm,
        train_rows: train.len(),
        holdout_rows: holdout.len(),
        elapsed_secs: started.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}

/// Loads every row of `store` and runs [`grid_search_matrix`].
pub fn grid_search(
    store: &FeatureStore,
    config: &TrainConfig,
    acquisition: &Acquisition,
) -> Result<(LogRegModel, TrainReport)> {
    if store.rows() == 0 {
        return Err(Error::EmptyStore);
    }
    let features = store.read_all()?;
    grid_search_matrix(
        &features,
        store.labels(),
        store.label_names(),
        config,
        acquisition,
    )
}
