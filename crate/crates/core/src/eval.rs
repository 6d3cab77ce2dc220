//! Evaluation: per-head accuracy and confusion, stratified k-fold CV,
//! ablation sweeps and perturbation robustness.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, PrepOptions};
use crate::error::{Error, Result};
use crate::model::{AblationConfig, Head, InputGeometry, LabelSpace, Model, StateActionLabel};
use crate::train::{make_batch, train, TrainConfig, TrainReport};
use crate::world::Perturbation;

/// Heads that carry a meaningful score for `space`.
pub fn scored_heads(space: &LabelSpace, relative: bool) -> Vec<Head> {
    Head::ALL
        .into_iter()
        .filter(|h| space.has_z || !matches!(h, Head::Z | Head::Dz))
        .filter(|h| relative || !h.is_relative())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadReport {
    pub head: Head,
    pub accuracy: f64,
    /// `confusion[truth][predicted]`; undetected items are not included.
    pub confusion: Vec<Vec<u64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub items: usize,
    /// Items whose target was not detected; they count as wrong on every head.
    pub missed: usize,
    pub heads: Vec<HeadReport>,
    /// Mean wall-clock milliseconds per item (preprocessing plus forward).
    pub ms_per_item: f64,
}

impl EvalReport {
    pub fn accuracy(&self, head: Head) -> Option<f64> {
        self.heads.iter().find(|h| h.head == head).map(|h| h.accuracy)
    }

    /// Accuracies indexed like `Head::ALL`; unscored heads are NaN.
    pub fn accuracy_array(&self) -> [f64; 8] {
        let mut a = [f64::NAN; 8];
        for h in &self.heads {
            a[h.head.index()] = h.accuracy;
        }
        a
    }
}

/// Scores `model` on `idx`. `perturbation` overrides the stored one when given.
pub fn evaluate(
    model: &Model<f32>,
    ds: &Dataset,
    idx: &[usize],
    perturbation: Option<Perturbation>,
    opts: &PrepOptions,
    batch: usize,
) -> Result<EvalReport> {
    if model.space != ds.space {
        return Err(Error::geometry("evaluate", "model label space differs from the dataset's"));
    }
    let heads = scored_heads(&model.space, model.has_relative());
    let mut confusion: Vec<Vec<Vec<u64>>> = heads
        .iter()
        .map(|&h| vec![vec![0; model.space.width(h)]; model.space.width(h)])
        .collect();
    let mut missed = 0;
    let start = Instant::now();
    for chunk in idx.chunks(batch.max(1)) {
        let b = make_batch(ds, chunk, perturbation, opts)?;
        missed += b.missed.len();
        if b.kept.is_empty() {
            continue;
        }
        let pred = model.predict(&b.input)?;
        for (p, l) in pred.iter().zip(&b.labels) {
            for (k, &h) in heads.iter().enumerate() {
                confusion[k][l.get(h)][p.get(h)] += 1;
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let n = idx.len().max(1) as f64;
    let heads = heads
        .into_iter()
        .zip(confusion)
        .map(|(head, confusion)| {
            let right: u64 = (0..confusion.len()).map(|c| confusion[c][c]).sum();
            HeadReport {
                head,
                accuracy: right as f64 / n,
                confusion,
            }
        })
        .collect();
    Ok(EvalReport {
        items: idx.len(),
        missed,
        heads,
        ms_per_item: elapsed * 1e3 / n,
    })
}

/// Splits `0..labels.len()` into `k` folds stratified on the joint label of
/// `heads`. Joint classes with fewer than `k` members fall back to strata on
/// the first head alone (with a warning); returns the test indices per fold.
pub fn stratified_kfold(labels: &[StateActionLabel], heads: &[Head], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::Argument(format!("k-fold needs k >= 2, got {k}")));
    }
    if k > labels.len() {
        return Err(Error::Argument(format!("k = {k} exceeds the {} available samples", labels.len())));
    }
    if heads.is_empty() {
        return Err(Error::Argument("stratification needs at least one head".into()));
    }
    let joint = |l: &StateActionLabel| heads.iter().map(|&h| l.get(h)).collect::<Vec<_>>();
    let mut counts: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    for l in labels {
        *counts.entry(joint(l)).or_default() += 1;
    }
    let mut strata: BTreeMap<(bool, Vec<usize>), Vec<usize>> = BTreeMap::new();
    let mut fallback = 0;
    for (i, l) in labels.iter().enumerate() {
        let key = joint(l);
        let key = if counts[&key] >= k {
            (false, key)
        } else {
            fallback += 1;
            (true, vec![l.get(heads[0])])
        };
        strata.entry(key).or_default().push(i);
    }
    if fallback > 0 {
        log::warn!(
            "{fallback} samples sit in joint classes smaller than k = {k}; stratifying them on {} only",
            heads[0].name()
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for members in strata.values_mut() {
        members.shuffle(&mut rng);
        for &i in members.iter() {
            folds[next % k].push(i);
            next += 1;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

/// Stratified (train, test) split with roughly `test_fraction` held out.
pub fn train_test_split(labels: &[StateActionLabel], heads: &[Head], test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Argument(format!("test fraction {test_fraction} outside (0, 1)")));
    }
    let k = (1.0 / test_fraction).round().max(2.0) as usize;
    let mut folds = stratified_kfold(labels, heads, k, seed)?;
    let test = folds.remove(0);
    let mut train: Vec<usize> = folds.concat();
    train.sort_unstable();
    Ok((train, test))
}

/// Runs one item end to end (render, detect, mask, crop, forward) and
/// returns the prediction (None if the target was not detected) with the
/// wall-clock latency in milliseconds.
pub fn infer_item(model: &Model<f32>, ds: &Dataset, i: usize, opts: &PrepOptions) -> Result<(Option<StateActionLabel>, f64)> {
    let start = Instant::now();
    let b = make_batch(ds, &[i], None, opts)?;
    let pred = if b.kept.is_empty() {
        None
    } else {
        model.predict(&b.input)?.into_iter().next()
    };
    Ok((pred, start.elapsed().as_secs_f64() * 1e3))
}

/// Everything needed to train one model from scratch.
#[derive(Clone, Debug)]
pub struct RunSpec {
    pub geometry: InputGeometry,
    pub ablation: AblationConfig,
    pub model_seed: u64,
    pub train: TrainConfig,
    pub eval_batch: usize,
}

impl RunSpec {
    pub fn opts(&self) -> PrepOptions {
        PrepOptions::new(&self.geometry, self.ablation, self.train.crop, self.train.detect)
    }

    pub fn fit(&self, ds: &Dataset, train_idx: &[usize]) -> Result<(Model<f32>, TrainReport)> {
        let mut model = Model::build(ds.space, self.geometry, self.ablation, self.model_seed)?;
        let report = train(&mut model, ds, train_idx, &self.train)?;
        Ok((model, report))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub train_items: usize,
    pub epochs: usize,
    pub eval: EvalReport,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<FoldReport>,
    /// Mean accuracy per head across folds, indexed like `Head::ALL`.
    pub mean: [f64; 8],
}

/// Stratified k-fold cross-validation of `spec` on `ds` (clean evaluation).
pub fn cross_validate(ds: &Dataset, spec: &RunSpec, k: usize, seed: u64) -> Result<CvReport> {
    let folds = stratified_kfold(&ds.labels(), &ds.primary_heads(), k, seed)?;
    let opts = spec.opts();
    let mut reports = Vec::with_capacity(k);
    for (f, test) in folds.iter().enumerate() {
        let start = Instant::now();
        let train_idx: Vec<usize> = folds
            .iter()
            .enumerate()
            .filter(|(g, _)| *g != f)
            .flat_map(|(_, v)| v.iter().copied())
            .collect();
        let (model, tr) = spec.fit(ds, &train_idx)?;
        let eval = evaluate(&model, ds, test, Some(Perturbation::NONE), &opts, spec.eval_batch)?;
        log::info!("fold {}: {:?}", f + 1, eval.accuracy_array());
        reports.push(FoldReport {
            fold: f,
            train_items: train_idx.len(),
            epochs: tr.epochs.len(),
            eval,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    let mean = mean_arrays(reports.iter().map(|r| r.eval.accuracy_array()));
    Ok(CvReport { folds: reports, mean })
}

fn mean_arrays(rows: impl Iterator<Item = [f64; 8]>) -> [f64; 8] {
    let mut sum = [0.0; 8];
    let mut n = 0;
    for r in rows {
        for (s, v) in sum.iter_mut().zip(r) {
            *s += v;
        }
        n += 1;
    }
    sum.map(|s| s / n.max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub ablation: AblationConfig,
    pub name: String,
    /// One accuracy array per seed, indexed like `Head::ALL`.
    pub per_seed: Vec<[f64; 8]>,
    pub mean: [f64; 8],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, ablation: AblationConfig) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.ablation == ablation)
    }

    /// Mean accuracy drop (full minus ablated) on `head`, in percentage points.
    pub fn drop_pp(&self, ablation: AblationConfig, head: Head) -> Option<f64> {
        let full = self.row(AblationConfig::default())?;
        let ab = self.row(ablation)?;
        Some(100.0 * (full.mean[head.index()] - ab.mean[head.index()]))
    }
}

/// The full model plus the four single-component ablations.
pub fn standard_ablations() -> Vec<AblationConfig> {
    let base = AblationConfig::default();
    vec![
        base,
        AblationConfig { no_temporal: true, ..base },
        AblationConfig { no_depth: true, ..base },
        AblationConfig { no_crop: true, ..base },
        AblationConfig { no_relative: true, ..base },
    ]
}

/// Trains every ablation once per seed on `train_idx` and scores it on
/// `test_idx` with clean rendering. The seed drives both initialisation and
/// batch order.
pub fn run_ablation_suite(
    ds: &Dataset,
    train_idx: &[usize],
    test_idx: &[usize],
    base: &RunSpec,
    ablations: &[AblationConfig],
    seeds: &[u64],
) -> Result<AblationReport> {
    run_ablation_suite_with(ds, train_idx, test_idx, base, ablations, seeds, &mut |_, _, _| Ok(()))
}

/// Receives each trained ablation model with its seed.
pub type ModelSink<'a> = dyn FnMut(AblationConfig, u64, &Model<f32>) -> Result<()> + 'a;

/// As [`run_ablation_suite`], handing every trained model to `on_model`
/// before it is dropped.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation_suite_with(
    ds: &Dataset,
    train_idx: &[usize],
    test_idx: &[usize],
    base: &RunSpec,
    ablations: &[AblationConfig],
    seeds: &[u64],
    on_model: &mut ModelSink,
) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::Argument("ablation suite needs at least one seed".into()));
    }
    let mut rows = Vec::with_capacity(ablations.len());
    for &ablation in ablations {
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let spec = RunSpec {
                ablation,
                model_seed: seed,
                train: TrainConfig { seed, ..base.train.clone() },
                ..base.clone()
            };
            let (model, _) = spec.fit(ds, train_idx)?;
            let eval = evaluate(&model, ds, test_idx, Some(Perturbation::NONE), &spec.opts(), spec.eval_batch)?;
            log::info!("ablation {} seed {seed}: {:?}", ablation.name(), eval.accuracy_array());
            per_seed.push(eval.accuracy_array());
            on_model(ablation, seed, &model)?;
        }
        rows.push(AblationRow {
            ablation,
            name: ablation.name(),
            mean: mean_arrays(per_seed.iter().copied()),
            per_seed,
        });
    }
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub perturbation: Perturbation,
    pub eval: EvalReport,
}

/// Re-renders `idx` under each perturbation and scores the model.
pub fn robustness(
    model: &Model<f32>,
    ds: &Dataset,
    idx: &[usize],
    perturbations: &[Perturbation],
    opts: &PrepOptions,
    batch: usize,
) -> Result<Vec<RobustnessRow>> {
    perturbations
        .iter()
        .map(|&p| {
            p.validate()?;
            Ok(RobustnessRow {
                perturbation: p,
                eval: evaluate(model, ds, idx, Some(p), opts, batch)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(n: usize) -> Vec<StateActionLabel> {
        (0..n)
            .map(|i| StateActionLabel {
                x: i % 5,
                action: (i / 5) % 3,
                ..Default::default()
            })
            .collect()
    }

    #[test]
    fn kfold_partitions_and_balances() {
        let l = labels(150);
        let folds = stratified_kfold(&l, &[Head::Action, Head::X], 5, 1).unwrap();
        let mut all: Vec<usize> = folds.concat();
        all.sort();
        assert_eq!(all, (0..150).collect::<Vec<_>>());
        for f in &folds {
            assert_eq!(f.len(), 30);
            for a in 0..3 {
                assert_eq!(f.iter().filter(|&&i| l[i].action == a).count(), 10);
            }
        }
    }

    #[test]
    fn kfold_rejects_k_above_n() {
        assert!(matches!(stratified_kfold(&labels(3), &[Head::X], 4, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn kfold_small_classes_fall_back() {
        let mut l = labels(100);
        l[0].theta = 3;
        let folds = stratified_kfold(&l, &[Head::Action, Head::Theta], 5, 2).unwrap();
        assert_eq!(folds.iter().map(Vec::len).sum::<usize>(), 100);
    }

    #[test]
    fn split_is_disjoint() {
        let (tr, te) = train_test_split(&labels(100), &[Head::X], 0.2, 0).unwrap();
        assert_eq!(te.len(), 20);
        assert_eq!(tr.len(), 80);
        assert!(te.iter().all(|i| !tr.contains(i)));
    }

    #[test]
    fn scored_heads_for_patrol() {
        let h = scored_heads(&LabelSpace::patrol(), true);
        assert_eq!(h, vec![Head::X, Head::Y, Head::Theta, Head::Action, Head::Dx, Head::Dy]);
        assert_eq!(scored_heads(&LabelSpace::manipulation(), false).len(), 5);
    }
}
