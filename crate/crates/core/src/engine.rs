//! The per-task inner loop.
//!
//! At iteration 0 every pool sample is scored by its smallest reconstruction
//! error over the old classes. A novelty mapper is then fit to the samples
//! that look confidently novel, and each discovered class gets its own
//! subspace. Later iterations divide the (frozen) old-class error by the
//! error under the sample's predicted novel class, re-categorize, pick
//! pseudo-labels and active queries, and refit the novel subspaces and the
//! mapper from the new label sets.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featstore::FeatureSet;
use crate::mapper::{fit_kmeans, fit_shallow_net, refit_kmeans, ClassIdAllocator, KChoice, Mapper};
use crate::nn::TrainConfig;
use crate::selection::{select_active, BudgetLedger, Oracle, QueryBatch, Strategy};
use crate::subspace::{fit_subspace, fit_subspace_capped, min_fre, ClassSubspace, FitOptions};
use crate::{seeds, ClassId, RecordId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    ConfidentNovel,
    ConfidentOld,
    Ambiguous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub id: RecordId,
    pub s_value: f64,
    /// Smallest old-class reconstruction error; equals `s_value` at i = 0.
    pub numerator: f64,
    pub predicted: Option<ClassId>,
    pub category: Category,
    /// Threshold of the group this sample was categorized in.
    pub tau: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Unsupervised,
    SemiSupervised,
}

/// How confidently novel samples are split into classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoveltyModel {
    /// k-means (unsupervised) or the shallow network (semi-supervised).
    Mapper,
    /// Every novel sample belongs to one fresh class.
    SingleClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CouqConfig {
    pub mode: Mode,
    pub fit: FitOptions,
    /// Relative half-width of the ambiguity band around τ.
    pub delta: f64,
    /// Pseudo-label fraction per predicted class.
    pub alpha: f64,
    /// Floor of the novel-class error in the iterative score.
    pub epsilon: f64,
    pub max_iterations: usize,
    /// Stop once the confident-novel set changes by less than this fraction.
    pub stop_tolerance: f64,
    /// Groups smaller than this are categorized with the global threshold.
    pub min_group: usize,
    pub budget_fraction: f64,
    pub strategy: Strategy,
    pub pseudo_labels: bool,
    /// Replace pseudo-labels by ground truth (supervision upper bound).
    pub oracle_pseudo: bool,
    pub known_k: Option<usize>,
    pub k_max: usize,
    pub novelty: NoveltyModel,
    pub mapper_net: TrainConfig,
}

impl Default for CouqConfig {
    fn default() -> Self {
        Self {
            mode: Mode::SemiSupervised,
            fit: FitOptions::default(),
            delta: 0.25,
            alpha: 0.2,
            epsilon: 1e-8,
            max_iterations: 5,
            stop_tolerance: 0.02,
            min_group: 4,
            budget_fraction: 0.0125,
            strategy: Strategy::Amb,
            pseudo_labels: true,
            oracle_pseudo: false,
            known_k: None,
            k_max: 4,
            novelty: NoveltyModel::Mapper,
            mapper_net: TrainConfig::default(),
        }
    }
}

impl CouqConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(what.to_string()));
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad("alpha must lie in (0, 1]");
        }
        if !(self.delta >= 0.0 && self.delta < 1.0) {
            return bad("delta must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if !(0.0..=1.0).contains(&self.budget_fraction) {
            return bad("budget_fraction must lie in [0, 1]");
        }
        if self.k_max == 0 || self.known_k == Some(0) {
            return bad("k must be at least 1");
        }
        if self.novelty == NoveltyModel::SingleClass && self.mode != Mode::Unsupervised {
            return bad("the single-class novelty model is unsupervised only");
        }
        if self.mode == Mode::Unsupervised && self.oracle_pseudo {
            return bad("oracle pseudo-labels need semi-supervised mode");
        }
        Ok(())
    }
}

/// Everything the model knows across and within tasks.
#[derive(Debug, Clone)]
pub struct CouqState {
    pub old_subspaces: BTreeMap<ClassId, ClassSubspace>,
    pub novel_subspaces: BTreeMap<ClassId, ClassSubspace>,
    pub mapper: Option<Mapper>,
    /// record → (novel class, score) for the current iteration.
    pub pseudo_labeled: BTreeMap<RecordId, (ClassId, f64)>,
    pub active_labeled: BTreeMap<RecordId, ClassId>,
    pub iteration: usize,
    pub budget: BudgetLedger,
    pub ids: ClassIdAllocator,
    pub tasks_seen: usize,
}

impl CouqState {
    pub fn new(old_subspaces: BTreeMap<ClassId, ClassSubspace>, ids: ClassIdAllocator) -> Self {
        Self {
            old_subspaces,
            novel_subspaces: BTreeMap::new(),
            mapper: None,
            pseudo_labeled: BTreeMap::new(),
            active_labeled: BTreeMap::new(),
            iteration: 0,
            budget: BudgetLedger::new(0),
            ids,
            tasks_seen: 0,
        }
    }

    /// Fit one subspace per labeled class among `train`. Fresh class ids
    /// start above every class id in `fs`.
    pub fn from_labeled(fs: &FeatureSet, train: &[RecordId], fit: &FitOptions) -> Result<Self> {
        let mut groups: BTreeMap<ClassId, Vec<&[f32]>> = BTreeMap::new();
        for id in train {
            let class = fs.true_class(*id).ok_or_else(|| Error::InvalidData(format!("record {id} is unlabeled")))?;
            groups.entry(class).or_default().push(fs.vector(*id));
        }
        let mut old = BTreeMap::new();
        for (class, vectors) in groups {
            old.insert(class, fit_subspace(class, &vectors, fit)?);
        }
        let next = fs.class_ids().into_iter().max().map_or(0, |c| c + 1);
        Ok(Self::new(old, ClassIdAllocator::starting_at(next)))
    }

    pub fn old_classes(&self) -> Vec<ClassId> {
        self.old_subspaces.keys().copied().collect()
    }

    fn begin_task(&mut self, budget: BudgetLedger) {
        self.novel_subspaces.clear();
        self.mapper = None;
        self.pseudo_labeled.clear();
        self.active_labeled.clear();
        self.iteration = 0;
        self.budget = budget;
    }
}

/// `S⁰(u)`: smallest old-class reconstruction error.
pub fn score_initial(state: &CouqState, u: &[f32]) -> Result<f64> {
    if state.old_subspaces.is_empty() {
        return Err(Error::EmptyModel("no old classes".into()));
    }
    Ok(min_fre(state.old_subspaces.values(), u)?.0)
}

/// `Sⁱ(u)` and the predicted novel class, using the current mapper and
/// novel subspaces (those of the previous iteration).
pub fn score_iter(state: &CouqState, u: &[f32], epsilon: f64) -> Result<(f64, ClassId)> {
    let numerator = score_initial(state, u)?;
    iter_ratio(numerator, state.mapper.as_ref(), &state.novel_subspaces, u, epsilon)
}

fn iter_ratio(
    numerator: f64,
    mapper: Option<&Mapper>,
    novel: &BTreeMap<ClassId, ClassSubspace>,
    u: &[f32],
    epsilon: f64,
) -> Result<(f64, ClassId)> {
    let mapper = mapper.ok_or_else(|| Error::State("no mapper from the previous iteration".into()))?;
    let m = mapper.assign(u)?;
    let sub = novel
        .get(&m)
        .ok_or_else(|| Error::State(format!("mapper emitted class {m} without a subspace")))?;
    let denominator = sub.fre(u)?.max(epsilon);
    Ok((numerator / denominator, m))
}

/// Read-only snapshot of the model that produced a task's final scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Scorer {
    pub old: Vec<ClassSubspace>,
    pub novel: BTreeMap<ClassId, ClassSubspace>,
    pub mapper: Option<Mapper>,
    pub epsilon: f64,
}

impl Scorer {
    pub fn numerator(&self, u: &[f32]) -> Result<f64> {
        Ok(min_fre(&self.old, u)?.0)
    }

    /// Final-iteration score of `u` (the initial score when the task ended
    /// at iteration 0).
    pub fn score(&self, u: &[f32]) -> Result<f64> {
        let numerator = self.numerator(u)?;
        match &self.mapper {
            None => Ok(numerator),
            Some(m) => Ok(iter_ratio(numerator, Some(m), &self.novel, u, self.epsilon)?.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategorizationRule {
    pub delta: f64,
    pub min_group: usize,
    /// Split by predicted class (iterations ≥ 1) or globally (iteration 0).
    pub per_class: bool,
}

/// Exact 1-D two-means split: the threshold is the midpoint of the two
/// cluster means. `None` when all values are equal.
pub fn two_means_threshold(values: &[f64]) -> Option<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() || v[0] == v[v.len() - 1] {
        return None;
    }
    let n = v.len();
    let mut prefix = vec![0.0f64; n + 1];
    let mut prefix_sq = vec![0.0f64; n + 1];
    for (i, x) in v.iter().enumerate() {
        prefix[i + 1] = prefix[i] + x;
        prefix_sq[i + 1] = prefix_sq[i] + x * x;
    }
    let sse = |lo: usize, hi: usize| {
        let k = (hi - lo) as f64;
        let s = prefix[hi] - prefix[lo];
        (prefix_sq[hi] - prefix_sq[lo]) - s * s / k
    };
    let mut best: Option<(f64, usize)> = None;
    for split in 1..n {
        if v[split] == v[split - 1] {
            continue;
        }
        let cost = sse(0, split) + sse(split, n);
        if best.is_none_or(|(c, _)| cost < c) {
            best = Some((cost, split));
        }
    }
    let (_, split) = best?;
    let left = prefix[split] / split as f64;
    let right = (prefix[n] - prefix[split]) / (n - split) as f64;
    Some(0.5 * (left + right))
}

fn category_of(s: f64, tau: Option<f64>, delta: f64) -> (Category, f64) {
    match tau {
        None => (Category::Ambiguous, s),
        Some(t) if s >= t * (1.0 + delta) => (Category::ConfidentNovel, t),
        Some(t) if s <= t * (1.0 - delta) => (Category::ConfidentOld, t),
        Some(t) => (Category::Ambiguous, t),
    }
}

/// Assign categories in place; returns the threshold used for each group
/// (`None` key = global).
pub fn categorize(samples: &mut [ScoredSample], rule: &CategorizationRule) -> Vec<GroupThreshold> {
    let all: Vec<f64> = samples.iter().map(|s| s.s_value).collect();
    let global = two_means_threshold(&all);
    let mut out = vec![GroupThreshold {
        class: None,
        tau: global,
        size: samples.len(),
    }];
    let mut group_tau: BTreeMap<ClassId, Option<f64>> = BTreeMap::new();
    if rule.per_class {
        let mut groups: BTreeMap<ClassId, Vec<f64>> = BTreeMap::new();
        for s in samples.iter() {
            if let Some(m) = s.predicted {
                groups.entry(m).or_default().push(s.s_value);
            }
        }
        for (m, values) in groups {
            let tau = if values.len() < rule.min_group {
                global
            } else {
                two_means_threshold(&values)
            };
            group_tau.insert(m, tau);
            out.push(GroupThreshold {
                class: Some(m),
                tau,
                size: values.len(),
            });
        }
    }
    for s in samples.iter_mut() {
        let tau = match s.predicted {
            Some(m) if rule.per_class => group_tau[&m],
            _ => global,
        };
        let (category, t) = category_of(s.s_value, tau, rule.delta);
        s.category = category;
        s.tau = t;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupThreshold {
    pub class: Option<ClassId>,
    pub tau: Option<f64>,
    pub size: usize,
}

/// Top `⌈alpha · n_m⌉` samples by score per predicted class, skipping
/// `exclude`. Ties break towards the lower record id.
pub fn select_pseudolabels(samples: &[ScoredSample], alpha: f64, exclude: &HashSet<RecordId>) -> Vec<(RecordId, ClassId)> {
    let mut groups: BTreeMap<ClassId, Vec<&ScoredSample>> = BTreeMap::new();
    for s in samples {
        if let Some(m) = s.predicted {
            if !exclude.contains(&s.id) {
                groups.entry(m).or_default().push(s);
            }
        }
    }
    let mut out = Vec::new();
    for (m, mut members) in groups {
        let take = ceil_frac(alpha, members.len());
        members.sort_by(|a, b| b.s_value.total_cmp(&a.s_value).then(a.id.cmp(&b.id)));
        out.extend(members.into_iter().take(take).map(|s| (s.id, m)));
    }
    out
}

fn ceil_frac(alpha: f64, n: usize) -> usize {
    let raw = alpha * n as f64;
    let r = raw.round();
    if (raw - r).abs() < 1e-9 {
        r as usize
    } else {
        raw.ceil() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub samples: Vec<ScoredSample>,
    pub thresholds: Vec<GroupThreshold>,
    pub confident_novel: usize,
    pub pseudo_labels: usize,
    pub queried: Vec<RecordId>,
    /// Symmetric difference over union against the previous iteration.
    pub novel_set_change: Option<f64>,
    /// Classes of the mapper fit at the end of this iteration.
    pub mapper_classes: Vec<ClassId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    NoNovelty,
    OneShot,
    Converged,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_index: usize,
    pub mode: Mode,
    pub iterations: Vec<IterationRecord>,
    pub ledger: BudgetLedger,
    pub stop_reason: StopReason,
    /// Classes added to the old set at the end of the task.
    pub novel_classes: Vec<ClassId>,
    /// Scores and categories of the last iteration.
    pub verdicts: Vec<ScoredSample>,
    pub final_pseudo: Vec<(RecordId, ClassId)>,
    pub active: Vec<(RecordId, ClassId)>,
}

impl TaskResult {
    pub fn no_novelty(&self) -> bool {
        self.stop_reason == StopReason::NoNovelty
    }
}

#[derive(Debug, Clone)]
pub struct TaskOutput {
    pub result: TaskResult,
    /// The model that produced `result.verdicts`.
    pub scorer: Scorer,
    /// Final active labels plus final pseudo-labels, for the classifier.
    pub train_labels: Vec<(RecordId, ClassId)>,
}

fn change_ratio(a: &BTreeSet<RecordId>, b: &BTreeSet<RecordId>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 0.0;
    }
    a.symmetric_difference(b).count() as f64 / union as f64
}

fn confident_novel(samples: &[ScoredSample]) -> BTreeSet<RecordId> {
    samples
        .iter()
        .filter(|s| s.category == Category::ConfidentNovel)
        .map(|s| s.id)
        .collect()
}

/// Fit one subspace per class of `labels`. A class with a single vector
/// gets a point model.
fn fit_novel(
    fs: &FeatureSet,
    labels: &BTreeMap<RecordId, ClassId>,
    fit: &FitOptions,
) -> Result<BTreeMap<ClassId, ClassSubspace>> {
    let mut groups: BTreeMap<ClassId, Vec<&[f32]>> = BTreeMap::new();
    for (id, c) in labels {
        groups.entry(*c).or_default().push(fs.vector(*id));
    }
    groups
        .into_iter()
        .map(|(c, vectors)| {
            // fit vectors are scored too: keep them off the subspace so
            // their FRE does not collapse to zero
            let s = if vectors.len() <= 2 {
                ClassSubspace::centroid(c, &vectors)
            } else {
                fit_subspace_capped(c, &vectors, fit, vectors.len() - 2)?
            };
            Ok((c, s))
        })
        .collect()
}

struct Task<'a> {
    fs: &'a FeatureSet,
    pool: &'a [RecordId],
    cfg: &'a CouqConfig,
    seed: u64,
    numerators: Vec<f64>,
    old: HashSet<ClassId>,
}

impl Task<'_> {
    fn labeled(&self, state: &CouqState) -> HashSet<RecordId> {
        state.active_labeled.keys().copied().collect()
    }

    fn query(&self, state: &mut CouqState, oracle: &mut Oracle, batch: QueryBatch) -> Result<Vec<RecordId>> {
        let got = oracle.label(&batch, &mut state.budget)?;
        let mut ids = Vec::with_capacity(got.len());
        for (id, class) in got {
            state.pseudo_labeled.remove(&id);
            state.active_labeled.insert(id, class);
            ids.push(id);
        }
        Ok(ids)
    }

    fn novel_active(&self, state: &CouqState) -> BTreeMap<RecordId, ClassId> {
        state
            .active_labeled
            .iter()
            .filter(|(_, c)| !self.old.contains(c))
            .map(|(id, c)| (*id, *c))
            .collect()
    }

    /// Pseudo-labels, ground-truth substituted when configured; truly old
    /// records are dropped in that case.
    fn pseudo(&self, picks: Vec<(RecordId, ClassId)>, oracle: &Oracle) -> BTreeMap<RecordId, ClassId> {
        if !self.cfg.oracle_pseudo {
            return picks.into_iter().collect();
        }
        picks
            .into_iter()
            .filter_map(|(id, _)| oracle.peek(id).filter(|c| !self.old.contains(c)).map(|c| (id, c)))
            .collect()
    }

    fn fit_mapper(&self, labels: &BTreeMap<RecordId, ClassId>, state: &mut CouqState, iteration: usize) -> Result<Mapper> {
        if let (NoveltyModel::SingleClass, Some(m)) = (self.cfg.novelty, &state.mapper) {
            return Ok(m.clone());
        }
        let pairs: Vec<(&[f32], ClassId)> = labels.iter().map(|(id, c)| (self.fs.vector(*id), *c)).collect();
        match self.cfg.mode {
            Mode::Unsupervised => refit_kmeans(&pairs, &[]),
            Mode::SemiSupervised => {
                let classes: Vec<ClassId> = labels.values().copied().collect::<BTreeSet<_>>().into_iter().collect();
                let seed = seeds::derive(self.seed, "engine.mapper_net", iteration as u64);
                Ok(fit_shallow_net(&pairs, &classes, &self.cfg.mapper_net, seed)?.mapper)
            }
        }
    }

    fn initial_samples(&self) -> Vec<ScoredSample> {
        self.pool
            .iter()
            .zip(&self.numerators)
            .map(|(id, n)| ScoredSample {
                id: *id,
                s_value: *n,
                numerator: *n,
                predicted: None,
                category: Category::Ambiguous,
                tau: 0.0,
            })
            .collect()
    }

    /// Scores of the records still unlabeled.
    fn iter_samples(&self, state: &CouqState) -> Result<Vec<ScoredSample>> {
        let eps = self.cfg.epsilon;
        self.pool
            .par_iter()
            .zip(self.numerators.par_iter())
            .filter(|(id, _)| !state.active_labeled.contains_key(id))
            .map(|(id, n)| {
                let u = self.fs.vector(*id);
                let (s, m) = iter_ratio(*n, state.mapper.as_ref(), &state.novel_subspaces, u, eps)?;
                Ok(ScoredSample {
                    id: *id,
                    s_value: s,
                    numerator: *n,
                    predicted: Some(m),
                    category: Category::Ambiguous,
                    tau: 0.0,
                })
            })
            .collect()
    }
}

/// Run the inner loop on one task's unlabeled pool and hand the discovered
/// classes over to the old set.
pub fn run_task(
    state: &mut CouqState,
    fs: &FeatureSet,
    pool: &[RecordId],
    cfg: &CouqConfig,
    oracle: &mut Oracle,
    seed: u64,
) -> Result<TaskOutput> {
    cfg.validate()?;
    if state.old_subspaces.is_empty() {
        return Err(Error::EmptyModel("no old classes".into()));
    }
    let budget = match cfg.mode {
        Mode::Unsupervised => BudgetLedger::new(0),
        Mode::SemiSupervised => BudgetLedger::for_pool(cfg.budget_fraction, pool.len()),
    };
    state.begin_task(budget);
    let task_index = state.tasks_seen + 1;

    let numerators: Vec<f64> = pool
        .par_iter()
        .map(|id| score_initial(state, fs.vector(*id)))
        .collect::<Result<_>>()?;
    let task = Task {
        fs,
        pool,
        cfg,
        seed,
        numerators,
        old: state.old_subspaces.keys().copied().collect(),
    };
    let one_shot = cfg.max_iterations == 0;

    // iteration 0
    let mut samples = task.initial_samples();
    let global = CategorizationRule {
        delta: cfg.delta,
        min_group: cfg.min_group,
        per_class: false,
    };
    let thresholds = categorize(&mut samples, &global);
    let mut queried = Vec::new();
    if cfg.mode == Mode::SemiSupervised {
        let b0 = if one_shot {
            state.budget.total_budget
        } else {
            state.budget.total_budget.div_ceil(cfg.max_iterations + 1)
        };
        state.budget.plan(0, b0);
        let labeled = task.labeled(state);
        let batch = select_active(&samples, Strategy::Initial, b0, 0, &mut state.budget, &labeled, 0);
        queried.extend(task.query(state, oracle, batch)?);
        while task.novel_active(state).is_empty() && !state.budget.exhausted() {
            let labeled = task.labeled(state);
            let batch = select_active(&samples, Strategy::Initial, 1, 0, &mut state.budget, &labeled, 0);
            if batch.ids.is_empty() {
                break;
            }
            queried.extend(task.query(state, oracle, batch)?);
        }
    }

    let cn0 = confident_novel(&samples);
    let mut history = vec![IterationRecord {
        iteration: 0,
        samples: samples.clone(),
        thresholds,
        confident_novel: cn0.len(),
        pseudo_labels: 0,
        queried,
        novel_set_change: None,
        mapper_classes: Vec::new(),
    }];

    let no_novelty = match cfg.mode {
        Mode::Unsupervised => cn0.is_empty(),
        Mode::SemiSupervised => task.novel_active(state).is_empty(),
    };
    if no_novelty {
        log::info!("task {task_index}: no novelty detected");
        return Ok(finish(state, &task, history, samples, StopReason::NoNovelty, BTreeMap::new()));
    }

    // initial mapper and novel subspaces
    let cn0_ids: Vec<RecordId> = cn0.iter().copied().collect();
    let mut labels: BTreeMap<RecordId, ClassId> = BTreeMap::new();
    let mapper = match (cfg.novelty, cfg.mode) {
        (NoveltyModel::SingleClass, _) => {
            let m = Mapper::Constant {
                class_id: state.ids.allocate(),
            };
            if cfg.pseudo_labels {
                labels.extend(cn0_ids.iter().map(|id| (*id, m.class_ids()[0])));
            }
            m
        }
        (NoveltyModel::Mapper, Mode::Unsupervised) => {
            let vectors: Vec<&[f32]> = cn0_ids.iter().map(|id| fs.vector(*id)).collect();
            let choice = match cfg.known_k {
                Some(k) => KChoice::Fixed(k),
                None => KChoice::Auto { k_max: cfg.k_max },
            };
            let fit = fit_kmeans(&vectors, choice, seeds::derive(seed, "engine.kmeans", 0), &mut state.ids)?;
            let ids = fit.mapper.class_ids();
            labels.extend(cn0_ids.iter().zip(&fit.assignments).map(|(id, a)| (*id, ids[*a])));
            fit.mapper
        }
        (NoveltyModel::Mapper, Mode::SemiSupervised) => {
            let active = task.novel_active(state);
            let m = task.fit_mapper(&active, state, 0)?;
            if cfg.pseudo_labels {
                let picks: Vec<(RecordId, ClassId)> = cn0_ids
                    .iter()
                    .filter(|id| !state.active_labeled.contains_key(id))
                    .map(|id| Ok((*id, m.assign(fs.vector(*id))?)))
                    .collect::<Result<_>>()?;
                labels.extend(task.pseudo(picks, oracle));
            }
            labels.extend(active);
            m
        }
    };
    // old-class active labels never enter novel fits
    labels.retain(|id, _| !state.active_labeled.get(id).is_some_and(|c| task.old.contains(c)));
    labels.extend(task.novel_active(state));
    state.novel_subspaces = fit_novel(fs, &labels, &cfg.fit)?;
    state.mapper = Some(mapper);
    history[0].mapper_classes = state.mapper.as_ref().unwrap().class_ids();

    if one_shot {
        let mut predicted = samples.clone();
        let mapper = state.mapper.as_ref().unwrap();
        for s in predicted.iter_mut() {
            s.predicted = Some(mapper.assign(fs.vector(s.id))?);
        }
        let final_pseudo = if cfg.pseudo_labels {
            task.pseudo(select_pseudolabels(&predicted, cfg.alpha, &task.labeled(state)), oracle)
        } else {
            BTreeMap::new()
        };
        return Ok(finish(state, &task, history, samples, StopReason::OneShot, final_pseudo));
    }

    let per_class = CategorizationRule {
        per_class: true,
        ..global
    };
    let mut prev_cn = cn0;
    let mut stop = StopReason::MaxIterations;
    let mut final_pseudo = BTreeMap::new();
    let mut scorer_state = (state.novel_subspaces.clone(), state.mapper.clone());
    for i in 1..=cfg.max_iterations {
        state.iteration = i;
        scorer_state = (state.novel_subspaces.clone(), state.mapper.clone());
        samples = task.iter_samples(state)?;
        let thresholds = categorize(&mut samples, &per_class);

        let pseudo = if cfg.pseudo_labels {
            task.pseudo(select_pseudolabels(&samples, cfg.alpha, &task.labeled(state)), oracle)
        } else {
            BTreeMap::new()
        };

        let mut queried = Vec::new();
        if cfg.mode == Mode::SemiSupervised && !state.budget.exhausted() {
            let remaining_iters = cfg.max_iterations - i + 1;
            let b = state.budget.remaining().div_ceil(remaining_iters);
            state.budget.plan(i, b);
            let rand_seed = seeds::derive(seed, "engine.rand_query", i as u64);
            let labeled = task.labeled(state);
            let batch = select_active(&samples, cfg.strategy, b, rand_seed, &mut state.budget, &labeled, i);
            queried = task.query(state, oracle, batch)?;
        }
        state.pseudo_labeled = pseudo
            .iter()
            .filter(|(id, _)| !state.active_labeled.contains_key(id))
            .map(|(id, c)| {
                let s = samples.iter().find(|s| s.id == *id).map_or(0.0, |s| s.s_value);
                (*id, (*c, s))
            })
            .collect();

        let mut labels: BTreeMap<RecordId, ClassId> = state.pseudo_labeled.iter().map(|(id, (c, _))| (*id, *c)).collect();
        labels.extend(task.novel_active(state));
        let cn = confident_novel(&samples);
        let change = change_ratio(&prev_cn, &cn);
        history.push(IterationRecord {
            iteration: i,
            samples: samples.clone(),
            thresholds,
            confident_novel: cn.len(),
            pseudo_labels: state.pseudo_labeled.len(),
            queried,
            novel_set_change: Some(change),
            mapper_classes: Vec::new(),
        });
        final_pseudo = state.pseudo_labeled.iter().map(|(id, (c, _))| (*id, *c)).collect();

        if labels.is_empty() {
            // nothing left to model the novel classes with; keep the
            // previous iteration's model
            log::warn!("task {task_index} iteration {i}: empty novel label set");
            stop = StopReason::Converged;
            break;
        }
        let novel = fit_novel(fs, &labels, &cfg.fit)?;
        let mapper = task.fit_mapper(&labels, state, i)?;
        state.novel_subspaces = novel;
        history[i].mapper_classes = mapper.class_ids();
        state.mapper = Some(mapper);

        let settled = cfg.mode == Mode::Unsupervised || state.budget.exhausted();
        prev_cn = cn;
        if change < cfg.stop_tolerance && settled {
            stop = StopReason::Converged;
            break;
        }
    }

    let output = finish(state, &task, history, samples, stop, final_pseudo);
    let mut output = output;
    output.scorer.novel = scorer_state.0;
    output.scorer.mapper = scorer_state.1;
    Ok(output)
}

/// Freeze the current novel subspaces into the old set and package results.
fn finish(
    state: &mut CouqState,
    task: &Task,
    history: Vec<IterationRecord>,
    verdicts: Vec<ScoredSample>,
    stop_reason: StopReason,
    final_pseudo: BTreeMap<RecordId, ClassId>,
) -> TaskOutput {
    let scorer = Scorer {
        old: state.old_subspaces.values().cloned().collect(),
        novel: BTreeMap::new(),
        mapper: None,
        epsilon: task.cfg.epsilon,
    };
    let novel_classes: Vec<ClassId> = if stop_reason == StopReason::NoNovelty {
        Vec::new()
    } else {
        state.novel_subspaces.keys().copied().collect()
    };
    for c in &novel_classes {
        state.old_subspaces.insert(*c, state.novel_subspaces[c].clone());
    }
    let active: Vec<(RecordId, ClassId)> = state.active_labeled.iter().map(|(id, c)| (*id, *c)).collect();
    let final_pseudo: Vec<(RecordId, ClassId)> = final_pseudo
        .into_iter()
        .filter(|(id, _)| !state.active_labeled.contains_key(id))
        .collect();
    let mut train_labels = active.clone();
    train_labels.extend(final_pseudo.iter().copied());
    train_labels.sort_unstable();
    state.tasks_seen += 1;
    let result = TaskResult {
        task_index: state.tasks_seen,
        mode: task.cfg.mode,
        iterations: history,
        ledger: state.budget.clone(),
        stop_reason,
        novel_classes,
        verdicts,
        final_pseudo,
        active,
    };
    TaskOutput {
        result,
        scorer,
        train_labels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalkit::auroc;
    use std::collections::HashMap;
    use crate::featstore::{build_task_stream, gen_synthetic, FeatureRecord, MixRatio, StreamConfig, SyntheticSpec, TaskStream};
    use proptest::prelude::*;

    fn novel(id: RecordId, s: f64, predicted: Option<ClassId>) -> ScoredSample {
        ScoredSample {
            category: Category::ConfidentNovel,
            ..sample(id, s, predicted)
        }
    }

    fn sample(id: RecordId, s: f64, predicted: Option<ClassId>) -> ScoredSample {
        ScoredSample {
            id,
            s_value: s,
            numerator: s,
            predicted,
            category: Category::Ambiguous,
            tau: 0.0,
        }
    }

    fn global(delta: f64) -> CategorizationRule {
        CategorizationRule {
            delta,
            min_group: 4,
            per_class: false,
        }
    }

    #[test]
    fn bimodal_split() {
        let mut s: Vec<ScoredSample> = (0..100).map(|i| sample(i, if i < 50 { 0.1 } else { 9.9 }, None)).collect();
        let th = categorize(&mut s, &global(0.2));
        assert!((th[0].tau.unwrap() - 5.0).abs() < 1e-12);
        let count = |c| s.iter().filter(|x| x.category == c).count();
        assert_eq!(count(Category::ConfidentOld), 50);
        assert_eq!(count(Category::ConfidentNovel), 50);
        assert_eq!(count(Category::Ambiguous), 0);
    }

    #[test]
    fn equal_scores_are_ambiguous() {
        for v in [0.0, 3.0] {
            let mut s: Vec<ScoredSample> = (0..10).map(|i| sample(i, v, None)).collect();
            categorize(&mut s, &global(0.25));
            assert!(s.iter().all(|x| x.category == Category::Ambiguous));
        }
    }

    #[test]
    fn outlier_is_confident_novel() {
        let mut s: Vec<ScoredSample> = (0..10).map(|i| sample(i, 0.95 + 0.01 * i as f64, None)).collect();
        s.push(sample(10, 100.0, None));
        // split isolates the outlier: tau = (mean(0.95..1.04) + 100) / 2
        let th = categorize(&mut s, &global(0.25));
        assert!((th[0].tau.unwrap() - (0.995 + 100.0) / 2.0).abs() < 1e-9);
        assert_eq!(s[10].category, Category::ConfidentNovel);
        assert!(s[..10].iter().all(|x| x.category == Category::ConfidentOld));
    }

    #[test]
    fn small_groups_use_global_threshold() {
        let mut s: Vec<ScoredSample> = (0..20).map(|i| sample(i, if i < 10 { 1.0 } else { 10.0 }, Some(1))).collect();
        s.push(sample(20, 9.0, Some(2)));
        s.push(sample(21, 9.5, Some(2)));
        let rule = CategorizationRule {
            delta: 0.25,
            min_group: 4,
            per_class: true,
        };
        let th = categorize(&mut s, &rule);
        let g2 = th.iter().find(|t| t.class == Some(2)).unwrap();
        assert_eq!(g2.tau, th[0].tau);
        assert_eq!(s[20].category, Category::ConfidentNovel);
    }

    fn two_means_brute(v: &[f64]) -> Option<f64> {
        let mut v = v.to_vec();
        v.sort_by(f64::total_cmp);
        let mut best: Option<(f64, f64)> = None;
        for k in 1..v.len() {
            if v[k] == v[k - 1] {
                continue;
            }
            let (l, r) = v.split_at(k);
            let ml = l.iter().sum::<f64>() / l.len() as f64;
            let mr = r.iter().sum::<f64>() / r.len() as f64;
            let cost: f64 = l.iter().map(|x| (x - ml).powi(2)).sum::<f64>() + r.iter().map(|x| (x - mr).powi(2)).sum::<f64>();
            if best.is_none_or(|(c, _)| cost < c - 1e-9 * c.abs().max(1.0)) {
                best = Some((cost, 0.5 * (ml + mr)));
            }
        }
        best.map(|b| b.1)
    }

    #[test]
    fn pseudolabel_counts() {
        let mut s: Vec<ScoredSample> = (0..10).map(|i| novel(i, i as f64, Some(1))).collect();
        s.extend((10..15).map(|i| novel(i, i as f64, Some(2))));
        let picks = select_pseudolabels(&s, 0.2, &HashSet::new());
        assert_eq!(picks, vec![(9, 1), (8, 1), (14, 2)]);
        let exclude: HashSet<RecordId> = [9].into_iter().collect();
        let picks = select_pseudolabels(&s, 0.2, &exclude);
        assert_eq!(picks, vec![(8, 1), (7, 1), (14, 2)]);
    }

    #[test]
    fn pseudolabels_match_sort_and_slice() {
        let mut rng = seeds::rng(17);
        use rand::Rng;
        let s: Vec<ScoredSample> = (0..500)
            .map(|i| novel(i, rng.random_range(0.0..5.0), Some(rng.random_range(0..6))))
            .collect();
        let got: BTreeSet<(RecordId, ClassId)> = select_pseudolabels(&s, 0.2, &HashSet::new()).into_iter().collect();
        let mut want = BTreeSet::new();
        for m in 0..6 {
            let mut members: Vec<&ScoredSample> = s.iter().filter(|x| x.predicted == Some(m)).collect();
            members.sort_by(|a, b| b.s_value.partial_cmp(&a.s_value).unwrap());
            let k = (0.2 * members.len() as f64 - 1e-9).ceil() as usize;
            want.extend(members[..k].iter().map(|x| (x.id, m)));
        }
        assert_eq!(got, want);
    }

    #[test]
    fn score_iter_arithmetic_and_floor() {
        // old class: the x-axis through the origin; novel class 9: point (0, 0.5)
        let old = fit_subspace(0, &[&[0.0f32, 0.0][..], &[1.0, 0.0][..]], &FitOptions::default()).unwrap();
        let mut state = CouqState::new([(0, old)].into_iter().collect(), ClassIdAllocator::starting_at(9));
        state.novel_subspaces.insert(9, ClassSubspace::point(9, &[0.0, 0.5]));
        state.mapper = Some(Mapper::Constant { class_id: 9 });
        let (s, m) = score_iter(&state, &[0.0, 2.0], 1e-8).unwrap();
        assert_eq!(m, 9);
        assert!((s - 2.0 / 1.5).abs() < 1e-12);
        let (s, _) = score_iter(&state, &[0.0, 0.5], 1e-8).unwrap();
        assert!((s - 0.5 / 1e-8).abs() < 1e-3);
        assert!((score_initial(&state, &[3.0, 10.0]).unwrap() - 10.0).abs() < 1e-6);

        state.mapper = Some(Mapper::Constant { class_id: 4 });
        assert!(matches!(score_iter(&state, &[0.0, 1.0], 1e-8), Err(Error::State(_))));
        let empty = CouqState::new(BTreeMap::new(), ClassIdAllocator::starting_at(0));
        assert!(matches!(score_initial(&empty, &[0.0]), Err(Error::EmptyModel(_))));
    }

    pub(crate) fn toy_stream(spread: f64, seed: u64) -> (FeatureSet, TaskStream) {
        let fs = gen_synthetic(
            &SyntheticSpec {
                n_classes: 6,
                dim: 16,
                per_class: 300,
                cluster_spread: spread,
                center_spread: 8.0,
            },
            seed,
        )
        .unwrap();
        let stream = build_task_stream(
            &fs,
            &StreamConfig {
                schedule: vec![vec![0, 1, 2, 3], vec![4, 5]],
                mix: MixRatio::DEFAULT,
                holdout_frac: 0.5,
                test_frac: 0.2,
                new_per_class: Some(60),
                seed,
            },
        )
        .unwrap();
        (fs, stream)
    }

    fn fit_opts() -> FitOptions {
        FitOptions {
            variance_retained: 0.7,
            standardize: false,
        }
    }

    fn run(fs: &FeatureSet, stream: &TaskStream, cfg: &CouqConfig, seed: u64) -> (TaskOutput, CouqState) {
        let mut state = CouqState::from_labeled(fs, &stream.initial_train, &cfg.fit).unwrap();
        let mut oracle = Oracle::from_features(fs);
        let out = run_task(&mut state, fs, &stream.tasks[0].unlabeled_pool, cfg, &mut oracle, seed).unwrap();
        (out, state)
    }

    fn test_auroc(fs: &FeatureSet, stream: &TaskStream, scorer: &Scorer) -> f64 {
        let task = &stream.tasks[0];
        let scores: Vec<f64> = task.test_pool.iter().map(|id| scorer.score(fs.vector(*id)).unwrap()).collect();
        let labels: Vec<bool> = task
            .test_pool
            .iter()
            .map(|id| task.new_classes.contains(&fs.true_class(*id).unwrap()))
            .collect();
        auroc(&scores, &labels).unwrap()
    }

    #[test]
    fn separated_stream_is_detected() {
        let (fs, stream) = toy_stream(1.0, 11);
        for mode in [Mode::Unsupervised, Mode::SemiSupervised] {
            let cfg = CouqConfig {
                mode,
                fit: fit_opts(),
                mapper_net: TrainConfig {
                    hidden: 32,
                    ..TrainConfig::default()
                },
                ..CouqConfig::default()
            };
            let (out, state) = run(&fs, &stream, &cfg, 11);
            assert!(!out.result.no_novelty());
            let a = test_auroc(&fs, &stream, &out.scorer);
            assert!(a >= 0.99, "{mode:?}: auroc {a}");
            assert!(out.result.ledger.spent <= out.result.ledger.total_budget);
            assert_eq!(state.old_subspaces.len(), 4 + out.result.novel_classes.len());
        }
    }

    #[test]
    fn old_only_pool_finds_no_novelty() {
        let (fs, stream) = toy_stream(1.0, 3);
        let cfg = CouqConfig {
            mode: Mode::Unsupervised,
            fit: fit_opts(),
            ..CouqConfig::default()
        };
        let mut state = CouqState::from_labeled(&fs, &stream.initial_train, &cfg.fit).unwrap();
        // a pool of the old class means scores exactly 0 everywhere
        let records: Vec<FeatureRecord> = state
            .old_subspaces
            .values()
            .flat_map(|s| {
                (0..5).map(move |k| FeatureRecord {
                    id: 10_000 + 10 * s.class_id as u64 + k,
                    vector: s.mean.clone(),
                    true_class: Some(s.class_id),
                })
            })
            .collect();
        let pool_set = FeatureSet::new(fs.dim(), records).unwrap();
        let ids: Vec<RecordId> = pool_set.records().iter().map(|r| r.id).collect();
        let mut oracle = Oracle::from_features(&pool_set);
        let out = run_task(&mut state, &pool_set, &ids, &cfg, &mut oracle, 1).unwrap();
        assert!(out.result.no_novelty());
        assert_eq!(out.result.ledger.spent, 0);
        assert!(out.result.novel_classes.is_empty());
        assert_eq!(state.old_subspaces.len(), 4);
    }

    #[test]
    fn numerators_are_frozen_and_scores_recompute() {
        let (fs, stream) = toy_stream(1.5, 5);
        let cfg = CouqConfig {
            mode: Mode::SemiSupervised,
            fit: fit_opts(),
            stop_tolerance: 0.0,
            mapper_net: TrainConfig {
                hidden: 32,
                ..TrainConfig::default()
            },
            ..CouqConfig::default()
        };
        let (out, _) = run(&fs, &stream, &cfg, 5);
        let iters = &out.result.iterations;
        assert!(iters.len() > 1);
        let first: HashMap<RecordId, f64> = iters[0].samples.iter().map(|s| (s.id, s.numerator)).collect();
        for it in iters {
            for a in &it.samples {
                assert_eq!(a.numerator.to_bits(), first[&a.id].to_bits());
            }
        }
        for s in &out.result.verdicts {
            assert_eq!(out.scorer.score(fs.vector(s.id)).unwrap().to_bits(), s.s_value.to_bits());
            assert!(s.s_value.is_finite() && s.s_value >= 0.0);
        }
    }

    #[test]
    fn run_task_is_deterministic() {
        let (fs, stream) = toy_stream(2.0, 8);
        let cfg = CouqConfig {
            fit: fit_opts(),
            mapper_net: TrainConfig {
                hidden: 16,
                ..TrainConfig::default()
            },
            ..CouqConfig::default()
        };
        let (a, _) = run(&fs, &stream, &cfg, 3);
        let (b, _) = run(&fs, &stream, &cfg, 3);
        assert_eq!(a.result, b.result);
        assert_eq!(a.train_labels, b.train_labels);
    }

    #[test]
    fn old_labels_stay_out_of_novel_fits() {
        let (fs, stream) = toy_stream(2.5, 9);
        let cfg = CouqConfig {
            fit: fit_opts(),
            budget_fraction: 0.1,
            mapper_net: TrainConfig {
                hidden: 16,
                ..TrainConfig::default()
            },
            ..CouqConfig::default()
        };
        let (out, state) = run(&fs, &stream, &cfg, 2);
        let old: HashSet<ClassId> = [0, 1, 2, 3].into_iter().collect();
        for (id, c) in &out.result.active {
            if old.contains(c) {
                assert!(out.result.final_pseudo.iter().all(|(p, _)| p != id));
            }
        }
        for c in &out.result.novel_classes {
            assert!(!old.contains(c));
            assert!(state.old_subspaces.contains_key(c));
        }
    }

    #[test]
    fn scale_invariance() {
        let (fs, stream) = toy_stream(2.0, 4);
        let cfg = CouqConfig {
            mode: Mode::Unsupervised,
            fit: fit_opts(),
            ..CouqConfig::default()
        };
        let (a, _) = run(&fs, &stream, &cfg, 6);
        let scaled = fs.scaled(4.0).unwrap();
        let (b, _) = run(&scaled, &stream, &cfg, 6);
        assert_eq!(a.result.iterations.len(), b.result.iterations.len());
        for (ia, ib) in a.result.iterations.iter().zip(&b.result.iterations) {
            for (x, y) in ia.samples.iter().zip(&ib.samples) {
                assert_eq!(x.category, y.category);
                let ratio_ok = if ia.iteration == 0 {
                    (y.s_value - 4.0 * x.s_value).abs() <= 1e-4 * y.s_value.max(1e-6)
                } else {
                    (y.s_value - x.s_value).abs() <= 1e-4 * x.s_value.max(1e-6)
                };
                assert!(ratio_ok, "iteration {}: {} vs {}", ia.iteration, x.s_value, y.s_value);
            }
        }
        assert_eq!(a.result.final_pseudo, b.result.final_pseudo);
    }

    proptest! {
        #[test]
        fn two_means_matches_brute_force(v in prop::collection::vec(0.0f64..100.0, 1..60)) {
            let fast = two_means_threshold(&v);
            let slow = two_means_brute(&v);
            match (fast, slow) {
                (None, None) => {}
                (Some(a), Some(b)) => prop_assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0), "{a} vs {b}"),
                other => prop_assert!(false, "{other:?}"),
            }
        }

        #[test]
        fn categories_follow_thresholds(v in prop::collection::vec(0.0f64..10.0, 1..80), delta in 0.0f64..0.5) {
            let mut s: Vec<ScoredSample> = v.iter().enumerate().map(|(i, x)| sample(i as u64, *x, None)).collect();
            categorize(&mut s, &global(delta));
            for x in &s {
                let want = category_of(x.s_value, two_means_threshold(&v), delta).0;
                prop_assert_eq!(x.category, want);
            }
        }
    }
}
