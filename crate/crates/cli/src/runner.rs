//! One (method, seed) run: task 0 supervised training, then every task of
//! the stream through the selected method, the classifier update and the
//! per-task evaluation.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use couq_core::baselines::{dfm_task, incdfm_task};
use couq_core::checkpoint::Checkpoint;
use couq_core::engine::{run_task, CouqConfig, CouqState, Mode, Scorer, TaskOutput, TaskResult};
use couq_core::evalkit::{auroc, continual_accuracy, match_discovered, RunReport, TaskPredictions, TaskRecord};
use couq_core::featstore::{build_task_stream, gen_synthetic, FeatureSet, TaskSpec, TaskStream};
use couq_core::learner::{update_classifier, BoundaryScores, ContinualClassifier, ReplayBuffer, ReplayEntry, Uncertainty};
use couq_core::selection::{BudgetLedger, Oracle, QueryBatch, Strategy};
use couq_core::subspace::{fit_subspace, ClassSubspace};
use couq_core::{seeds, ClassId, RecordId};
use rayon::prelude::*;

use crate::config::{ExperimentConfig, Method};
use crate::CliError;

/// Everything shared by the methods of one seed: the data, the stream and
/// the task-0 models.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub seed: u64,
    pub fs: FeatureSet,
    pub stream: TaskStream,
    pub state: CouqState,
    pub classifier: ContinualClassifier,
    pub buffer: ReplayBuffer,
}

pub fn load_dataset(cfg: &ExperimentConfig, seed: u64) -> Result<FeatureSet, CliError> {
    let fs = match (&cfg.dataset.path, &cfg.dataset.synthetic) {
        (Some(path), _) => couq_core::featstore::load_features(path, couq_core::featstore::FileFormat::from_path(path))
            .map_err(|e| match e {
                couq_core::Error::Io { .. } => CliError::Data(e.to_string()),
                e => e.into(),
            })?,
        (None, Some(spec)) => gen_synthetic(spec, seed)?,
        (None, None) => return Err(CliError::Config("no dataset configured".into())),
    };
    cfg.check_classes(&fs.class_ids())?;
    Ok(fs)
}

pub fn prepare(cfg: &ExperimentConfig, fs: FeatureSet, seed: u64) -> Result<Prepared, CliError> {
    let stream = build_task_stream(&fs, &cfg.stream.stream_config(seed))?;
    let state = CouqState::from_labeled(&fs, &stream.initial_train, &cfg.couq.fit)?;
    let mut classifier = ContinualClassifier::new(cfg.classifier.clone());
    let mut buffer = ReplayBuffer::new(cfg.replay.capacity);
    let labeled: Vec<(RecordId, ClassId)> = stream
        .initial_train
        .iter()
        .map(|id| (*id, fs.true_class(*id).expect("stream records are labeled")))
        .collect();
    update_classifier(
        &mut classifier,
        &entries(&fs, &labeled),
        &mut buffer,
        seeds::derive(seed, "cli.classifier", 0),
    )?;
    Ok(Prepared {
        seed,
        fs,
        stream,
        state,
        classifier,
        buffer,
    })
}

fn entries(fs: &FeatureSet, labels: &[(RecordId, ClassId)]) -> Vec<ReplayEntry> {
    labels
        .iter()
        .map(|(id, c)| ReplayEntry {
            id: *id,
            vector: fs.vector(*id).to_vec(),
            class: *c,
        })
        .collect()
}

/// One row of the per-task prediction dump.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub id: RecordId,
    pub predicted: ClassId,
    pub scores: BoundaryScores,
}

/// What a finished task leaves behind.
#[derive(Debug, Clone)]
pub struct TaskArtifacts {
    pub method: Method,
    pub seed: u64,
    pub task: usize,
    pub result: Option<TaskResult>,
    pub predictions: Vec<PredictionRow>,
    pub checkpoint: Checkpoint,
}

/// Method output for one task, before the classifier update.
struct Step {
    test_scores: Vec<f64>,
    train_labels: Vec<(RecordId, ClassId)>,
    label_spend: usize,
    iterations: usize,
    novel_detected: usize,
    result: Option<TaskResult>,
    scorer: Scorer,
}

impl Step {
    fn from_output(out: TaskOutput, fs: &FeatureSet, task: &TaskSpec) -> Result<Self, CliError> {
        let test_scores = task
            .test_pool
            .par_iter()
            .map(|id| out.scorer.score(fs.vector(*id)))
            .collect::<couq_core::Result<Vec<f64>>>()?;
        let r = out.result;
        Ok(Step {
            test_scores,
            train_labels: out.train_labels,
            label_spend: r.ledger.spent,
            iterations: r.iterations.len().saturating_sub(1),
            novel_detected: r.novel_classes.len(),
            result: Some(r),
            scorer: out.scorer,
        })
    }
}

/// Engine configuration of the COUQ variants.
pub fn couq_variant(base: &CouqConfig, method: Method) -> Option<CouqConfig> {
    let mut c = base.clone();
    match method {
        Method::Couq => {}
        Method::CouqUnsup => c.mode = Mode::Unsupervised,
        Method::GtSup => c.oracle_pseudo = true,
        Method::NoIters => c.max_iterations = 0,
        Method::AlTop => c.strategy = Strategy::Top,
        Method::AlRand => c.strategy = Strategy::Rand,
        Method::AlOnly => c.pseudo_labels = false,
        _ => return None,
    }
    Some(c)
}

fn uncertainty_of(method: Method) -> Option<(Uncertainty, bool)> {
    match method {
        Method::ErEntropy => Some((Uncertainty::Entropy, false)),
        Method::ErMargin => Some((Uncertainty::Margin, false)),
        Method::ErSoftmax => Some((Uncertainty::Softmax, false)),
        Method::PseudoerEntropy => Some((Uncertainty::Entropy, true)),
        Method::PseudoerMargin => Some((Uncertainty::Margin, true)),
        Method::PseudoerSoftmax => Some((Uncertainty::Softmax, true)),
        _ => None,
    }
}

fn old_scorer(state: &CouqState, epsilon: f64) -> Scorer {
    Scorer {
        old: state.old_subspaces.values().cloned().collect(),
        novel: BTreeMap::new(),
        mapper: None,
        epsilon,
    }
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    fs: &'a FeatureSet,
    seed: u64,
}

impl Ctx<'_> {
    fn uncertainties(&self, clf: &ContinualClassifier, ids: &[RecordId], kind: Uncertainty) -> Result<Vec<f64>, CliError> {
        Ok(ids
            .par_iter()
            .map(|id| clf.boundary_scores(self.fs.vector(*id)).map(|b| kind.of(&b)))
            .collect::<couq_core::Result<Vec<f64>>>()?)
    }

    /// Replay baselines: query the most uncertain pool records under the
    /// classifier as the task arrives; that same uncertainty is the novelty
    /// score. The pseudo-labeling variants then iterate, labeling the
    /// top-α most confident pool records of each newly learned class.
    fn replay_step(
        &self,
        task: &TaskSpec,
        t: usize,
        clf: &ContinualClassifier,
        buffer: &ReplayBuffer,
        oracle: &mut Oracle,
        kind: Uncertainty,
        pseudo: bool,
    ) -> Result<Step, CliError> {
        let pool = &task.unlabeled_pool;
        let pool_unc = self.uncertainties(clf, pool, kind)?;
        let test_scores = self.uncertainties(clf, &task.test_pool, kind)?;
        let mut ledger = BudgetLedger::for_pool(self.cfg.couq.budget_fraction, pool.len());
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.sort_by(|a, b| pool_unc[*b].total_cmp(&pool_unc[*a]).then(pool[*a].cmp(&pool[*b])));
        let batch = QueryBatch {
            ids: order.iter().take(ledger.total_budget).map(|i| pool[*i]).collect(),
            strategy: Strategy::Top,
            iteration: 0,
        };
        let active = oracle.label(&batch, &mut ledger)?;
        let new_classes: BTreeSet<ClassId> =
            active.iter().map(|(_, c)| *c).filter(|c| !clf.class_ids.contains(c)).collect();

        let mut pseudo_labels: Vec<(RecordId, ClassId)> = Vec::new();
        let mut iterations = 0;
        if pseudo && !new_classes.is_empty() {
            let labeled: BTreeSet<RecordId> = active.iter().map(|(id, _)| *id).collect();
            let rest: Vec<RecordId> = pool.iter().copied().filter(|id| !labeled.contains(id)).collect();
            for i in 1..=self.cfg.couq.max_iterations {
                iterations = i;
                let mut tmp = clf.clone();
                let mut tmp_buffer = buffer.clone();
                let mut labels = active.clone();
                labels.extend(pseudo_labels.iter().copied());
                let seed = seeds::derive(self.seed, "cli.pseudoer", (t * 1000 + i) as u64);
                update_classifier(&mut tmp, &entries(self.fs, &labels), &mut tmp_buffer, seed)?;
                let preds = rest
                    .par_iter()
                    .map(|id| {
                        let u = self.fs.vector(*id);
                        Ok((*id, tmp.predict(u)?, kind.of(&tmp.boundary_scores(u)?)))
                    })
                    .collect::<couq_core::Result<Vec<(RecordId, ClassId, f64)>>>()?;
                let picks = top_confident(&preds, &new_classes, self.cfg.couq.alpha);
                if picks == pseudo_labels {
                    break;
                }
                pseudo_labels = picks;
            }
        }
        let mut train_labels = active;
        train_labels.extend(pseudo_labels);
        Ok(Step {
            test_scores,
            train_labels,
            label_spend: ledger.spent,
            iterations,
            novel_detected: new_classes.len(),
            result: None,
            scorer: Scorer {
                old: Vec::new(),
                novel: BTreeMap::new(),
                mapper: None,
                epsilon: self.cfg.couq.epsilon,
            },
        })
    }

    /// Every pool record labeled with its true class; new classes join the
    /// subspace model directly.
    fn oracle_step(&self, task: &TaskSpec, state: &mut CouqState, oracle: &Oracle) -> Result<Step, CliError> {
        let scorer = old_scorer(state, self.cfg.couq.epsilon);
        let test_scores = task
            .test_pool
            .par_iter()
            .map(|id| scorer.score(self.fs.vector(*id)))
            .collect::<couq_core::Result<Vec<f64>>>()?;
        let labels: Vec<(RecordId, ClassId)> = task
            .unlabeled_pool
            .iter()
            .map(|id| (*id, oracle.peek(*id).expect("stream records are labeled")))
            .collect();
        let mut groups: BTreeMap<ClassId, Vec<&[f32]>> = BTreeMap::new();
        for (id, c) in &labels {
            if !state.old_subspaces.contains_key(c) {
                groups.entry(*c).or_default().push(self.fs.vector(*id));
            }
        }
        let novel_detected = groups.len();
        for (c, vectors) in groups {
            let s = if vectors.len() == 1 {
                ClassSubspace::point(c, vectors[0])
            } else {
                fit_subspace(c, &vectors, &self.cfg.couq.fit)?
            };
            state.old_subspaces.insert(c, s);
        }
        state.tasks_seen += 1;
        let mut train_labels = labels;
        train_labels.sort_unstable();
        Ok(Step {
            test_scores,
            label_spend: train_labels.len(),
            train_labels,
            iterations: 0,
            novel_detected,
            result: None,
            scorer,
        })
    }
}

/// Per predicted class among `classes`, the ⌈α·n⌉ records with the lowest
/// uncertainty; ties by id.
fn top_confident(preds: &[(RecordId, ClassId, f64)], classes: &BTreeSet<ClassId>, alpha: f64) -> Vec<(RecordId, ClassId)> {
    let mut by_class: BTreeMap<ClassId, Vec<(RecordId, f64)>> = BTreeMap::new();
    for (id, c, u) in preds {
        if classes.contains(c) {
            by_class.entry(*c).or_default().push((*id, *u));
        }
    }
    let mut out = Vec::new();
    for (c, mut members) in by_class {
        members.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        let take = ((alpha * members.len() as f64) - 1e-9).ceil() as usize;
        out.extend(members.into_iter().take(take).map(|(id, _)| (id, c)));
    }
    out.sort_unstable();
    out
}

/// Predict every test record; discovered classes are renamed to the true
/// classes they best agree with.
fn evaluate(
    clf: &ContinualClassifier,
    fs: &FeatureSet,
    test: &[RecordId],
    true_classes: &BTreeSet<ClassId>,
) -> Result<(TaskPredictions, Vec<PredictionRow>), CliError> {
    let rows = test
        .par_iter()
        .map(|id| {
            let u = fs.vector(*id);
            Ok(PredictionRow {
                id: *id,
                predicted: clf.predict(u)?,
                scores: clf.boundary_scores(u)?,
            })
        })
        .collect::<couq_core::Result<Vec<PredictionRow>>>()?;
    let discovered: BTreeSet<ClassId> = clf.class_ids.iter().copied().filter(|c| !true_classes.contains(c)).collect();
    let known: BTreeSet<ClassId> = clf.class_ids.iter().copied().filter(|c| true_classes.contains(c)).collect();
    let pairs: Vec<(ClassId, ClassId)> = rows
        .iter()
        .map(|r| (r.predicted, fs.true_class(r.id).expect("labeled")))
        .collect();
    let mapping = match_discovered(&pairs, &discovered, &known);
    let predictions: HashMap<RecordId, ClassId> = rows
        .iter()
        .map(|r| (r.id, mapping.get(&r.predicted).copied().unwrap_or(r.predicted)))
        .collect();
    Ok((
        TaskPredictions {
            test_ids: test.to_vec(),
            predictions,
        },
        rows,
    ))
}

/// Execute one method on a prepared seed. `sink` receives each finished
/// task's artifacts as soon as they exist.
pub fn run_method(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    method: Method,
    sink: &mut dyn FnMut(TaskArtifacts) -> Result<(), CliError>,
) -> Result<RunReport, CliError> {
    let fs = &prepared.fs;
    let seed = prepared.seed;
    let stream = &prepared.stream;
    let ctx = Ctx { cfg, fs, seed };
    let mut state = prepared.state.clone();
    let mut clf = prepared.classifier.clone();
    let mut buffer = prepared.buffer.clone();
    let mut oracle = Oracle::from_features(fs);
    let true_classes: BTreeSet<ClassId> = fs.class_ids().into_iter().collect();
    let truth: HashMap<RecordId, ClassId> = fs.records().iter().filter_map(|r| r.true_class.map(|c| (r.id, c))).collect();

    let (p0, rows0) = evaluate(&clf, fs, &stream.initial_test, &true_classes)?;
    let mut all_predictions = vec![p0];
    let acc0 = continual_accuracy(&all_predictions, &truth)?;
    let mut records = vec![TaskRecord {
        task: 0,
        auroc: None,
        test_accuracy: acc0.per_task[0],
        cumulative_accuracy: acc0.cumulative[0],
        label_spend: 0,
        iterations: 0,
        novel_detected: 0,
        novel_true: stream.initial_classes.len(),
    }];
    sink(TaskArtifacts {
        method,
        seed,
        task: 0,
        result: None,
        predictions: rows0,
        checkpoint: Checkpoint {
            scorer: old_scorer(&state, cfg.couq.epsilon),
            classifier: Some(clf.clone()),
        },
    })?;

    for task in &stream.tasks {
        let t = task.task_index;
        let engine_seed = seeds::derive(seed, "cli.engine", t as u64);
        let pool = &task.unlabeled_pool;
        let step = if let Some(c) = couq_variant(&cfg.couq, method) {
            Step::from_output(run_task(&mut state, fs, pool, &c, &mut oracle, engine_seed)?, fs, task)?
        } else if let Some((kind, pseudo)) = uncertainty_of(method) {
            ctx.replay_step(task, t, &clf, &buffer, &mut oracle, kind, pseudo)?
        } else {
            match method {
                Method::Dfm => {
                    let c = CouqConfig {
                        mode: Mode::Unsupervised,
                        ..cfg.couq.clone()
                    };
                    Step::from_output(dfm_task(&mut state, fs, pool, &c)?, fs, task)?
                }
                Method::Incdfm => {
                    Step::from_output(incdfm_task(&mut state, fs, pool, &cfg.couq, &mut oracle, engine_seed)?, fs, task)?
                }
                Method::OracleUpper => ctx.oracle_step(task, &mut state, &oracle)?,
                _ => unreachable!("every method is dispatched above"),
            }
        };

        let labels: Vec<bool> = task
            .test_pool
            .iter()
            .map(|id| task.new_classes.contains(&truth[id]))
            .collect();
        let task_auroc = auroc(&step.test_scores, &labels)?;
        if !step.train_labels.is_empty() {
            update_classifier(
                &mut clf,
                &entries(fs, &step.train_labels),
                &mut buffer,
                seeds::derive(seed, "cli.classifier", t as u64),
            )?;
        }
        let (p, rows) = evaluate(&clf, fs, &task.test_pool, &true_classes)?;
        all_predictions.push(p);
        let acc = continual_accuracy(&all_predictions, &truth)?;
        log::info!(
            "{method} seed {seed} task {t}: auroc {task_auroc:.4} accuracy {:.4} spend {}",
            acc.per_task[t],
            step.label_spend
        );
        records.push(TaskRecord {
            task: t,
            auroc: Some(task_auroc),
            test_accuracy: acc.per_task[t],
            cumulative_accuracy: acc.cumulative[t],
            label_spend: step.label_spend,
            iterations: step.iterations,
            novel_detected: step.novel_detected,
            novel_true: task.new_classes.len(),
        });
        sink(TaskArtifacts {
            method,
            seed,
            task: t,
            result: step.result,
            predictions: rows,
            checkpoint: Checkpoint {
                scorer: step.scorer,
                classifier: Some(clf.clone()),
            },
        })?;
    }
    Ok(RunReport::new(method.tag(), seed, cfg.couq.budget_fraction, records))
}

/// All configured (method, seed) runs in memory, without artifacts.
/// Reports come back ordered by method then seed.
pub fn run_all(cfg: &ExperimentConfig) -> Result<Vec<RunReport>, CliError> {
    let prepared = cfg
        .seeds
        .par_iter()
        .map(|s| prepare(cfg, load_dataset(cfg, *s)?, *s))
        .collect::<Result<Vec<_>, CliError>>()?;
    let jobs: Vec<(Method, &Prepared)> = cfg
        .methods
        .iter()
        .flat_map(|m| prepared.iter().map(move |p| (*m, p)))
        .collect();
    jobs.par_iter()
        .map(|(m, p)| run_method(cfg, p, *m, &mut |_| Ok(())))
        .collect()
}
