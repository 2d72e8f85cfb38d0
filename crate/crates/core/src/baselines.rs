//! Subspace novelty-detection baselines.
//!
//! DFM scores every sample once by its smallest old-class reconstruction
//! error and never iterates. To keep it running across tasks, the top-α of
//! its confidently novel samples become one new class. incDFM runs the
//! iterative loop but models all novelty as a single class.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::engine::{
    categorize, run_task, CategorizationRule, CouqConfig, CouqState, IterationRecord, Mode, NoveltyModel, ScoredSample,
    Scorer, StopReason, TaskOutput, TaskResult,
};
use crate::error::Result;
use crate::featstore::FeatureSet;
use crate::selection::{BudgetLedger, Oracle};
use crate::subspace::{fit_subspace, min_fre, ClassSubspace};
use crate::{ClassId, RecordId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Dfm,
    Incdfm,
}

/// Smallest old-class reconstruction error.
pub fn dfm_score<'a, I>(old: I, u: &[f32]) -> Result<f64>
where
    I: IntoIterator<Item = &'a ClassSubspace>,
{
    Ok(min_fre(old, u)?.0)
}

pub fn dfm_task(state: &mut CouqState, fs: &FeatureSet, pool: &[RecordId], cfg: &CouqConfig) -> Result<TaskOutput> {
    let scorer = Scorer {
        old: state.old_subspaces.values().cloned().collect(),
        novel: BTreeMap::new(),
        mapper: None,
        epsilon: cfg.epsilon,
    };
    let mut samples: Vec<ScoredSample> = pool
        .iter()
        .map(|id| {
            let s = dfm_score(&scorer.old, fs.vector(*id))?;
            Ok(ScoredSample {
                id: *id,
                s_value: s,
                numerator: s,
                predicted: None,
                category: crate::engine::Category::Ambiguous,
                tau: 0.0,
            })
        })
        .collect::<Result<_>>()?;
    let thresholds = categorize(
        &mut samples,
        &CategorizationRule {
            delta: cfg.delta,
            min_group: cfg.min_group,
            per_class: false,
        },
    );
    let mut novel: Vec<&ScoredSample> = samples
        .iter()
        .filter(|s| s.category == crate::engine::Category::ConfidentNovel)
        .collect();
    novel.sort_by(|a, b| b.s_value.total_cmp(&a.s_value).then(a.id.cmp(&b.id)));
    let take = ((cfg.alpha * novel.len() as f64) - 1e-9).ceil().max(0.0) as usize;
    let picked: Vec<RecordId> = novel.iter().take(take).map(|s| s.id).collect();

    let (stop_reason, novel_classes, final_pseudo) = if picked.is_empty() {
        (StopReason::NoNovelty, Vec::new(), Vec::new())
    } else {
        let class: ClassId = state.ids.allocate();
        let vectors: Vec<&[f32]> = picked.iter().map(|id| fs.vector(*id)).collect();
        let sub = if vectors.len() == 1 {
            ClassSubspace::point(class, vectors[0])
        } else {
            fit_subspace(class, &vectors, &cfg.fit)?
        };
        state.old_subspaces.insert(class, sub);
        (
            StopReason::OneShot,
            vec![class],
            picked.iter().map(|id| (*id, class)).collect::<Vec<_>>(),
        )
    };
    state.tasks_seen += 1;
    let confident_novel = novel.len();
    let result = TaskResult {
        task_index: state.tasks_seen,
        mode: Mode::Unsupervised,
        iterations: vec![IterationRecord {
            iteration: 0,
            samples: samples.clone(),
            thresholds,
            confident_novel,
            pseudo_labels: final_pseudo.len(),
            queried: Vec::new(),
            novel_set_change: None,
            mapper_classes: novel_classes.clone(),
        }],
        ledger: BudgetLedger::new(0),
        stop_reason,
        novel_classes,
        verdicts: samples,
        final_pseudo: final_pseudo.clone(),
        active: Vec::new(),
    };
    Ok(TaskOutput {
        result,
        scorer,
        train_labels: final_pseudo,
    })
}

/// The iterative loop with every novel sample mapped to one fresh class.
pub fn incdfm_task(
    state: &mut CouqState,
    fs: &FeatureSet,
    pool: &[RecordId],
    cfg: &CouqConfig,
    oracle: &mut Oracle,
    seed: u64,
) -> Result<TaskOutput> {
    let cfg = CouqConfig {
        mode: Mode::Unsupervised,
        novelty: NoveltyModel::SingleClass,
        oracle_pseudo: false,
        ..cfg.clone()
    };
    run_task(state, fs, pool, &cfg, oracle, seed)
}
