//! Active labeling: the per-task budget ledger, the AL-Amb / AL-Top /
//! AL-Rand strategies and the simulated labeling oracle.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::engine::{Category, ScoredSample};
use crate::error::{Error, Result};
use crate::featstore::FeatureSet;
use crate::{seeds, ClassId, RecordId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Alternate ambiguous and confident-novel picks per predicted class.
    Amb,
    /// Highest scores per predicted class.
    Top,
    /// Uniform over the unlabeled pool.
    Rand,
    /// Highest initial scores over the whole pool (the i = 0 spend).
    Initial,
}

impl Strategy {
    pub fn tag(&self) -> &'static str {
        match self {
            Strategy::Amb => "amb",
            Strategy::Top => "top",
            Strategy::Rand => "rand",
            Strategy::Initial => "initial",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub id: RecordId,
    pub iteration: usize,
    pub strategy: Strategy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetLedger {
    pub total_budget: usize,
    pub spent: usize,
    /// Planned spend per iteration, filled in as iterations start.
    pub per_iteration_plan: Vec<usize>,
    pub log: Vec<LedgerEntry>,
    /// `(iteration, requested, granted)` whenever a request was clamped.
    pub clamped: Vec<(usize, usize, usize)>,
    /// Class-wise picks so far, `(ambiguous, confident)` per predicted class.
    #[serde(skip)]
    picks: BTreeMap<Option<ClassId>, (usize, usize)>,
}

impl BudgetLedger {
    pub fn new(total_budget: usize) -> Self {
        Self {
            total_budget,
            spent: 0,
            per_iteration_plan: Vec::new(),
            log: Vec::new(),
            clamped: Vec::new(),
            picks: BTreeMap::new(),
        }
    }

    /// `⌈fraction × pool_len⌉`.
    pub fn for_pool(fraction: f64, pool_len: usize) -> Self {
        let raw = fraction * pool_len as f64;
        // guard against 0.0125 * 800 = 10.000000000000002
        let total = if (raw - raw.round()).abs() < 1e-9 { raw.round() } else { raw.ceil() };
        Self::new(total.max(0.0) as usize)
    }

    pub fn remaining(&self) -> usize {
        self.total_budget - self.spent
    }

    pub fn exhausted(&self) -> bool {
        self.spent >= self.total_budget
    }

    /// Clamp a request to what is left, noting the clamp.
    pub fn clamp(&mut self, iteration: usize, requested: usize) -> usize {
        let granted = requested.min(self.remaining());
        if granted < requested {
            log::info!("budget clamp at iteration {iteration}: requested {requested}, granted {granted}");
            self.clamped.push((iteration, requested, granted));
        }
        granted
    }

    pub fn plan(&mut self, iteration: usize, b: usize) {
        if self.per_iteration_plan.len() <= iteration {
            self.per_iteration_plan.resize(iteration + 1, 0);
        }
        self.per_iteration_plan[iteration] = b;
    }

    fn record(&mut self, id: RecordId, iteration: usize, strategy: Strategy) {
        debug_assert!(self.spent < self.total_budget);
        self.spent += 1;
        self.log.push(LedgerEntry { id, iteration, strategy });
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryBatch {
    pub ids: Vec<RecordId>,
    pub strategy: Strategy,
    pub iteration: usize,
}

impl QueryBatch {
    pub fn empty(strategy: Strategy, iteration: usize) -> Self {
        Self {
            ids: Vec::new(),
            strategy,
            iteration,
        }
    }
}

/// Per-class candidate order for the class-wise strategies, each id tagged
/// `true` when it is an ambiguous pick. AL-Amb alternates ambiguous and
/// confident picks, resuming the phase left by earlier iterations.
fn class_queue(members: &[&ScoredSample], strategy: Strategy, prior: (usize, usize)) -> Vec<(RecordId, bool)> {
    let by_score_desc = |a: &&ScoredSample, b: &&ScoredSample| b.s_value.total_cmp(&a.s_value).then(a.id.cmp(&b.id));
    match strategy {
        Strategy::Amb => {
            let mut amb: Vec<&ScoredSample> =
                members.iter().copied().filter(|s| s.category == Category::Ambiguous).collect();
            amb.sort_by(|a, b| {
                (a.s_value - a.tau)
                    .abs()
                    .total_cmp(&(b.s_value - b.tau).abs())
                    .then(a.id.cmp(&b.id))
            });
            let mut conf: Vec<&ScoredSample> =
                members.iter().copied().filter(|s| s.category == Category::ConfidentNovel).collect();
            conf.sort_by(by_score_desc);
            let mut out = Vec::with_capacity(amb.len() + conf.len());
            let (mut a, mut c) = (amb.into_iter().map(|s| (s.id, true)), conf.into_iter().map(|s| (s.id, false)));
            let confident_first = prior.0 > prior.1;
            loop {
                let (x, y) = if confident_first { (c.next(), a.next()) } else { (a.next(), c.next()) };
                if x.is_none() && y.is_none() {
                    break;
                }
                out.extend(x.into_iter().chain(y));
            }
            out
        }
        _ => {
            let mut all: Vec<&ScoredSample> = members.to_vec();
            all.sort_by(by_score_desc);
            all.into_iter().map(|s| (s.id, false)).collect()
        }
    }
}

/// Choose up to `b` unlabeled records. `b` is clamped to the ledger's
/// remaining budget; the ledger itself is only charged by the oracle.
pub fn select_active(
    scores: &[ScoredSample],
    strategy: Strategy,
    b: usize,
    seed: u64,
    ledger: &mut BudgetLedger,
    labeled: &HashSet<RecordId>,
    iteration: usize,
) -> QueryBatch {
    let b = ledger.clamp(iteration, b);
    if b == 0 {
        return QueryBatch::empty(strategy, iteration);
    }
    let unlabeled: Vec<&ScoredSample> = scores.iter().filter(|s| !labeled.contains(&s.id)).collect();

    let ids = match strategy {
        Strategy::Rand => {
            let mut ids: Vec<RecordId> = unlabeled.iter().map(|s| s.id).collect();
            ids.sort_unstable();
            ids.dedup();
            let mut rng = seeds::rng(seed);
            let (picked, _) = ids.partial_shuffle(&mut rng, b);
            picked.to_vec()
        }
        Strategy::Initial => {
            let mut all = unlabeled;
            all.sort_by(|a, b| b.s_value.total_cmp(&a.s_value).then(a.id.cmp(&b.id)));
            all.into_iter().take(b).map(|s| s.id).collect()
        }
        Strategy::Amb | Strategy::Top => {
            let mut groups: BTreeMap<Option<ClassId>, Vec<&ScoredSample>> = BTreeMap::new();
            for s in unlabeled {
                groups.entry(s.predicted).or_default().push(s);
            }
            // classes with the fewest picks so far come first, so the share
            // remainder rotates across iterations; ties go to the lowest id
            let mut keys: Vec<Option<ClassId>> = groups.keys().copied().collect();
            keys.sort_by_key(|k| {
                let (a, c) = ledger.picks.get(k).copied().unwrap_or_default();
                (a + c, *k)
            });
            let mut queues: Vec<std::collections::VecDeque<(RecordId, bool)>> = keys
                .iter()
                .map(|k| {
                    let prior = ledger.picks.get(k).copied().unwrap_or_default();
                    class_queue(&groups[k], strategy, prior).into()
                })
                .collect();
            let shares = crate::featstore::stream::even_shares(b, queues.len());
            let mut out = Vec::with_capacity(b);
            let mut take = |k: Option<ClassId>, (id, amb): (RecordId, bool), out: &mut Vec<RecordId>| {
                let e = ledger.picks.entry(k).or_default();
                if amb {
                    e.0 += 1;
                } else {
                    e.1 += 1;
                }
                out.push(id);
            };
            for ((k, q), share) in keys.iter().zip(queues.iter_mut()).zip(shares) {
                for _ in 0..share {
                    match q.pop_front() {
                        Some(p) => take(*k, p, &mut out),
                        None => break,
                    }
                }
            }
            // spill over: round-robin over classes that still have candidates
            while out.len() < b && queues.iter().any(|q| !q.is_empty()) {
                for (k, q) in keys.iter().zip(queues.iter_mut()) {
                    if out.len() < b {
                        if let Some(p) = q.pop_front() {
                            take(*k, p, &mut out);
                        }
                    }
                }
            }
            out
        }
    };
    QueryBatch {
        ids,
        strategy,
        iteration,
    }
}

/// Simulated annotator backed by the ground-truth labels of a feature set.
#[derive(Debug, Clone)]
pub struct Oracle {
    truth: HashMap<RecordId, ClassId>,
    queried: HashSet<RecordId>,
}

impl Oracle {
    pub fn new(truth: HashMap<RecordId, ClassId>) -> Self {
        Self {
            truth,
            queried: HashSet::new(),
        }
    }

    pub fn from_features(fs: &FeatureSet) -> Self {
        Self::new(
            fs.records()
                .iter()
                .filter_map(|r| r.true_class.map(|c| (r.id, c)))
                .collect(),
        )
    }

    /// Label lookup that neither charges the budget nor marks the record;
    /// for evaluation and oracle-supervised variants only.
    pub fn peek(&self, id: RecordId) -> Option<ClassId> {
        self.truth.get(&id).copied()
    }

    pub fn was_queried(&self, id: RecordId) -> bool {
        self.queried.contains(&id)
    }

    /// Forget which records were queried (between independent runs).
    pub fn reset(&mut self) {
        self.queried.clear();
    }

    /// Reveal the labels of a batch and charge the ledger. The whole batch
    /// is validated before anything is charged. Batches larger than the
    /// remaining budget are truncated.
    pub fn label(&mut self, batch: &QueryBatch, ledger: &mut BudgetLedger) -> Result<Vec<(RecordId, ClassId)>> {
        let mut seen = HashSet::new();
        for id in &batch.ids {
            if !self.truth.contains_key(id) {
                return Err(Error::Oracle(*id));
            }
            if self.queried.contains(id) || !seen.insert(*id) {
                return Err(Error::Requery(*id));
            }
        }
        let granted = ledger.clamp(batch.iteration, batch.ids.len());
        let mut out = Vec::with_capacity(granted);
        for id in &batch.ids[..granted] {
            self.queried.insert(*id);
            ledger.record(*id, batch.iteration, batch.strategy);
            out.push((*id, self.truth[id]));
        }
        Ok(out)
    }
}
