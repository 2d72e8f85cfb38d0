use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use super::FeatureSet;
use crate::error::{Error, Result};
use crate::seeds;
use crate::{ClassId, RecordId};

/// Old-to-new sample ratio inside every unlabeled pool and test pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixRatio {
    pub old: u32,
    pub new: u32,
}

impl MixRatio {
    pub const DEFAULT: MixRatio = MixRatio { old: 2, new: 1 };

    fn old_count(&self, new_count: usize) -> usize {
        (new_count as f64 * self.old as f64 / self.new as f64).round() as usize
    }
}

impl Default for MixRatio {
    fn default() -> Self {
        Self::DEFAULT
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    /// First entry is the fully labeled initial class set, each later entry
    /// the classes introduced by one task.
    pub schedule: Vec<Vec<ClassId>>,
    pub mix: MixRatio,
    pub holdout_frac: f64,
    pub test_frac: f64,
    /// Records per new class placed in its task's pool; `None` uses the whole
    /// training residue of the class.
    pub new_per_class: Option<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_index: usize,
    pub new_classes: Vec<ClassId>,
    /// Shuffled; old/new provenance is not recorded.
    pub unlabeled_pool: Vec<RecordId>,
    pub test_pool: Vec<RecordId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskStream {
    pub initial_classes: Vec<ClassId>,
    /// Labeled training records of the initial classes (task 0).
    pub initial_train: Vec<RecordId>,
    pub initial_test: Vec<RecordId>,
    pub tasks: Vec<TaskSpec>,
    /// Per-class reserve of records never used for training, from which old
    /// samples of later pools are drawn.
    pub holdout_old: BTreeMap<ClassId, Vec<RecordId>>,
    pub seed: u64,
}

impl TaskStream {
    /// Classes known before task `task_index` starts.
    pub fn old_classes_at(&self, task_index: usize) -> Vec<ClassId> {
        let mut out: Vec<ClassId> = self.initial_classes.clone();
        for task in self.tasks.iter().take_while(|t| t.task_index < task_index) {
            out.extend(&task.new_classes);
        }
        out.sort_unstable();
        out
    }

    /// Checks the stream invariants against the data it was built from.
    pub fn validate(&self, fs: &FeatureSet, mix: MixRatio) -> Result<()> {
        let mut introduced: BTreeSet<ClassId> = self.initial_classes.iter().copied().collect();
        if introduced.len() != self.initial_classes.len() {
            return Err(Error::Schedule("initial classes repeat".into()));
        }
        let mut train_side: HashSet<RecordId> = self.initial_train.iter().copied().collect();
        let mut test_side: HashSet<RecordId> = self.initial_test.iter().copied().collect();
        for task in &self.tasks {
            let old_classes = self.old_classes_at(task.task_index);
            for c in &task.new_classes {
                if !introduced.insert(*c) {
                    return Err(Error::Schedule(format!("class {c} introduced twice")));
                }
            }
            let provenance = |ids: &[RecordId]| -> Result<(usize, usize)> {
                let (mut old, mut new) = (0, 0);
                for id in ids {
                    let class = fs
                        .true_class(*id)
                        .ok_or_else(|| Error::InvalidData(format!("record {id} unlabeled")))?;
                    if task.new_classes.contains(&class) {
                        new += 1;
                    } else if old_classes.contains(&class) {
                        old += 1;
                    } else {
                        return Err(Error::Schedule(format!(
                            "task {} pool holds record {id} of class {class} not yet introduced",
                            task.task_index
                        )));
                    }
                }
                Ok((old, new))
            };
            let (old, new) = provenance(&task.unlabeled_pool)?;
            let n_old_classes = old_classes.len().max(1);
            if old.abs_diff(mix.old_count(new)) > n_old_classes {
                return Err(Error::Schedule(format!(
                    "task {} pool has {old} old vs {new} new records",
                    task.task_index
                )));
            }
            provenance(&task.test_pool)?;
            for id in &task.unlabeled_pool {
                let class = fs.true_class(*id).unwrap_or_default();
                if old_classes.contains(&class)
                    && !self.holdout_old.get(&class).is_some_and(|h| h.contains(id))
                {
                    return Err(Error::Schedule(format!("old record {id} not drawn from holdout")));
                }
                if !train_side.insert(*id) {
                    return Err(Error::Schedule(format!("record {id} appears in two pools")));
                }
            }
            test_side.extend(task.test_pool.iter().copied());
        }
        if let Some(id) = train_side.intersection(&test_side).next() {
            return Err(Error::Schedule(format!("record {id} is in both a train and a test pool")));
        }
        Ok(())
    }
}

struct ClassSplit {
    test: Vec<RecordId>,
    holdout: Vec<RecordId>,
    residue: Vec<RecordId>,
}

fn check_fraction(name: &str, value: f64) -> Result<()> {
    if !(0.0..1.0).contains(&value) || !value.is_finite() {
        return Err(Error::InvalidArgument(format!("{name} must lie in [0, 1), got {value}")));
    }
    Ok(())
}

/// Distribute `total` evenly over `n` slots, remainder to the first slots.
pub(crate) fn even_shares(total: usize, n: usize) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let base = total / n;
    let rem = total % n;
    (0..n).map(|i| base + usize::from(i < rem)).collect()
}

pub fn build_task_stream(fs: &FeatureSet, cfg: &StreamConfig) -> Result<TaskStream> {
    check_fraction("holdout_frac", cfg.holdout_frac)?;
    check_fraction("test_frac", cfg.test_frac)?;
    if cfg.holdout_frac + cfg.test_frac >= 1.0 {
        return Err(Error::InvalidArgument("holdout_frac + test_frac must be below 1".into()));
    }
    if cfg.mix.old == 0 || cfg.mix.new == 0 {
        return Err(Error::InvalidArgument("mix ratio terms must be positive".into()));
    }
    if cfg.schedule.is_empty() || cfg.schedule[0].is_empty() {
        return Err(Error::Schedule("schedule needs a non-empty initial class set".into()));
    }
    let mut seen = BTreeSet::new();
    for (t, entry) in cfg.schedule.iter().enumerate() {
        if entry.is_empty() {
            return Err(Error::Schedule(format!("schedule entry {t} is empty")));
        }
        for c in entry {
            if !seen.insert(*c) {
                return Err(Error::Schedule(format!("class {c} appears more than once")));
            }
            if !fs.class_index().contains_key(c) {
                return Err(Error::Schedule(format!("class {c} is not in the dataset")));
            }
        }
    }

    let mut splits: BTreeMap<ClassId, ClassSplit> = BTreeMap::new();
    for (t, entry) in cfg.schedule.iter().enumerate() {
        for &class in entry {
            let mut ids = fs.class_index()[&class].clone();
            ids.sort_unstable();
            let mut rng = seeds::stream(cfg.seed, "featstore.split", class as u64);
            ids.shuffle(&mut rng);
            let n = ids.len();
            let n_test = (cfg.test_frac * n as f64).round() as usize;
            let n_hold = (cfg.holdout_frac * n as f64).round() as usize;
            let min_residue = if t == 0 { 2 } else { cfg.new_per_class.unwrap_or(1).max(1) };
            if n_test + n_hold + min_residue > n {
                return Err(Error::InsufficientData {
                    class,
                    detail: format!(
                        "{n} records cannot cover {n_test} test + {n_hold} holdout + {min_residue} training"
                    ),
                });
            }
            let residue = ids.split_off(n_test + n_hold);
            let holdout = ids.split_off(n_test);
            splits.insert(
                class,
                ClassSplit {
                    test: ids,
                    holdout,
                    residue,
                },
            );
        }
    }

    let initial_classes: Vec<ClassId> = {
        let mut v = cfg.schedule[0].clone();
        v.sort_unstable();
        v
    };
    let mut initial_train = Vec::new();
    let mut initial_test = Vec::new();
    for c in &initial_classes {
        initial_train.extend(&splits[c].residue);
        initial_test.extend(&splits[c].test);
    }

    let mut holdout_cursor: BTreeMap<ClassId, usize> = BTreeMap::new();
    let mut old_classes = initial_classes.clone();
    let mut tasks = Vec::with_capacity(cfg.schedule.len() - 1);
    for (t, entry) in cfg.schedule.iter().enumerate().skip(1) {
        let mut new_classes = entry.clone();
        new_classes.sort_unstable();

        let mut pool = Vec::new();
        for c in &new_classes {
            let split = &splits[c];
            let take = cfg.new_per_class.unwrap_or(split.residue.len());
            pool.extend(&split.residue[..take]);
        }

        // New-class test records are trimmed (evenly, from the front of each
        // split) when the old classes' test splits cannot cover the ratio.
        let old_capacity = old_classes.len() * old_classes.iter().map(|c| splits[c].test.len()).min().unwrap_or(0);
        let new_available: usize = new_classes.iter().map(|c| splits[c].test.len()).sum();
        let mut n_new_test = new_available;
        while n_new_test > 0 && cfg.mix.old_count(n_new_test) > old_capacity {
            n_new_test -= 1;
        }
        let mut new_test = Vec::with_capacity(n_new_test);
        let mut taken = vec![0usize; new_classes.len()];
        while new_test.len() < n_new_test {
            for (i, c) in new_classes.iter().enumerate() {
                if new_test.len() < n_new_test && taken[i] < splits[c].test.len() {
                    new_test.push(splits[c].test[taken[i]]);
                    taken[i] += 1;
                }
            }
        }

        let n_new = pool.len();
        for (class, share) in old_classes.iter().zip(even_shares(cfg.mix.old_count(n_new), old_classes.len())) {
            let holdout = &splits[class].holdout;
            let cursor = holdout_cursor.entry(*class).or_insert(0);
            if *cursor + share > holdout.len() {
                return Err(Error::InsufficientData {
                    class: *class,
                    detail: format!(
                        "holdout of {} records exhausted at task {t} (needs {} more)",
                        holdout.len(),
                        *cursor + share - holdout.len()
                    ),
                });
            }
            pool.extend(&holdout[*cursor..*cursor + share]);
            *cursor += share;
        }

        let mut rng = seeds::stream(cfg.seed, "featstore.test_pool", t as u64);
        let mut test_pool = new_test;
        let n_old_test = cfg.mix.old_count(test_pool.len());
        for (class, share) in old_classes.iter().zip(even_shares(n_old_test, old_classes.len())) {
            let test = &splits[class].test;
            if share > test.len() {
                return Err(Error::InsufficientData {
                    class: *class,
                    detail: format!("test split of {} records cannot supply {share} at task {t}", test.len()),
                });
            }
            test_pool.extend(test.choose_multiple(&mut rng, share).copied());
        }

        let mut rng = seeds::stream(cfg.seed, "featstore.pool_order", t as u64);
        pool.shuffle(&mut rng);
        test_pool.shuffle(&mut rng);

        tasks.push(TaskSpec {
            task_index: t,
            new_classes: new_classes.clone(),
            unlabeled_pool: pool,
            test_pool,
        });
        old_classes.extend(new_classes);
        old_classes.sort_unstable();
    }

    let holdout_old = splits.into_iter().map(|(c, s)| (c, s.holdout)).collect();
    Ok(TaskStream {
        initial_classes,
        initial_train,
        initial_test,
        tasks,
        holdout_old,
        seed: cfg.seed,
    })
}
