//! The downstream continual classifier with class-balanced experience
//! replay, and the decision-boundary uncertainty scores used by the
//! replay baselines.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{batch_matrix, Adam, Mlp, Plateau, TrainConfig};
use crate::{seeds, ClassId, RecordId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub id: RecordId,
    pub vector: Vec<f32>,
    pub class: ClassId,
}

/// Fixed-capacity exemplar store. After every insert wave each class keeps
/// at most `⌊capacity / #classes⌋` entries, chosen uniformly at random.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    entries: Vec<ReplayEntry>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: Vec::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ReplayEntry] {
        &self.entries
    }

    pub fn per_class(&self) -> BTreeMap<ClassId, usize> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            *out.entry(e.class).or_insert(0) += 1;
        }
        out
    }

    pub fn insert(&mut self, samples: Vec<ReplayEntry>, seed: u64) {
        self.entries.extend(samples);
        let mut by_class: BTreeMap<ClassId, Vec<ReplayEntry>> = BTreeMap::new();
        for e in self.entries.drain(..) {
            by_class.entry(e.class).or_default().push(e);
        }
        if by_class.is_empty() {
            return;
        }
        let quota = self.capacity / by_class.len();
        for (class, mut members) in by_class {
            if members.len() > quota {
                let mut rng = seeds::stream(seed, "learner.replay", class as u64);
                members.shuffle(&mut rng);
                members.truncate(quota);
                members.sort_by_key(|e| e.id);
            }
            self.entries.extend(members);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub train: TrainConfig,
    /// Half-width of the uniform init of new output rows.
    pub head_init: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                hidden: 4096,
                max_epochs: 100,
                ..TrainConfig::default()
            },
            head_init: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContinualClassifier {
    pub net: Option<Mlp>,
    /// Output row `i` scores `class_ids[i]`; append-only.
    pub class_ids: Vec<ClassId>,
    pub config: ClassifierConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryScores {
    pub softmax_max: f64,
    pub entropy: f64,
    pub margin: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Uncertainty {
    Entropy,
    Margin,
    Softmax,
}

impl Uncertainty {
    /// Larger means more uncertain.
    pub fn of(&self, b: &BoundaryScores) -> f64 {
        match self {
            Uncertainty::Entropy => b.entropy,
            Uncertainty::Margin => 1.0 - b.margin,
            Uncertainty::Softmax => 1.0 - b.softmax_max,
        }
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|x| x / total).collect()
}

pub fn boundary_from_logits(logits: &[f64]) -> BoundaryScores {
    let p = softmax(logits);
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_total = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    // -Σ p log p with log p = z - max - log Σ exp(z - max)
    let entropy = -logits
        .iter()
        .zip(&p)
        .map(|(z, pi)| if *pi > 0.0 { pi * (z - max - log_total) } else { 0.0 })
        .sum::<f64>();
    let mut sorted = p.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let top = sorted[0];
    let margin = if sorted.len() > 1 { top - sorted[1] } else { top };
    BoundaryScores {
        softmax_max: top,
        entropy: entropy.max(0.0),
        margin,
    }
}

impl ContinualClassifier {
    pub fn new(config: ClassifierConfig) -> Self {
        Self {
            net: None,
            class_ids: Vec::new(),
            config,
        }
    }

    pub fn logits(&self, u: &[f32]) -> Result<Vec<f64>> {
        let net = self.net.as_ref().ok_or_else(|| Error::EmptyModel("classifier is untrained".into()))?;
        if u.len() != net.input_dim() {
            return Err(Error::dim(net.input_dim(), u.len()));
        }
        Ok(net.logits(u))
    }

    /// Largest logit; ties go to the lowest class id.
    pub fn predict(&self, u: &[f32]) -> Result<ClassId> {
        let z = self.logits(u)?;
        let mut best = 0;
        for i in 1..z.len() {
            if z[i] > z[best] || (z[i] == z[best] && self.class_ids[i] < self.class_ids[best]) {
                best = i;
            }
        }
        Ok(self.class_ids[best])
    }

    pub fn boundary_scores(&self, u: &[f32]) -> Result<BoundaryScores> {
        Ok(boundary_from_logits(&self.logits(u)?))
    }
}

/// Extend the head for unseen classes, train on `new_labeled` with
/// half-new / half-replay batches, then insert `new_labeled` into the
/// buffer.
pub fn update_classifier(
    clf: &mut ContinualClassifier,
    new_labeled: &[ReplayEntry],
    buffer: &mut ReplayBuffer,
    seed: u64,
) -> Result<()> {
    if new_labeled.is_empty() {
        return Err(Error::InvalidArgument("classifier update needs labeled samples".into()));
    }
    let dim = new_labeled[0].vector.len();
    if let Some(e) = new_labeled.iter().find(|e| e.vector.len() != dim) {
        return Err(Error::dim(dim, e.vector.len()));
    }
    if let Some(net) = &clf.net {
        if net.input_dim() != dim {
            return Err(Error::dim(net.input_dim(), dim));
        }
    }
    let mut unseen: Vec<ClassId> = new_labeled
        .iter()
        .map(|e| e.class)
        .filter(|c| !clf.class_ids.contains(c))
        .collect();
    unseen.sort_unstable();
    unseen.dedup();
    if let Some(e) = buffer.entries().iter().find(|e| !clf.class_ids.contains(&e.class)) {
        return Err(Error::ClassId(format!("replay entry of unknown class {}", e.class)));
    }

    let cfg = clf.config.train.clone();
    let mut rng = seeds::stream(seed, "learner.train", 0);
    match &mut clf.net {
        None => {
            clf.net = Some(Mlp::new(dim, cfg.hidden, unseen.len(), &mut rng));
        }
        Some(net) if !unseen.is_empty() => {
            net.extend_outputs(unseen.len(), clf.config.head_init, &mut rng);
        }
        Some(_) => {}
    }
    clf.class_ids.extend(&unseen);
    let index: BTreeMap<ClassId, usize> = clf.class_ids.iter().enumerate().map(|(i, c)| (*c, i)).collect();

    let net = clf.net.as_mut().expect("initialized above");
    let mut adam = Adam::new(cfg.learning_rate, net.params().len());
    let mut plateau = Plateau::new(&cfg);
    let replay: Vec<&ReplayEntry> = buffer.entries().iter().collect();
    let half = if replay.is_empty() { cfg.batch_size } else { (cfg.batch_size / 2).max(1) };
    let mut order: Vec<usize> = (0..new_labeled.len()).collect();
    for _ in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(half) {
            let mut rows: Vec<&[f32]> = chunk.iter().map(|&i| new_labeled[i].vector.as_slice()).collect();
            let mut y: Vec<usize> = chunk.iter().map(|&i| index[&new_labeled[i].class]).collect();
            if !replay.is_empty() {
                for e in replay.choose_multiple(&mut rng, half.min(replay.len())) {
                    rows.push(&e.vector);
                    y.push(index[&e.class]);
                }
            }
            let (loss, grads) = net.loss_and_grad(&batch_matrix(&rows), &y);
            adam.step(net, &grads);
            epoch_loss += loss * rows.len() as f64;
            seen += rows.len();
        }
        if plateau.observe(epoch_loss / seen as f64) {
            break;
        }
    }
    net.round_to_f32();
    buffer.insert(new_labeled.to_vec(), seeds::derive(seed, "learner.buffer", 0));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{max_relative_error, numeric_grad};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn entries(class: ClassId, n: usize, start: u64) -> Vec<ReplayEntry> {
        (0..n)
            .map(|i| ReplayEntry {
                id: start + i as u64,
                vector: vec![class as f32, i as f32],
                class,
            })
            .collect()
    }

    #[test]
    fn capacity_clamp() {
        let mut b = ReplayBuffer::new(50);
        b.insert(entries(0, 100, 0), 1);
        assert_eq!(b.len(), 50);
    }

    #[test]
    fn per_class_quota() {
        let mut b = ReplayBuffer::new(6);
        let mut all = entries(0, 10, 0);
        all.extend(entries(1, 10, 100));
        all.extend(entries(2, 10, 200));
        b.insert(all, 3);
        assert_eq!(b.per_class().values().copied().collect::<Vec<_>>(), vec![2, 2, 2]);
    }

    #[test]
    fn eviction_is_uniform() {
        let n = 20usize;
        let quota = 5usize;
        let trials = 2000u64;
        let mut counts = vec![0usize; n];
        for seed in 0..trials {
            let mut b = ReplayBuffer::new(quota);
            b.insert(entries(0, n, 0), seed);
            for e in b.entries() {
                counts[e.id as usize] += 1;
            }
        }
        let p = quota as f64 / n as f64;
        let mean = trials as f64 * p;
        let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() <= 3.0 * sigma + 1.0, "{c} vs {mean}");
        }
    }

    proptest! {
        #[test]
        fn buffer_invariants(capacity in 1usize..60, waves in prop::collection::vec(prop::collection::vec((0i32..6, 1usize..30), 1..4), 1..6)) {
            let mut b = ReplayBuffer::new(capacity);
            let mut next = 0u64;
            for (w, wave) in waves.iter().enumerate() {
                let mut batch = Vec::new();
                for (class, n) in wave {
                    batch.extend(entries(*class, *n, next));
                    next += *n as u64;
                }
                b.insert(batch, w as u64);
                prop_assert!(b.len() <= capacity);
                let counts = b.per_class();
                let quota = capacity / counts.len().max(1);
                prop_assert!(counts.values().all(|c| *c <= quota));
            }
        }
    }

    #[test]
    fn boundary_examples() {
        let b = boundary_from_logits(&[0.0, 0.0]);
        assert!((b.softmax_max - 0.5).abs() < 1e-15);
        assert!((b.entropy - 2f64.ln()).abs() < 1e-12);
        assert_eq!(b.margin, 0.0);
        let b = boundary_from_logits(&[100.0, 0.0]);
        assert!((b.softmax_max - 1.0).abs() < 1e-12);
        assert!(b.entropy < 1e-40);
        assert!((b.margin - 1.0).abs() < 1e-12);
        let b = boundary_from_logits(&[3.0]);
        assert_eq!(b.margin, b.softmax_max);
    }

    #[test]
    fn entropy_matches_high_precision_sum() {
        let mut rng = seeds::rng(8);
        for _ in 0..200 {
            let k = rng.random_range(2..12);
            let z: Vec<f64> = (0..k).map(|_| rng.random_range(-20.0..20.0)).collect();
            // oracle: probabilities via exp of log-softmax, Neumaier-compensated sum
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let (mut sum, mut comp) = (0.0f64, 0.0f64);
            for v in &z {
                let lp = v - lse;
                let term = -lp.exp() * lp;
                let t = sum + term;
                comp += if sum.abs() >= term.abs() { (sum - t) + term } else { (term - t) + sum };
                sum = t;
            }
            let oracle = sum + comp;
            assert!((boundary_from_logits(&z).entropy - oracle).abs() < 1e-10);
        }
    }

    proptest! {
        #[test]
        fn softmax_normalized_and_shift_invariant(z in prop::collection::vec(-50.0f64..50.0, 1..10), c in -100.0f64..100.0) {
            let p = softmax(&z);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
            let a = boundary_from_logits(&z);
            let b = boundary_from_logits(&shifted);
            prop_assert!((a.softmax_max - b.softmax_max).abs() < 1e-6);
            prop_assert!((a.entropy - b.entropy).abs() < 1e-6);
            prop_assert!((a.margin - b.margin).abs() < 1e-6);
        }
    }

    fn blob(center: &[f32], n: usize, class: ClassId, start: u64, rng: &mut seeds::Rng) -> Vec<ReplayEntry> {
        (0..n)
            .map(|i| ReplayEntry {
                id: start + i as u64,
                vector: center
                    .iter()
                    .map(|c| {
                        let z: f64 = StandardNormal.sample(rng);
                        c + 0.3 * z as f32
                    })
                    .collect(),
                class,
            })
            .collect()
    }

    fn small_config() -> ClassifierConfig {
        ClassifierConfig {
            train: TrainConfig {
                hidden: 32,
                max_epochs: 100,
                batch_size: 16,
                ..TrainConfig::default()
            },
            head_init: 1e-3,
        }
    }

    #[test]
    fn separable_task_zero() {
        let mut rng = seeds::rng(4);
        let mut train = blob(&[0.0, 0.0, 0.0], 40, 0, 0, &mut rng);
        train.extend(blob(&[5.0, 5.0, 0.0], 40, 1, 100, &mut rng));
        let mut clf = ContinualClassifier::new(small_config());
        let mut buffer = ReplayBuffer::new(20);
        update_classifier(&mut clf, &train, &mut buffer, 1).unwrap();
        let mut test = blob(&[0.0, 0.0, 0.0], 30, 0, 1000, &mut rng);
        test.extend(blob(&[5.0, 5.0, 0.0], 30, 1, 2000, &mut rng));
        for e in &test {
            assert_eq!(clf.predict(&e.vector).unwrap(), e.class);
        }
        assert_eq!(buffer.per_class().values().copied().collect::<Vec<_>>(), vec![10, 10]);

        // a second task adds class 7 and keeps the old classes
        let new = blob(&[0.0, 5.0, 5.0], 40, 7, 3000, &mut rng);
        let before = clf.logits(&test[0].vector).unwrap();
        let mut extended = clf.clone();
        extended.net.as_mut().unwrap().extend_outputs(1, 1e-3, &mut rng);
        assert_eq!(&extended.logits(&test[0].vector).unwrap()[..2], before.as_slice());
        update_classifier(&mut clf, &new, &mut buffer, 2).unwrap();
        assert_eq!(clf.class_ids, vec![0, 1, 7]);
        let acc = test.iter().filter(|e| clf.predict(&e.vector).unwrap() == e.class).count();
        assert!(acc as f64 / test.len() as f64 > 0.9, "replay kept {acc}/{}", test.len());
        assert!(buffer.len() <= 20);
    }

    #[test]
    fn empty_update_is_rejected() {
        let mut clf = ContinualClassifier::new(small_config());
        let mut buffer = ReplayBuffer::new(4);
        assert!(update_classifier(&mut clf, &[], &mut buffer, 0).is_err());
    }

    #[test]
    fn update_is_seeded() {
        let mut rng = seeds::rng(6);
        let mut train = blob(&[0.0, 1.0], 10, 0, 0, &mut rng);
        train.extend(blob(&[2.0, 1.0], 10, 1, 100, &mut rng));
        let run = || {
            let mut clf = ContinualClassifier::new(small_config());
            let mut buffer = ReplayBuffer::new(8);
            update_classifier(&mut clf, &train, &mut buffer, 9).unwrap();
            (clf, buffer)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn gradient_check_five_samples() {
        let mut rng = seeds::rng(31);
        let net = Mlp::new(4, 6, 3, &mut rng);
        let rows: Vec<Vec<f32>> = (0..5).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let refs: Vec<&[f32]> = rows.iter().map(|r| r.as_slice()).collect();
        let x = batch_matrix(&refs);
        let y = [0, 2, 1, 1, 0];
        let (_, g) = net.loss_and_grad(&x, &y);
        assert!(max_relative_error(&g.flatten(), &numeric_grad(&net, &x, &y, 1e-6)) < 1e-4);
    }
}
