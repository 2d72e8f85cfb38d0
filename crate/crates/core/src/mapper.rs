//! The novelty mapper: assigns a novel-class id to any feature vector.
//!
//! Unsupervised runs cluster the confidently novel samples with k-means
//! (k-means++ seeding, Lloyd iterations, optional silhouette-based choice of
//! k). Semi-supervised runs train a one-hidden-layer network on the active
//! and pseudo labels. A mapper that knows a single class is the constant
//! function.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{batch_matrix, Adam, Mlp, Plateau, TrainConfig};
use crate::{seeds, ClassId};

const MAX_LLOYD_ROUNDS: usize = 100;
const LLOYD_TOLERANCE: f64 = 1e-6;

/// Hands out class ids for discovered classes; never repeats an id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassIdAllocator {
    next: ClassId,
}

impl ClassIdAllocator {
    pub fn starting_at(next: ClassId) -> Self {
        Self { next }
    }

    pub fn allocate(&mut self) -> ClassId {
        let id = self.next;
        self.next += 1;
        id
    }

    pub fn peek(&self) -> ClassId {
        self.next
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapperKind {
    Kmeans,
    ShallowNet,
    Constant,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Mapper {
    Kmeans {
        class_ids: Vec<ClassId>,
        centroids: Vec<Vec<f32>>,
    },
    ShallowNet {
        /// Ascending; output row `i` scores `class_ids[i]`.
        class_ids: Vec<ClassId>,
        net: Mlp,
    },
    Constant {
        class_id: ClassId,
    },
}

impl Mapper {
    pub fn kind(&self) -> MapperKind {
        match self {
            Mapper::Kmeans { .. } => MapperKind::Kmeans,
            Mapper::ShallowNet { .. } => MapperKind::ShallowNet,
            Mapper::Constant { .. } => MapperKind::Constant,
        }
    }

    pub fn class_ids(&self) -> Vec<ClassId> {
        match self {
            Mapper::Kmeans { class_ids, .. } | Mapper::ShallowNet { class_ids, .. } => class_ids.clone(),
            Mapper::Constant { class_id } => vec![*class_id],
        }
    }

    pub fn dim(&self) -> Option<usize> {
        match self {
            Mapper::Kmeans { centroids, .. } => centroids.first().map(|c| c.len()),
            Mapper::ShallowNet { net, .. } => Some(net.input_dim()),
            Mapper::Constant { .. } => None,
        }
    }

    /// Nearest centroid or largest logit; ties go to the lowest class id.
    pub fn assign(&self, u: &[f32]) -> Result<ClassId> {
        if let Some(d) = self.dim() {
            if u.len() != d {
                return Err(Error::dim(d, u.len()));
            }
        }
        Ok(match self {
            Mapper::Kmeans { class_ids, centroids } => {
                let mut best = (f64::INFINITY, ClassId::MAX);
                for (c, id) in centroids.iter().zip(class_ids) {
                    let d = sq_dist32(u, c);
                    if d < best.0 || (d == best.0 && *id < best.1) {
                        best = (d, *id);
                    }
                }
                best.1
            }
            Mapper::ShallowNet { class_ids, net } => {
                let z = net.logits(u);
                let mut best = 0;
                for i in 1..z.len() {
                    if z[i] > z[best] {
                        best = i;
                    }
                }
                class_ids[best]
            }
            Mapper::Constant { class_id } => *class_id,
        })
    }

    /// Mapper whose ids are remapped through `f` (used when refitting
    /// k-means while keeping class identities).
    fn with_ids(self, ids: Vec<ClassId>) -> Self {
        match self {
            Mapper::Kmeans { centroids, .. } => Mapper::Kmeans {
                class_ids: ids,
                centroids,
            },
            other => other,
        }
    }
}

fn sq_dist32(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum()
}

fn sq_dist64(a: &[f32], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - y;
            d * d
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KChoice {
    Fixed(usize),
    /// Pick k in `1..=k_max` maximizing the silhouette score.
    Auto { k_max: usize },
}

#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub mapper: Mapper,
    pub k: usize,
    /// Set when fewer (distinct) vectors than the requested k were given.
    pub k_reduced: bool,
    /// Cluster index of every input vector.
    pub assignments: Vec<usize>,
    /// Within-cluster sum of squares after each assignment step.
    pub wcss_history: Vec<f64>,
    /// `(k, silhouette)` for every candidate tried under `KChoice::Auto`.
    pub silhouettes: Vec<(usize, f64)>,
}

struct Lloyd {
    centroids: Vec<Vec<f64>>,
    assignments: Vec<usize>,
    wcss_history: Vec<f64>,
}

fn distinct_count(vectors: &[&[f32]]) -> usize {
    vectors
        .iter()
        .map(|v| v.iter().map(|x| x.to_bits()).collect::<Vec<u32>>())
        .collect::<HashSet<_>>()
        .len()
}

fn kmeans_pp<R: Rng>(vectors: &[&[f32]], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let n = vectors.len();
    let first = rng.random_range(0..n);
    let mut centroids: Vec<Vec<f64>> = vec![vectors[first].iter().map(|x| *x as f64).collect()];
    let mut d2: Vec<f64> = vectors.iter().map(|v| sq_dist64(v, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, w) in d2.iter().enumerate() {
                if target < *w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c: Vec<f64> = vectors[pick].iter().map(|x| *x as f64).collect();
        for (dv, v) in d2.iter_mut().zip(vectors) {
            *dv = dv.min(sq_dist64(v, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn lloyd(vectors: &[&[f32]], mut centroids: Vec<Vec<f64>>) -> Lloyd {
    let n = vectors.len();
    let dim = vectors[0].len();
    let k = centroids.len();
    let mut assignments = vec![0usize; n];
    let mut wcss_history = Vec::new();
    for _ in 0..MAX_LLOYD_ROUNDS {
        let mut wcss = 0.0;
        for (a, v) in assignments.iter_mut().zip(vectors) {
            let mut best = (f64::INFINITY, 0);
            for (j, c) in centroids.iter().enumerate() {
                let d = sq_dist64(v, c);
                if d < best.0 {
                    best = (d, j);
                }
            }
            *a = best.1;
            wcss += best.0;
        }
        wcss_history.push(wcss);

        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (a, v) in assignments.iter().zip(vectors) {
            counts[*a] += 1;
            for (s, x) in sums[*a].iter_mut().zip(v.iter()) {
                *s += *x as f64;
            }
        }
        let mut movement: f64 = 0.0;
        for j in 0..k {
            if counts[j] == 0 {
                continue;
            }
            let new: Vec<f64> = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            movement = movement.max(
                new.iter()
                    .zip(&centroids[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt(),
            );
            centroids[j] = new;
        }
        if movement < LLOYD_TOLERANCE {
            break;
        }
    }
    Lloyd {
        centroids,
        assignments,
        wcss_history,
    }
}

/// Mean silhouette of a clustering; clusters of one point contribute 0.
pub fn silhouette(dist: &[Vec<f64>], assignments: &[usize], k: usize) -> f64 {
    let n = assignments.len();
    if k < 2 || n == 0 {
        return 0.0;
    }
    let mut sizes = vec![0usize; k];
    for a in assignments {
        sizes[*a] += 1;
    }
    let mut total = 0.0;
    for i in 0..n {
        let own = assignments[i];
        if sizes[own] <= 1 {
            continue;
        }
        let mut sums = vec![0.0f64; k];
        for j in 0..n {
            if i != j {
                sums[assignments[j]] += dist[i][j];
            }
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        if !b.is_finite() {
            continue;
        }
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    total / n as f64
}

fn run_kmeans(vectors: &[&[f32]], k: usize, seed: u64) -> Lloyd {
    let mut rng = seeds::rng(seed);
    let init = kmeans_pp(vectors, k, &mut rng);
    lloyd(vectors, init)
}

/// Collapse coinciding centroids (after f32 rounding) and reassign.
fn finalize(vectors: &[&[f32]], fit: Lloyd) -> (Vec<Vec<f32>>, Vec<usize>, Vec<f64>) {
    let mut centroids: Vec<Vec<f32>> = Vec::new();
    for c in &fit.centroids {
        let c32: Vec<f32> = c.iter().map(|x| *x as f32).collect();
        if !centroids.contains(&c32) {
            centroids.push(c32);
        }
    }
    let assignments = vectors
        .iter()
        .map(|v| {
            let mut best = (f64::INFINITY, 0);
            for (j, c) in centroids.iter().enumerate() {
                let d = sq_dist32(v, c);
                if d < best.0 {
                    best = (d, j);
                }
            }
            best.1
        })
        .collect();
    (centroids, assignments, fit.wcss_history)
}

pub fn fit_kmeans(
    vectors: &[&[f32]],
    choice: KChoice,
    seed: u64,
    ids: &mut ClassIdAllocator,
) -> Result<KMeansFit> {
    if vectors.is_empty() {
        return Err(Error::MapperFit("k-means needs at least one vector".into()));
    }
    let dim = vectors[0].len();
    if let Some(v) = vectors.iter().find(|v| v.len() != dim) {
        return Err(Error::dim(dim, v.len()));
    }
    let requested = match choice {
        KChoice::Fixed(k) | KChoice::Auto { k_max: k } => k,
    };
    if requested == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let available = distinct_count(vectors);
    let k_cap = requested.min(available);
    let k_reduced = k_cap < requested;
    if k_reduced {
        log::debug!("k-means: reducing k from {requested} to {k_cap} (distinct vectors)");
    }

    let mut silhouettes = Vec::new();
    let (k, fit) = match choice {
        KChoice::Fixed(_) => (k_cap, run_kmeans(vectors, k_cap, seed)),
        KChoice::Auto { .. } => {
            let dist: Vec<Vec<f64>> = vectors
                .iter()
                .map(|a| vectors.iter().map(|b| sq_dist32(a, b).sqrt()).collect())
                .collect();
            silhouettes.push((1, 0.0));
            let mut best = (1usize, 0.0f64, run_kmeans(vectors, 1, seed));
            for k in 2..=k_cap {
                let fit = run_kmeans(vectors, k, seeds::derive(seed, "kmeans.k", k as u64));
                let s = silhouette(&dist, &fit.assignments, k);
                silhouettes.push((k, s));
                if s > best.1 {
                    best = (k, s, fit);
                }
            }
            (best.0, best.2)
        }
    };
    let (centroids, assignments, wcss_history) = finalize(vectors, fit);
    let k_final = centroids.len();
    let class_ids: Vec<ClassId> = (0..k_final).map(|_| ids.allocate()).collect();
    Ok(KMeansFit {
        mapper: Mapper::Kmeans { class_ids, centroids },
        k: k_final.min(k),
        k_reduced: k_reduced || k_final < k,
        assignments,
        wcss_history,
        silhouettes,
    })
}

/// Lloyd refit of an existing class set: centroids start at the mean of
/// each class's labeled vectors and the mapper keeps the given ids.
/// `labeled` seeds the centroids; `cluster_on` is the set clustered.
pub fn refit_kmeans(labeled: &[(&[f32], ClassId)], cluster_on: &[&[f32]]) -> Result<Mapper> {
    let classes: Vec<ClassId> = labeled.iter().map(|(_, c)| *c).collect::<BTreeSet<_>>().into_iter().collect();
    if classes.is_empty() {
        return Err(Error::MapperFit("refit needs labeled vectors".into()));
    }
    if classes.len() == 1 {
        return Ok(Mapper::Constant { class_id: classes[0] });
    }
    let dim = labeled[0].0.len();
    let init: Vec<Vec<f64>> = classes
        .iter()
        .map(|c| {
            let members: Vec<&[f32]> = labeled.iter().filter(|(_, l)| l == c).map(|(v, _)| *v).collect();
            (0..dim)
                .map(|j| members.iter().map(|v| v[j] as f64).sum::<f64>() / members.len() as f64)
                .collect()
        })
        .collect();
    let data: Vec<&[f32]> = if cluster_on.is_empty() {
        labeled.iter().map(|(v, _)| *v).collect()
    } else {
        cluster_on.to_vec()
    };
    let fit = lloyd(&data, init);
    let centroids: Vec<Vec<f32>> = fit
        .centroids
        .iter()
        .map(|c| c.iter().map(|x| *x as f32).collect())
        .collect();
    Ok(Mapper::Kmeans {
        class_ids: Vec::new(),
        centroids,
    }
    .with_ids(classes))
}

#[derive(Debug, Clone)]
pub struct NetFit {
    pub mapper: Mapper,
    pub train_accuracy: f64,
    pub epochs: usize,
}

/// Train the shallow-network mapper on `(vector, class)` pairs. Every id in
/// `classes` must have at least one sample; with a single class the mapper
/// is constant.
pub fn fit_shallow_net(
    labeled: &[(&[f32], ClassId)],
    classes: &[ClassId],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<NetFit> {
    let mut class_ids: Vec<ClassId> = classes.to_vec();
    class_ids.sort_unstable();
    class_ids.dedup();
    if class_ids.is_empty() {
        return Err(Error::MapperFit("no classes to fit".into()));
    }
    for c in &class_ids {
        if !labeled.iter().any(|(_, l)| l == c) {
            return Err(Error::MapperFit(format!("class {c} has no samples")));
        }
    }
    if let Some((_, c)) = labeled.iter().find(|(_, l)| class_ids.binary_search(l).is_err()) {
        return Err(Error::MapperFit(format!("sample labeled {c} outside the class set")));
    }
    if class_ids.len() == 1 {
        return Ok(NetFit {
            mapper: Mapper::Constant { class_id: class_ids[0] },
            train_accuracy: 1.0,
            epochs: 0,
        });
    }
    let dim = labeled[0].0.len();
    if let Some((v, _)) = labeled.iter().find(|(v, _)| v.len() != dim) {
        return Err(Error::dim(dim, v.len()));
    }

    let mut rng = seeds::rng(seed);
    let mut net = Mlp::new(dim, cfg.hidden, class_ids.len(), &mut rng);
    let targets: Vec<usize> = labeled
        .iter()
        .map(|(_, c)| class_ids.binary_search(c).expect("checked above"))
        .collect();
    let mut adam = Adam::new(cfg.learning_rate, net.params().len());
    let mut plateau = Plateau::new(cfg);
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    let batch = cfg.batch_size.max(1);
    let mut epochs = 0;
    for _ in 0..cfg.max_epochs {
        epochs += 1;
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let rows: Vec<&[f32]> = chunk.iter().map(|&i| labeled[i].0).collect();
            let y: Vec<usize> = chunk.iter().map(|&i| targets[i]).collect();
            let (loss, grads) = net.loss_and_grad(&batch_matrix(&rows), &y);
            adam.step(&mut net, &grads);
            epoch_loss += loss * chunk.len() as f64;
        }
        if plateau.observe(epoch_loss / labeled.len() as f64) {
            break;
        }
    }
    net.round_to_f32();
    let mapper = Mapper::ShallowNet { class_ids, net };
    let correct = labeled
        .iter()
        .filter(|(v, c)| mapper.assign(v).map(|a| a == *c).unwrap_or(false))
        .count();
    Ok(NetFit {
        mapper,
        train_accuracy: correct as f64 / labeled.len() as f64,
        epochs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{max_relative_error, numeric_grad};
    use rand_distr::{Distribution, StandardNormal};

    fn blobs(centers: &[Vec<f32>], per: usize, spread: f64, seed: u64) -> Vec<Vec<f32>> {
        let mut rng = seeds::rng(seed);
        let mut out = Vec::new();
        for c in centers {
            for _ in 0..per {
                out.push(
                    c.iter()
                        .map(|x| x + { let z: f64 = StandardNormal.sample(&mut rng); spread * z } as f32)
                        .collect(),
                );
            }
        }
        out
    }

    fn refs(v: &[Vec<f32>]) -> Vec<&[f32]> {
        v.iter().map(|x| x.as_slice()).collect()
    }

    #[test]
    fn auto_k_finds_two_blobs() {
        let centers = vec![vec![0.0f32, 0.0, 0.0], vec![10.0, 0.0, 0.0]];
        let data = blobs(&centers, 60, 0.3, 1);
        let mut ids = ClassIdAllocator::starting_at(100);
        let fit = fit_kmeans(&refs(&data), KChoice::Auto { k_max: 4 }, 7, &mut ids).unwrap();
        assert_eq!(fit.k, 2);
        let Mapper::Kmeans { centroids, class_ids } = &fit.mapper else {
            panic!("expected k-means mapper")
        };
        assert_eq!(class_ids, &vec![100, 101]);
        for truth in &centers {
            let nearest = centroids
                .iter()
                .map(|c| sq_dist32(c, truth).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(nearest < 0.2, "centroid off by {nearest}");
        }
        assert_eq!(ids.peek(), 102);
    }

    #[test]
    fn k_one_is_the_mean() {
        let data = vec![vec![0.0f32, 2.0], vec![2.0, 4.0], vec![4.0, 0.0]];
        let mut ids = ClassIdAllocator::starting_at(0);
        let fit = fit_kmeans(&refs(&data), KChoice::Fixed(1), 1, &mut ids).unwrap();
        let Mapper::Kmeans { centroids, .. } = fit.mapper else { panic!() };
        assert_eq!(centroids, vec![vec![2.0, 2.0]]);
    }

    #[test]
    fn duplicates_collapse_k() {
        let data = vec![vec![1.0f32, 1.0]; 10];
        let mut ids = ClassIdAllocator::starting_at(0);
        let fit = fit_kmeans(&refs(&data), KChoice::Auto { k_max: 3 }, 1, &mut ids).unwrap();
        assert_eq!(fit.k, 1);
        assert!(fit.k_reduced);
        let fit = fit_kmeans(&refs(&data), KChoice::Fixed(3), 1, &mut ids).unwrap();
        assert_eq!(fit.mapper.class_ids().len(), 1);
    }

    #[test]
    fn wcss_never_increases() {
        let centers = vec![vec![0.0f32; 4], vec![3.0; 4], vec![-3.0, 3.0, 0.0, 1.0]];
        let data = blobs(&centers, 40, 1.5, 4);
        for seed in 0..10 {
            let mut ids = ClassIdAllocator::starting_at(0);
            let fit = fit_kmeans(&refs(&data), KChoice::Fixed(3), seed, &mut ids).unwrap();
            for w in fit.wcss_history.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-12), "{:?}", fit.wcss_history);
            }
        }
    }

    #[test]
    fn kmeans_is_seed_deterministic() {
        let centers = vec![vec![0.0f32; 3], vec![4.0; 3]];
        let data = blobs(&centers, 30, 1.0, 2);
        let a = fit_kmeans(&refs(&data), KChoice::Auto { k_max: 3 }, 5, &mut ClassIdAllocator::starting_at(0)).unwrap();
        let b = fit_kmeans(&refs(&data), KChoice::Auto { k_max: 3 }, 5, &mut ClassIdAllocator::starting_at(0)).unwrap();
        assert_eq!(a.mapper, b.mapper);
        assert_eq!(a.assignments, b.assignments);
    }

    #[test]
    fn assign_ties_and_oracle() {
        let m = Mapper::Kmeans {
            class_ids: vec![9, 4],
            centroids: vec![vec![1.0, 0.0], vec![-1.0, 0.0]],
        };
        assert_eq!(m.assign(&[0.0, 5.0]).unwrap(), 4);
        assert_eq!(m.assign(&[1.0, 0.0]).unwrap(), 9);
        assert!(matches!(m.assign(&[0.0]), Err(Error::Dimension { .. })));

        let mut rng = seeds::rng(12);
        let centroids: Vec<Vec<f32>> = (0..7).map(|_| (0..5).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let ids: Vec<ClassId> = (0..7).map(|i| 30 - i).collect();
        let m = Mapper::Kmeans {
            class_ids: ids.clone(),
            centroids: centroids.clone(),
        };
        for _ in 0..1000 {
            let u: Vec<f32> = (0..5).map(|_| rng.random_range(-4.0..4.0)).collect();
            let mut best = (f64::INFINITY, ClassId::MAX);
            for (c, id) in centroids.iter().zip(&ids) {
                let d: f64 = c.iter().zip(&u).map(|(a, b)| ((*a as f64) - (*b as f64)).powi(2)).sum();
                if d < best.0 || (d == best.0 && *id < best.1) {
                    best = (d, *id);
                }
            }
            assert_eq!(m.assign(&u).unwrap(), best.1);
        }
    }

    #[test]
    fn silhouette_of_separated_pairs() {
        // points 0,1 at x=0, points 2,3 at x=10: a = 0, b = 10 -> 1.0
        let xs = [0.0f64, 0.0, 10.0, 10.0];
        let dist: Vec<Vec<f64>> = xs.iter().map(|a| xs.iter().map(|b| (a - b).abs()).collect()).collect();
        assert!((silhouette(&dist, &[0, 0, 1, 1], 2) - 1.0).abs() < 1e-12);
        assert_eq!(silhouette(&dist, &[0, 0, 0, 0], 1), 0.0);
    }

    #[test]
    fn shallow_net_separates_blobs() {
        let centers = vec![vec![0.0f32; 4], vec![10.0 / 2.0, 10.0 / 2.0, 10.0 / 2.0, 10.0 / 2.0]];
        let data = blobs(&centers, 40, 1.0, 3);
        let labeled: Vec<(&[f32], ClassId)> = data
            .iter()
            .enumerate()
            .map(|(i, v)| (v.as_slice(), if i < 40 { 3 } else { 8 }))
            .collect();
        let fit = fit_shallow_net(&labeled, &[3, 8], &TrainConfig::default(), 1).unwrap();
        assert!(fit.epochs <= 200);
        assert_eq!(fit.train_accuracy, 1.0);
        let again = fit_shallow_net(&labeled, &[3, 8], &TrainConfig::default(), 1).unwrap();
        assert_eq!(fit.mapper, again.mapper);
    }

    #[test]
    fn single_class_is_constant() {
        let v = vec![1.0f32, 2.0];
        let fit = fit_shallow_net(&[(&v, 5)], &[5], &TrainConfig::default(), 0).unwrap();
        assert_eq!(fit.mapper, Mapper::Constant { class_id: 5 });
        assert_eq!(fit.mapper.assign(&[100.0, -3.0]).unwrap(), 5);
    }

    #[test]
    fn empty_class_is_fit_error() {
        let v = vec![1.0f32, 2.0];
        let err = fit_shallow_net(&[(&v, 5)], &[5, 6], &TrainConfig::default(), 0).unwrap_err();
        assert!(matches!(err, Error::MapperFit(_)));
    }

    #[test]
    fn relabeling_permutes_outputs() {
        let centers = vec![vec![0.0f32, 0.0], vec![6.0, 0.0], vec![0.0, 6.0]];
        let data = blobs(&centers, 20, 0.5, 8);
        let label = |i: usize| (i / 20) as ClassId;
        let cfg = TrainConfig {
            hidden: 16,
            batch_size: 8,
            ..TrainConfig::default()
        };

        // order-preserving relabeling: identical network up to ids
        let a: Vec<(&[f32], ClassId)> = data.iter().enumerate().map(|(i, v)| (v.as_slice(), label(i))).collect();
        let b: Vec<(&[f32], ClassId)> = data.iter().enumerate().map(|(i, v)| (v.as_slice(), label(i) + 100)).collect();
        let fa = fit_shallow_net(&a, &[0, 1, 2], &cfg, 4).unwrap();
        let fb = fit_shallow_net(&b, &[100, 101, 102], &cfg, 4).unwrap();
        match (&fa.mapper, &fb.mapper) {
            (Mapper::ShallowNet { net: na, .. }, Mapper::ShallowNet { net: nb, .. }) => assert_eq!(na, nb),
            _ => panic!("expected networks"),
        }

        // arbitrary bijection: predictions follow the bijection
        let perm = [2, 0, 1];
        let c: Vec<(&[f32], ClassId)> = data
            .iter()
            .enumerate()
            .map(|(i, v)| (v.as_slice(), perm[label(i) as usize]))
            .collect();
        let fc = fit_shallow_net(&c, &[0, 1, 2], &cfg, 4).unwrap();
        assert_eq!(fa.train_accuracy, 1.0);
        assert_eq!(fc.train_accuracy, 1.0);
        for v in &data {
            let pa = fa.mapper.assign(v).unwrap();
            assert_eq!(fc.mapper.assign(v).unwrap(), perm[pa as usize]);
        }
    }

    #[test]
    fn mapper_gradient_check() {
        let mut rng = seeds::rng(21);
        let net = Mlp::new(3, 4, 2, &mut rng);
        let rows: Vec<Vec<f32>> = (0..3).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let x = batch_matrix(&refs(&rows));
        let y = [1, 0, 1];
        let (_, g) = net.loss_and_grad(&x, &y);
        assert!(max_relative_error(&g.flatten(), &numeric_grad(&net, &x, &y, 1e-6)) < 1e-4);
    }

    #[test]
    fn refit_keeps_ids() {
        let centers = vec![vec![0.0f32, 0.0], vec![8.0, 8.0]];
        let data = blobs(&centers, 10, 0.5, 6);
        let labeled: Vec<(&[f32], ClassId)> = data
            .iter()
            .enumerate()
            .map(|(i, v)| (v.as_slice(), if i < 10 { 41 } else { 40 }))
            .collect();
        let m = refit_kmeans(&labeled, &[]).unwrap();
        assert_eq!(m.class_ids(), vec![40, 41]);
        assert_eq!(m.assign(&[0.1, 0.0]).unwrap(), 41);
        assert_eq!(m.assign(&[8.0, 7.5]).unwrap(), 40);
    }
}
