use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{FeatureRecord, FeatureSet};
use crate::error::{Error, Result};
use crate::seeds;

/// Isotropic Gaussian clusters. Class centers are drawn uniformly on the
/// sphere of radius `center_spread`; each record adds per-coordinate
/// Gaussian noise of standard deviation `cluster_spread` to its center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub cluster_spread: f64,
    pub center_spread: f64,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.dim == 0 || self.per_class == 0 {
            return Err(Error::InvalidArgument("synthetic counts must be positive".into()));
        }
        if !(self.cluster_spread >= 0.0 && self.cluster_spread.is_finite()) {
            return Err(Error::InvalidArgument("cluster_spread must be finite and non-negative".into()));
        }
        if !(self.center_spread > 0.0 && self.center_spread.is_finite()) {
            return Err(Error::InvalidArgument("center_spread must be positive".into()));
        }
        Ok(())
    }
}

/// Class `c` gets ids `c * per_class .. (c + 1) * per_class`.
pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<FeatureSet> {
    spec.validate()?;
    let mut center_rng = seeds::stream(seed, "featstore.centers", 0);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(spec.n_classes);
    while centers.len() < spec.n_classes {
        let z: Vec<f64> = (0..spec.dim).map(|_| StandardNormal.sample(&mut center_rng)).collect();
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let center: Vec<f64> = z.iter().map(|v| v / norm * spec.center_spread).collect();
        let distinct = centers
            .iter()
            .all(|c| c.iter().zip(&center).any(|(a, b)| (*a as f32) != (*b as f32)));
        if distinct {
            centers.push(center);
        }
    }

    let mut records = Vec::with_capacity(spec.n_classes * spec.per_class);
    for (class, center) in centers.iter().enumerate() {
        let mut rng = seeds::stream(seed, "featstore.samples", class as u64);
        for i in 0..spec.per_class {
            let vector = center
                .iter()
                .map(|c| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (c + spec.cluster_spread * z) as f32
                })
                .collect();
            records.push(FeatureRecord {
                id: (class * spec.per_class + i) as u64,
                vector,
                true_class: Some(class as i32),
            });
        }
    }
    FeatureSet::new(spec.dim, records)
}

/// The centers `gen_synthetic` uses for `(spec, seed)`, for tests.
pub fn synthetic_centers(spec: &SyntheticSpec, seed: u64) -> Result<Vec<Vec<f32>>> {
    let zero_noise = SyntheticSpec {
        cluster_spread: 0.0,
        per_class: 1,
        ..spec.clone()
    };
    let fs = gen_synthetic(&zero_noise, seed)?;
    Ok(fs.records().iter().map(|r| r.vector.clone()).collect())
}
