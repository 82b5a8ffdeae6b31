//! Mock observations of a Nature state and the conditioning vectors built from them.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::Normalizer;
use crate::error::{Error, Result};
use crate::lorenz96::StateVector;

/// Noisy values at every `interval_p`-th grid point, starting at index 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub values: Vec<f64>,
    pub indices: Vec<usize>,
    pub interval_p: usize,
    pub noise_std_e: f64,
}

impl Observation {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Observed indices for a ring of `n` points sampled every `interval_p`.
pub fn observed_indices(interval_p: usize, n: usize) -> Result<Vec<usize>> {
    if interval_p == 0 {
        return Err(Error::Config("observation interval must be at least 1".into()));
    }
    if interval_p > n {
        return Err(Error::NoObservations {
            interval: interval_p,
            n,
        });
    }
    Ok((0..n).step_by(interval_p).collect())
}

pub fn observe<R: Rng + ?Sized>(
    state: &StateVector,
    interval_p: usize,
    noise_std_e: f64,
    rng: &mut R,
) -> Result<Observation> {
    if !(noise_std_e >= 0.0 && noise_std_e.is_finite()) {
        return Err(Error::Config(format!(
            "noise std must be non-negative, got {noise_std_e}"
        )));
    }
    if !state.is_finite() {
        return Err(Error::InvalidState("non-finite entry".into()));
    }
    let indices = observed_indices(interval_p, state.len())?;
    let noise = Normal::new(0.0, noise_std_e).expect("checked std");
    let values = indices.iter().map(|&i| state[i] + noise.sample(rng)).collect();
    Ok(Observation {
        values,
        indices,
        interval_p,
        noise_std_e,
    })
}

/// Zero-filled, normalized observation field plus the observed-slot mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditioningVector {
    pub padded: Vec<f64>,
    pub mask: Vec<bool>,
}

impl ConditioningVector {
    pub fn len(&self) -> usize {
        self.padded.len()
    }

    pub fn is_empty(&self) -> bool {
        self.padded.is_empty()
    }

    /// Observed values recovered in physical units, in ascending index order.
    pub fn observed_values(&self, normalizer: &Normalizer) -> Vec<f64> {
        self.padded
            .iter()
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .map(|(&v, _)| normalizer.denormalize(v))
            .collect()
    }

    pub fn shifted(&self, k: usize) -> Self {
        let n = self.len();
        let mut padded = vec![0.0; n];
        let mut mask = vec![false; n];
        for i in 0..n {
            padded[(i + k) % n] = self.padded[i];
            mask[(i + k) % n] = self.mask[i];
        }
        ConditioningVector { padded, mask }
    }
}

pub fn to_condition(obs: &Observation, n: usize, normalizer: &Normalizer) -> Result<ConditioningVector> {
    if obs.values.len() != obs.indices.len() {
        return Err(Error::Shape(format!(
            "{} values for {} indices",
            obs.values.len(),
            obs.indices.len()
        )));
    }
    let mut padded = vec![0.0; n];
    let mut mask = vec![false; n];
    for (&i, &v) in obs.indices.iter().zip(&obs.values) {
        if i >= n {
            return Err(Error::IndexOutOfRange { index: i, n });
        }
        padded[i] = normalizer.normalize(v);
        mask[i] = true;
    }
    Ok(ConditioningVector { padded, mask })
}

/// Selection matrix `H` (m x n) with a single 1 per row at the observed column.
pub fn obs_operator(interval_p: usize, n: usize) -> Result<DMatrix<f64>> {
    let idx = observed_indices(interval_p, n)?;
    let mut h = DMatrix::zeros(idx.len(), n);
    for (row, &col) in idx.iter().enumerate() {
        h[(row, col)] = 1.0;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(n: usize) -> StateVector {
        StateVector((0..n).map(|i| i as f64 * 0.5 - 3.0).collect())
    }

    #[test]
    fn counts_and_indices() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = ramp(40);
        assert_eq!(observe(&s, 1, 1.0, &mut rng).unwrap().len(), 40);
        let o = observe(&s, 2, 1.0, &mut rng).unwrap();
        assert_eq!(o.indices, (0..40).step_by(2).collect::<Vec<_>>());
        assert_eq!(observe(&s, 3, 1.0, &mut rng).unwrap().len(), 14);
        assert_eq!(observe(&s, 40, 1.0, &mut rng).unwrap().indices, vec![0]);
        assert!(matches!(
            observe(&s, 41, 1.0, &mut rng),
            Err(Error::NoObservations { .. })
        ));
    }

    #[test]
    fn noiseless_observation_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = ramp(40);
        let o = observe(&s, 4, 0.0, &mut rng).unwrap();
        for (&i, &v) in o.indices.iter().zip(&o.values) {
            assert_eq!(v, s[i]);
        }
    }

    #[test]
    fn same_seed_same_observation() {
        let s = ramp(40);
        let a = observe(&s, 1, 1.0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = observe(&s, 1, 1.0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empirical_noise_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = StateVector::constant(4, 2.5);
        let e = 1.0;
        let draws: Vec<f64> = (0..100_000)
            .map(|_| observe(&s, 4, e, &mut rng).unwrap().values[0] - 2.5)
            .collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
        assert!((var.sqrt() - e).abs() < 0.02 * e);
    }

    #[test]
    fn condition_layout() {
        let nrm = Normalizer::new(-10.0, 15.0);
        let s = ramp(40);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dense = to_condition(&observe(&s, 1, 1.0, &mut rng).unwrap(), 40, &nrm).unwrap();
        assert!(dense.mask.iter().all(|&m| m));
        let single = to_condition(&observe(&s, 40, 1.0, &mut rng).unwrap(), 40, &nrm).unwrap();
        assert_eq!(single.mask.iter().filter(|&&m| m).count(), 1);
        assert_eq!(single.padded.iter().filter(|&&v| v == 0.0).count(), 39);

        let o = observe(&s, 3, 1.0, &mut rng).unwrap();
        let c = to_condition(&o, 40, &nrm).unwrap();
        for (i, (&v, &m)) in c.padded.iter().zip(&c.mask).enumerate() {
            if !m {
                assert_eq!(v, 0.0, "slot {i}");
            }
        }
        for (a, b) in c.observed_values(&nrm).iter().zip(&o.values) {
            assert!((a - b).abs() <= 1e-6);
        }
        assert!(matches!(to_condition(&o, 30, &nrm), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn selection_matrix_properties() {
        assert_eq!(obs_operator(1, 40).unwrap(), DMatrix::identity(40, 40));
        let h = obs_operator(2, 4).unwrap();
        assert_eq!(h, DMatrix::from_row_slice(2, 4, &[1., 0., 0., 0., 0., 0., 1., 0.]));
        for p in [1, 2, 3, 4, 7, 8, 40] {
            let h = obs_operator(p, 40).unwrap();
            let m = h.nrows();
            for r in 0..m {
                assert_eq!(h.row(r).sum(), 1.0);
            }
            for c in 0..40 {
                assert!(h.column(c).sum() <= 1.0);
            }
            assert_eq!(&h * h.transpose(), DMatrix::identity(m, m));
            let hu = &h * DVector::from_element(40, 8.0);
            assert!(hu.iter().all(|&v| v == 8.0));
        }
    }
}
