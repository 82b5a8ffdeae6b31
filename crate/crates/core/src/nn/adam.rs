use serde::{Deserialize, Serialize};

use super::DenoiserParams;
use crate::error::{Error, Result};

/// Bias-corrected Adam moments for a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    #[serde(skip)]
    pub m: Vec<f32>,
    #[serde(skip)]
    pub v: Vec<f32>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(num_params: usize) -> Self {
        AdamState {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub fn adam_step(params: &mut DenoiserParams, grads: &[f32], state: &mut AdamState, lr: f64) -> Result<()> {
    let len = params.values.len();
    if grads.len() != len || state.m.len() != len || state.v.len() != len {
        return Err(Error::Shape(format!(
            "{len} parameters, {} gradients, {}/{} moments",
            grads.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for i in 0..len {
        let g = grads[i] as f64;
        let m = b1 * state.m[i] as f64 + (1.0 - b1) * g;
        let v = b2 * state.v[i] as f64 + (1.0 - b2) * g * g;
        state.m[i] = m as f32;
        state.v[i] = v as f32;
        let update = lr * (m / c1) / ((v / c2).sqrt() + state.eps);
        params.values[i] = (params.values[i] as f64 - update) as f32;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, ArchConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params() -> DenoiserParams {
        let arch = ArchConfig {
            base_channels: 4,
            level_multipliers: vec![1, 2],
            time_embed_dim: 4,
            groups: 2,
        };
        init_params(&arch, 8, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = params();
        let before = p.clone();
        let mut st = AdamState::new(p.num_params());
        let g = vec![0.0; p.num_params()];
        for _ in 0..3 {
            adam_step(&mut p, &g, &mut st, 1e-3).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = params();
        p.values.fill(0.0);
        let mut st = AdamState::new(p.num_params());
        let g: Vec<f32> = (0..p.num_params())
            .map(|i| if i % 2 == 0 { 0.37 } else { -2.5e-3 })
            .collect();
        let lr = 1e-3;
        adam_step(&mut p, &g, &mut st, lr).unwrap();
        for (w, gi) in p.values.iter().zip(&g) {
            let dw = *w as f64;
            assert_eq!(dw.signum(), -(*gi as f64).signum());
            // upper bound allows for the f32 rounding of the stored weight
            assert!(dw.abs() >= 0.999 * lr && dw.abs() <= lr * (1.0 + 1e-6), "{dw}");
        }
    }

    #[test]
    fn identical_streams_stay_identical() {
        let mut a = params();
        let mut b = params();
        let mut sa = AdamState::new(a.num_params());
        let mut sb = AdamState::new(b.num_params());
        for k in 0..5 {
            let g: Vec<f32> = (0..a.num_params()).map(|i| ((i + k) as f32 * 0.1).sin()).collect();
            adam_step(&mut a, &g, &mut sa, 1e-3).unwrap();
            adam_step(&mut b, &g, &mut sb, 1e-3).unwrap();
        }
        assert_eq!(a, b);
        assert_eq!(sa, sb);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = params();
        let mut st = AdamState::new(p.num_params());
        assert!(adam_step(&mut p, &[0.0; 3], &mut st, 1e-3).is_err());
    }
}
