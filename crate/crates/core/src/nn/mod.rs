//! The learnable noise predictor `eps_theta(x_t, t, c)`, its reverse-mode
//! gradients, and the Adam optimizer.
//!
//! Input channel 0 carries `x_t` (data mapped to `[-1, 1]`), channel 1 the
//! zero-filled normalized observations, or the learned unconditional label
//! when conditioning is dropped.

mod adam;
pub mod checkpoint;
pub mod ops;
pub mod real;
mod unet;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub use adam::{adam_step, AdamState};
pub use checkpoint::Checkpoint;
pub use real::Real;
pub use unet::{ArchConfig, ParamBlock, ParamLayout, Tape, UNet};

use crate::dataset::Batch;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::observation::ConditioningVector;

pub const DEFAULT_P_DROP: f64 = 0.1;

/// All network weights in one flat vector, plus the structure that indexes it.
#[derive(Debug, Clone)]
pub struct DenoiserParams<T: Real = f32> {
    pub arch: ArchConfig,
    pub values: Vec<T>,
    net: UNet,
}

impl<T: Real> PartialEq for DenoiserParams<T> {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.net.n() == other.net.n() && self.values == other.values
    }
}

pub fn init_params<R: Rng + ?Sized>(arch: &ArchConfig, n: usize, rng: &mut R) -> Result<DenoiserParams> {
    let net = UNet::new(arch, n)?;
    let values = net.init(|| StandardNormal.sample(rng));
    Ok(DenoiserParams {
        arch: arch.clone(),
        values,
        net,
    })
}

impl<T: Real> DenoiserParams<T> {
    pub fn from_values(arch: &ArchConfig, n: usize, values: Vec<T>) -> Result<Self> {
        let net = UNet::new(arch, n)?;
        if values.len() != net.num_params() {
            return Err(Error::Shape(format!(
                "architecture needs {} parameters, got {}",
                net.num_params(),
                values.len()
            )));
        }
        Ok(DenoiserParams {
            arch: arch.clone(),
            values,
            net,
        })
    }

    pub fn n(&self) -> usize {
        self.net.n()
    }

    pub fn net(&self) -> &UNet {
        &self.net
    }

    pub fn layout(&self) -> &ParamLayout {
        self.net.layout()
    }

    pub fn num_params(&self) -> usize {
        self.values.len()
    }

    pub fn uncond_label(&self) -> &[T] {
        &self.values[self.net.uncond_range()]
    }

    pub fn cast<U: Real>(&self) -> DenoiserParams<U> {
        DenoiserParams {
            arch: self.arch.clone(),
            values: self.values.iter().map(|v| U::lit(v.f64())).collect(),
            net: self.net.clone(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Batched noise prediction, rows laid out `[sample, grid]`.
    pub fn predict_noise_batch(&self, x_t: &[T], ts: &[usize], cond: &[T], use_cond: &[bool]) -> Result<Vec<T>> {
        let (eps, _) = self.net.forward(&self.values, x_t, ts, cond, use_cond, false)?;
        Ok(eps)
    }
}

/// Single-sample noise prediction. `use_cond = false` is the unconditional branch.
pub fn predict_noise<T: Real>(
    params: &DenoiserParams<T>,
    x_t: &[f64],
    t: usize,
    cond: &ConditioningVector,
    use_cond: bool,
) -> Result<Vec<f64>> {
    if cond.len() != params.n() {
        return Err(Error::Shape(format!(
            "condition length {} for grid of {}",
            cond.len(),
            params.n()
        )));
    }
    let x: Vec<T> = x_t.iter().map(|&v| T::lit(v)).collect();
    let c: Vec<T> = cond.padded.iter().map(|&v| T::lit(v)).collect();
    let eps = params.predict_noise_batch(&x, &[t], &c, &[use_cond])?;
    Ok(eps.iter().map(|v| v.f64()).collect())
}

/// Maps normalized `[0, 1]` data onto the `[-1, 1]` diffusion scale.
#[inline]
pub fn to_diffusion_scale(v: f64) -> f64 {
    2.0 * v - 1.0
}

#[inline]
pub fn from_diffusion_scale(v: f64) -> f64 {
    0.5 * (v + 1.0)
}

struct Corrupted<T> {
    ts: Vec<usize>,
    use_cond: Vec<bool>,
    x_t: Vec<T>,
    eps: Vec<T>,
    cond: Vec<T>,
}

/// Per sample, in this order: `t ~ U{1..T}`, a drop decision with probability
/// `p_drop`, then `n` standard normal noise values. The same RNG state
/// therefore yields the same corruption in `f32` and `f64`.
fn corrupt<T: Real, R: Rng + ?Sized>(
    n: usize,
    batch: &Batch,
    sched: &NoiseSchedule,
    rng: &mut R,
    p_drop: f64,
) -> Result<Corrupted<T>> {
    if !(0.0..=1.0).contains(&p_drop) {
        return Err(Error::Config(format!("p_drop must be in [0, 1], got {p_drop}")));
    }
    if batch.n != n {
        return Err(Error::Shape(format!("batch grid {} vs network grid {n}", batch.n)));
    }
    let bsz = batch.len();
    let mut c = Corrupted {
        ts: Vec::with_capacity(bsz),
        use_cond: Vec::with_capacity(bsz),
        x_t: Vec::with_capacity(bsz * n),
        eps: Vec::with_capacity(bsz * n),
        cond: batch.conditions.iter().map(|&v| T::lit(v as f64)).collect(),
    };
    for b in 0..bsz {
        let t = rng.random_range(1..=sched.timesteps());
        let drop = rng.random::<f64>() < p_drop;
        let (sa, sb) = sched.signal_noise(t);
        for &s in &batch.states[b * n..(b + 1) * n] {
            let e: f64 = StandardNormal.sample(rng);
            c.x_t.push(T::lit(sa * to_diffusion_scale(s as f64) + sb * e));
            c.eps.push(T::lit(e));
        }
        c.ts.push(t);
        c.use_cond.push(!drop);
    }
    Ok(c)
}

/// Noise-prediction loss (mean squared error over batch and grid) and its
/// gradient with respect to every parameter.
pub fn loss_and_grads<T: Real, R: Rng + ?Sized>(
    params: &DenoiserParams<T>,
    batch: &Batch,
    sched: &NoiseSchedule,
    rng: &mut R,
    p_drop: f64,
) -> Result<(T, Vec<T>)> {
    let c = corrupt::<T, R>(params.n(), batch, sched, rng, p_drop)?;
    let (pred, tape) = params
        .net
        .forward(&params.values, &c.x_t, &c.ts, &c.cond, &c.use_cond, true)?;
    let count = T::lit(pred.len() as f64);
    let two = T::lit(2.0);
    let mut loss = T::zero();
    let mut d_eps = Vec::with_capacity(pred.len());
    for (&p, &e) in pred.iter().zip(&c.eps) {
        let r = p - e;
        loss += r * r;
        d_eps.push(two * r / count);
    }
    loss = loss / count;
    if !loss.is_finite() {
        return Err(Error::TrainingDiverged { step: 0 });
    }
    let mut grads = vec![T::zero(); params.num_params()];
    params.net.backward(
        &params.values,
        tape.expect("tape kept"),
        &d_eps,
        &c.use_cond,
        &mut grads,
    );
    Ok((loss, grads))
}

/// Forward-only version of [`loss_and_grads`] for monitoring.
pub fn eval_loss<T: Real, R: Rng + ?Sized>(
    params: &DenoiserParams<T>,
    batch: &Batch,
    sched: &NoiseSchedule,
    rng: &mut R,
    p_drop: f64,
) -> Result<f64> {
    let c = corrupt::<T, R>(params.n(), batch, sched, rng, p_drop)?;
    let pred = params.predict_noise_batch(&c.x_t, &c.ts, &c.cond, &c.use_cond)?;
    let sum: f64 = pred
        .iter()
        .zip(&c.eps)
        .map(|(&p, &e)| (p.f64() - e.f64()).powi(2))
        .sum();
    Ok(sum / pred.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_dataset, sample_batch};
    use crate::lorenz96::{ModelConfig, StateVector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_arch() -> ArchConfig {
        ArchConfig {
            base_channels: 4,
            level_multipliers: vec![1, 2, 4],
            time_embed_dim: 8,
            groups: 2,
        }
    }

    #[test]
    fn init_is_seeded_and_sized() {
        let a = init_params(&ArchConfig::default(), 40, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = init_params(&ArchConfig::default(), 40, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.num_params(), b.net().num_params());
        assert!(a.uncond_label().iter().all(|&v| v == 0.0));
        let c = init_params(&ArchConfig::default(), 40, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_indivisible_grid() {
        let err = init_params(&ArchConfig::default(), 42, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn layout_blocks_are_contiguous() {
        let p = init_params(&ArchConfig::default(), 40, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut off = 0;
        for blk in &p.layout().blocks {
            assert_eq!(blk.offset, off, "{}", blk.name);
            assert_eq!(blk.len, blk.shape.iter().product::<usize>());
            off += blk.len;
        }
        assert_eq!(off, p.num_params());
    }

    #[test]
    fn fresh_network_output_is_small() {
        let p = init_params(&ArchConfig::default(), 40, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let cond = ConditioningVector {
            padded: vec![0.0; 40],
            mask: vec![false; 40],
        };
        for t in [1, 500, 1000] {
            for use_cond in [true, false] {
                let eps = predict_noise(&p, &[0.0; 40], t, &cond, use_cond).unwrap();
                assert_eq!(eps.len(), 40);
                assert!(eps.iter().all(|v| v.abs() < 10.0));
            }
        }
    }

    #[test]
    fn prediction_is_deterministic_and_shift_equivariant() {
        let p = init_params(&ArchConfig::default(), 40, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x: Vec<f64> = (0..40).map(|_| StandardNormal.sample(&mut rng)).collect();
        let cond = ConditioningVector {
            padded: (0..40)
                .map(|i| if i % 2 == 0 { rng.random::<f64>() } else { 0.0 })
                .collect(),
            mask: (0..40).map(|i| i % 2 == 0).collect(),
        };
        let a = predict_noise(&p, &x, 321, &cond, true).unwrap();
        let b = predict_noise(&p, &x, 321, &cond, true).unwrap();
        assert_eq!(a, b);

        let xs = StateVector(x.clone()).shifted(8).0;
        let shifted = predict_noise(&p, &xs, 321, &cond.shifted(8), true).unwrap();
        let expect = StateVector(a).shifted(8).0;
        for (u, v) in shifted.iter().zip(&expect) {
            assert!((u - v).abs() <= 1e-5, "{u} vs {v}");
        }
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let p = init_params(&tiny_arch(), 8, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let cond = ConditioningVector {
            padded: vec![0.0; 8],
            mask: vec![false; 8],
        };
        let mut x = vec![0.0; 8];
        x[3] = f64::NAN;
        assert!(predict_noise(&p, &x, 1, &cond, true).is_err());
    }

    #[test]
    fn fully_dropped_conditioning_ignores_condition_values() {
        let sched = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let p = init_params(&tiny_arch(), 8, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let cfg = ModelConfig::new(8.0, 0.05, 8).unwrap();
        let ds = build_dataset(1, 20, &cfg, 1, 1.0, 4).unwrap();
        let batch = sample_batch(&ds, 4, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let mut other = batch.clone();
        for v in &mut other.conditions {
            *v = 0.5 - *v;
        }
        let (la, ga) = loss_and_grads(&p, &batch, &sched, &mut ChaCha8Rng::seed_from_u64(6), 1.0).unwrap();
        let (lb, gb) = loss_and_grads(&p, &other, &sched, &mut ChaCha8Rng::seed_from_u64(6), 1.0).unwrap();
        assert_eq!(la, lb);
        assert_eq!(ga, gb);
        // the label only gets gradient when it is actually used
        let (_, g0) = loss_and_grads(&p, &batch, &sched, &mut ChaCha8Rng::seed_from_u64(6), 0.0).unwrap();
        assert!(g0[p.net().uncond_range()].iter().all(|&v| v == 0.0));
        assert!(ga[p.net().uncond_range()].iter().any(|&v| v != 0.0));
    }
}
