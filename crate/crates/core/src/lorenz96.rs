//! Lorenz96 dynamics on a periodic ring.
//!
//! ```text
//! du_i/dt = (u_{i+1} - u_{i-2}) u_{i-1} - u_i + F
//! ```
//!
//! Arrays are 0-based; the ring closes with `u[-1] = u[n-1]`, `u[-2] = u[n-2]`
//! and `u[n] = u[0]`. Time integration is classical fourth-order Runge-Kutta.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_N: usize = 40;
pub const DEFAULT_DT: f64 = 0.05;
pub const DEFAULT_SPINUP: usize = 1000;

/// State of the ring: one value per grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateVector(pub Vec<f64>);

impl StateVector {
    pub fn new(u: Vec<f64>) -> Result<Self> {
        let s = StateVector(u);
        s.validate()?;
        Ok(s)
    }

    pub fn constant(n: usize, value: f64) -> Self {
        StateVector(vec![value; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    fn validate(&self) -> Result<()> {
        if self.0.len() < 4 {
            return Err(Error::GridTooSmall(self.0.len()));
        }
        if !self.is_finite() {
            return Err(Error::InvalidState("non-finite entry".into()));
        }
        Ok(())
    }

    /// Cyclic shift: `out[(i + k) % n] = u[i]`.
    pub fn shifted(&self, k: usize) -> Self {
        let n = self.len();
        let mut out = vec![0.0; n];
        for (i, &v) in self.0.iter().enumerate() {
            out[(i + k) % n] = v;
        }
        StateVector(out)
    }
}

impl std::ops::Index<usize> for StateVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub forcing_f: f64,
    pub dt: f64,
    pub n: usize,
}

impl ModelConfig {
    pub fn new(forcing_f: f64, dt: f64, n: usize) -> Result<Self> {
        let cfg = ModelConfig { forcing_f, dt, n };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_forcing(forcing_f: f64) -> Self {
        ModelConfig {
            forcing_f,
            dt: DEFAULT_DT,
            n: DEFAULT_N,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if self.n < 4 {
            return Err(Error::GridTooSmall(self.n));
        }
        if !self.forcing_f.is_finite() {
            return Err(Error::Config("forcing must be finite".into()));
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::with_forcing(8.0)
    }
}

#[inline]
fn tendency_into(u: &[f64], forcing_f: f64, out: &mut [f64]) {
    let n = u.len();
    for i in 0..n {
        let ip1 = if i + 1 == n { 0 } else { i + 1 };
        let im1 = if i == 0 { n - 1 } else { i - 1 };
        let im2 = if i < 2 { n + i - 2 } else { i - 2 };
        out[i] = (u[ip1] - u[im2]) * u[im1] - u[i] + forcing_f;
    }
}

/// Time derivative of the state under forcing `forcing_f`.
pub fn tendency(state: &StateVector, forcing_f: f64) -> Result<StateVector> {
    state.validate()?;
    if !forcing_f.is_finite() {
        return Err(Error::InvalidState("non-finite forcing".into()));
    }
    let mut out = vec![0.0; state.len()];
    tendency_into(&state.0, forcing_f, &mut out);
    Ok(StateVector(out))
}

/// Reusable stage buffers for RK4 so long runs do not allocate per step.
#[derive(Debug, Clone)]
pub struct Rk4Workspace {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4Workspace {
    pub fn new(n: usize) -> Self {
        Rk4Workspace {
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            k4: vec![0.0; n],
            tmp: vec![0.0; n],
        }
    }

    /// Advances `u` in place by one step. Returns false if the result is not finite.
    pub fn step(&mut self, u: &mut [f64], forcing_f: f64, dt: f64) -> bool {
        let n = u.len();
        if self.k1.len() != n {
            *self = Rk4Workspace::new(n);
        }
        let half = 0.5 * dt;
        tendency_into(u, forcing_f, &mut self.k1);
        for i in 0..n {
            self.tmp[i] = u[i] + half * self.k1[i];
        }
        tendency_into(&self.tmp, forcing_f, &mut self.k2);
        for i in 0..n {
            self.tmp[i] = u[i] + half * self.k2[i];
        }
        tendency_into(&self.tmp, forcing_f, &mut self.k3);
        for i in 0..n {
            self.tmp[i] = u[i] + dt * self.k3[i];
        }
        tendency_into(&self.tmp, forcing_f, &mut self.k4);
        let sixth = dt / 6.0;
        let mut finite = true;
        for i in 0..n {
            u[i] += sixth * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
            finite &= u[i].is_finite();
        }
        finite
    }
}

pub fn rk4_step(state: &StateVector, cfg: &ModelConfig) -> Result<StateVector> {
    state.validate()?;
    cfg.validate()?;
    let mut u = state.0.clone();
    let mut ws = Rk4Workspace::new(u.len());
    if !ws.step(&mut u, cfg.forcing_f, cfg.dt) {
        return Err(Error::BlowUp { step: 0 });
    }
    Ok(StateVector(u))
}

/// Integrates `spinup_steps` discarded steps, then records `n_steps` states.
///
/// The recorded trajectory starts with the state one step after the spinup,
/// so `simulate(x, cfg, k, 0)[0] == rk4_step(x)`.
pub fn simulate(
    initial: &StateVector,
    cfg: &ModelConfig,
    n_steps: usize,
    spinup_steps: usize,
) -> Result<Vec<StateVector>> {
    initial.validate()?;
    cfg.validate()?;
    let mut u = initial.0.clone();
    let mut ws = Rk4Workspace::new(u.len());
    for step in 0..spinup_steps {
        if !ws.step(&mut u, cfg.forcing_f, cfg.dt) {
            return Err(Error::BlowUp { step });
        }
    }
    let mut traj = Vec::with_capacity(n_steps);
    for k in 0..n_steps {
        if !ws.step(&mut u, cfg.forcing_f, cfg.dt) {
            return Err(Error::BlowUp { step: spinup_steps + k });
        }
        traj.push(StateVector(u.clone()));
    }
    Ok(traj)
}

/// Rest state `u_i = F` with a Gaussian kick (std 0.01) on component 0.
pub fn perturbed_equilibrium<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> StateVector {
    let mut u = vec![cfg.forcing_f; cfg.n];
    let kick = Normal::new(0.0, 0.01).expect("valid std");
    u[0] += kick.sample(rng);
    StateVector(u)
}

/// A state on the attractor: perturbed equilibrium followed by `spinup_steps` of integration.
pub fn attractor_state<R: Rng + ?Sized>(cfg: &ModelConfig, spinup_steps: usize, rng: &mut R) -> Result<StateVector> {
    let init = perturbed_equilibrium(cfg, rng);
    if spinup_steps == 0 {
        return Ok(init);
    }
    let mut traj = simulate(&init, cfg, 1, spinup_steps - 1)?;
    Ok(traj.pop().expect("one recorded state"))
}
