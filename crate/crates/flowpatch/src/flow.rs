//! Straight-path flows: noising, inversion, and denoising.
//!
//! States live on the line `x_t = (1 - t) x_0 + t x_1` with `x_0` the clean
//! image tokens and `x_1` pure noise. A velocity field moves states along
//! that line; inversion integrates from 0 to 1, denoising from 1 to 0.
//!
//! Two integrators are provided. `Euler` evaluates at interval endpoints.
//! `SecondOrder` evaluates at interval midpoints, estimating each midpoint
//! state with the previous midpoint velocity; one bootstrap evaluation at the
//! starting endpoint primes the chain, so a run over `n` intervals costs
//! `n + 1` evaluations. Because interval midpoints are the same numbers in
//! both directions, an inversion and a later denoising evaluate at exactly
//! the same times, which is what makes recorded control activations line up
//! exactly with the steps that reuse them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// ODE integrator choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OdeMethod {
    Euler,
    SecondOrder,
}

/// Uniform time grid over `[0, 1]` with `n` intervals.
#[derive(Debug, Clone)]
pub struct Schedule {
    times: Vec<f64>,
}

impl Schedule {
    pub fn uniform(n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::InvalidConfig("schedule needs at least one step".into()));
        }
        let times = (0..=n_steps).map(|i| i as f64 / n_steps as f64).collect();
        Ok(Self { times })
    }

    pub fn n_intervals(&self) -> usize {
        self.times.len() - 1
    }

    pub fn t(&self, i: usize) -> f64 {
        self.times[i]
    }

    pub fn dt(&self, k: usize) -> f64 {
        self.times[k + 1] - self.times[k]
    }

    /// Midpoint of interval `k`; both integration directions compute this
    /// with the same expression, so the values match bit for bit.
    pub fn midpoint(&self, k: usize) -> f64 {
        self.times[k] + self.dt(k) / 2.0
    }
}

/// Why the field is being evaluated at this point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    /// Extra starting evaluation that primes the second-order chain.
    Bootstrap,
    /// Euler endpoint evaluation.
    Endpoint,
    /// Second-order midpoint evaluation.
    Midpoint,
}

/// One field evaluation request: the time, the schedule interval the step
/// belongs to, and the evaluation kind.
#[derive(Debug, Clone, Copy)]
pub struct StepInfo {
    pub t: f64,
    pub interval: usize,
    pub kind: StepKind,
}

/// A velocity field over patch-token states. Mutable so implementations can
/// count evaluations or record and replay control activations.
pub trait VelocityField {
    fn eval(&mut self, x: &Tensor, step: &StepInfo) -> Result<Tensor>;
}

impl<F> VelocityField for F
where
    F: FnMut(&Tensor, &StepInfo) -> Result<Tensor>,
{
    fn eval(&mut self, x: &Tensor, step: &StepInfo) -> Result<Tensor> {
        self(x, step)
    }
}

/// `x + c * v`, checking shapes.
fn step_add(x: &Tensor, v: &Tensor, c: f64) -> Result<Tensor> {
    if x.shape() != v.shape() {
        return Err(Error::ShapeMismatch(format!(
            "state {:?} and velocity {:?}",
            x.shape(),
            v.shape()
        )));
    }
    let data = x.data().iter().zip(v.data()).map(|(a, b)| a + c * b).collect();
    Tensor::new(x.shape().to_vec(), data)
}

fn check_finite(t: &Tensor, step: usize) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(step))
    }
}

/// Straight-path interpolation `(1 - t) x0 + t x1`.
pub fn lerp_state(x0: &Tensor, x1: &Tensor, t: f64) -> Result<Tensor> {
    if x0.shape() != x1.shape() {
        return Err(Error::ShapeMismatch(format!(
            "endpoints {:?} and {:?}",
            x0.shape(),
            x1.shape()
        )));
    }
    let data = x0
        .data()
        .iter()
        .zip(x1.data())
        .map(|(a, b)| (1.0 - t) * a + t * b)
        .collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// Predicted clean state `x - t v`, the straight-path origin of a state
/// moving with velocity `v`.
pub fn preview_origin(x: &Tensor, v: &Tensor, t: f64) -> Result<Tensor> {
    step_add(x, v, -t)
}

/// Carries the last midpoint velocity across a split denoising run so the
/// second segment continues the chain instead of re-bootstrapping.
#[derive(Debug, Default)]
pub struct Carry {
    v_prev: Option<Tensor>,
}

impl Carry {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Integrate from `t = 0` to `t = 1` (clean state toward noise).
pub fn invert(
    field: &mut impl VelocityField,
    x0: &Tensor,
    schedule: &Schedule,
    method: OdeMethod,
) -> Result<Tensor> {
    check_finite(x0, 0)?;
    let n = schedule.n_intervals();
    let mut x = x0.clone();
    match method {
        OdeMethod::Euler => {
            for k in 0..n {
                let info = StepInfo { t: schedule.t(k), interval: k, kind: StepKind::Endpoint };
                let v = field.eval(&x, &info)?;
                x = step_add(&x, &v, schedule.dt(k))?;
                check_finite(&x, k)?;
            }
        }
        OdeMethod::SecondOrder => {
            let boot = StepInfo { t: schedule.t(0), interval: 0, kind: StepKind::Bootstrap };
            let mut v_prev = field.eval(&x, &boot)?;
            check_finite(&v_prev, 0)?;
            for k in 0..n {
                let dt = schedule.dt(k);
                let x_mid = step_add(&x, &v_prev, dt / 2.0)?;
                let info =
                    StepInfo { t: schedule.midpoint(k), interval: k, kind: StepKind::Midpoint };
                let v_mid = field.eval(&x_mid, &info)?;
                x = step_add(&x, &v_mid, dt)?;
                check_finite(&x, k)?;
                v_prev = v_mid;
            }
        }
    }
    Ok(x)
}

/// Integrate from `t(from)` down to `t(to)`. A fresh [`Carry`] triggers the
/// bootstrap evaluation for the second-order method; passing the carry from
/// an earlier segment continues its midpoint chain.
pub fn denoise_segment(
    field: &mut impl VelocityField,
    x_start: &Tensor,
    schedule: &Schedule,
    method: OdeMethod,
    from: usize,
    to: usize,
    carry: &mut Carry,
) -> Result<Tensor> {
    if from <= to || from > schedule.n_intervals() {
        return Err(Error::InvalidConfig(format!(
            "denoise segment from {from} to {to} on {} intervals",
            schedule.n_intervals()
        )));
    }
    check_finite(x_start, from)?;
    let mut x = x_start.clone();
    match method {
        OdeMethod::Euler => {
            for k in (to..from).rev() {
                // Evaluate at the upper endpoint of interval k and step down.
                let info =
                    StepInfo { t: schedule.t(k + 1), interval: k, kind: StepKind::Endpoint };
                let v = field.eval(&x, &info)?;
                x = step_add(&x, &v, -schedule.dt(k))?;
                check_finite(&x, k)?;
            }
        }
        OdeMethod::SecondOrder => {
            if carry.v_prev.is_none() {
                let boot = StepInfo {
                    t: schedule.t(from),
                    interval: from - 1,
                    kind: StepKind::Bootstrap,
                };
                let v = field.eval(&x, &boot)?;
                check_finite(&v, from)?;
                carry.v_prev = Some(v);
            }
            for k in (to..from).rev() {
                let dt = schedule.dt(k);
                let v_prev = carry.v_prev.as_ref().expect("carry primed above");
                let x_mid = step_add(&x, v_prev, -dt / 2.0)?;
                let info =
                    StepInfo { t: schedule.midpoint(k), interval: k, kind: StepKind::Midpoint };
                let v_mid = field.eval(&x_mid, &info)?;
                x = step_add(&x, &v_mid, -dt)?;
                check_finite(&x, k)?;
                carry.v_prev = Some(v_mid);
            }
        }
    }
    Ok(x)
}

/// Integrate from `t = 1` down to `t = 0` (noise toward clean state).
pub fn denoise(
    field: &mut impl VelocityField,
    x1: &Tensor,
    schedule: &Schedule,
    method: OdeMethod,
) -> Result<Tensor> {
    denoise_segment(
        field,
        x1,
        schedule,
        method,
        schedule.n_intervals(),
        0,
        &mut Carry::new(),
    )
}
