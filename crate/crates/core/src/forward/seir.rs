//! SEIR epidemic model with a smooth change of transmission and death
//! rates around `τ`.

use crate::{Error, Result};

/// How the time-varying rates interpolate between their initial and final
/// values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RateTransition {
    /// `x₁ + (1 + tanh(7(t−τ)))/2 · (x₂ − x₁)`: moves from `x₁` to `x₂`.
    Smooth,
    /// `x₁ + tanh(7(t−τ))/2 · (x₂ − x₁)`: centred on `x₁`, can go negative.
    Printed,
}

impl RateTransition {
    pub fn name(self) -> &'static str {
        match self {
            RateTransition::Smooth => "smooth",
            RateTransition::Printed => "printed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "smooth" => Some(RateTransition::Smooth),
            "printed" => Some(RateTransition::Printed),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeirConstants {
    pub tau: f64,
    pub t_end: f64,
    /// `(S, E, I, R)` at `t = 0`.
    pub initial: [f64; 4],
    pub dt: f64,
    pub transition: RateTransition,
}

impl Default for SeirConstants {
    fn default() -> Self {
        Self {
            tau: 2.1,
            t_end: 4.0,
            initial: [99.0, 1.0, 0.0, 0.0],
            dt: 1.0 / 256.0,
            transition: RateTransition::Smooth,
        }
    }
}

/// Parameter order: `[β₁, α, γʳ, γᵈ₁, β₂, γᵈ₂]`.
pub const SEIR_DIM: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeirRates {
    pub beta: f64,
    pub gamma: f64,
    pub gamma_d: f64,
}

pub fn seir_rates(c: &SeirConstants, t: f64, m: &[f64]) -> SeirRates {
    let th = (7.0 * (t - c.tau)).tanh();
    let w = match c.transition {
        RateTransition::Smooth => 0.5 * (1.0 + th),
        RateTransition::Printed => 0.5 * th,
    };
    let (beta1, gamma_r, gamma_d1, beta2, gamma_d2) = (m[0], m[2], m[3], m[4], m[5]);
    let beta = beta1 + w * (beta2 - beta1);
    let gamma_d = gamma_d1 + w * (gamma_d2 - gamma_d1);
    SeirRates {
        beta,
        gamma: gamma_r + gamma_d,
        gamma_d,
    }
}

fn rhs(c: &SeirConstants, t: f64, m: &[f64], y: &[f64; 4]) -> [f64; 4] {
    let r = seir_rates(c, t, m);
    let alpha = m[1];
    let [s, e, i, _] = *y;
    let infection = r.beta * s * i;
    [
        -infection,
        infection - alpha * e,
        alpha * e - r.gamma * i,
        r.gamma * i,
    ]
}

/// Time derivative of the state at `(t, y)`.
pub fn seir_derivative(c: &SeirConstants, t: f64, m: &[f64], y: &[f64; 4]) -> [f64; 4] {
    rhs(c, t, m, y)
}

/// States on the uniform RK4 step grid `t_k = k·dt`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeirTrajectory {
    pub dt: f64,
    pub states: Vec<[f64; 4]>,
}

impl SeirTrajectory {
    pub fn t_end(&self) -> f64 {
        self.dt * (self.states.len() - 1) as f64
    }

    /// State at `t`, linear between solver steps.
    pub fn at(&self, t: f64) -> [f64; 4] {
        let last = self.states.len() - 1;
        let pos = (t / self.dt).clamp(0.0, last as f64);
        let k = (pos.floor() as usize).min(last.saturating_sub(1));
        let w = pos - k as f64;
        if last == 0 {
            return self.states[0];
        }
        let (a, b) = (&self.states[k], &self.states[k + 1]);
        std::array::from_fn(|c| a[c] + w * (b[c] - a[c]))
    }

    /// All four compartments at `n` equally spaced times over `[0, t_end]`,
    /// flattened time-major.
    pub fn on_grid(&self, n: usize) -> Vec<f64> {
        let t_end = self.t_end();
        (0..n)
            .flat_map(|k| {
                let t = if n == 1 { 0.0 } else { t_end * k as f64 / (n - 1) as f64 };
                self.at(t)
            })
            .collect()
    }
}

/// Classical RK4 with fixed step `c.dt` over `[0, c.t_end]`.
pub fn seir_solve(c: &SeirConstants, m: &[f64]) -> Result<SeirTrajectory> {
    if m.len() != SEIR_DIM {
        return Err(crate::error::invalid(format!(
            "SEIR expects {SEIR_DIM} parameters, got {}",
            m.len()
        )));
    }
    let steps = (c.t_end / c.dt).round() as usize;
    let h = c.dt;
    let mut states = Vec::with_capacity(steps + 1);
    let mut y = c.initial;
    states.push(y);
    for k in 0..steps {
        let t = k as f64 * h;
        let k1 = rhs(c, t, m, &y);
        let y2 = std::array::from_fn(|i| y[i] + 0.5 * h * k1[i]);
        let k2 = rhs(c, t + 0.5 * h, m, &y2);
        let y3 = std::array::from_fn(|i| y[i] + 0.5 * h * k2[i]);
        let k3 = rhs(c, t + 0.5 * h, m, &y3);
        let y4 = std::array::from_fn(|i| y[i] + h * k3[i]);
        let k4 = rhs(c, t + h, m, &y4);
        y = std::array::from_fn(|i| y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]));
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::SeirNonFinite {
                t: t + h,
                m: m.to_vec(),
            });
        }
        states.push(y);
    }
    Ok(SeirTrajectory { dt: h, states })
}

/// `(I, R)` rows at the measurement `times`, plus `noise` (one value per
/// entry, row-major), flattened.
pub fn seir_observe(
    c: &SeirConstants,
    trajectory: &SeirTrajectory,
    times: &[f64],
    noise: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(2 * times.len());
    for &t in times {
        if !(1.0..=3.0).contains(&t) || t > c.t_end {
            return Err(crate::error::invalid(format!(
                "SEIR observation time {t} outside [1, 3]"
            )));
        }
        let s = trajectory.at(t);
        out.push(s[2]);
        out.push(s[3]);
    }
    if let Some(eta) = noise {
        if eta.len() != out.len() {
            return Err(crate::error::invalid("SEIR noise length mismatch"));
        }
        for (o, n) in out.iter_mut().zip(eta) {
            *o += n;
        }
    }
    Ok(out)
}
