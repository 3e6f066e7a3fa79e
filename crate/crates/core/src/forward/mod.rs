//! The three benchmark forward models and their priors.
//!
//! Per-tuple layouts, for `n` observations:
//!
//! | task      | `m`         | `e`                              | `d`                        |
//! |-----------|-------------|----------------------------------|----------------------------|
//! | nonlinear | 1, U[0, 1]  | `n` values in [0, 1]             | `n` values                 |
//! | seir      | 6, U[0, 1]⁶ | `n` sorted times in [1, 3]       | `n` rows `(I, R)`          |
//! | darcy     | 16, N(0, I) | `[e₁, e₂, x₁, y₁, …, xₙ, yₙ]`     | `n` pressures              |

pub mod darcy;
pub mod field;
pub mod kl;
pub mod nonlinear;
pub mod seir;

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub use darcy::{darcy_observe, darcy_solve, DarcyConstants, DarcySolution, Preconditioner};
pub use field::Field2D;
pub use kl::{KlBasis, KlConstants};
pub use nonlinear::nonlinear_forward;
pub use seir::{seir_observe, seir_solve, RateTransition, SeirConstants, SeirTrajectory};

use crate::{error::invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TaskKind {
    Nonlinear,
    Seir,
    Darcy,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Nonlinear, TaskKind::Seir, TaskKind::Darcy];

    pub fn id(self) -> u8 {
        match self {
            TaskKind::Nonlinear => 0,
            TaskKind::Seir => 1,
            TaskKind::Darcy => 2,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.id() == id)
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Nonlinear => "nonlinear",
            TaskKind::Seir => "seir",
            TaskKind::Darcy => "darcy",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }

    pub fn dim_m(self) -> usize {
        match self {
            TaskKind::Nonlinear => 1,
            TaskKind::Seir => seir::SEIR_DIM,
            TaskKind::Darcy => 16,
        }
    }

    pub fn e_len(self, n_obs: usize) -> usize {
        match self {
            TaskKind::Nonlinear | TaskKind::Seir => n_obs,
            TaskKind::Darcy => 2 + 2 * n_obs,
        }
    }

    pub fn d_len(self, n_obs: usize) -> usize {
        match self {
            TaskKind::Nonlinear | TaskKind::Darcy => n_obs,
            TaskKind::Seir => 2 * n_obs,
        }
    }

    /// Width of one observation token's raw features.
    pub fn obs_token_dim(self) -> usize {
        match self {
            TaskKind::Nonlinear => 2,
            TaskKind::Seir | TaskKind::Darcy => 3,
        }
    }

    /// Width of the design token, if the task has one.
    pub fn design_token_dim(self) -> Option<usize> {
        match self {
            TaskKind::Darcy => Some(2),
            _ => None,
        }
    }

    /// Recover `n_obs` from a tuple's `(e, d)` lengths.
    pub fn n_obs(self, e_len: usize, d_len: usize) -> Result<usize> {
        let n = match self {
            TaskKind::Nonlinear | TaskKind::Seir => e_len,
            TaskKind::Darcy => e_len.saturating_sub(2) / 2,
        };
        if n == 0 || self.e_len(n) != e_len || self.d_len(n) != d_len {
            return Err(invalid(format!(
                "{} tuple with {e_len} design and {d_len} observation values is malformed",
                self.name()
            )));
        }
        Ok(n)
    }
}

/// Noise-free forward output plus the standard deviation of the additive
/// Gaussian noise that goes with it.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub values: Vec<f64>,
    pub noise_sigma: f64,
}

/// Network inputs derived from one `(d, e)` pair.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenFeatures {
    /// `n_obs × obs_token_dim`, row-major.
    pub observations: Vec<f64>,
    pub n_obs: usize,
    pub design: Option<Vec<f64>>,
}

/// A forward model together with its parameter and design priors.
#[derive(Clone, Debug)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Nonlinear and SEIR: absolute noise σ. Darcy: σ relative to `max |u|`.
    pub noise: f64,
    pub seir: SeirConstants,
    pub darcy: DarcyConstants,
    kl: Option<Arc<KlBasis>>,
}

pub const DEFAULT_NOISE_NONLINEAR: f64 = 1e-3;
pub const DEFAULT_NOISE_SEIR: f64 = 0.1;
pub const DEFAULT_NOISE_DARCY: f64 = 0.01;

/// Points of the design grid on which the nonlinear model's solution is
/// compared.
pub const NONLINEAR_SOLUTION_POINTS: usize = 101;
/// Time points of the SEIR trajectory used by the solution comparison.
pub const SEIR_SOLUTION_POINTS: usize = 256;

impl TaskSpec {
    pub fn nonlinear() -> Self {
        Self::plain(TaskKind::Nonlinear, DEFAULT_NOISE_NONLINEAR)
    }

    pub fn seir() -> Self {
        Self::plain(TaskKind::Seir, DEFAULT_NOISE_SEIR)
    }

    pub fn darcy(basis: Arc<KlBasis>) -> Self {
        let darcy = DarcyConstants {
            grid: basis.constants.grid,
            ..Default::default()
        };
        Self {
            kl: Some(basis),
            darcy,
            ..Self::plain(TaskKind::Darcy, DEFAULT_NOISE_DARCY)
        }
    }

    fn plain(kind: TaskKind, noise: f64) -> Self {
        Self {
            kind,
            noise,
            seir: SeirConstants::default(),
            darcy: DarcyConstants::default(),
            kl: None,
        }
    }

    pub fn dim_m(&self) -> usize {
        self.kind.dim_m()
    }

    pub fn kl(&self) -> Result<&KlBasis> {
        self.kl
            .as_deref()
            .ok_or_else(|| invalid("darcy task constructed without a KL basis"))
    }

    pub fn sample_prior<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self.kind {
            TaskKind::Nonlinear | TaskKind::Seir => {
                (0..self.dim_m()).map(|_| rng.gen::<f64>()).collect()
            }
            TaskKind::Darcy => (0..self.dim_m())
                .map(|_| StandardNormal.sample(rng))
                .collect(),
        }
    }

    pub fn sample_design<R: Rng + ?Sized>(&self, rng: &mut R, n_obs: usize) -> Vec<f64> {
        match self.kind {
            TaskKind::Nonlinear => (0..n_obs).map(|_| rng.gen::<f64>()).collect(),
            TaskKind::Seir => {
                let mut t: Vec<f64> = (0..n_obs).map(|_| rng.gen_range(1.0..=3.0)).collect();
                t.sort_by(f64::total_cmp);
                t
            }
            TaskKind::Darcy => {
                let h = 1.0 / (self.darcy.grid - 1) as f64;
                let mut e = vec![rng.gen::<f64>(), rng.gen::<f64>()];
                e.extend((0..2 * n_obs).map(|_| rng.gen_range(h..=1.0 - h)));
                e
            }
        }
    }

    /// Log prior density up to a constant; `−∞` outside the support.
    pub fn log_prior(&self, m: &[f64]) -> f64 {
        match self.kind {
            TaskKind::Nonlinear | TaskKind::Seir => {
                if m.iter().all(|v| (0.0..=1.0).contains(v)) {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
            TaskKind::Darcy => -0.5 * m.iter().map(|v| v * v).sum::<f64>(),
        }
    }

    fn check_m(&self, m: &[f64]) -> Result<()> {
        if m.len() != self.dim_m() || m.iter().any(|v| !v.is_finite()) {
            return Err(invalid(format!(
                "{} expects {} finite parameters, got {m:?}",
                self.kind.name(),
                self.dim_m()
            )));
        }
        Ok(())
    }

    pub fn permeability(&self, m: &[f64]) -> Result<Field2D> {
        self.check_m(m)?;
        Ok(self.kl()?.expand(m)?.map(f64::exp))
    }

    /// Pressure field for coefficients `m` and boundary centres `(e₁, e₂)`.
    pub fn pressure(&self, m: &[f64], e1: f64, e2: f64) -> Result<Field2D> {
        let kappa = self.permeability(m)?;
        Ok(darcy_solve(&self.darcy, &kappa, e1, e2)?.u)
    }

    /// Noise-free `F(m, e)` and the noise level for that output.
    pub fn forward(&self, m: &[f64], e: &[f64]) -> Result<Observation> {
        self.check_m(m)?;
        match self.kind {
            TaskKind::Nonlinear => {
                if let Some(bad) = e.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                    return Err(invalid(format!("nonlinear design {bad} outside [0, 1]")));
                }
                Ok(Observation {
                    values: e.iter().map(|&x| nonlinear_forward(m[0], x, 0.0)).collect(),
                    noise_sigma: self.noise,
                })
            }
            TaskKind::Seir => {
                let traj = seir_solve(&self.seir, m)?;
                Ok(Observation {
                    values: seir_observe(&self.seir, &traj, e, None)?,
                    noise_sigma: self.noise,
                })
            }
            TaskKind::Darcy => {
                self.kind.n_obs(e.len(), (e.len().max(2) - 2) / 2)?;
                let u = self.pressure(m, e[0], e[1])?;
                Ok(Observation {
                    values: darcy_observe(&u, &e[2..])?,
                    noise_sigma: self.noise * u.max_abs(),
                })
            }
        }
    }

    /// Full discretized solution used by the solution-space error: `d` on
    /// a uniform design grid (nonlinear), all four SEIR states on a uniform
    /// time grid, or the pressure field (darcy, using `e₁, e₂` from `e`).
    pub fn solution(&self, m: &[f64], e: &[f64]) -> Result<Vec<f64>> {
        self.check_m(m)?;
        match self.kind {
            TaskKind::Nonlinear => {
                let k = NONLINEAR_SOLUTION_POINTS;
                Ok((0..k)
                    .map(|i| nonlinear_forward(m[0], i as f64 / (k - 1) as f64, 0.0))
                    .collect())
            }
            TaskKind::Seir => Ok(seir_solve(&self.seir, m)?.on_grid(SEIR_SOLUTION_POINTS)),
            TaskKind::Darcy => {
                if e.len() < 2 {
                    return Err(invalid("darcy solution needs the boundary centres"));
                }
                Ok(self.pressure(m, e[0], e[1])?.values)
            }
        }
    }

    /// Per-token network features for one tuple. SEIR rows are centred and
    /// scaled to order one: `(t − 2, I/20, R/20)`.
    pub fn token_features(&self, d: &[f64], e: &[f64]) -> Result<TokenFeatures> {
        let n = self.kind.n_obs(e.len(), d.len())?;
        let mut obs = Vec::with_capacity(n * self.kind.obs_token_dim());
        let design = match self.kind {
            TaskKind::Nonlinear => {
                for i in 0..n {
                    obs.extend_from_slice(&[d[i], e[i]]);
                }
                None
            }
            TaskKind::Seir => {
                for i in 0..n {
                    obs.extend_from_slice(&[
                        e[i] - 2.0,
                        d[2 * i] / SEIR_SCALE,
                        d[2 * i + 1] / SEIR_SCALE,
                    ]);
                }
                None
            }
            TaskKind::Darcy => {
                for i in 0..n {
                    obs.extend_from_slice(&[d[i], e[2 + 2 * i], e[3 + 2 * i]]);
                }
                Some(vec![e[0], e[1]])
            }
        };
        Ok(TokenFeatures {
            observations: obs,
            n_obs: n,
            design,
        })
    }
}

const SEIR_SCALE: f64 = 20.0;
