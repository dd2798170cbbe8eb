//! Numerical certification of the scalar-path total-variation bound.
//!
//! A one-dimensional prototype compares two training objectives over a
//! compression schedule `0 = r_0 < ... < r_T = r_max` against a monotone,
//! Lipschitz, convex center function `c`:
//!
//! * direct: minimize `(theta - c(r))^2 / 2`, minimizer `c(r)`;
//! * progressive: add a lagged regularizer `lambda (theta - c(r - delta))^2 / 2`,
//!   minimizer `(c(r) + lambda c(r - delta)) / (1 + lambda)`.
//!
//! The lab computes both minimizer paths, their total variations, the
//! worst-case lagged-to-current slope ratio `kappa`, and certifies
//!
//! ```text
//! TV(direct)      <= gamma * r_max
//! TV(progressive) <= (1 + lambda * kappa) / (1 + lambda) * TV(direct)
//! ```
//!
//! with strictness whenever `c` is strictly convex. The lagged center is
//! evaluated without clamping (the closed-form minimizer uses `c(r - delta)`
//! even when `r < delta`), so center functions must be evaluable on
//! `[-delta, r_max]`; constructors here produce functions monotone on that
//! extended range.

use crate::error::{Error, Result};
use rand::rngs::StdRng;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Comparison slack for the certified inequalities.
pub const BOUND_TOL: f64 = 1e-12;

/// Analytic center function families. Each is convex with closed-form
/// derivative, so the Lipschitz slope bound is exact rather than estimated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CenterKind {
    /// `a (r + shift)^2 + slope * r`; monotone on `[-shift, inf)`.
    Quadratic { curvature: f64, shift: f64, slope: f64 },
    /// `slope * r + intercept`.
    Affine { slope: f64, intercept: f64 },
    /// `scale * (exp(rate * r) - 1)`.
    Exponential { scale: f64, rate: f64 },
    /// `gain * ln(1 + exp(rate * (r - shift)))`.
    Softplus { gain: f64, rate: f64, shift: f64 },
}

impl CenterKind {
    fn eval(&self, r: f64) -> f64 {
        match *self {
            CenterKind::Quadratic { curvature, shift, slope } => {
                curvature * (r + shift) * (r + shift) + slope * r
            }
            CenterKind::Affine { slope, intercept } => slope * r + intercept,
            CenterKind::Exponential { scale, rate } => scale * ((rate * r).exp() - 1.0),
            CenterKind::Softplus { gain, rate, shift } => {
                let x = rate * (r - shift);
                // ln(1 + e^x), overflow-safe
                gain * if x > 30.0 { x } else { x.exp().ln_1p() }
            }
        }
    }

    fn derivative(&self, r: f64) -> f64 {
        match *self {
            CenterKind::Quadratic { curvature, shift, slope } => {
                2.0 * curvature * (r + shift) + slope
            }
            CenterKind::Affine { slope, .. } => slope,
            CenterKind::Exponential { scale, rate } => scale * rate * (rate * r).exp(),
            CenterKind::Softplus { gain, rate, shift } => {
                let x = rate * (r - shift);
                gain * rate / (1.0 + (-x).exp())
            }
        }
    }

    fn label(&self) -> String {
        match self {
            CenterKind::Quadratic { .. } => "quadratic".into(),
            CenterKind::Affine { .. } => "affine".into(),
            CenterKind::Exponential { .. } => "exponential".into(),
            CenterKind::Softplus { .. } => "softplus".into(),
        }
    }
}

/// A center function plus its declared regularity: exact Lipschitz slope
/// bound over `[0, r_max]` and convexity flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenterFunction {
    pub kind: CenterKind,
    pub gamma: f64,
    pub convex: bool,
    pub strictly_convex: bool,
}

impl CenterFunction {
    pub fn eval(&self, r: f64) -> f64 {
        self.kind.eval(r)
    }

    /// `c(r) = r^2`, the reference strictly convex center.
    pub fn quad(r_max: f64) -> Self {
        CenterFunction::quadratic(1.0, 0.0, 0.0, r_max)
    }

    pub fn quadratic(curvature: f64, shift: f64, slope: f64, r_max: f64) -> Self {
        let kind = CenterKind::Quadratic { curvature, shift, slope };
        let gamma = kind.derivative(r_max);
        CenterFunction { kind, gamma, convex: true, strictly_convex: curvature > 0.0 }
    }

    pub fn affine(slope: f64, intercept: f64) -> Self {
        let kind = CenterKind::Affine { slope, intercept };
        CenterFunction { kind, gamma: slope, convex: true, strictly_convex: false }
    }

    pub fn exponential(scale: f64, rate: f64, r_max: f64) -> Self {
        let kind = CenterKind::Exponential { scale, rate };
        let gamma = kind.derivative(r_max);
        CenterFunction { kind, gamma, convex: true, strictly_convex: scale > 0.0 && rate > 0.0 }
    }

    pub fn softplus(gain: f64, rate: f64, shift: f64, r_max: f64) -> Self {
        let kind = CenterKind::Softplus { gain, rate, shift };
        let gamma = kind.derivative(r_max);
        CenterFunction { kind, gamma, convex: true, strictly_convex: gain > 0.0 && rate > 0.0 }
    }

    /// Named CLI presets on `[0, r_max]`.
    pub fn preset(name: &str, r_max: f64) -> Result<Self> {
        match name {
            "quad" => Ok(Self::quad(r_max)),
            "affine" => Ok(Self::affine(1.0, 0.0)),
            "exp" => Ok(Self::exponential(1.0, 1.0, r_max)),
            "softplus" => Ok(Self::softplus(2.0, 3.0, 0.3, r_max)),
            other => Err(Error::Scalar(format!("unknown center preset \"{other}\""))),
        }
    }
}

/// One Theorem-1 verification instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarProblem {
    pub center: CenterFunction,
    pub lambda: f64,
    pub delta: f64,
    /// Strictly increasing, `schedule[0] == 0`, last element is `r_max`.
    pub schedule: Vec<f64>,
}

impl ScalarProblem {
    pub fn new(center: CenterFunction, lambda: f64, delta: f64, schedule: Vec<f64>) -> Result<Self> {
        let p = ScalarProblem { center, lambda, delta, schedule };
        p.validate()?;
        Ok(p)
    }

    pub fn uniform(center: CenterFunction, lambda: f64, delta: f64, steps: usize, r_max: f64) -> Result<Self> {
        Self::new(center, lambda, delta, uniform_schedule(steps, r_max))
    }

    pub fn r_max(&self) -> f64 {
        *self.schedule.last().unwrap_or(&0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schedule.len() < 2 {
            return Err(Error::Scalar("schedule needs at least two points".into()));
        }
        if self.schedule[0] != 0.0 {
            return Err(Error::Scalar("schedule must start at r = 0".into()));
        }
        if !self.schedule.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Scalar("schedule must be strictly increasing".into()));
        }
        let r_max = self.r_max();
        if !(0.0 < self.lambda && self.lambda < 1.0) {
            return Err(Error::Scalar(format!("need 0 < lambda < 1, got {}", self.lambda)));
        }
        if !(0.0 < self.delta && self.delta <= r_max) {
            return Err(Error::Scalar(format!("need 0 < delta <= r_max, got {}", self.delta)));
        }
        Ok(())
    }

    fn check_domain(&self, r: f64, op: &str) -> Result<()> {
        if r < 0.0 || r > self.r_max() + 1e-12 {
            return Err(Error::Scalar(format!("{op}: r = {r} outside [0, {}]", self.r_max())));
        }
        Ok(())
    }

    /// Minimizer of the direct objective: `c(r)`.
    pub fn minimizer_direct(&self, r: f64) -> Result<f64> {
        self.check_domain(r, "minimizer_direct")?;
        Ok(self.center.eval(r))
    }

    /// Minimizer of the progressive objective:
    /// `(c(r) + lambda c(r - delta)) / (1 + lambda)`.
    pub fn minimizer_progressive(&self, r: f64) -> Result<f64> {
        self.check_domain(r, "minimizer_progressive")?;
        let c = &self.center;
        Ok((c.eval(r) + self.lambda * c.eval(r - self.delta)) / (1.0 + self.lambda))
    }

    /// Worst-case lagged-to-current slope ratio over a uniform grid of
    /// `[delta, r_max - delta]`.
    pub fn kappa(&self, grid_resolution: usize) -> Result<f64> {
        let r_max = self.r_max();
        if r_max < 2.0 * self.delta {
            return Err(Error::Scalar(format!(
                "kappa interval degenerate: r_max = {r_max} < 2 delta = {}",
                2.0 * self.delta
            )));
        }
        if grid_resolution < 2 {
            return Err(Error::Scalar("kappa grid needs >= 2 points".into()));
        }
        let (lo, hi) = (self.delta, r_max - self.delta);
        let c = &self.center;
        let mut sup = f64::NEG_INFINITY;
        for i in 0..grid_resolution {
            let r = lo + (hi - lo) * i as f64 / (grid_resolution - 1) as f64;
            let denom = c.eval(r + self.delta) - c.eval(r);
            if denom <= 0.0 {
                return Err(Error::Scalar(format!(
                    "kappa: non-positive denominator at r = {r}; c is not strictly increasing there"
                )));
            }
            let ratio = (c.eval(r) - c.eval(r - self.delta)) / denom;
            sup = sup.max(ratio);
        }
        Ok(sup)
    }
}

pub fn uniform_schedule(steps: usize, r_max: f64) -> Vec<f64> {
    (0..=steps).map(|t| r_max * t as f64 / steps as f64).collect()
}

/// Sum of absolute consecutive differences.
pub fn total_variation(path: &[f64]) -> Result<f64> {
    if path.len() < 2 {
        return Err(Error::Scalar(format!("path of length {} has no variation", path.len())));
    }
    Ok(path.windows(2).map(|w| (w[1] - w[0]).abs()).sum())
}

/// Per-step record in a [`TheoremReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepCheck {
    pub r: f64,
    pub theta_direct: f64,
    pub theta_progressive: f64,
    /// Lagged-to-current secant ratio for the step starting here; 0 when the
    /// direct increment vanishes.
    pub kappa_t: f64,
    /// Whether this step's endpoints both lie inside `[delta, r_max - delta]`,
    /// the interval on which `kappa_t <= kappa` is guaranteed.
    pub in_kappa_interval: bool,
    /// Per-step contraction: `|dtheta_prog| <= (1 + lambda kappa_t) / (1 + lambda) * dtheta_dir`.
    pub step_bound_holds: bool,
}

/// Verification outcome for one [`ScalarProblem`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub center: String,
    pub lambda: f64,
    pub delta: f64,
    pub r_max: f64,
    pub tv_direct: f64,
    pub tv_progressive: f64,
    pub gamma: f64,
    /// `gamma * r_max`, the direct-path bound.
    pub gamma_bound: f64,
    pub gamma_bound_holds: bool,
    pub kappa: f64,
    /// `(1 + lambda kappa) / (1 + lambda)`.
    pub contraction_factor: f64,
    pub bound_holds: bool,
    pub strict: bool,
    pub steps: Vec<StepCheck>,
}

/// Default kappa grid density.
pub const KAPPA_GRID: usize = 10_001;

/// Numerically validate S1 (monotone), S2 (Lipschitz with slope `gamma`) and
/// S3 (midpoint convexity) on a dense grid of `[0, r_max]`.
pub fn check_assumptions(center: &CenterFunction, r_max: f64) -> Result<()> {
    const GRID: usize = 2001;
    const TOL: f64 = 1e-9;
    let at = |i: usize| r_max * i as f64 / (GRID - 1) as f64;
    let vals: Vec<f64> = (0..GRID).map(|i| center.eval(at(i))).collect();
    for w in vals.windows(2) {
        if w[1] < w[0] - TOL {
            return Err(Error::Scalar(format!(
                "S1 violated: c decreases by {} between grid points",
                w[0] - w[1]
            )));
        }
    }
    let step = r_max / (GRID - 1) as f64;
    for w in vals.windows(2) {
        if (w[1] - w[0]).abs() > center.gamma * step + TOL {
            return Err(Error::Scalar(format!(
                "S2 violated: local slope {} exceeds gamma {}",
                (w[1] - w[0]).abs() / step,
                center.gamma
            )));
        }
    }
    for w in vals.windows(3) {
        if w[1] > (w[0] + w[2]) / 2.0 + TOL {
            return Err(Error::Scalar("S3 violated: midpoint convexity fails".into()));
        }
    }
    if !center.convex {
        return Err(Error::Scalar("center does not declare convexity (S3)".into()));
    }
    Ok(())
}

/// Compute both minimizer paths and certify every inequality of the
/// total-variation theorem, including the per-step contraction.
pub fn verify_theorem(problem: &ScalarProblem) -> Result<TheoremReport> {
    problem.validate()?;
    let r_max = problem.r_max();
    check_assumptions(&problem.center, r_max)?;

    let direct: Vec<f64> = problem
        .schedule
        .iter()
        .map(|&r| problem.minimizer_direct(r))
        .collect::<Result<_>>()?;
    let progressive: Vec<f64> = problem
        .schedule
        .iter()
        .map(|&r| problem.minimizer_progressive(r))
        .collect::<Result<_>>()?;

    let tv_direct = total_variation(&direct)?;
    let tv_progressive = total_variation(&progressive)?;
    let kappa = problem.kappa(KAPPA_GRID)?;
    let contraction_factor = (1.0 + problem.lambda * kappa) / (1.0 + problem.lambda);

    let c = &problem.center;
    let lam = problem.lambda;
    let mut steps = Vec::with_capacity(problem.schedule.len());
    for (t, w) in problem.schedule.windows(2).enumerate() {
        let (r0, r1) = (w[0], w[1]);
        let d_cur = c.eval(r1) - c.eval(r0);
        let d_lag = c.eval(r1 - problem.delta) - c.eval(r0 - problem.delta);
        let kappa_t = if d_cur.abs() > 1e-300 { d_lag / d_cur } else { 0.0 };
        let lhs = (progressive[t + 1] - progressive[t]).abs();
        let rhs = (d_cur + lam * d_lag) / (1.0 + lam);
        steps.push(StepCheck {
            r: r0,
            theta_direct: direct[t],
            theta_progressive: progressive[t],
            kappa_t,
            in_kappa_interval: r0 >= problem.delta - BOUND_TOL
                && r1 <= r_max - problem.delta + BOUND_TOL,
            step_bound_holds: lhs <= rhs + BOUND_TOL,
        });
    }
    let last = *problem.schedule.last().unwrap();
    steps.push(StepCheck {
        r: last,
        theta_direct: *direct.last().unwrap(),
        theta_progressive: *progressive.last().unwrap(),
        kappa_t: 0.0,
        in_kappa_interval: false,
        step_bound_holds: true,
    });

    Ok(TheoremReport {
        center: c.kind.label(),
        lambda: problem.lambda,
        delta: problem.delta,
        r_max,
        tv_direct,
        tv_progressive,
        gamma: c.gamma,
        gamma_bound: c.gamma * r_max,
        gamma_bound_holds: tv_direct <= c.gamma * r_max + BOUND_TOL,
        kappa,
        contraction_factor,
        bound_holds: tv_progressive <= contraction_factor * tv_direct + BOUND_TOL,
        strict: tv_progressive < tv_direct - BOUND_TOL,
        steps,
    })
}

/// Write the `(r, theta_direct, theta_progressive)` path as CSV.
pub fn write_path_csv<W: std::io::Write>(report: &TheoremReport, mut w: W) -> Result<()> {
    writeln!(w, "r,theta_direct,theta_progressive")?;
    for s in &report.steps {
        writeln!(w, "{},{},{}", s.r, s.theta_direct, s.theta_progressive)?;
    }
    Ok(())
}

/// Draw a random strictly convex problem from the quadratic / exponential /
/// softplus families, shaped so the center is monotone on the extended
/// domain `[-delta, r_max]`.
pub fn random_strictly_convex_problem(rng: &mut StdRng, r_max: f64) -> ScalarProblem {
    let delta = rng.random_range(0.02..=(r_max / 2.0 - 0.01));
    let lambda = rng.random_range(0.1..=0.9);
    let steps = rng.random_range(6..=30);
    let center = match rng.random_range(0..3) {
        0 => {
            let curvature = rng.random_range(0.3..=3.0);
            let shift = rng.random_range(delta + 0.02..=1.5);
            let slope = rng.random_range(0.0..=1.0);
            CenterFunction::quadratic(curvature, shift, slope, r_max)
        }
        1 => {
            let scale = rng.random_range(0.2..=2.0);
            let rate = rng.random_range(0.5..=3.0);
            CenterFunction::exponential(scale, rate, r_max)
        }
        _ => {
            let gain = rng.random_range(0.5..=3.0);
            let rate = rng.random_range(1.0..=4.0);
            let shift = rng.random_range(0.0..=r_max);
            CenterFunction::softplus(gain, rate, shift, r_max)
        }
    };
    ScalarProblem::uniform(center, lambda, delta, steps, r_max)
        .expect("generated problem must be valid")
}
