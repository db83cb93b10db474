//! Stage costs: pump energy cost under a time-varying tariff, tank level
//! safety, actuator smoothness, and the slack penalty.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::model::{NetworkModel, PumpCurve};
use crate::ocp::OcpProblem;

/// Specific weight of water divided by 1000, kN/m³.
pub const SPECIFIC_WEIGHT_KN: f64 = 9.81;

/// Seconds per hour; pump flows are converted to m³/s for the power formula.
const SECONDS_PER_HOUR: f64 = 3600.0;

/// Smoothing width of the absolute value inside the energy cost.
pub const ABS_SMOOTHING: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Weights {
    pub economic: f64,
    pub safety: f64,
    pub smoothness: f64,
    pub slack: f64,
}

impl Default for Weights {
    fn default() -> Self {
        Self {
            economic: 1.0,
            safety: 1.0,
            smoothness: 1.0,
            slack: 1e4,
        }
    }
}

impl Weights {
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        let all = [self.economic, self.safety, self.smoothness, self.slack];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            v.push(format!("weights must be finite and non-negative, got {all:?}"));
        }
        let top = self.economic.max(self.safety).max(self.smoothness);
        if self.slack <= top {
            v.push(format!("slack weight {} must exceed the largest objective weight {top}", self.slack));
        }
        v
    }
}

/// Electrical power in kW drawn by a pump delivering `q` m³/hr.
pub fn pump_power_kw(curve: &PumpCurve, q: f64) -> f64 {
    SPECIFIC_WEIGHT_KN * (q / SECONDS_PER_HOUR) * curve.head(q) / curve.efficiency(q)
}

/// d(power)/dq in kW per m³/hr.
fn pump_power_slope(curve: &PumpCurve, q: f64) -> f64 {
    let h = curve.head(q);
    let eta = curve.efficiency(q);
    let num = (curve.head_slope(q) * q + h) * eta - h * q * curve.efficiency_slope(q);
    SPECIFIC_WEIGHT_KN / SECONDS_PER_HOUR * num / (eta * eta)
}

/// Energy cost of one step: `Σ_pumps |P(q)·ψ|·dt`.
pub fn economic_stage_cost(model: &NetworkModel, u: &DVector<f64>, price: f64, dt: f64) -> f64 {
    model
        .pumps
        .iter()
        .map(|p| (pump_power_kw(&p.curve, u[p.channel]) * price).abs() * dt)
        .sum()
}

/// How the optimizer evaluates `|P·ψ|`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnergyForm {
    /// `P·ψ` as is; exact when the argument cannot be negative.
    Signed,
    /// `sqrt(x² + ε²) − ε`: C¹, zero at zero, within ε of `|x|`.
    Smoothed,
}

impl EnergyForm {
    fn apply(self, x: f64) -> (f64, f64) {
        match self {
            Self::Signed => (x, 1.0),
            Self::Smoothed => {
                let r = x.hypot(ABS_SMOOTHING);
                (r - ABS_SMOOTHING, x / r)
            }
        }
    }
}

/// True when every pump draws non-negative power over its admissible flow
/// range and every price is non-negative, so `|P·ψ| = P·ψ` on the feasible set.
pub fn energy_is_nonnegative(model: &NetworkModel, tariff: &[f64]) -> bool {
    if tariff.iter().any(|p| *p < 0.0) {
        return false;
    }
    model.pumps.iter().all(|p| {
        let lo = model.bounds.flow_min[p.channel];
        let hi = model.bounds.flow_max[p.channel];
        let [a, b, _] = p.curve.head_coeffs;
        let mut min_head = p.curve.head(lo).min(p.curve.head(hi));
        if a > 0.0 {
            let vertex = -b / (2.0 * a);
            if vertex > lo && vertex < hi {
                min_head = min_head.min(p.curve.head(vertex));
            }
        }
        lo >= 0.0 && min_head >= 0.0
    })
}

/// Energy cost of one step in the optimizer's form, with its gradient
/// accumulated into `grad` (indexed by input channel).
pub fn economic_stage_cost_with(
    model: &NetworkModel,
    u: &DVector<f64>,
    price: f64,
    dt: f64,
    form: EnergyForm,
    mut grad: Option<&mut [f64]>,
) -> f64 {
    let mut total = 0.0;
    for p in &model.pumps {
        let q = u[p.channel];
        let (v, dv) = form.apply(pump_power_kw(&p.curve, q) * price);
        total += v * dt;
        if let Some(g) = grad.as_deref_mut() {
            g[p.channel] += dv * price * pump_power_slope(&p.curve, q) * dt;
        }
    }
    total
}

/// [`economic_stage_cost_with`] in the smoothed form.
pub fn economic_stage_cost_smoothed(
    model: &NetworkModel,
    u: &DVector<f64>,
    price: f64,
    dt: f64,
    grad: Option<&mut [f64]>,
) -> f64 {
    economic_stage_cost_with(model, u, price, dt, EnergyForm::Smoothed, grad)
}

/// `‖x − x_ref‖²`.
pub fn safety_stage_cost(x: &DVector<f64>, x_ref: &DVector<f64>) -> f64 {
    (x - x_ref).norm_squared()
}

/// `‖Δu‖²`.
pub fn smoothness_stage_cost(du: &DVector<f64>) -> f64 {
    du.norm_squared()
}

/// Weighted horizon cost split by term. Each field already includes its weight.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CostBreakdown {
    pub economic: f64,
    pub safety: f64,
    pub smoothness: f64,
    pub slack: f64,
}

impl CostBreakdown {
    pub fn total(&self) -> f64 {
        self.economic + self.safety + self.smoothness + self.slack
    }
}

/// Forecast and weight data the horizon cost needs.
#[derive(Debug, Clone, Copy)]
pub struct CostContext<'a> {
    pub model: &'a NetworkModel,
    pub weights: &'a Weights,
    pub tariff: &'a [f64],
    pub x_ref: &'a DVector<f64>,
    pub dt: f64,
    pub energy: EnergyForm,
}

/// Weighted horizon cost.
///
/// `states` holds `Np + 1` entries starting at the current state; stage `j`
/// is charged for the level `states[j + 1]` its input produces. The energy
/// term is evaluated in `ctx.energy` form.
pub fn total_cost(
    ctx: &CostContext<'_>,
    states: &[DVector<f64>],
    inputs: &[DVector<f64>],
    rates: &[DVector<f64>],
    slack: &DVector<f64>,
) -> Result<CostBreakdown> {
    let np = inputs.len();
    if ctx.tariff.len() != np {
        return Err(Error::dim("tariff forecast", np, ctx.tariff.len()));
    }
    if states.len() != np + 1 {
        return Err(Error::dim("state trajectory", np + 1, states.len()));
    }
    if rates.len() != np {
        return Err(Error::dim("input-rate sequence", np, rates.len()));
    }
    let w = ctx.weights;
    let mut c = CostBreakdown::default();
    for j in 0..np {
        c.economic += economic_stage_cost_with(ctx.model, &inputs[j], ctx.tariff[j], ctx.dt, ctx.energy, None);
        c.safety += safety_stage_cost(&states[j + 1], ctx.x_ref);
        c.smoothness += smoothness_stage_cost(&rates[j]);
    }
    c.economic *= w.economic;
    c.safety *= w.safety;
    c.smoothness *= w.smoothness;
    c.slack = w.slack * slack.sum();
    Ok(c)
}

/// Gradient of the horizon cost with respect to the decision vector.
pub fn cost_gradient(z: &DVector<f64>, problem: &OcpProblem) -> DVector<f64> {
    problem.cost_and_gradient(z).1
}
