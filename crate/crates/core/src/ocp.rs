//! Single-shooting transcription of one receding-horizon problem.
//!
//! Decision vector layout (`Nc·n_u + 2·n_x` entries):
//!
//! ```text
//! [ ΔŪ_1 (n_u) | ΔŪ_2 | … | ΔŪ_Nc | ξ_lower (n_x) | ξ_upper (n_x) ]
//! ```
//!
//! The full rate sequence is `ΔU = W·ΔŪ` (channel-wise), inputs are the
//! running sum of rates starting from the previously applied input, and
//! states follow from the rollout. Dynamics are state-independent and the
//! expansion is linear, so inputs, states and every constraint are affine in
//! the decision vector. The affine maps are built once per problem and used
//! by the solver; [`OcpProblem::decode`] and [`OcpProblem::constraint_eval`]
//! evaluate the same quantities the long way round.
//!
//! Inequalities are stacked as `g(z) ≤ 0` in this order, `j` over the horizon:
//!
//! 1. `flow_min − U[j]`
//! 2. `U[j] − flow_max`
//! 3. `level_min − ξ_lower − X[j+1]`
//! 4. `X[j+1] − level_max − ξ_upper`
//! 5. `−ξ`

use nalgebra::{DMatrix, DVector};

use crate::blocking::{BlockingSchedule, ExpansionKind, ExpansionMatrix};
use crate::error::{Error, Result};
use crate::integrator::{rollout, Horizon};
use crate::model::NetworkModel;
use crate::objective::{
    economic_stage_cost_with, energy_is_nonnegative, total_cost, CostBreakdown, CostContext, EnergyForm, Weights,
};
use crate::scenario::Scenario;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecisionLayout {
    pub blocks: usize,
    pub inputs: usize,
    pub states: usize,
}

impl DecisionLayout {
    pub fn dim(&self) -> usize {
        self.blocks * self.inputs + 2 * self.states
    }

    pub fn rate_index(&self, block: usize, channel: usize) -> usize {
        block * self.inputs + channel
    }

    pub fn slack_offset(&self) -> usize {
        self.blocks * self.inputs
    }

    pub fn slack_lower(&self, tank: usize) -> usize {
        self.slack_offset() + tank
    }

    pub fn slack_upper(&self, tank: usize) -> usize {
        self.slack_offset() + self.states + tank
    }
}

/// Everything needed to freeze one problem instance.
#[derive(Debug, Clone)]
pub struct ProblemData {
    pub model: NetworkModel,
    pub horizon: Horizon,
    pub schedule: BlockingSchedule,
    pub expansion: ExpansionKind,
    pub weights: Weights,
    pub demand_forecast: Vec<DVector<f64>>,
    pub tariff_forecast: Vec<f64>,
    pub x0: DVector<f64>,
    pub u_prev: DVector<f64>,
    /// Closed-loop step the forecasts were sliced at.
    pub step: usize,
}

/// Decoded horizon trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `Np` input rates.
    pub rates: Vec<DVector<f64>>,
    /// `Np` inputs.
    pub inputs: Vec<DVector<f64>>,
    /// `Np + 1` states starting at `x0`.
    pub states: Vec<DVector<f64>>,
    pub slack: DVector<f64>,
}

/// Stacked constraint residuals; feasible iff `equalities == 0` and `inequalities ≤ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintValues {
    pub equalities: DVector<f64>,
    pub inequalities: DVector<f64>,
}

impl ConstraintValues {
    pub fn max_violation(&self) -> f64 {
        let eq = self.equalities.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        self.inequalities.iter().fold(eq, |m, v| m.max(*v))
    }
}

/// Constant constraint Jacobians: `eq_matrix·z = eq_rhs`, `ineq_matrix·z ≤ ineq_rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearConstraints {
    pub eq_matrix: DMatrix<f64>,
    pub eq_rhs: DVector<f64>,
    pub ineq_matrix: DMatrix<f64>,
    pub ineq_rhs: DVector<f64>,
}

impl LinearConstraints {
    pub fn eval(&self, z: &DVector<f64>) -> ConstraintValues {
        ConstraintValues {
            equalities: &self.eq_matrix * z - &self.eq_rhs,
            inequalities: &self.ineq_matrix * z - &self.ineq_rhs,
        }
    }
}

/// Affine images of the decision vector, flattened step-major.
#[derive(Debug, Clone)]
struct AffineMaps {
    rates: DMatrix<f64>,
    inputs: DMatrix<f64>,
    input_offset: DVector<f64>,
    states: DMatrix<f64>,
    state_offset: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct OcpProblem {
    data: ProblemData,
    expansion: ExpansionMatrix,
    layout: DecisionLayout,
    maps: AffineMaps,
    constraints: LinearConstraints,
    x_ref: DVector<f64>,
    x_ref_stacked: DVector<f64>,
    energy: EnergyForm,
}

impl OcpProblem {
    pub fn new(data: ProblemData) -> Result<Self> {
        let m = &data.model;
        let (nx, nu, nd) = (m.n_states(), m.n_inputs(), m.n_disturbances());
        let np = data.horizon.steps;
        if data.schedule.horizon() != np {
            return Err(Error::Schedule(format!(
                "schedule covers {} steps, horizon has {np}",
                data.schedule.horizon()
            )));
        }
        if data.demand_forecast.len() != np {
            return Err(Error::dim("demand forecast", np, data.demand_forecast.len()));
        }
        if let Some(d) = data.demand_forecast.iter().find(|d| d.len() != nd) {
            return Err(Error::dim("demand sample", nd, d.len()));
        }
        if data.tariff_forecast.len() != np {
            return Err(Error::dim("tariff forecast", np, data.tariff_forecast.len()));
        }
        if data.x0.len() != nx {
            return Err(Error::dim("initial state", nx, data.x0.len()));
        }
        if data.u_prev.len() != nu {
            return Err(Error::dim("previous input", nu, data.u_prev.len()));
        }
        let expansion = ExpansionMatrix::build(&data.schedule, data.expansion);
        let layout = DecisionLayout {
            blocks: data.schedule.blocks(),
            inputs: nu,
            states: nx,
        };
        let maps = build_maps(&data, &expansion, &layout);
        let constraints = build_constraints(&data, &layout, &maps);
        let x_ref = m.level_refs();
        let x_ref_stacked = DVector::from_iterator(np * nx, (0..np).flat_map(|_| x_ref.iter().copied()));
        let energy = if energy_is_nonnegative(m, &data.tariff_forecast) {
            EnergyForm::Signed
        } else {
            EnergyForm::Smoothed
        };
        Ok(Self {
            energy,
            data,
            expansion,
            layout,
            maps,
            constraints,
            x_ref,
            x_ref_stacked,
        })
    }

    /// Freezes the problem at closed-loop step `step` with an interpolated expansion.
    pub fn assemble(
        scenario: &Scenario,
        schedule: &BlockingSchedule,
        x0: &DVector<f64>,
        u_prev: &DVector<f64>,
        step: usize,
    ) -> Result<Self> {
        Self::assemble_with(scenario, schedule, ExpansionKind::Interpolated, x0, u_prev, step)
    }

    pub fn assemble_with(
        scenario: &Scenario,
        schedule: &BlockingSchedule,
        expansion: ExpansionKind,
        x0: &DVector<f64>,
        u_prev: &DVector<f64>,
        step: usize,
    ) -> Result<Self> {
        let np = schedule.horizon();
        let available = scenario.demand.len().min(scenario.tariff.len());
        if step + np > available {
            return Err(Error::Horizon {
                step,
                horizon: np,
                needed: step + np,
                available,
            });
        }
        Self::new(ProblemData {
            model: scenario.model.clone(),
            horizon: Horizon::new(np, scenario.dt)?,
            schedule: schedule.clone(),
            expansion,
            weights: scenario.weights,
            demand_forecast: scenario.demand[step..step + np].to_vec(),
            tariff_forecast: scenario.tariff[step..step + np].to_vec(),
            x0: x0.clone(),
            u_prev: u_prev.clone(),
            step,
        })
    }

    pub fn data(&self) -> &ProblemData {
        &self.data
    }

    pub fn model(&self) -> &NetworkModel {
        &self.data.model
    }

    pub fn schedule(&self) -> &BlockingSchedule {
        &self.data.schedule
    }

    pub fn expansion(&self) -> &ExpansionMatrix {
        &self.expansion
    }

    pub fn layout(&self) -> DecisionLayout {
        self.layout
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn horizon(&self) -> Horizon {
        self.data.horizon
    }

    /// Form of the energy term the solver sees.
    pub fn energy_form(&self) -> EnergyForm {
        self.energy
    }

    pub fn weights(&self) -> &Weights {
        &self.data.weights
    }

    pub fn linear_constraints(&self) -> &LinearConstraints {
        &self.constraints
    }

    fn check_dim(&self, z: &DVector<f64>) -> Result<()> {
        if z.len() != self.dim() {
            return Err(Error::dim("decision vector", self.dim(), z.len()));
        }
        Ok(())
    }

    /// Expands, accumulates and rolls out a decision vector.
    pub fn decode(&self, z: &DVector<f64>) -> Result<Trajectory> {
        self.check_dim(z)?;
        let l = self.layout;
        let reduced: Vec<_> = (0..l.blocks)
            .map(|i| z.rows(l.rate_index(i, 0), l.inputs).into_owned())
            .collect();
        let rates = self.expansion.expand(&reduced)?;
        let mut inputs = Vec::with_capacity(rates.len());
        let mut u = self.data.u_prev.clone();
        for du in &rates {
            u += du;
            inputs.push(u.clone());
        }
        let states = rollout(&self.data.model, &self.data.x0, &inputs, &self.data.demand_forecast, &self.data.horizon)?;
        let slack = z.rows(l.slack_offset(), 2 * l.states).into_owned();
        Ok(Trajectory {
            rates,
            inputs,
            states,
            slack,
        })
    }

    /// Inverse of [`OcpProblem::decode`] on the range of the expansion: picks
    /// the rate at each block's anchor position.
    pub fn encode(&self, rates: &[DVector<f64>], slack: &DVector<f64>) -> Result<DVector<f64>> {
        let l = self.layout;
        if rates.len() != self.data.horizon.steps {
            return Err(Error::dim("rate sequence", self.data.horizon.steps, rates.len()));
        }
        if slack.len() != 2 * l.states {
            return Err(Error::dim("slack vector", 2 * l.states, slack.len()));
        }
        let mut z = DVector::zeros(l.dim());
        for (i, &s) in self.data.schedule.starts().iter().enumerate() {
            z.rows_mut(l.rate_index(i, 0), l.inputs).copy_from(&rates[s - 1]);
        }
        z.rows_mut(l.slack_offset(), 2 * l.states).copy_from(slack);
        Ok(z)
    }

    /// Constraint residuals computed from the decoded trajectory.
    pub fn constraint_eval(&self, z: &DVector<f64>) -> Result<ConstraintValues> {
        let t = self.decode(z)?;
        let m = &self.data.model;
        let l = self.layout;
        let np = self.data.horizon.steps;
        let mut eq = Vec::with_capacity(np * m.n_nodes());
        for (u, d) in t.inputs.iter().zip(&self.data.demand_forecast) {
            eq.extend(m.node_residual(u, d)?.iter());
        }
        let (nu, nx) = (l.inputs, l.states);
        let mut ineq = Vec::with_capacity(2 * np * (nu + nx) + 2 * nx);
        for u in &t.inputs {
            ineq.extend((0..nu).map(|c| m.bounds.flow_min[c] - u[c]));
        }
        for u in &t.inputs {
            ineq.extend((0..nu).map(|c| u[c] - m.bounds.flow_max[c]));
        }
        for x in &t.states[1..] {
            ineq.extend((0..nx).map(|i| m.tanks[i].level_min - t.slack[i] - x[i]));
        }
        for x in &t.states[1..] {
            ineq.extend((0..nx).map(|i| x[i] - m.tanks[i].level_max - t.slack[nx + i]));
        }
        ineq.extend(t.slack.iter().map(|s| -s));
        Ok(ConstraintValues {
            equalities: DVector::from_vec(eq),
            inequalities: DVector::from_vec(ineq),
        })
    }

    pub fn cost_context(&self) -> CostContext<'_> {
        CostContext {
            model: &self.data.model,
            weights: &self.data.weights,
            tariff: &self.data.tariff_forecast,
            x_ref: &self.x_ref,
            dt: self.data.horizon.dt,
            energy: self.energy,
        }
    }

    /// Horizon cost through the decoded trajectory.
    pub fn cost_breakdown(&self, z: &DVector<f64>) -> Result<CostBreakdown> {
        let t = self.decode(z)?;
        total_cost(&self.cost_context(), &t.states, &t.inputs, &t.rates, &t.slack)
    }

    /// Horizon cost and its gradient through the affine maps.
    ///
    /// # Panics
    /// If `z` does not match the decision layout.
    pub fn cost_and_gradient(&self, z: &DVector<f64>) -> (f64, DVector<f64>) {
        assert_eq!(z.len(), self.dim(), "decision vector dimension");
        let d = &self.data;
        let w = &d.weights;
        let l = self.layout;
        let nu = l.inputs;

        let inputs = &self.maps.input_offset + &self.maps.inputs * z;
        let mut g_inputs = vec![0.0; inputs.len()];
        let mut econ = 0.0;
        for j in 0..d.horizon.steps {
            let u = inputs.rows(j * nu, nu).into_owned();
            econ += economic_stage_cost_with(
                &d.model,
                &u,
                d.tariff_forecast[j],
                d.horizon.dt,
                self.energy,
                Some(&mut g_inputs[j * nu..(j + 1) * nu]),
            );
        }
        let level_err = &self.maps.state_offset + &self.maps.states * z - &self.x_ref_stacked;
        let rates = &self.maps.rates * z;
        let slack = z.rows(l.slack_offset(), 2 * l.states);

        let cost = w.economic * econ
            + w.safety * level_err.norm_squared()
            + w.smoothness * rates.norm_squared()
            + w.slack * slack.sum();

        let g_inputs = DVector::from_vec(g_inputs) * w.economic;
        let mut grad = self.maps.inputs.tr_mul(&g_inputs);
        grad += self.maps.states.tr_mul(&level_err) * (2.0 * w.safety);
        grad += self.maps.rates.tr_mul(&rates) * (2.0 * w.smoothness);
        grad.rows_mut(l.slack_offset(), 2 * l.states).add_scalar_mut(w.slack);
        (cost, grad)
    }

    pub fn cost(&self, z: &DVector<f64>) -> f64 {
        self.cost_and_gradient(z).0
    }

    /// Exact Hessian of the level-safety and smoothness terms, which are
    /// quadratic in the decision vector.
    pub fn quadratic_hessian(&self) -> DMatrix<f64> {
        let w = &self.data.weights;
        self.maps.states.tr_mul(&self.maps.states) * (2.0 * w.safety)
            + self.maps.rates.tr_mul(&self.maps.rates) * (2.0 * w.smoothness)
    }

    /// Inputs over the horizon for a decision vector, through the affine map.
    pub fn inputs_of(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.maps.input_offset + &self.maps.inputs * z
    }

    /// Predicted states `X[1..=Np]`, stacked, through the affine map.
    pub fn states_of(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.maps.state_offset + &self.maps.states * z
    }

    /// Decision vector that holds the previous input with zero slack.
    pub fn hold_input(&self) -> DVector<f64> {
        DVector::zeros(self.dim())
    }
}

fn build_maps(data: &ProblemData, expansion: &ExpansionMatrix, layout: &DecisionLayout) -> AffineMaps {
    let np = data.horizon.steps;
    let dt = data.horizon.dt;
    let (nu, nx, nc) = (layout.inputs, layout.states, layout.blocks);
    let nz = layout.dim();
    let w = expansion.weights();

    // cumulative[j][i] = Σ_{t ≤ j} W[t][i]: sensitivity of U[j] to ΔŪ_i
    let mut cumulative = DMatrix::zeros(np, nc);
    let mut acc = vec![0.0; nc];
    for j in 0..np {
        for i in 0..nc {
            acc[i] += w[(j, i)];
            cumulative[(j, i)] = acc[i];
        }
    }

    let mut rates = DMatrix::zeros(np * nu, nz);
    let mut inputs = DMatrix::zeros(np * nu, nz);
    for j in 0..np {
        for i in 0..nc {
            for c in 0..nu {
                rates[(j * nu + c, layout.rate_index(i, c))] = w[(j, i)];
                inputs[(j * nu + c, layout.rate_index(i, c))] = cumulative[(j, i)];
            }
        }
    }
    let input_offset = DVector::from_iterator(np * nu, (0..np).flat_map(|_| data.u_prev.iter().copied()));

    // X[j+1] = x0 + dt·Σ_{t ≤ j} (G·U[t] + F·d[t]) for state-independent dynamics
    let gain = data.model.input_gain();
    let dist_gain = data.model.disturbance_gain();
    let mut states = DMatrix::zeros(np * nx, nz);
    let mut state_offset = DVector::zeros(np * nx);
    let mut row_acc = DMatrix::<f64>::zeros(nx, nz);
    let mut off_acc = data.x0.clone();
    let hold = &gain * &data.u_prev;
    for j in 0..np {
        let sens = gain.clone() * inputs.rows(j * nu, nu) * dt;
        row_acc += sens;
        off_acc += (&hold + &dist_gain * &data.demand_forecast[j]) * dt;
        states.rows_mut(j * nx, nx).copy_from(&row_acc);
        state_offset.rows_mut(j * nx, nx).copy_from(&off_acc);
    }
    AffineMaps {
        rates,
        inputs,
        input_offset,
        states,
        state_offset,
    }
}

fn build_constraints(data: &ProblemData, layout: &DecisionLayout, maps: &AffineMaps) -> LinearConstraints {
    let m = &data.model;
    let np = data.horizon.steps;
    let (nu, nx) = (layout.inputs, layout.states);
    let nz = layout.dim();
    let nn = m.n_nodes();

    let mut eq_matrix = DMatrix::zeros(np * nn, nz);
    let mut eq_rhs = DVector::zeros(np * nn);
    for j in 0..np {
        let sens = &m.node_input_map * maps.inputs.rows(j * nu, nu);
        eq_matrix.rows_mut(j * nn, nn).copy_from(&sens);
        let fixed = &m.node_input_map * &data.u_prev + &m.node_disturbance_map * &data.demand_forecast[j];
        eq_rhs.rows_mut(j * nn, nn).copy_from(&(-fixed));
    }

    let n_in = np * nu;
    let n_st = np * nx;
    let rows = 2 * n_in + 2 * n_st + 2 * nx;
    let mut a = DMatrix::zeros(rows, nz);
    let mut b = DVector::zeros(rows);
    for r in 0..n_in {
        let c = r % nu;
        let u0 = maps.input_offset[r];
        a.row_mut(r).copy_from(&(-maps.inputs.row(r)));
        b[r] = u0 - m.bounds.flow_min[c];
        a.row_mut(n_in + r).copy_from(&maps.inputs.row(r));
        b[n_in + r] = m.bounds.flow_max[c] - u0;
    }
    let base = 2 * n_in;
    for r in 0..n_st {
        let tank = r % nx;
        let x0 = maps.state_offset[r];
        a.row_mut(base + r).copy_from(&(-maps.states.row(r)));
        a[(base + r, layout.slack_lower(tank))] = -1.0;
        b[base + r] = x0 - m.tanks[tank].level_min;
        a.row_mut(base + n_st + r).copy_from(&maps.states.row(r));
        a[(base + n_st + r, layout.slack_upper(tank))] = -1.0;
        b[base + n_st + r] = m.tanks[tank].level_max - x0;
    }
    let base = 2 * n_in + 2 * n_st;
    for s in 0..2 * nx {
        a[(base + s, layout.slack_offset() + s)] = -1.0;
    }
    LinearConstraints {
        eq_matrix,
        eq_rhs,
        ineq_matrix: a,
        ineq_rhs: b,
    }
}
