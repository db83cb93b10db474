//! Receding-horizon closed loop and the blocked-versus-full comparison.

use std::fmt::Write as _;
use std::io;
use std::time::Instant;

use nalgebra::DVector;
use serde::Serialize;

use crate::blocking::{BlockingSchedule, ExpansionKind};
use crate::error::{Error, Result};
use crate::integrator::model_step;
use crate::objective::{economic_stage_cost, safety_stage_cost, smoothness_stage_cost};
use crate::ocp::OcpProblem;
use crate::scenario::Scenario;
use crate::sqp::{solve, warm_start, SolverOptions, SolverStatus};

/// Allowed excursion of the plant beyond the predicted slack.
pub const BOUND_TOLERANCE: f64 = 1e-6;

/// Reference magnitudes below this are excluded from MAPE.
pub const MAPE_ZERO_GUARD: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControllerConfig {
    pub horizon: usize,
    /// Block lengths; `None` is the full-freedom controller.
    pub lengths: Option<Vec<usize>>,
    pub options: SolverOptions,
}

impl ControllerConfig {
    pub fn full(horizon: usize) -> Self {
        Self {
            horizon,
            lengths: None,
            options: SolverOptions::default(),
        }
    }

    pub fn blocked(horizon: usize, lengths: Vec<usize>) -> Self {
        Self {
            horizon,
            lengths: Some(lengths),
            options: SolverOptions::default(),
        }
    }

    pub fn schedule(&self) -> Result<BlockingSchedule> {
        match &self.lengths {
            Some(l) => BlockingSchedule::from_lengths(l, self.horizon),
            None => BlockingSchedule::unblocked(self.horizon),
        }
    }

    pub fn label(&self) -> &'static str {
        if self.lengths.is_some() {
            "idib"
        } else {
            "full"
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub k: usize,
    /// Level at the start of the step.
    pub state: DVector<f64>,
    pub input: DVector<f64>,
    pub rate: DVector<f64>,
    pub disturbance: DVector<f64>,
    /// Unweighted stage costs: energy cost of `input`, squared level error
    /// at the end of the step, squared input rate.
    pub cost_econ: f64,
    pub cost_safe: f64,
    pub cost_smooth: f64,
    /// `[ξ_lower | ξ_upper]` of the solution.
    pub slack: DVector<f64>,
    /// Seconds spent inside the solver.
    pub solve_time: f64,
    pub status: SolverStatus,
    pub iterations: usize,
    pub kkt_residual: f64,
    /// Largest absolute node-balance residual of the applied input.
    pub node_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationLog {
    pub scenario: String,
    pub scenario_hash: String,
    pub controller: &'static str,
    pub state_names: Vec<String>,
    pub input_names: Vec<String>,
    pub disturbance_names: Vec<String>,
    pub steps: Vec<StepRecord>,
    /// Level after the last step.
    pub final_state: DVector<f64>,
}

impl SimulationLog {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Steps whose solve did not converge.
    pub fn flagged_steps(&self) -> Vec<usize> {
        self.steps.iter().filter(|s| s.status != SolverStatus::Converged).map(|s| s.k).collect()
    }

    pub fn total_economic_cost(&self) -> f64 {
        self.steps.iter().map(|s| s.cost_econ).sum()
    }

    pub fn max_node_residual(&self) -> f64 {
        self.steps.iter().map(|s| s.node_residual).fold(0.0, f64::max)
    }

    pub fn solve_times(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.solve_time).collect()
    }

    pub fn state_series(&self, i: usize) -> Vec<f64> {
        self.steps.iter().map(|s| s.state[i]).collect()
    }

    pub fn input_series(&self, c: usize) -> Vec<f64> {
        self.steps.iter().map(|s| s.input[c]).collect()
    }

    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["k".to_string()];
        h.extend(self.state_names.iter().cloned());
        h.extend(self.input_names.iter().cloned());
        h.extend(self.disturbance_names.iter().cloned());
        h.extend(["cost_econ", "cost_safe", "cost_smooth"].map(String::from));
        let nxi = self.steps.first().map_or(2 * self.state_names.len(), |s| s.slack.len());
        h.extend((1..=nxi).map(|i| format!("xi{i}")));
        h.extend(["solve_time", "status"].map(String::from));
        h
    }

    /// One row per step; floats in shortest round-trip form.
    pub fn write_csv<W: io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(self.header())?;
        for s in &self.steps {
            let mut row = vec![s.k.to_string()];
            row.extend(s.state.iter().map(f64::to_string));
            row.extend(s.input.iter().map(f64::to_string));
            row.extend(s.disturbance.iter().map(f64::to_string));
            row.extend([s.cost_econ, s.cost_safe, s.cost_smooth].map(|v| v.to_string()));
            row.extend(s.slack.iter().map(f64::to_string));
            row.push(s.solve_time.to_string());
            row.push(s.status.to_string());
            out.write_record(&row)?;
        }
        out.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }

    pub fn summary(&self) -> String {
        let n = self.len().max(1) as f64;
        let times = self.solve_times();
        let mut s = String::new();
        let _ = writeln!(s, "scenario            {} ({})", self.scenario, self.scenario_hash);
        let _ = writeln!(s, "controller          {}", self.controller);
        let _ = writeln!(s, "steps               {}", self.len());
        let _ = writeln!(s, "flagged steps       {:?}", self.flagged_steps());
        let _ = writeln!(s, "total energy cost   {}", self.total_economic_cost());
        let _ = writeln!(s, "max node residual   {:e}", self.max_node_residual());
        let _ = writeln!(s, "mean solve time s   {:e}", times.iter().sum::<f64>() / n);
        let _ = writeln!(
            s,
            "mean iterations     {}",
            self.steps.iter().map(|r| r.iterations).sum::<usize>() as f64 / n
        );
        let _ = writeln!(
            s,
            "max kkt residual    {:e}",
            self.steps.iter().map(|r| r.kkt_residual).fold(0.0, f64::max)
        );
        s
    }
}

/// Runs `steps` receding-horizon steps from the scenario's initial condition.
///
/// Each step assembles the problem at the current level and previous input,
/// solves it warm-started from the previous solution, applies the first
/// input and advances the plant with the true demand. A solve that does not
/// converge still applies its last iterate and is flagged in the log.
pub fn run_closed_loop(scenario: &Scenario, config: &ControllerConfig, steps: usize) -> Result<SimulationLog> {
    let schedule = config.schedule()?;
    let model = &scenario.model;
    let available = scenario.demand.len().min(scenario.tariff.len());
    let needed = steps + config.horizon - 1;
    if needed > available {
        return Err(Error::Horizon {
            step: steps.saturating_sub(1),
            horizon: config.horizon,
            needed,
            available,
        });
    }
    let (nx, nu) = (model.n_states(), model.n_inputs());
    let x_ref = model.level_refs();
    let mut x = model.level_inits();
    let mut u_prev = scenario.initial_input.clone();
    let mut previous: Option<DVector<f64>> = None;
    let mut records = Vec::with_capacity(steps);

    for k in 0..steps {
        let problem = OcpProblem::assemble_with(scenario, &schedule, ExpansionKind::Interpolated, &x, &u_prev, k)?;
        let z0 = match &previous {
            Some(z) => warm_start(z, &schedule, &problem),
            None => problem.hold_input(),
        };
        let started = Instant::now();
        let result = solve(&problem, &config.options, &z0);
        let solve_time = started.elapsed().as_secs_f64();

        let u = problem.inputs_of(&result.z).rows(0, nu).into_owned();
        let du = &u - &u_prev;
        let d = scenario.demand[k].clone();
        let x_next = model_step(model, &x, &u, &d, scenario.dt)?;
        let l = problem.layout();
        let slack = result.z.rows(l.slack_offset(), 2 * nx).into_owned();
        for i in 0..nx {
            let t = &model.tanks[i];
            let lo = t.level_min - slack[i] - BOUND_TOLERANCE;
            let hi = t.level_max + slack[nx + i] + BOUND_TOLERANCE;
            if x_next[i] < lo || x_next[i] > hi {
                return Err(Error::ClosedLoop {
                    step: k,
                    reason: format!(
                        "tank {} level {} outside [{lo}, {hi}] (solver status {})",
                        t.name, x_next[i], result.status
                    ),
                });
            }
        }
        let node_residual = model.node_residual(&u, &d)?.amax();
        records.push(StepRecord {
            k,
            cost_econ: economic_stage_cost(model, &u, scenario.tariff[k], scenario.dt),
            cost_safe: safety_stage_cost(&x_next, &x_ref),
            cost_smooth: smoothness_stage_cost(&du),
            state: x,
            input: u.clone(),
            rate: du,
            disturbance: d,
            slack,
            solve_time,
            status: result.status,
            iterations: result.iterations,
            kkt_residual: result.kkt_residual,
            node_residual,
        });
        x = x_next;
        u_prev = u;
        previous = Some(result.z);
    }

    Ok(SimulationLog {
        scenario: scenario.name.clone(),
        scenario_hash: scenario.hash().to_string(),
        controller: config.label(),
        state_names: (1..=nx).map(|i| format!("x{i}")).collect(),
        input_names: model.input_names.clone(),
        disturbance_names: scenario.demand_names.clone(),
        steps: records,
        final_state: x,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Mape {
    /// Percent; `None` when every reference entry was excluded.
    pub percent: Option<f64>,
    /// Entries dropped because the reference was (near) zero.
    pub excluded: usize,
}

/// Mean absolute percentage error of `test` against `reference`.
pub fn mape(reference: &[f64], test: &[f64]) -> Result<Mape> {
    if reference.len() != test.len() {
        return Err(Error::dim("MAPE series", reference.len(), test.len()));
    }
    let mut sum = 0.0;
    let mut used = 0usize;
    for (x, y) in reference.iter().zip(test) {
        if x.abs() < MAPE_ZERO_GUARD {
            continue;
        }
        sum += ((x - y) / x).abs();
        used += 1;
    }
    Ok(Mape {
        percent: (used > 0).then(|| 100.0 * sum / used as f64),
        excluded: reference.len() - used,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChannelMape {
    pub name: String,
    pub mape: Mape,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub scenario: String,
    pub steps: usize,
    /// States first, then inputs.
    pub mape: Vec<ChannelMape>,
    pub mean_time_full: f64,
    pub mean_time_blocked: f64,
    /// `100·(1 − mean_blocked/mean_full)`.
    pub reduction_mean: f64,
    /// Same ratio on the medians.
    pub reduction_median: f64,
    /// Same ratio on the 90th percentiles.
    pub reduction_p90: f64,
    pub times_full: Vec<f64>,
    pub times_blocked: Vec<f64>,
    pub total_econ_full: f64,
    pub total_econ_blocked: f64,
    pub flagged_full: Vec<usize>,
    pub flagged_blocked: Vec<usize>,
}

fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = p * (v.len() - 1) as f64;
    let (lo, hi) = (rank.floor() as usize, rank.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (rank - lo as f64)
}

fn reduction(full: f64, blocked: f64) -> f64 {
    if full > 0.0 {
        100.0 * (1.0 - blocked / full)
    } else {
        0.0
    }
}

/// MAPE of every state and input channel (full run as reference) and the
/// solve-time reduction of the blocked run.
pub fn compare(full: &SimulationLog, blocked: &SimulationLog) -> Result<ComparisonReport> {
    if full.scenario_hash != blocked.scenario_hash {
        return Err(Error::Comparison(format!(
            "scenario mismatch: {} vs {}",
            full.scenario_hash, blocked.scenario_hash
        )));
    }
    if full.len() != blocked.len() {
        return Err(Error::Comparison(format!(
            "runs differ in length: {} vs {} steps",
            full.len(),
            blocked.len()
        )));
    }
    let mut channels = Vec::new();
    for (i, name) in full.state_names.iter().enumerate() {
        channels.push(ChannelMape {
            name: name.clone(),
            mape: mape(&full.state_series(i), &blocked.state_series(i))?,
        });
    }
    for (c, name) in full.input_names.iter().enumerate() {
        channels.push(ChannelMape {
            name: name.clone(),
            mape: mape(&full.input_series(c), &blocked.input_series(c))?,
        });
    }
    let tf = full.solve_times();
    let tb = blocked.solve_times();
    let n = tf.len().max(1) as f64;
    let mean_f = tf.iter().sum::<f64>() / n;
    let mean_b = tb.iter().sum::<f64>() / n;
    Ok(ComparisonReport {
        scenario: full.scenario.clone(),
        steps: full.len(),
        mape: channels,
        mean_time_full: mean_f,
        mean_time_blocked: mean_b,
        reduction_mean: reduction(mean_f, mean_b),
        reduction_median: reduction(percentile(&tf, 0.5), percentile(&tb, 0.5)),
        reduction_p90: reduction(percentile(&tf, 0.9), percentile(&tb, 0.9)),
        total_econ_full: full.total_economic_cost(),
        total_econ_blocked: blocked.total_economic_cost(),
        flagged_full: full.flagged_steps(),
        flagged_blocked: blocked.flagged_steps(),
        times_full: tf,
        times_blocked: tb,
    })
}

impl ComparisonReport {
    /// `metric,channel,value,excluded` rows.
    pub fn write_csv<W: io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["metric", "channel", "value", "excluded"])?;
        for c in &self.mape {
            let v = c.mape.percent.map_or("NaN".to_string(), |v| v.to_string());
            out.write_record(["mape_percent", c.name.as_str(), v.as_str(), c.mape.excluded.to_string().as_str()])?;
        }
        let scalars = [
            ("mean_solve_time_full", self.mean_time_full),
            ("mean_solve_time_blocked", self.mean_time_blocked),
            ("reduction_mean_percent", self.reduction_mean),
            ("reduction_median_percent", self.reduction_median),
            ("reduction_p90_percent", self.reduction_p90),
            ("total_econ_full", self.total_econ_full),
            ("total_econ_blocked", self.total_econ_blocked),
        ];
        for (name, v) in scalars {
            out.write_record([name, "", v.to_string().as_str(), ""])?;
        }
        for (k, (f, b)) in self.times_full.iter().zip(&self.times_blocked).enumerate() {
            let k = k.to_string();
            out.write_record(["solve_time_full", k.as_str(), f.to_string().as_str(), ""])?;
            out.write_record(["solve_time_blocked", k.as_str(), b.to_string().as_str(), ""])?;
        }
        out.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "scenario {} over {} steps", self.scenario, self.steps);
        let _ = writeln!(s, "MAPE of blocked run against full run:");
        for c in &self.mape {
            match c.mape.percent {
                Some(p) => {
                    let _ = write!(s, "  {:<8} {:>9.4} %", c.name, p);
                }
                None => {
                    let _ = write!(s, "  {:<8}       n/a  ", c.name);
                }
            }
            if c.mape.excluded > 0 {
                let _ = write!(s, "  ({} zero-reference samples excluded)", c.mape.excluded);
            }
            s.push('\n');
        }
        let _ = writeln!(
            s,
            "mean solve time: full {:.4e} s, blocked {:.4e} s",
            self.mean_time_full, self.mean_time_blocked
        );
        let _ = writeln!(
            s,
            "solve-time reduction: mean {:.1} %, median {:.1} %, p90 {:.1} %",
            self.reduction_mean, self.reduction_median, self.reduction_p90
        );
        let _ = writeln!(
            s,
            "total energy cost: full {:.6}, blocked {:.6}",
            self.total_econ_full, self.total_econ_blocked
        );
        let _ = writeln!(s, "flagged steps: full {:?}, blocked {:?}", self.flagged_full, self.flagged_blocked);
        s
    }
}
