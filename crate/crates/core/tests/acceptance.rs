//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each, and
//! exits non-zero if any fails.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use twofloat::TwoFloat;

use wds_mpc::blocking::{BlockingSchedule, ExpansionMatrix};
use wds_mpc::integrator::{rk4_step, rollout, Horizon};
use wds_mpc::model::{ActuatorBounds, NetworkModel, Pump, PumpCurve, TankParams};
use wds_mpc::objective::{EnergyForm, Weights, ABS_SMOOTHING, SPECIFIC_WEIGHT_KN};
use wds_mpc::ocp::{OcpProblem, ProblemData};
use wds_mpc::scenario::{default_scenario, Scenario};
use wds_mpc::simulation::{compare, run_closed_loop, ControllerConfig, SimulationLog};
use wds_mpc::sqp::{solve, SolverOptions};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_lengths(rng: &mut ChaCha8Rng, np: usize) -> Vec<usize> {
    let mut left = np;
    let mut lengths = Vec::new();
    while left > 0 {
        let l = rng.gen_range(1..=left.min(12));
        lengths.push(l);
        left -= l;
    }
    lengths
}

fn blocking_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..50 {
        let np = rng.gen_range(1..=48);
        let lengths = random_lengths(&mut rng, np);
        let s = BlockingSchedule::from_lengths(&lengths, np).map_err(|e| e.to_string())?;
        let nc = s.blocks();

        let b = ExpansionMatrix::binary(&s);
        let w = b.weights();
        check(w.shape() == (np, nc), || format!("case {case}: binary shape {:?}", w.shape()))?;
        check(w.iter().all(|v| *v == 0.0 || *v == 1.0), || format!("case {case}: non-binary entry"))?;
        for r in 0..np {
            check(w.row(r).sum() == 1.0, || format!("case {case}: binary row {r} sum {}", w.row(r).sum()))?;
        }
        for (i, (&start, &l)) in s.starts().iter().zip(&lengths).enumerate() {
            let col = w.column(i);
            check(col.sum() == l as f64, || format!("case {case}: column {i} sum ≠ {l}"))?;
            // contiguous run [s_i, s_i + l_i)
            for r in 0..np {
                let inside = r + 1 >= start && r + 1 < start + l;
                check((col[r] == 1.0) == inside, || format!("case {case}: column {i} row {r}"))?;
            }
            let trailing = np + 1 - start - l;
            check(col.rows(np - trailing, trailing).iter().all(|v| *v == 0.0), || {
                format!("case {case}: column {i} trailing padding")
            })?;
        }

        let m = ExpansionMatrix::interpolated(&s);
        let w = m.weights();
        for r in 0..np {
            let row = w.row(r);
            check(row.iter().all(|v| *v >= 0.0), || format!("case {case}: negative weight in row {r}"))?;
            check((row.sum() - 1.0).abs() <= 1e-12, || format!("case {case}: row {r} sums to {}", row.sum()))?;
            let support: Vec<usize> = (0..nc).filter(|&c| row[c] != 0.0).collect();
            check(support.len() <= 2 && support.windows(2).all(|p| p[1] == p[0] + 1), || {
                format!("case {case}: row {r} support {support:?}")
            })?;
        }
        for (i, &start) in s.starts().iter().enumerate() {
            let row = w.row(start - 1);
            check((0..nc).all(|c| row[c] == if c == i { 1.0 } else { 0.0 }), || {
                format!("case {case}: anchor row {} is not e_{i}", start - 1)
            })?;
        }
        let ones = BlockingSchedule::unblocked(np).map_err(|e| e.to_string())?;
        check(*ExpansionMatrix::interpolated(&ones).weights() == DMatrix::identity(np, np), || {
            format!("case {case}: unblocked interpolation is not the identity")
        })?;
    }
    Ok("50 schedules".into())
}

fn integrator() -> Outcome {
    let s = default_scenario();
    let m = &s.model;
    let dt = s.dt;
    let np = 72;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs: Vec<DVector<f64>> = (0..np)
        .map(|_| DVector::from_fn(m.n_inputs(), |_, _| rng.gen_range(0.0..60.0)))
        .collect();
    let traj = rollout(m, &m.level_inits(), &inputs, &s.demand[..np], &Horizon::new(np, dt).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let gain = m.input_gain();
    let dgain = m.disturbance_gain();
    let mut euler = m.level_inits();
    let mut worst = 0.0f64;
    for k in 0..np {
        euler += (&gain * &inputs[k] + &dgain * &s.demand[k]) * dt;
        let err = (&traj[k + 1] - &euler).amax() / euler.amax();
        worst = worst.max(err);
    }
    check(worst <= 8.0 * f64::EPSILON, || format!("RK4 vs Euler relative gap {worst:e}"))?;

    // global error at t = 1 on ẋ = x
    let global = |n: usize| {
        let h = 1.0 / n as f64;
        let mut x = DVector::from_element(1, 1.0);
        let z = DVector::zeros(1);
        for _ in 0..n {
            x = rk4_step(|x, _, _| Ok(x.clone()), &x, &z, &z, h).unwrap();
        }
        (x[0] - 1f64.exp()).abs()
    };
    let ratio = global(10) / global(20);
    check((ratio / 16.0 - 1.0).abs() < 0.05, || format!("error ratio {ratio} vs 16"))?;
    Ok(format!("max RK4/Euler gap {worst:.1e}, error ratio {ratio:.3}"))
}

fn random_decision(rng: &mut ChaCha8Rng, p: &OcpProblem) -> DVector<f64> {
    let l = p.layout();
    DVector::from_fn(l.dim(), |i, _| {
        if i < l.slack_offset() {
            rng.gen_range(-2.0..2.0)
        } else {
            rng.gen_range(0.0..0.05)
        }
    })
}

/// The optimizer's cost re-evaluated in double-double arithmetic, straight
/// from the model data, so a central difference at small `h` is not swamped
/// by rounding in the O(1) stage terms.
fn cost_dd(p: &OcpProblem, z: &DVector<f64>) -> TwoFloat {
    let d = p.data();
    let m = &d.model;
    let l = p.layout();
    let w = p.expansion().weights();
    let dt = d.horizon.dt;
    let signed = p.energy_form() == EnergyForm::Signed;
    let mut u: Vec<TwoFloat> = d.u_prev.iter().map(|&v| TwoFloat::from(v)).collect();
    let mut x: Vec<TwoFloat> = d.x0.iter().map(|&v| TwoFloat::from(v)).collect();
    let (mut econ, mut safe, mut smooth) = (TwoFloat::from(0.0), TwoFloat::from(0.0), TwoFloat::from(0.0));
    for j in 0..d.horizon.steps {
        for c in 0..l.inputs {
            let mut r = TwoFloat::from(0.0);
            for i in 0..l.blocks {
                r += TwoFloat::from(w[(j, i)]) * z[l.rate_index(i, c)];
            }
            smooth += r * r;
            u[c] += r;
        }
        for pump in &m.pumps {
            let q = u[pump.channel];
            let [ha, hb, hc] = pump.curve.head_coeffs;
            let [ea, eb, ec] = pump.curve.eff_coeffs;
            let head = (q * ha + hb) * q + hc;
            let mut eta = (q * ea + eb) * q + ec;
            if eta.hi() < pump.curve.eta_floor {
                eta = TwoFloat::from(pump.curve.eta_floor);
            } else if eta.hi() > 1.0 {
                eta = TwoFloat::from(1.0);
            }
            let v = q / 3600.0 * SPECIFIC_WEIGHT_KN * head / eta * d.tariff_forecast[j];
            let v = if signed {
                v
            } else {
                (v * v + ABS_SMOOTHING * ABS_SMOOTHING).sqrt() - ABS_SMOOTHING
            };
            econ += v * dt;
        }
        let dist = &d.demand_forecast[j];
        for (t, tank) in m.tanks.iter().enumerate() {
            let mut flow = TwoFloat::from(0.0);
            for (c, &q) in u.iter().enumerate() {
                flow += q * m.tank_input_map[(t, c)];
            }
            for (k, &v) in dist.iter().enumerate() {
                flow += TwoFloat::from(v) * m.tank_disturbance_map[(t, k)];
            }
            x[t] += flow / tank.area * dt;
            let e = x[t] - tank.level_ref;
            safe += e * e;
        }
    }
    let mut slack = TwoFloat::from(0.0);
    for k in l.slack_offset()..l.dim() {
        slack += z[k];
    }
    let wt = p.weights();
    econ * wt.economic + safe * wt.safety + smooth * wt.smoothness + slack * wt.slack
}

fn gradient_check() -> Outcome {
    let s = default_scenario();
    let sched = BlockingSchedule::from_lengths(&s.controller.lengths, s.controller.prediction_horizon)
        .map_err(|e| e.to_string())?;
    let p = OcpProblem::assemble(&s, &sched, &s.model.level_inits(), &s.initial_input, 0).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for trial in 0..100 {
        let z = random_decision(&mut rng, &p);
        let (f, g) = p.cost_and_gradient(&z);
        let f_dd = cost_dd(&p, &z).hi();
        check((f - f_dd).abs() <= 1e-12 * f.abs().max(1.0), || {
            format!("trial {trial}: double-double cost {f_dd} disagrees with {f}")
        })?;
        for i in 0..z.len() {
            let mut up = z.clone();
            up[i] += h;
            let mut dn = z.clone();
            dn[i] -= h;
            let span = TwoFloat::from(up[i]) - dn[i];
            let fd = ((cost_dd(&p, &up) - cost_dd(&p, &dn)) / span).hi();
            let rel = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(f64::MIN_POSITIVE);
            worst = worst.max(rel);
            check(rel < 1e-5, || format!("trial {trial} component {i}: analytic {} fd {fd} rel {rel:e}", g[i]))?;
        }
    }
    Ok(format!("worst relative error {worst:.2e}"))
}

/// One tank filled by one pump, drained by one demand, two steps.
fn toy_problem(economic: f64) -> OcpProblem {
    let model = NetworkModel {
        tanks: vec![TankParams {
            name: "T".into(),
            area: 50.0,
            level_min: 1.0,
            level_max: 5.0,
            level_ref: 3.0,
            level_init: 3.2,
        }],
        pumps: vec![Pump {
            name: "P".into(),
            channel: 0,
            curve: PumpCurve {
                head_coeffs: [-1e-3, 0.0, 40.0],
                eff_coeffs: [-1e-4, 5e-3, 0.6],
                eta_floor: 0.05,
            },
        }],
        bounds: ActuatorBounds {
            flow_min: vec![0.0],
            flow_max: vec![60.0],
        },
        input_names: vec!["q".into()],
        tank_input_map: DMatrix::from_element(1, 1, 1.0),
        tank_disturbance_map: DMatrix::from_element(1, 1, -1.0),
        node_input_map: DMatrix::zeros(0, 1),
        node_disturbance_map: DMatrix::zeros(0, 1),
    };
    OcpProblem::new(ProblemData {
        model,
        horizon: Horizon::new(2, 1.0).unwrap(),
        schedule: BlockingSchedule::unblocked(2).unwrap(),
        expansion: wds_mpc::blocking::ExpansionKind::Interpolated,
        weights: Weights {
            economic,
            safety: 1.0,
            smoothness: 0.05,
            slack: 1e3,
        },
        demand_forecast: vec![DVector::from_element(1, 25.0), DVector::from_element(1, 30.0)],
        tariff_forecast: vec![0.1, 0.3],
        x0: DVector::from_element(1, 3.2),
        u_prev: DVector::from_element(1, 20.0),
        step: 0,
    })
    .unwrap()
}

fn solver_oracles() -> Outcome {
    let opts = SolverOptions::default();

    // nonconvex instance against an exhaustive grid over both rates
    let p = toy_problem(1.0);
    let r = solve(&p, &opts, &p.hold_input());
    check(r.converged(), || format!("toy solve {:?}", r.status))?;
    let u_prev = 20.0;
    let (lo, hi) = (0.0 - u_prev, 60.0 - u_prev);
    let mut best = f64::INFINITY;
    for a in 0..=200 {
        let r1 = lo + (hi - lo) * a as f64 / 200.0;
        for b in 0..=200 {
            let u2 = 60.0 * b as f64 / 200.0;
            let r2 = u2 - (u_prev + r1);
            let mut z = DVector::from_vec(vec![r1, r2, 0.0, 0.0]);
            let x = p.states_of(&z);
            z[2] = x.iter().map(|v| 1.0 - v).fold(0.0, f64::max);
            z[3] = x.iter().map(|v| v - 5.0).fold(0.0, f64::max);
            best = best.min(p.cost(&z));
        }
    }
    check(r.cost <= best + 1e-4, || format!("SQP {} > grid {best} + 1e-4", r.cost))?;
    let toy_cost = r.cost;

    // convex instance against the hand-derived normal equations
    let p = toy_problem(0.0);
    let r = solve(&p, &SolverOptions { kkt_tol: 1e-10, ..opts }, &p.hold_input());
    check(r.converged(), || format!("convex toy solve {:?}", r.status))?;
    // X1 = x0 + (u0 + r1 − d1)/A, X2 = X1 + (u0 + r1 + r2 − d2)/A
    // f = ws·[(X1−ref)² + (X2−ref)²] + wm·(r1² + r2²)
    let (a, x0, xr, u0, d1, d2, ws, wm) = (50.0, 3.2, 3.0, 20.0, 25.0, 30.0, 1.0, 0.05);
    let e1 = x0 - xr + (u0 - d1) / a;
    let e2 = e1 + (u0 - d2) / a;
    // ∂X1/∂r1 = 1/A, ∂X2/∂r1 = 2/A, ∂X2/∂r2 = 1/A
    let k = ws / (a * a);
    let h11 = 2.0 * (k * (1.0 + 4.0) + wm);
    let h12 = 2.0 * k * 2.0;
    let h22 = 2.0 * (k + wm);
    let g1 = 2.0 * ws * (e1 / a + 2.0 * e2 / a);
    let g2 = 2.0 * ws * e2 / a;
    let det = h11 * h22 - h12 * h12;
    let r1 = (-g1 * h22 + g2 * h12) / det;
    let r2 = (-g2 * h11 + g1 * h12) / det;
    let err = (r.z[0] - r1).abs().max((r.z[1] - r2).abs()).max(r.z[2].abs()).max(r.z[3].abs());
    check(err <= 1e-6, || format!("closed form ({r1}, {r2}) vs SQP ({}, {}), err {err:e}", r.z[0], r.z[1]))?;
    Ok(format!("toy cost {toy_cost:.6} vs grid {best:.6}; convex error {err:.1e}"))
}

fn cost_ordering() -> Outcome {
    let s = default_scenario();
    let np = s.controller.prediction_horizon;
    let full = BlockingSchedule::unblocked(np).map_err(|e| e.to_string())?;
    let blocked = BlockingSchedule::from_lengths(&[1, 2, 3, 4, 5, 9], np).map_err(|e| e.to_string())?;
    let opts = SolverOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = f64::NEG_INFINITY;
    for trial in 0..20 {
        let k = rng.gen_range(0..=s.demand.len() - np);
        let x0 = DVector::from_fn(s.model.n_states(), |_, _| rng.gen_range(1.5..5.5));
        let (qv1, qv2, qp2) = (rng.gen_range(5.0..60.0), rng.gen_range(0.0..40.0), rng.gen_range(0.0..60.0));
        let u_prev = DVector::from_vec(vec![qv1, qv2, qv1 + qv2, qp2]);
        let pf = OcpProblem::assemble(&s, &full, &x0, &u_prev, k).map_err(|e| e.to_string())?;
        let pb = OcpProblem::assemble(&s, &blocked, &x0, &u_prev, k).map_err(|e| e.to_string())?;
        let rf = solve(&pf, &opts, &pf.hold_input());
        let rb = solve(&pb, &opts, &pb.hold_input());
        check(rf.converged() && rb.converged(), || {
            format!("trial {trial}: status full {} blocked {}", rf.status, rb.status)
        })?;
        let gap = rf.cost - rb.cost;
        worst = worst.max(gap);
        check(gap <= 1e-5, || format!("trial {trial} (k={k}): full {} > blocked {} + 1e-5", rf.cost, rb.cost))?;
    }
    Ok(format!("20 problems, largest full − blocked {worst:.3e}"))
}

struct ClosedLoop {
    full: SimulationLog,
    blocked: SimulationLog,
}

fn run_pair(s: &Scenario) -> Result<ClosedLoop, String> {
    let np = s.controller.prediction_horizon;
    let full = run_closed_loop(s, &ControllerConfig::full(np), 72).map_err(|e| e.to_string())?;
    let blocked =
        run_closed_loop(s, &ControllerConfig::blocked(np, s.controller.lengths.clone()), 72).map_err(|e| e.to_string())?;
    Ok(ClosedLoop { full, blocked })
}

fn demand_guarantee(pair: &ClosedLoop, s: &Scenario) -> Outcome {
    let m = &s.model;
    let nx = m.n_states();
    let mut worst_res = 0.0f64;
    for log in [&pair.full, &pair.blocked] {
        check(log.len() == 72, || format!("{}: {} steps", log.controller, log.len()))?;
        check(log.flagged_steps().is_empty(), || format!("{}: flagged {:?}", log.controller, log.flagged_steps()))?;
        for (i, r) in log.steps.iter().enumerate() {
            let res = m.node_residual(&r.input, &r.disturbance).map_err(|e| e.to_string())?.amax();
            worst_res = worst_res.max(res);
            check(res < 1e-6, || format!("{} step {}: node residual {res:e}", log.controller, r.k))?;
            let next = log.steps.get(i + 1).map_or(&log.final_state, |n| &n.state);
            for t in 0..nx {
                let (lo, hi) = (m.tanks[t].level_min - r.slack[t], m.tanks[t].level_max + r.slack[nx + t]);
                check(next[t] >= lo && next[t] <= hi, || {
                    format!("{} step {}: tank {t} level {} outside [{lo}, {hi}]", log.controller, r.k, next[t])
                })?;
            }
        }
    }
    Ok(format!("max node residual {worst_res:.1e}, all levels within slack-relaxed bounds"))
}

fn mape_check(pair: &ClosedLoop) -> Outcome {
    let report = compare(&pair.full, &pair.blocked).map_err(|e| e.to_string())?;
    let mut parts = Vec::new();
    for c in &report.mape {
        let Some(p) = c.mape.percent else {
            return Err(format!("{}: MAPE undefined (all reference samples zero)", c.name));
        };
        check(p < 10.0, || format!("{}: MAPE {p:.3} %", c.name))?;
        parts.push(format!("{} {p:.2}%", c.name));
    }
    Ok(parts.join(", "))
}

fn speedup_check(pair: &ClosedLoop) -> Outcome {
    let report = compare(&pair.full, &pair.blocked).map_err(|e| e.to_string())?;
    let path = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance_solve_times.csv");
    let mut csv = String::from("k,solve_time_full,solve_time_idib\n");
    for (k, (f, b)) in report.times_full.iter().zip(&report.times_blocked).enumerate() {
        csv.push_str(&format!("{k},{f},{b}\n"));
    }
    fs::write(&path, csv).map_err(|e| e.to_string())?;
    let msg = format!(
        "mean reduction {:.1}% (median {:.1}%, mean {:.2} ms vs {:.2} ms); per-step series in {}",
        report.reduction_mean,
        report.reduction_median,
        1e3 * report.mean_time_full,
        1e3 * report.mean_time_blocked,
        path.display()
    );
    check(report.reduction_mean >= 50.0, || msg.clone())?;
    Ok(msg)
}

fn log_without_timing(log: &SimulationLog) -> String {
    let mut buf = Vec::new();
    log.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "solve_time").unwrap();
    text.lines()
        .map(|l| {
            let mut f: Vec<&str> = l.split(',').collect();
            f.remove(col);
            f.join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn determinism(first: &ClosedLoop, s: &Scenario) -> Outcome {
    let second = run_pair(s)?;
    for (a, b) in [(&first.full, &second.full), (&first.blocked, &second.blocked)] {
        check(log_without_timing(a) == log_without_timing(b), || format!("{} logs differ", a.controller))?;
        check(a.final_state.iter().zip(b.final_state.iter()).all(|(x, y)| x.to_bits() == y.to_bits()), || {
            format!("{} final states differ", a.controller)
        })?;
    }
    Ok("both controllers reproduce bitwise".into())
}

struct Gate {
    failures: usize,
}

impl Gate {
    fn run(&mut self, id: u32, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let out = f();
        let took = start.elapsed();
        let out = match (out, limit) {
            (Ok(_), Some(l)) if took > l => Err(format!("took {:.2} s, limit {:.0} s", took.as_secs_f64(), l.as_secs_f64())),
            (o, _) => o,
        };
        match out {
            Ok(msg) => println!("PASS [{id}] {name}: {msg} ({:.2} s)", took.as_secs_f64()),
            Err(msg) => {
                self.failures += 1;
                println!("FAIL [{id}] {name}: {msg} ({:.2} s)", took.as_secs_f64());
            }
        }
    }
}

fn main() -> ExitCode {
    let mut gate = Gate { failures: 0 };
    gate.run(1, "blocking algebra", Some(Duration::from_secs(1)), blocking_algebra);
    gate.run(2, "integrator", Some(Duration::from_secs(1)), integrator);
    gate.run(3, "gradient check", Some(Duration::from_secs(10)), gradient_check);
    gate.run(4, "solver oracles", Some(Duration::from_secs(30)), solver_oracles);
    gate.run(5, "open-loop cost ordering", Some(Duration::from_secs(120)), cost_ordering);

    let s = default_scenario();
    let started = Instant::now();
    let pair = run_pair(&s);
    let run_time = started.elapsed();
    match pair {
        Ok(pair) => {
            gate.run(6, "closed-loop demand guarantee", None, || {
                check(run_time <= Duration::from_secs(300), || {
                    format!("closed loop took {:.1} s", run_time.as_secs_f64())
                })?;
                demand_guarantee(&pair, &s).map(|m| format!("{m}; both runs {:.2} s", run_time.as_secs_f64()))
            });
            gate.run(7, "MAPE below 10%", None, || mape_check(&pair));
            gate.run(8, "solve-time reduction at least 50%", None, || speedup_check(&pair));
            gate.run(9, "determinism", None, || determinism(&pair, &s));
        }
        Err(e) => {
            for (id, name) in [(6, "closed-loop demand guarantee"), (7, "MAPE below 10%"), (8, "solve-time reduction at least 50%"), (9, "determinism")] {
                gate.run(id, name, None, || Err(format!("closed loop failed: {e}")));
            }
        }
    }

    if gate.failures == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {} criteria failed", gate.failures);
        ExitCode::FAILURE
    }
}
