//! Fixed-step RK4 discretization and open-loop rollout.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::model::NetworkModel;

/// Prediction horizon: `steps` samples of `dt` hours each.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Horizon {
    pub steps: usize,
    pub dt: f64,
}

impl Horizon {
    pub fn new(steps: usize, dt: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Scenario("prediction horizon must be at least one step".into()));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::StepSize(dt));
        }
        Ok(Self { steps, dt })
    }
}

/// One classical RK4 step with `u` and `d` held over the interval.
pub fn rk4_step<F>(rhs: F, x: &DVector<f64>, u: &DVector<f64>, d: &DVector<f64>, dt: f64) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>, &DVector<f64>, &DVector<f64>) -> Result<DVector<f64>>,
{
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::StepSize(dt));
    }
    let k1 = rhs(x, u, d)?;
    let k2 = rhs(&(x + &k1 * (0.5 * dt)), u, d)?;
    let k3 = rhs(&(x + &k2 * (0.5 * dt)), u, d)?;
    let k4 = rhs(&(x + &k3 * dt), u, d)?;
    Ok(x + (k1 + (k2 + k3) * 2.0 + k4) * (dt / 6.0))
}

/// Advances the network model by one sample.
pub fn model_step(model: &NetworkModel, x: &DVector<f64>, u: &DVector<f64>, d: &DVector<f64>, dt: f64) -> Result<DVector<f64>> {
    if x.len() != model.n_states() {
        return Err(Error::dim("state vector", model.n_states(), x.len()));
    }
    rk4_step(|_, u, d| model.tank_rhs(u, d), x, u, d, dt)
}

/// Open-loop state trajectory of length `horizon.steps + 1`, starting at `x0`.
pub fn rollout(
    model: &NetworkModel,
    x0: &DVector<f64>,
    inputs: &[DVector<f64>],
    disturbances: &[DVector<f64>],
    horizon: &Horizon,
) -> Result<Vec<DVector<f64>>> {
    if inputs.len() != horizon.steps {
        return Err(Error::dim("input sequence", horizon.steps, inputs.len()));
    }
    if disturbances.len() != horizon.steps {
        return Err(Error::dim("disturbance sequence", horizon.steps, disturbances.len()));
    }
    let mut traj = Vec::with_capacity(horizon.steps + 1);
    traj.push(x0.clone());
    for (u, d) in inputs.iter().zip(disturbances) {
        let next = model_step(model, traj.last().unwrap(), u, d, horizon.dt)?;
        traj.push(next);
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::two_tank;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn exp_rhs(x: &DVector<f64>, _: &DVector<f64>, _: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(x.clone())
    }

    fn scalar(v: f64) -> DVector<f64> {
        DVector::from_vec(vec![v])
    }

    #[test]
    fn exponential_step_matches_closed_form() {
        let x = rk4_step(exp_rhs, &scalar(1.0), &scalar(0.0), &scalar(0.0), 0.1).unwrap();
        assert!((x[0] - 0.1f64.exp()).abs() < 1e-7);
        // RK4 reproduces the Taylor series through h⁴
        assert!((x[0] - 1.105_170_833_333_333_3).abs() < 1e-15);
    }

    #[test]
    fn local_error_is_fifth_order() {
        let err = |h: f64| {
            let x = rk4_step(exp_rhs, &scalar(1.0), &scalar(0.0), &scalar(0.0), h).unwrap();
            (h.exp() - x[0]).abs()
        };
        for h in [0.2, 0.1] {
            let ratio = err(h) / err(h / 2.0);
            assert!((ratio / 32.0 - 1.0).abs() < 0.05, "h={h} ratio={ratio}");
        }
    }

    #[test]
    fn rejects_degenerate_step() {
        for dt in [0.0, -1.0, f64::NAN] {
            assert!(matches!(
                rk4_step(exp_rhs, &scalar(1.0), &scalar(0.0), &scalar(0.0), dt),
                Err(Error::StepSize(_))
            ));
        }
        assert!(Horizon::new(0, 1.0).is_err());
        assert!(Horizon::new(3, 0.0).is_err());
    }

    #[test]
    fn constant_rhs_is_exact() {
        let m = two_tank();
        let x = DVector::from_vec(vec![2.5, 3.1]);
        let u = DVector::from_vec(vec![3.0, 1.0, 17.0, 4.5]);
        let d = DVector::from_vec(vec![4.0]);
        let next = model_step(&m, &x, &u, &d, 1.0).unwrap();
        let euler = &x + m.tank_rhs(&u, &d).unwrap();
        assert!((next - euler).amax() <= 4.0 * f64::EPSILON);
    }

    #[test]
    fn zero_flow_keeps_levels() {
        let m = two_tank();
        let h = Horizon::new(5, 1.0).unwrap();
        let x0 = DVector::from_vec(vec![2.0, 4.0]);
        let traj = rollout(&m, &x0, &vec![DVector::zeros(4); 5], &vec![DVector::zeros(1); 5], &h).unwrap();
        assert_eq!(traj.len(), 6);
        assert!(traj.iter().all(|x| *x == x0));
    }

    #[test]
    fn linear_fill() {
        let mut m = two_tank();
        m.tanks.truncate(1);
        m.tank_input_map = DMatrix::from_row_slice(1, 4, &[0.0, 0.0, 1.0, 0.0]);
        m.tank_disturbance_map = DMatrix::zeros(1, 1);
        let h = Horizon::new(3, 1.0).unwrap();
        let u = vec![DVector::from_vec(vec![0.0, 0.0, 10.0, 0.0]); 3];
        let traj = rollout(&m, &scalar(2.0), &u, &vec![scalar(0.0); 3], &h).unwrap();
        for (x, want) in traj.iter().zip([2.0, 2.1, 2.2, 2.3]) {
            assert!((x[0] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn rollout_length_mismatch() {
        let m = two_tank();
        let h = Horizon::new(3, 1.0).unwrap();
        let x0 = DVector::zeros(2);
        let err = rollout(&m, &x0, &vec![DVector::zeros(4); 2], &vec![DVector::zeros(1); 3], &h).unwrap_err();
        assert!(matches!(err, Error::Dimension { expected: 3, actual: 2, .. }));
    }

    #[test]
    fn rollout_matches_cumulative_sum_and_conserves_volume() {
        let mut m = two_tank();
        m.tank_disturbance_map = DMatrix::from_row_slice(2, 1, &[-0.5, -0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = Horizon::new(24, 1.0).unwrap();
        for _ in 0..20 {
            let u: Vec<_> = (0..24).map(|_| DVector::from_fn(4, |_, _| rng.gen_range(0.0..100.0))).collect();
            let d: Vec<_> = (0..24).map(|_| DVector::from_fn(1, |_, _| rng.gen_range(0.0..80.0))).collect();
            let x0 = DVector::from_vec(vec![2.0, 3.0]);
            let traj = rollout(&m, &x0, &u, &d, &h).unwrap();
            let mut acc = x0.clone();
            let mut volume = 0.0;
            for j in 0..24 {
                acc += m.tank_rhs(&u[j], &d[j]).unwrap() * h.dt;
                volume += h.dt * (&m.tank_input_map * &u[j] + &m.tank_disturbance_map * &d[j]).sum();
                assert!((&traj[j + 1] - &acc).amax() < 1e-12);
                let stored: f64 = m.tanks.iter().enumerate().map(|(i, t)| t.area * (traj[j + 1][i] - x0[i])).sum();
                assert!((stored - volume).abs() < 1e-9);
            }
        }
    }
}
