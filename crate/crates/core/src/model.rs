//! Flow-based description of an aggregated water distribution network.
//!
//! Storage tanks integrate the net routed flow; pumps and valves are the
//! manipulated flows; demands enter as a measured disturbance. Everything is
//! linear in the flows except the pump curves, which only feed the energy
//! cost. Units: flows m³/hr, levels m, areas m², heads m, time hr.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TankParams {
    pub name: String,
    /// Cross-section in m².
    pub area: f64,
    pub level_min: f64,
    pub level_max: f64,
    /// Safety target level.
    pub level_ref: f64,
    pub level_init: f64,
}

/// Quadratic head and efficiency curves of one pump, flow in m³/hr.
#[derive(Debug, Clone, PartialEq)]
pub struct PumpCurve {
    /// `(a, b, c)` with head = a·q² + b·q + c.
    pub head_coeffs: [f64; 3],
    /// `(a, b, c)` with efficiency = a·q² + b·q + c before clamping.
    pub eff_coeffs: [f64; 3],
    pub eta_floor: f64,
}

impl PumpCurve {
    pub fn head(&self, q: f64) -> f64 {
        let [a, b, c] = self.head_coeffs;
        (a * q + b) * q + c
    }

    pub fn head_slope(&self, q: f64) -> f64 {
        let [a, b, _] = self.head_coeffs;
        2.0 * a * q + b
    }

    fn raw_efficiency(&self, q: f64) -> f64 {
        let [a, b, c] = self.eff_coeffs;
        (a * q + b) * q + c
    }

    /// Efficiency clamped to `[eta_floor, 1]`.
    pub fn efficiency(&self, q: f64) -> f64 {
        self.raw_efficiency(q).clamp(self.eta_floor, 1.0)
    }

    /// Derivative of [`PumpCurve::efficiency`]; zero where the clamp is engaged.
    pub fn efficiency_slope(&self, q: f64) -> f64 {
        let raw = self.raw_efficiency(q);
        if raw <= self.eta_floor || raw >= 1.0 {
            0.0
        } else {
            let [a, b, _] = self.eff_coeffs;
            2.0 * a * q + b
        }
    }
}

/// Head delivered by a pump at flow `q`.
pub fn pump_head(curve: &PumpCurve, q: f64) -> f64 {
    curve.head(q)
}

/// Clamped pump efficiency at flow `q`.
pub fn pump_efficiency(curve: &PumpCurve, q: f64) -> f64 {
    curve.efficiency(q)
}

/// A pump curve attached to one input channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Pump {
    pub name: String,
    pub channel: usize,
    pub curve: PumpCurve,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActuatorBounds {
    pub flow_min: Vec<f64>,
    pub flow_max: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    pub tanks: Vec<TankParams>,
    pub pumps: Vec<Pump>,
    pub bounds: ActuatorBounds,
    /// Display names of the input channels, in input-vector order.
    pub input_names: Vec<String>,
    /// n_x × n_u signed routing of actuator flows into tanks.
    pub tank_input_map: DMatrix<f64>,
    /// n_x × n_d signed routing of demands out of (or into) tanks.
    pub tank_disturbance_map: DMatrix<f64>,
    /// n_node × n_u incidence of actuators on storage-less nodes.
    pub node_input_map: DMatrix<f64>,
    /// n_node × n_d incidence of demands on storage-less nodes.
    pub node_disturbance_map: DMatrix<f64>,
}

impl NetworkModel {
    pub fn n_states(&self) -> usize {
        self.tanks.len()
    }

    pub fn n_inputs(&self) -> usize {
        self.tank_input_map.ncols()
    }

    pub fn n_disturbances(&self) -> usize {
        self.tank_disturbance_map.ncols()
    }

    pub fn n_nodes(&self) -> usize {
        self.node_input_map.nrows()
    }

    pub fn level_refs(&self) -> DVector<f64> {
        DVector::from_iterator(self.tanks.len(), self.tanks.iter().map(|t| t.level_ref))
    }

    pub fn level_inits(&self) -> DVector<f64> {
        DVector::from_iterator(self.tanks.len(), self.tanks.iter().map(|t| t.level_init))
    }

    /// Tank level derivative in m/hr. Does not depend on the current levels.
    pub fn tank_rhs(&self, u: &DVector<f64>, d: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_flows(u, d)?;
        let mut rate = &self.tank_input_map * u + &self.tank_disturbance_map * d;
        for (r, tank) in rate.iter_mut().zip(&self.tanks) {
            *r /= tank.area;
        }
        Ok(rate)
    }

    /// Node balance `E·u + Λ·d`; zero iff every storage-less node balances.
    pub fn node_residual(&self, u: &DVector<f64>, d: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_flows(u, d)?;
        Ok(&self.node_input_map * u + &self.node_disturbance_map * d)
    }

    /// `diag(1/area)·tank_input_map`, the constant input-to-rate gain.
    pub fn input_gain(&self) -> DMatrix<f64> {
        let mut g = self.tank_input_map.clone();
        for (mut row, tank) in g.row_iter_mut().zip(&self.tanks) {
            row /= tank.area;
        }
        g
    }

    /// `diag(1/area)·tank_disturbance_map`.
    pub fn disturbance_gain(&self) -> DMatrix<f64> {
        let mut g = self.tank_disturbance_map.clone();
        for (mut row, tank) in g.row_iter_mut().zip(&self.tanks) {
            row /= tank.area;
        }
        g
    }

    fn check_flows(&self, u: &DVector<f64>, d: &DVector<f64>) -> Result<()> {
        if u.len() != self.n_inputs() {
            return Err(Error::dim("input vector", self.n_inputs(), u.len()));
        }
        if d.len() != self.n_disturbances() {
            return Err(Error::dim("disturbance vector", self.n_disturbances(), d.len()));
        }
        Ok(())
    }

    /// Checks every structural invariant; an empty list means the model is usable.
    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        let nx = self.tanks.len();
        let nu = self.tank_input_map.ncols();
        let nd = self.tank_disturbance_map.ncols();
        let nn = self.node_input_map.nrows();

        for t in &self.tanks {
            let name = &t.name;
            let all = [t.area, t.level_min, t.level_max, t.level_ref, t.level_init];
            if all.iter().any(|v| !v.is_finite()) {
                out.push(format!("tank `{name}`: parameters must be finite"));
                continue;
            }
            if t.area <= 0.0 {
                out.push(format!("tank `{name}`: area {} must be positive", t.area));
            }
            if t.level_min >= t.level_max {
                out.push(format!(
                    "tank `{name}`: level_min {} must be below level_max {}",
                    t.level_min, t.level_max
                ));
            }
            if t.level_ref < t.level_min || t.level_ref > t.level_max {
                out.push(format!(
                    "tank `{name}`: level_ref {} outside [{}, {}]",
                    t.level_ref, t.level_min, t.level_max
                ));
            }
            if t.level_init < t.level_min || t.level_init > t.level_max {
                out.push(format!(
                    "tank `{name}`: initial level {} outside [{}, {}]",
                    t.level_init, t.level_min, t.level_max
                ));
            }
        }

        let shapes = [
            ("tank_input_map", &self.tank_input_map, nx, nu),
            ("tank_disturbance_map", &self.tank_disturbance_map, nx, nd),
            ("node_input_map", &self.node_input_map, nn, nu),
            ("node_disturbance_map", &self.node_disturbance_map, nn, nd),
        ];
        for (name, m, rows, cols) in shapes {
            if m.shape() != (rows, cols) {
                out.push(format!(
                    "{name}: shape {}x{} does not match expected {rows}x{cols}",
                    m.nrows(),
                    m.ncols()
                ));
            }
        }
        for (name, m) in [
            ("node_input_map", &self.node_input_map),
            ("node_disturbance_map", &self.node_disturbance_map),
        ] {
            for r in 0..m.nrows() {
                for c in 0..m.ncols() {
                    let v = m[(r, c)];
                    if v != 0.0 && v != 1.0 && v != -1.0 {
                        out.push(format!("{name}[{r}][{c}] = {v} is not an incidence value (-1, 0, 1)"));
                    }
                }
            }
        }
        if self.tank_input_map.iter().chain(self.tank_disturbance_map.iter()).any(|v| !v.is_finite()) {
            out.push("tank routing maps contain non-finite entries".to_string());
        }

        if self.input_names.len() != nu {
            out.push(format!("{} input names given for {nu} input channels", self.input_names.len()));
        }
        if self.bounds.flow_min.len() != nu || self.bounds.flow_max.len() != nu {
            out.push(format!(
                "bounds: expected {nu} entries, got flow_min {} / flow_max {}",
                self.bounds.flow_min.len(),
                self.bounds.flow_max.len()
            ));
        } else {
            for (i, (lo, hi)) in self.bounds.flow_min.iter().zip(&self.bounds.flow_max).enumerate() {
                if !(lo.is_finite() && hi.is_finite()) || *lo < 0.0 || lo > hi {
                    out.push(format!("bounds: channel {i} needs 0 <= flow_min <= flow_max, got [{lo}, {hi}]"));
                }
            }
        }

        if self.node_input_map.ncols() == nu && self.tank_input_map.nrows() == nx {
            for c in 0..nu {
                let routed = self.tank_input_map.column(c).iter().any(|v| *v != 0.0)
                    || self.node_input_map.column(c).iter().any(|v| *v != 0.0);
                if !routed {
                    out.push(format!("input channel {c} is not connected to any tank or node"));
                }
            }
        }

        let mut seen = vec![false; nu];
        for p in &self.pumps {
            if p.channel >= nu {
                out.push(format!("pump `{}`: channel {} out of range (n_u = {nu})", p.name, p.channel));
                continue;
            }
            if std::mem::replace(&mut seen[p.channel], true) {
                out.push(format!("pump `{}`: channel {} already has a pump curve", p.name, p.channel));
            }
            if p.curve.head_coeffs[2] <= 0.0 {
                out.push(format!("pump `{}`: shutoff head {} must be positive", p.name, p.curve.head_coeffs[2]));
            }
            if !(p.curve.eta_floor > 0.0 && p.curve.eta_floor <= 1.0) {
                out.push(format!("pump `{}`: eta_floor {} must lie in (0, 1]", p.name, p.curve.eta_floor));
            }
        }
        out
    }

    /// Like [`NetworkModel::validate`] but as a `Result`.
    pub fn ensure_valid(&self) -> Result<()> {
        let v = self.validate();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Model(v))
        }
    }
}
