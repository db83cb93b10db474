//! Scenario files: network description, weights, initial condition and the
//! demand/tariff series.
//!
//! A scenario is a JSON document plus two CSV files referenced from its
//! `series` section (paths relative to the JSON file):
//!
//! * demand: header `hour,<demand names…>`, one row per step, `hour` 0-based;
//! * tariff: header `hour,price`, price in currency/kWh.
//!
//! Unknown JSON keys are rejected.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ActuatorBounds, NetworkModel, Pump, PumpCurve, TankParams};
use crate::objective::Weights;

pub const TEMPLATES: &[&str] = &["default-2tank"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    /// Sampling period in hours.
    pub dt: f64,
    pub tanks: Vec<TankSpec>,
    pub pumps: Vec<PumpSpec>,
    pub bounds: BoundsSpec,
    pub topology: TopologySpec,
    pub initial: InitialSpec,
    pub weights: WeightsSpec,
    pub series: SeriesSpec,
    pub controller: ControllerSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TankSpec {
    pub name: String,
    pub area: f64,
    pub level_min: f64,
    pub level_max: f64,
    pub level_ref: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PumpSpec {
    pub name: String,
    /// Index of the input channel this pump drives.
    pub channel: usize,
    pub head_coeffs: [f64; 3],
    pub eff_coeffs: [f64; 3],
    #[serde(default = "default_eta_floor")]
    pub eta_floor: f64,
}

fn default_eta_floor() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsSpec {
    pub flow_min: Vec<f64>,
    pub flow_max: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySpec {
    pub inputs: Vec<String>,
    pub demands: Vec<String>,
    pub tank_input_map: Vec<Vec<f64>>,
    pub tank_disturbance_map: Vec<Vec<f64>>,
    pub node_input_map: Vec<Vec<f64>>,
    pub node_disturbance_map: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSpec {
    pub levels: Vec<f64>,
    pub previous_input: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsSpec {
    pub economic: f64,
    pub safety: f64,
    pub smoothness: f64,
    pub slack: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeriesSpec {
    pub demand: String,
    pub tariff: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSpec {
    pub prediction_horizon: usize,
    /// Block lengths used by the blocked controller.
    pub lengths: Vec<usize>,
}

/// A loaded scenario ready for simulation.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub model: NetworkModel,
    pub weights: Weights,
    pub dt: f64,
    pub demand_names: Vec<String>,
    pub demand: Vec<DVector<f64>>,
    pub tariff: Vec<f64>,
    pub initial_input: DVector<f64>,
    pub controller: ControllerSpec,
    source: ScenarioFile,
    hash: String,
}

impl Scenario {
    /// Reads a scenario JSON and its series. Structural problems are errors;
    /// invariant violations are reported by [`Scenario::validate`].
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        let file: ScenarioFile = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.display().to_string(),
            source,
        })?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let demand = read_demand_csv(&dir.join(&file.series.demand), &file.topology.demands)?;
        let tariff = read_tariff_csv(&dir.join(&file.series.tariff))?;
        Self::from_parts(file, demand, tariff)
    }

    pub fn from_parts(file: ScenarioFile, demand: Vec<Vec<f64>>, tariff: Vec<f64>) -> Result<Self> {
        let nu = file.topology.inputs.len();
        let nd = file.topology.demands.len();
        let nx = file.tanks.len();
        if file.initial.levels.len() != nx {
            return Err(Error::Scenario(format!(
                "initial.levels has {} entries for {nx} tanks",
                file.initial.levels.len()
            )));
        }
        if file.initial.previous_input.len() != nu {
            return Err(Error::Scenario(format!(
                "initial.previous_input has {} entries for {nu} inputs",
                file.initial.previous_input.len()
            )));
        }
        let t = &file.topology;
        let model = NetworkModel {
            tanks: file
                .tanks
                .iter()
                .zip(&file.initial.levels)
                .map(|(s, &init)| TankParams {
                    name: s.name.clone(),
                    area: s.area,
                    level_min: s.level_min,
                    level_max: s.level_max,
                    level_ref: s.level_ref,
                    level_init: init,
                })
                .collect(),
            pumps: file
                .pumps
                .iter()
                .map(|p| Pump {
                    name: p.name.clone(),
                    channel: p.channel,
                    curve: PumpCurve {
                        head_coeffs: p.head_coeffs,
                        eff_coeffs: p.eff_coeffs,
                        eta_floor: p.eta_floor,
                    },
                })
                .collect(),
            bounds: ActuatorBounds {
                flow_min: file.bounds.flow_min.clone(),
                flow_max: file.bounds.flow_max.clone(),
            },
            input_names: t.inputs.clone(),
            tank_input_map: matrix("tank_input_map", &t.tank_input_map, nu)?,
            tank_disturbance_map: matrix("tank_disturbance_map", &t.tank_disturbance_map, nd)?,
            node_input_map: matrix("node_input_map", &t.node_input_map, nu)?,
            node_disturbance_map: matrix("node_disturbance_map", &t.node_disturbance_map, nd)?,
        };
        if let Some((k, row)) = demand.iter().enumerate().find(|(_, r)| r.len() != nd) {
            return Err(Error::Scenario(format!("demand row {k} has {} values, expected {nd}", row.len())));
        }
        let w = &file.weights;
        let hash = content_hash(&file, &demand, &tariff);
        Ok(Self {
            name: file.name.clone(),
            weights: Weights {
                economic: w.economic,
                safety: w.safety,
                smoothness: w.smoothness,
                slack: w.slack,
            },
            dt: file.dt,
            demand_names: t.demands.clone(),
            demand: demand.into_iter().map(DVector::from_vec).collect(),
            tariff,
            initial_input: DVector::from_vec(file.initial.previous_input.clone()),
            controller: file.controller.clone(),
            model,
            source: file,
            hash,
        })
    }

    /// Model, weight, series and initial-condition checks. Empty means clean.
    pub fn validate(&self) -> Vec<String> {
        let mut v = self.model.validate();
        v.extend(self.weights.validate());
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            v.push(format!("dt {} must be positive", self.dt));
        }
        if self.demand.len() != self.tariff.len() {
            v.push(format!(
                "demand has {} samples but tariff has {}",
                self.demand.len(),
                self.tariff.len()
            ));
        }
        if let Some(k) = self.tariff.iter().position(|p| !(*p > 0.0 && p.is_finite())) {
            v.push(format!("tariff at hour {k} must be positive, got {}", self.tariff[k]));
        }
        if let Some(k) = self.demand.iter().position(|d| d.iter().any(|x| !(x.is_finite() && *x >= 0.0))) {
            v.push(format!("demand at hour {k} must be finite and non-negative"));
        }
        let b = &self.model.bounds;
        if b.flow_min.len() == self.initial_input.len() && b.flow_max.len() == self.initial_input.len() {
            for (c, u) in self.initial_input.iter().enumerate() {
                if *u < b.flow_min[c] || *u > b.flow_max[c] {
                    v.push(format!("initial.previous_input[{c}] = {u} outside [{}, {}]", b.flow_min[c], b.flow_max[c]));
                }
            }
        }
        let c = &self.controller;
        if c.prediction_horizon == 0 {
            v.push("controller.prediction_horizon must be at least 1".into());
        } else if c.lengths.iter().sum::<usize>() != c.prediction_horizon || c.lengths.contains(&0) {
            v.push(format!(
                "controller.lengths {:?} must be positive and sum to prediction_horizon {}",
                c.lengths, c.prediction_horizon
            ));
        }
        v
    }

    /// Number of closed-loop steps the series support with horizon `np`.
    pub fn max_steps(&self, np: usize) -> usize {
        self.demand.len().min(self.tariff.len()).saturating_sub(np) + 1
    }

    /// SHA-256 of the scenario content (JSON structure and series values).
    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn source(&self) -> &ScenarioFile {
        &self.source
    }
}

fn matrix(name: &str, rows: &[Vec<f64>], ncols: usize) -> Result<DMatrix<f64>> {
    if let Some((r, row)) = rows.iter().enumerate().find(|(_, r)| r.len() != ncols) {
        return Err(Error::Scenario(format!(
            "topology.{name} row {r} has {} entries, expected {ncols}",
            row.len()
        )));
    }
    Ok(DMatrix::from_row_iterator(rows.len(), ncols, rows.iter().flatten().copied()))
}

fn content_hash(file: &ScenarioFile, demand: &[Vec<f64>], tariff: &[f64]) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(file).expect("scenario serializes"));
    for v in demand.iter().flatten().chain(tariff) {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn open_csv(path: &Path) -> Result<csv::Reader<fs::File>> {
    let f = fs::File::open(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(f))
}

fn check_hour(path: &Path, k: usize, field: &str) -> Result<()> {
    match field.parse::<usize>() {
        Ok(h) if h == k => Ok(()),
        _ => Err(Error::Scenario(format!(
            "{}: row {k} has hour `{field}`, expected {k}",
            path.display()
        ))),
    }
}

fn parse_value(path: &Path, k: usize, field: &str) -> Result<f64> {
    field
        .parse()
        .map_err(|_| Error::Scenario(format!("{}: row {k}: `{field}` is not a number", path.display())))
}

/// Reads `hour,<names…>` rows.
pub fn read_demand_csv(path: &Path, names: &[String]) -> Result<Vec<Vec<f64>>> {
    let mut rdr = open_csv(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    let want: Vec<String> = std::iter::once("hour".to_string()).chain(names.iter().cloned()).collect();
    if header != want {
        return Err(Error::Scenario(format!(
            "{}: header {:?}, expected {:?}",
            path.display(),
            header,
            want
        )));
    }
    let mut out = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        check_hour(path, k, &rec[0])?;
        out.push(rec.iter().skip(1).map(|f| parse_value(path, k, f)).collect::<Result<Vec<_>>>()?);
    }
    Ok(out)
}

/// Reads `hour,price` rows.
pub fn read_tariff_csv(path: &Path) -> Result<Vec<f64>> {
    let mut rdr = open_csv(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    if header != ["hour", "price"] {
        return Err(Error::Scenario(format!(
            "{}: header {:?}, expected [\"hour\", \"price\"]",
            path.display(),
            header
        )));
    }
    let mut out = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        check_hour(path, k, &rec[0])?;
        out.push(parse_value(path, k, &rec[1])?);
    }
    Ok(out)
}

/// Generated scenario content before it is written to disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub file: ScenarioFile,
    pub demand: Vec<Vec<f64>>,
    pub tariff: Vec<f64>,
}

impl Template {
    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "default-2tank" => Some(default_two_tank()),
            _ => None,
        }
    }

    pub fn scenario(&self) -> Result<Scenario> {
        Scenario::from_parts(self.file.clone(), self.demand.clone(), self.tariff.clone())
    }

    /// Writes `scenario.json`, `demand.csv` and `tariff.csv` into `dir`.
    /// Returns the path of the JSON file.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let io = |path: &Path| {
            let p = path.display().to_string();
            move |source| Error::Io { path: p, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let json_path = dir.join("scenario.json");
        let mut json = serde_json::to_string_pretty(&self.file).expect("scenario serializes");
        json.push('\n');
        fs::write(&json_path, json).map_err(io(&json_path))?;

        let mut demand = String::from("hour");
        for n in &self.file.topology.demands {
            demand.push(',');
            demand.push_str(n);
        }
        demand.push('\n');
        for (k, row) in self.demand.iter().enumerate() {
            demand.push_str(&k.to_string());
            for v in row {
                demand.push_str(&format!(",{v}"));
            }
            demand.push('\n');
        }
        let demand_path = dir.join(&self.file.series.demand);
        fs::write(&demand_path, demand).map_err(io(&demand_path))?;

        let mut tariff = String::from("hour,price\n");
        for (k, p) in self.tariff.iter().enumerate() {
            tariff.push_str(&format!("{k},{p}\n"));
        }
        let tariff_path = dir.join(&self.file.series.tariff);
        fs::write(&tariff_path, tariff).map_err(io(&tariff_path))?;
        Ok(json_path)
    }
}

/// Peak of unit height centred at `centre` (hours of day), wrapping at midnight.
fn daily_peak(hour_of_day: f64, centre: f64, width: f64) -> f64 {
    let mut d = (hour_of_day - centre).abs();
    if d > 12.0 {
        d = 24.0 - d;
    }
    (-0.5 * (d / width).powi(2)).exp()
}

fn round3(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

/// Synthetic residential / commercial / base demand, m³/hr, for hour `h`.
pub fn synthetic_demand(h: usize) -> [f64; 3] {
    let tod = (h % 24) as f64;
    let day_scale = [1.0, 1.06, 0.95, 1.02][(h / 24) % 4];
    let wave = |phase: f64| (2.0 * PI * (tod - phase) / 24.0).sin();
    let residential = 30.0 + 6.0 * wave(9.0) + 20.0 * daily_peak(tod, 7.5, 1.5) + 16.0 * daily_peak(tod, 19.5, 2.0);
    let commercial = 20.0 + 4.0 * wave(8.0) + 12.0 * daily_peak(tod, 12.5, 3.0);
    let base = 10.0 + 2.0 * wave(14.0);
    [
        round3(residential * day_scale),
        round3(commercial * day_scale),
        round3(base),
    ]
}

/// Off-peak / shoulder / peak tariff in currency per kWh.
pub fn synthetic_tariff(h: usize) -> f64 {
    match h % 24 {
        0..=6 | 23 => 0.08,
        17..=20 => 0.24,
        _ => 0.14,
    }
}

fn default_two_tank() -> Template {
    let steps = 72 + 24;
    let demand: Vec<Vec<f64>> = (0..steps).map(|h| synthetic_demand(h).to_vec()).collect();
    let tariff: Vec<f64> = (0..steps).map(synthetic_tariff).collect();

    // Initial input balances the first hour: V1 feeds T1's demand, T2's load
    // is split between V2 and P2, and P1 supplies both valves.
    let [d1, d2, d3] = synthetic_demand(0);
    let qv1 = round3(d1);
    let qv2 = round3(0.5 * (d2 + d3));
    let qp2 = round3(d2 + d3 - qv2);
    let qp1 = round3(qv1 + qv2);

    let tank = |name: &str| TankSpec {
        name: name.into(),
        area: 200.0,
        level_min: 1.0,
        level_max: 6.0,
        level_ref: 3.5,
    };
    let file = ScenarioFile {
        name: "default-2tank".into(),
        dt: 1.0,
        tanks: vec![tank("T1"), tank("T2")],
        pumps: vec![
            PumpSpec {
                name: "P1".into(),
                channel: 2,
                head_coeffs: [-2e-4, 0.0, 60.0],
                eff_coeffs: [-2.5e-5, 2e-3, 0.76],
                eta_floor: 0.05,
            },
            PumpSpec {
                name: "P2".into(),
                channel: 3,
                head_coeffs: [-3e-4, 0.0, 50.0],
                eff_coeffs: [-1e-4, 1.8e-3, 0.70],
                eta_floor: 0.05,
            },
        ],
        bounds: BoundsSpec {
            flow_min: vec![0.0; 4],
            // P2's efficiency reaches its floor near 90 m³/hr
            flow_max: vec![150.0, 150.0, 150.0, 80.0],
        },
        topology: TopologySpec {
            inputs: ["qv1", "qv2", "qp1", "qp2"].map(String::from).to_vec(),
            demands: ["d1", "d2", "d3"].map(String::from).to_vec(),
            tank_input_map: vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 1.0]],
            tank_disturbance_map: vec![vec![-1.0, 0.0, 0.0], vec![0.0, -1.0, -1.0]],
            node_input_map: vec![vec![-1.0, -1.0, 1.0, 0.0]],
            node_disturbance_map: vec![vec![0.0, 0.0, 0.0]],
        },
        initial: InitialSpec {
            levels: vec![3.5, 3.5],
            previous_input: vec![qv1, qv2, qp1, qp2],
        },
        weights: WeightsSpec {
            economic: 1.0,
            safety: 0.5,
            smoothness: 0.01,
            slack: 1e4,
        },
        series: SeriesSpec {
            demand: "demand.csv".into(),
            tariff: "tariff.csv".into(),
        },
        controller: ControllerSpec {
            prediction_horizon: 24,
            lengths: vec![1, 2, 3, 4, 5, 9],
        },
    };
    Template { file, demand, tariff }
}

/// The default scenario, in memory.
pub fn default_scenario() -> Scenario {
    default_two_tank().scenario().expect("default template is well formed")
}
