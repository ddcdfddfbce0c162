//! Parameter sweeps over the transfer protocol.
//!
//! Sweep points run on a rayon pool of the requested size and come back in
//! input order, so results do not depend on the worker count. The schedule
//! orientation is calibrated once per batch and stamped on the result.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocol::{
    calibrate_orientation, coupling_schedule, run_efficiency, run_transfer, OrientationCalibration, ProtocolParams,
    ScheduleOrientation, TrajectoryPoint,
};

/// Evenly spaced grid from `start` to `stop` inclusive. Points are snapped
/// to multiples of 1e-12 so decimal grids land on their nominal values.
pub fn grid(start: f64, stop: f64, step: f64) -> Vec<f64> {
    let count = ((stop - start) / step).round() as usize + 1;
    (0..count)
        .map(|k| ((start + k as f64 * step) * 1e12).round() / 1e12)
        .collect()
}

/// α/G from 0.05 to 1.0 in steps of 0.005.
pub fn alpha_grid() -> Vec<f64> {
    grid(0.05, 1.0, 0.005)
}

/// t_f·α from 0.1 to 2.5 in steps of 0.05.
pub fn time_ratio_grid() -> Vec<f64> {
    grid(0.1, 2.5, 0.05)
}

/// 10 mK to 300 mK in steps of 5 mK, in millikelvin.
pub fn temperature_grid_mk() -> Vec<f64> {
    grid(10.0, 300.0, 5.0)
}

/// [`temperature_grid_mk`] in kelvin.
pub fn temperature_grid() -> Vec<f64> {
    temperature_grid_mk().into_iter().map(|mk| mk * 1e-3).collect()
}

/// Dephasing rates γ*/G compared in the time-trace and temperature studies.
pub const DEPHASING_SET: [f64; 3] = [0.0008, 0.1, 1.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweptParameter {
    AlphaOverG,
    TimeRatio,
    Temperature,
    GammaStarOverG,
}

impl SweptParameter {
    pub fn name(self) -> &'static str {
        match self {
            Self::AlphaOverG => "alpha_over_G",
            Self::TimeRatio => "t_final_ratio",
            Self::Temperature => "temperature_K",
            Self::GammaStarOverG => "gamma_star_over_G",
        }
    }

    pub fn apply(self, base: &ProtocolParams, value: f64) -> ProtocolParams {
        let mut p = base.clone();
        match self {
            Self::AlphaOverG => p.alpha = value * p.coupling,
            Self::TimeRatio => p.time_ratio = value,
            Self::Temperature => p.temperature = value,
            Self::GammaStarOverG => p.gamma_star = value * p.coupling,
        }
        p
    }
}

/// Which metrics a sweep computes. Noise and fidelity need the thermal runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outputs {
    pub efficiency: bool,
    pub noise: bool,
    pub fidelity: bool,
}

impl Outputs {
    pub const ALL: Self = Self {
        efficiency: true,
        noise: true,
        fidelity: true,
    };
    pub const EFFICIENCY: Self = Self {
        efficiency: true,
        noise: false,
        fidelity: false,
    };

    fn needs_transfer(self) -> bool {
        self.noise || self.fidelity
    }
}

#[derive(Clone, Debug)]
pub struct SweepSpec {
    pub base: ProtocolParams,
    pub parameter: SweptParameter,
    pub values: Vec<f64>,
    pub outputs: Outputs,
    /// Worker threads; 0 lets rayon decide.
    pub workers: usize,
    /// Run the orientation calibration on `base` before sweeping.
    pub calibrate: bool,
}

impl SweepSpec {
    pub fn new(base: ProtocolParams, parameter: SweptParameter, values: Vec<f64>) -> Self {
        Self {
            base,
            parameter,
            values,
            outputs: Outputs::ALL,
            workers: 0,
            calibrate: true,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::InvalidParameter("sweep has no values".into()));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("sweep values must be finite".into()));
        }
        let up = self.values.windows(2).all(|w| w[1] > w[0]);
        let down = self.values.windows(2).all(|w| w[1] < w[0]);
        if !(up || down) {
            return Err(Error::InvalidParameter("sweep values must be strictly monotone".into()));
        }
        if !self.outputs.efficiency && !self.outputs.needs_transfer() {
            return Err(Error::InvalidParameter("sweep requests no outputs".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    /// Fully resolved parameters of this point.
    pub params: ProtocolParams,
    pub efficiency: f64,
    pub noise: Option<f64>,
    pub signal: Option<f64>,
    pub fidelity: Option<f64>,
    pub nbar: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepTable {
    pub parameter: SweptParameter,
    pub rows: Vec<SweepRow>,
    pub calibration: Option<OrientationCalibration>,
}

impl SweepTable {
    /// Row with the highest efficiency; the first one on ties.
    pub fn argmax_efficiency(&self) -> Option<&SweepRow> {
        self.rows
            .iter()
            .reduce(|best, r| if r.efficiency > best.efficiency { r } else { best })
    }
}

fn with_pool<T: Send>(workers: usize, job: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidParameter(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(job))
}

fn calibrated(base: &ProtocolParams, calibrate: bool) -> Result<(ProtocolParams, Option<OrientationCalibration>)> {
    if !calibrate {
        return Ok((base.clone(), None));
    }
    let cal = calibrate_orientation(base)?;
    let mut p = base.clone();
    p.orientation = cal.orientation_for(p.direction);
    Ok((p, Some(cal)))
}

fn evaluate(params: ProtocolParams, value: f64, outputs: Outputs) -> Result<SweepRow> {
    if outputs.needs_transfer() {
        let r = run_transfer(&params)?;
        Ok(SweepRow {
            value,
            params,
            efficiency: r.efficiency,
            noise: Some(r.noise),
            signal: Some(r.signal),
            fidelity: Some(r.fidelity_snr),
            nbar: Some(r.nbar),
        })
    } else {
        let r = run_efficiency(&params)?;
        Ok(SweepRow {
            value,
            params,
            efficiency: r.efficiency,
            noise: None,
            signal: None,
            fidelity: None,
            nbar: None,
        })
    }
}

/// Evaluate every point of `spec`.
pub fn run_sweep(spec: &SweepSpec) -> Result<SweepTable> {
    spec.validate()?;
    let (base, calibration) = calibrated(&spec.base, spec.calibrate)?;
    let points: Vec<ProtocolParams> = spec.values.iter().map(|&v| spec.parameter.apply(&base, v)).collect();
    for p in &points {
        p.validate()?;
    }
    let outputs = spec.outputs;
    let rows = with_pool(spec.workers, || {
        points
            .into_par_iter()
            .zip(spec.values.par_iter())
            .map(|(p, &v)| evaluate(p, v, outputs))
            .collect::<Result<Vec<_>>>()
    })??;
    Ok(SweepTable {
        parameter: spec.parameter,
        rows,
        calibration,
    })
}

/// Efficiency, noise and fidelity against α/G, values in (0, 1.5].
pub fn sweep_alpha(spec: &SweepSpec) -> Result<SweepTable> {
    if spec.parameter != SweptParameter::AlphaOverG {
        return Err(Error::InvalidParameter("sweep_alpha needs an alpha_over_G sweep".into()));
    }
    if let Some(v) = spec.values.iter().find(|&&v| !(v > 0.0 && v <= 1.5)) {
        return Err(Error::InvalidParameter(format!("alpha/G = {v} outside (0, 1.5]")));
    }
    run_sweep(spec)
}

/// Efficiency against protocol duration t_f = r/α.
pub fn sweep_protocol_time(spec: &SweepSpec) -> Result<SweepTable> {
    if spec.parameter != SweptParameter::TimeRatio {
        return Err(Error::InvalidParameter("sweep_protocol_time needs a t_final_ratio sweep".into()));
    }
    if let Some(v) = spec.values.iter().find(|&&v| !(v > 0.0)) {
        return Err(Error::InvalidParameter(format!("t_final ratio {v} must be positive")));
    }
    run_sweep(spec)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TemperatureCurves {
    /// Kelvin.
    pub temperatures: Vec<f64>,
    /// One fidelity sweep per γ*/G.
    pub curves: Vec<(f64, SweepTable)>,
    pub calibration: Option<OrientationCalibration>,
}

/// Fidelity against temperature for each dephasing rate.
pub fn sweep_temperature(
    base: &ProtocolParams,
    temperatures: &[f64],
    gamma_star_over_g: &[f64],
    workers: usize,
    calibrate: bool,
) -> Result<TemperatureCurves> {
    if let Some(t) = temperatures.iter().find(|&&t| !(t > 0.0)) {
        return Err(Error::InvalidParameter(format!("temperature {t} K must be positive")));
    }
    let (base, calibration) = calibrated(base, calibrate)?;
    let mut curves = Vec::with_capacity(gamma_star_over_g.len());
    for &gs in gamma_star_over_g {
        let spec = SweepSpec {
            base: base.clone().with_gamma_star_over_g(gs),
            parameter: SweptParameter::Temperature,
            values: temperatures.to_vec(),
            outputs: Outputs::ALL,
            workers,
            calibrate: false,
        };
        curves.push((gs, run_sweep(&spec)?));
    }
    Ok(TemperatureCurves {
        temperatures: temperatures.to_vec(),
        curves,
        calibration,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DephasingTrace {
    pub gamma_star_over_g: f64,
    pub params: ProtocolParams,
    pub trajectory: Vec<TrajectoryPoint>,
    pub final_efficiency: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DephasingTraces {
    pub traces: Vec<DephasingTrace>,
    pub calibration: Option<OrientationCalibration>,
}

/// Output-mode population against time for each dephasing rate.
pub fn efficiency_vs_time(
    base: &ProtocolParams,
    gamma_star_over_g: &[f64],
    capture_stride: usize,
    workers: usize,
    calibrate: bool,
) -> Result<DephasingTraces> {
    let (base, calibration) = calibrated(base, calibrate)?;
    let traces = with_pool(workers, || {
        gamma_star_over_g
            .par_iter()
            .map(|&gs| {
                let mut p = base.clone().with_gamma_star_over_g(gs);
                p.capture_stride = capture_stride.max(1);
                let run = run_efficiency(&p)?;
                Ok(DephasingTrace {
                    gamma_star_over_g: gs,
                    params: p,
                    trajectory: run.trajectory,
                    final_efficiency: run.efficiency,
                })
            })
            .collect::<Result<Vec<_>>>()
    })??;
    Ok(DephasingTraces { traces, calibration })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ScheduleSample {
    pub alpha: f64,
    pub t: f64,
    pub g1: f64,
    pub g2: f64,
    /// G₁² + G₂² − G².
    pub residual: f64,
}

/// G₁(t), G₂(t) for each α on `samples` points of [0, t_max]; units of `g`,
/// `alphas` and `t_max` only need to agree.
pub fn schedule_trace(
    g: f64,
    alphas: &[f64],
    t_max: f64,
    samples: usize,
    orientation: ScheduleOrientation,
) -> Result<Vec<ScheduleSample>> {
    if let Some(a) = alphas.iter().find(|&&a| !(a > 0.0)) {
        return Err(Error::InvalidParameter(format!("alpha {a} must be positive")));
    }
    if samples < 2 || !(t_max > 0.0) {
        return Err(Error::InvalidParameter("schedule trace needs t_max > 0 and at least 2 samples".into()));
    }
    let mut out = Vec::with_capacity(alphas.len() * samples);
    for &alpha in alphas {
        for k in 0..samples {
            let t = t_max * k as f64 / (samples - 1) as f64;
            let (g1, g2) = coupling_schedule(t, g, alpha, orientation)?;
            out.push(ScheduleSample {
                alpha,
                t,
                g1,
                g2,
                residual: g1 * g1 + g2 * g2 - g * g,
            });
        }
    }
    Ok(out)
}
