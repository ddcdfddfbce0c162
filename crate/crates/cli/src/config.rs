//! Run configuration. Every key carries its unit in the name; frequencies
//! are quoted as ω/2π.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use ertrans_core::experiments::{grid, SweptParameter};
use ertrans_core::protocol::{Direction, ProtocolParams, ScheduleOrientation, SignalConvention};
use ertrans_core::spinham::CoherenceModel;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub protocol: ProtocolSection,
    pub spin: SpinSection,
    pub sweep: SweepSection,
    pub output: OutputSection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrientationChoice {
    /// Pick the microwave-to-optical orientation by simulation.
    Calibrate,
    AsPrinted,
    Reversed,
}

#[allow(non_snake_case)]
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolSection {
    pub G_over_2pi_MHz: f64,
    pub alpha_over_G: f64,
    pub kappa1_over_2pi_MHz: f64,
    pub kappa2_over_2pi_MHz: f64,
    pub gamma_s_over_2pi_MHz: f64,
    pub gamma_star_over_2pi_MHz: f64,
    pub omega_mw_over_2pi_GHz: f64,
    pub temperature_mK: f64,
    /// t_f·α.
    pub t_final_ratio: f64,
    /// Fock truncations (optical, microwave, spin).
    pub dims: [usize; 3],
    pub direction: Direction,
    pub orientation: OrientationChoice,
    pub signal: SignalConvention,
    /// RK4 steps per unit of min(1/α, 1/G).
    pub steps_per_unit: f64,
    /// Trajectory sampling, in integration steps.
    pub capture_stride: usize,
}

impl Default for ProtocolSection {
    fn default() -> Self {
        Self {
            G_over_2pi_MHz: 10.0,
            alpha_over_G: 0.245,
            kappa1_over_2pi_MHz: 1.0,
            kappa2_over_2pi_MHz: 0.01,
            gamma_s_over_2pi_MHz: 0.01,
            gamma_star_over_2pi_MHz: 0.008,
            omega_mw_over_2pi_GHz: 1.33,
            temperature_mK: 50.0,
            t_final_ratio: 1.0,
            dims: [3, 6, 3],
            direction: Direction::MwToOptical,
            orientation: OrientationChoice::Calibrate,
            signal: SignalConvention::ThermalBackground,
            steps_per_unit: 400.0,
            capture_stride: 10,
        }
    }
}

impl ProtocolSection {
    /// SI parameters. A `calibrate` orientation is left as printed here and
    /// resolved by the caller.
    pub fn params(&self) -> Result<ProtocolParams, CliError> {
        let mhz = 2.0 * PI * 1e6;
        let g = self.G_over_2pi_MHz * mhz;
        let p = ProtocolParams {
            coupling: g,
            alpha: self.alpha_over_G * g,
            kappa1: self.kappa1_over_2pi_MHz * mhz,
            kappa2: self.kappa2_over_2pi_MHz * mhz,
            gamma_s: self.gamma_s_over_2pi_MHz * mhz,
            gamma_star: self.gamma_star_over_2pi_MHz * mhz,
            omega_mw: self.omega_mw_over_2pi_GHz * 1e3 * mhz,
            temperature: self.temperature_mK * 1e-3,
            time_ratio: self.t_final_ratio,
            dims: self.dims,
            direction: self.direction,
            orientation: match self.orientation {
                OrientationChoice::Reversed => ScheduleOrientation::Reversed,
                _ => ScheduleOrientation::AsPrinted,
            },
            signal: self.signal,
            steps_per_unit: self.steps_per_unit,
            capture_stride: self.capture_stride,
        };
        p.validate().map_err(|e| CliError::Config(format!("[protocol] {e}")))?;
        Ok(p)
    }

    pub fn calibrate(&self) -> bool {
        self.orientation == OrientationChoice::Calibrate
    }
}

#[allow(non_snake_case)]
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpinSection {
    /// Spin-Hamiltonian parameter file.
    pub params_file: PathBuf,
    /// Static field (D₁, D₂, b).
    pub B_T: [f64; 3],
    pub window_GHz: [f64; 2],
    pub delta_B_uT: f64,
    pub degeneracy_tol_MHz: f64,
    pub zefoz_tol_MHz_per_T: f64,
    pub sweep_axis: [f64; 3],
    pub sweep_Bmax_T: f64,
    pub sweep_steps: usize,
}

impl Default for SpinSection {
    fn default() -> Self {
        Self {
            params_file: PathBuf::from("data/er167_yso_site1.toml"),
            B_T: [0.0; 3],
            window_GHz: [1.0, 3.0],
            delta_B_uT: 26.0,
            degeneracy_tol_MHz: 1.0,
            zefoz_tol_MHz_per_T: 10.0,
            sweep_axis: [0.0, 0.0, 1.0],
            sweep_Bmax_T: 0.2,
            sweep_steps: 200,
        }
    }
}

impl SpinSection {
    pub fn model(&self) -> CoherenceModel {
        CoherenceModel {
            delta_b: self.delta_B_uT * 1e-6,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(format!("[spin] {msg}")));
        if !(self.delta_B_uT > 0.0) {
            return bad(format!("delta_B_uT must be positive, got {}", self.delta_B_uT));
        }
        if !(self.degeneracy_tol_MHz >= 0.0) {
            return bad(format!("degeneracy_tol_MHz must be nonnegative, got {}", self.degeneracy_tol_MHz));
        }
        if !(self.zefoz_tol_MHz_per_T > 0.0) {
            return bad(format!("zefoz_tol_MHz_per_T must be positive, got {}", self.zefoz_tol_MHz_per_T));
        }
        let [lo, hi] = self.window_GHz;
        if !(lo >= 0.0 && hi >= lo) {
            return bad(format!("window_GHz [{lo}, {hi}] must satisfy 0 <= lo <= hi"));
        }
        if self.sweep_steps < 2 || !(self.sweep_Bmax_T > 0.0) {
            return bad("sweep needs sweep_steps >= 2 and sweep_Bmax_T > 0".into());
        }
        if self.sweep_axis.iter().all(|&x| x == 0.0) {
            return bad("sweep_axis must be nonzero".into());
        }
        Ok(())
    }
}

/// Swept quantity, with the unit of `start`, `stop` and `step`.
#[allow(non_camel_case_types)]
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepParameter {
    alpha_over_G,
    t_final_ratio,
    temperature_mK,
    gamma_star_over_G,
}

impl SweepParameter {
    pub fn core(self) -> SweptParameter {
        match self {
            Self::alpha_over_G => SweptParameter::AlphaOverG,
            Self::t_final_ratio => SweptParameter::TimeRatio,
            Self::temperature_mK => SweptParameter::Temperature,
            Self::gamma_star_over_G => SweptParameter::GammaStarOverG,
        }
    }

    /// Config units to core units.
    pub fn to_core_value(self, v: f64) -> f64 {
        match self {
            Self::temperature_mK => v * 1e-3,
            _ => v,
        }
    }
}

impl std::str::FromStr for SweepParameter {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "alpha_over_G" | "alpha" => Ok(Self::alpha_over_G),
            "t_final_ratio" | "tfinal" => Ok(Self::t_final_ratio),
            "temperature_mK" | "temperature" => Ok(Self::temperature_mK),
            "gamma_star_over_G" | "gamma_star" => Ok(Self::gamma_star_over_G),
            other => Err(format!("unknown sweep parameter `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub parameter: SweepParameter,
    pub start: f64,
    pub stop: f64,
    pub step: f64,
    /// Also run the thermal simulations for noise and fidelity.
    pub noise_and_fidelity: bool,
    /// 0 uses every available core.
    pub workers: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            parameter: SweepParameter::alpha_over_G,
            start: 0.05,
            stop: 1.0,
            step: 0.005,
            noise_and_fidelity: true,
            workers: 0,
        }
    }
}

impl SweepSection {
    /// Grid values in core units.
    pub fn values(&self) -> Result<Vec<f64>, CliError> {
        if !(self.step > 0.0) || !(self.stop >= self.start) {
            return Err(CliError::Config(format!(
                "[sweep] need step > 0 and stop >= start, got start {} stop {} step {}",
                self.start, self.stop, self.step
            )));
        }
        Ok(grid(self.start, self.stop, self.step)
            .into_iter()
            .map(|v| self.parameter.to_core_value(v))
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.protocol.params()?;
        self.spin.validate()?;
        self.sweep.values()?;
        Ok(())
    }
}
