//! Dark-state transduction between an optical cavity mode â₁, a microwave
//! cavity mode â₂ and a collective spin mode b̂.
//!
//! The couplings follow G₁(t) = G√tanh(αt), G₂(t) = G√(1 − tanh(αt)) (or the
//! swapped pair), so G₁² + G₂² = G² throughout and the dark mode
//! (−G₂â₁ + G₁â₂)/G rotates between the two cavities without touching b̂.
//!
//! Simulation runs in units where G = 1; [`ProtocolParams`] holds SI values
//! (angular frequencies in rad/s, kelvin, seconds) and converts on entry.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lindblad::{evolve, Dissipator, Evolution, EvolutionProblem, Hamiltonian};
use crate::opalg::{
    annihilation, embed, expectation, thermal_probabilities, DensityMatrix, ModeSpace, Operator,
};

/// Reduced Planck constant, J·s.
pub const HBAR: f64 = 1.054_571_817e-34;
/// Boltzmann constant, J/K.
pub const K_B: f64 = 1.380_649e-23;

pub const OPTICAL: usize = 0;
pub const MICROWAVE: usize = 1;
pub const SPIN: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    MwToOptical,
    OpticalToMw,
}

impl Direction {
    /// (input mode, output mode)
    pub fn modes(self) -> (usize, usize) {
        match self {
            Direction::MwToOptical => (MICROWAVE, OPTICAL),
            Direction::OpticalToMw => (OPTICAL, MICROWAVE),
        }
    }
}

/// Which coupling carries √tanh(αt).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleOrientation {
    /// G₁ = G√tanh(αt), G₂ = G√(1 − tanh(αt)).
    AsPrinted,
    /// G₁ and G₂ swapped.
    Reversed,
}

impl ScheduleOrientation {
    pub fn flipped(self) -> Self {
        match self {
            Self::AsPrinted => Self::Reversed,
            Self::Reversed => Self::AsPrinted,
        }
    }
}

/// What the signal run of the SNR starts from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalConvention {
    /// The input photon sits on top of the thermal microwave background:
    /// the microwave occupation distribution is the thermal one shifted up
    /// by one photon.
    ThermalBackground,
    /// Pure single-photon input, no thermal photons.
    PurePhoton,
}

macro_rules! impl_str_enum {
    ($ty:ty { $($variant:path => $name:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $name),+ })
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err(Error::InvalidParameter(format!(
                        "unknown {} `{other}`", stringify!($ty)
                    ))),
                }
            }
        }
    };
}

impl_str_enum!(Direction {
    Direction::MwToOptical => "mw_to_optical",
    Direction::OpticalToMw => "optical_to_mw",
});
impl_str_enum!(ScheduleOrientation {
    ScheduleOrientation::AsPrinted => "as_printed",
    ScheduleOrientation::Reversed => "reversed",
});
impl_str_enum!(SignalConvention {
    SignalConvention::ThermalBackground => "thermal_background",
    SignalConvention::PurePhoton => "pure_photon",
});

/// All settings for one transfer run, SI units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolParams {
    /// Total coupling G, rad/s.
    pub coupling: f64,
    /// Modulation strength α, rad/s.
    pub alpha: f64,
    pub kappa1: f64,
    pub kappa2: f64,
    pub gamma_s: f64,
    pub gamma_star: f64,
    /// Microwave transition angular frequency, rad/s.
    pub omega_mw: f64,
    /// Kelvin.
    pub temperature: f64,
    /// Protocol duration in units of 1/α.
    pub time_ratio: f64,
    /// Fock truncations (optical, microwave, spin).
    pub dims: [usize; 3],
    pub direction: Direction,
    pub orientation: ScheduleOrientation,
    pub signal: SignalConvention,
    /// RK4 steps per unit of min(1/α, 1/G).
    pub steps_per_unit: f64,
    /// Keep every n-th integration step in the trajectory (0: none).
    pub capture_stride: usize,
}

impl Default for ProtocolParams {
    fn default() -> Self {
        Self::fig2()
    }
}

impl ProtocolParams {
    /// G/2π = 10 MHz, κ₁ = 0.1G, κ₂ = γ_s = 0.001G, γ*_s = 0.0008G,
    /// ω/2π = 1.33 GHz, T = 50 mK, α = 0.245G, t_f = 1/α.
    ///
    /// The orientation is the microwave-to-optical one selected by
    /// [`calibrate_orientation`].
    pub fn fig2() -> Self {
        let g = 2.0 * PI * 10e6;
        Self {
            coupling: g,
            alpha: 0.245 * g,
            kappa1: 0.1 * g,
            kappa2: 0.001 * g,
            gamma_s: 0.001 * g,
            gamma_star: 0.0008 * g,
            omega_mw: 2.0 * PI * 1.33e9,
            temperature: 0.05,
            time_ratio: 1.0,
            dims: [3, 6, 3],
            direction: Direction::MwToOptical,
            orientation: ScheduleOrientation::Reversed,
            signal: SignalConvention::ThermalBackground,
            steps_per_unit: 400.0,
            capture_stride: 0,
        }
    }

    pub fn alpha_over_g(&self) -> f64 {
        self.alpha / self.coupling
    }

    pub fn with_alpha_over_g(mut self, ratio: f64) -> Self {
        self.alpha = ratio * self.coupling;
        self
    }

    pub fn with_gamma_star_over_g(mut self, ratio: f64) -> Self {
        self.gamma_star = ratio * self.coupling;
        self
    }

    /// Protocol duration in seconds.
    pub fn t_final(&self) -> f64 {
        self.time_ratio / self.alpha
    }

    /// Integration step in units of 1/G, before rounding to the span.
    pub fn step_in_g_units(&self) -> f64 {
        let alpha = self.alpha_over_g();
        (1.0 / self.steps_per_unit) * (1.0 / alpha).min(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("coupling", self.coupling),
            ("alpha", self.alpha),
            ("omega_mw", self.omega_mw),
            ("time_ratio", self.time_ratio),
            ("steps_per_unit", self.steps_per_unit),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        let nonneg = [
            ("kappa1", self.kappa1),
            ("kappa2", self.kappa2),
            ("gamma_s", self.gamma_s),
            ("gamma_star", self.gamma_star),
            ("temperature", self.temperature),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!("{name} must be nonnegative, got {v}")));
            }
        }
        ModeSpace::new(&self.dims)?;
        Ok(())
    }
}

/// (G₁, G₂) at time t ≥ 0. Units of `g`, `alpha` and `t` only need to be
/// mutually consistent.
pub fn coupling_schedule(t: f64, g: f64, alpha: f64, orientation: ScheduleOrientation) -> Result<(f64, f64)> {
    if !(t >= 0.0) {
        return Err(Error::InvalidParameter(format!("schedule time must be nonnegative, got {t}")));
    }
    let x = alpha * t;
    let rising = x.tanh();
    // 1 − tanh(x) without cancellation
    let falling = 2.0 / (1.0 + (2.0 * x).exp());
    let (up, down) = (g * rising.sqrt(), g * falling.sqrt());
    Ok(match orientation {
        ScheduleOrientation::AsPrinted => (up, down),
        ScheduleOrientation::Reversed => (down, up),
    })
}

/// The three mode operators of the transducer and their couplings.
#[derive(Clone, Debug)]
pub struct TransducerModes {
    pub space: ModeSpace,
    pub a1: Operator,
    pub a2: Operator,
    pub b: Operator,
    /// a₁b† + a₁†b
    pub optical_spin: Operator,
    /// a₂b† + a₂†b
    pub microwave_spin: Operator,
}

impl TransducerModes {
    pub fn new(space: &ModeSpace) -> Result<Self> {
        if space.num_modes() != 3 {
            return Err(Error::InvalidDimension(format!(
                "transducer needs 3 modes (optical, microwave, spin), got {}",
                space.num_modes()
            )));
        }
        let dims = space.dims();
        let a1 = embed(&annihilation(dims[OPTICAL])?, OPTICAL, space)?;
        let a2 = embed(&annihilation(dims[MICROWAVE])?, MICROWAVE, space)?;
        let b = embed(&annihilation(dims[SPIN])?, SPIN, space)?;
        let beam_splitter = |a: &Operator| {
            let x = a * &b.adjoint();
            &x + &x.adjoint()
        };
        Ok(Self {
            optical_spin: beam_splitter(&a1),
            microwave_spin: beam_splitter(&a2),
            space: space.clone(),
            a1,
            a2,
            b,
        })
    }

    pub fn mode(&self, index: usize) -> &Operator {
        match index {
            OPTICAL => &self.a1,
            MICROWAVE => &self.a2,
            _ => &self.b,
        }
    }

    pub fn number(&self, index: usize) -> Operator {
        let a = self.mode(index);
        &a.adjoint() * a
    }

    /// G₁(a₁b† + a₁†b) + G₂(a₂b† + a₂†b)
    pub fn hamiltonian(&self, g1: f64, g2: f64) -> Operator {
        &(&self.optical_spin * g1) + &(&self.microwave_spin * g2)
    }
}

/// H = G₁(a₁b† + a₁†b) + G₂(a₂b† + a₂†b) on an (optical, microwave, spin)
/// space.
pub fn effective_hamiltonian(g1: f64, g2: f64, space: &ModeSpace) -> Result<Operator> {
    Ok(TransducerModes::new(space)?.hamiltonian(g1, g2))
}

/// Eigenmodes of the single-excitation coupling block, as coefficient
/// vectors over (a₁, a₂, b).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Eigenmodes {
    pub dark: [f64; 3],
    pub bright_plus: [f64; 3],
    pub bright_minus: [f64; 3],
    /// (0, +√(G₁²+G₂²), −√(G₁²+G₂²))
    pub frequencies: [f64; 3],
}

pub fn eigenmodes(g1: f64, g2: f64) -> Result<Eigenmodes> {
    let total = g1.hypot(g2);
    if total == 0.0 {
        return Err(Error::DegenerateModes);
    }
    let (c1, c2) = (g1 / total, g2 / total);
    let s = std::f64::consts::FRAC_1_SQRT_2;
    Ok(Eigenmodes {
        dark: [-c2, c1, 0.0],
        bright_plus: [s * c1, s * c2, s],
        bright_minus: [s * c1, s * c2, -s],
        frequencies: [0.0, total, -total],
    })
}

/// Bose–Einstein occupation 1/(e^{ħω/k_BT} − 1).
pub fn thermal_occupation(omega: f64, temperature: f64) -> Result<f64> {
    if !(omega > 0.0) {
        return Err(Error::InvalidParameter(format!("frequency must be positive, got {omega}")));
    }
    if !(temperature >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "temperature must be nonnegative, got {temperature}"
        )));
    }
    if temperature == 0.0 {
        return Ok(0.0);
    }
    let x = HBAR * omega / (K_B * temperature);
    Ok(1.0 / x.exp_m1())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FidelityFlag {
    /// Signal was zero while noise was not; fidelity reported as 0.
    NoSignal,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SnrFidelity {
    pub value: f64,
    pub flag: Option<FidelityFlag>,
}

/// F = 1/(1 + noise/signal).
pub fn snr_fidelity(signal: f64, noise: f64) -> Result<SnrFidelity> {
    if !(signal >= 0.0) || !(noise >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "signal ({signal}) and noise ({noise}) must be nonnegative"
        )));
    }
    match (signal == 0.0, noise == 0.0) {
        (true, true) => Err(Error::UndefinedFidelity),
        (true, false) => Ok(SnrFidelity {
            value: 0.0,
            flag: Some(FidelityFlag::NoSignal),
        }),
        _ => Ok(SnrFidelity {
            value: 1.0 / (1.0 + noise / signal),
            flag: None,
        }),
    }
}

/// Mode populations at one captured time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    /// Seconds.
    pub t: f64,
    /// G·t.
    pub g_t: f64,
    pub optical: f64,
    pub microwave: f64,
    pub spin: f64,
}

/// Outcome of the single-photon run alone.
#[derive(Clone, Debug)]
pub struct EfficiencyRun {
    pub efficiency: f64,
    pub trajectory: Vec<TrajectoryPoint>,
    pub final_state: DensityMatrix,
    /// Integration step in units of 1/G.
    pub step: f64,
    pub steps: usize,
    pub max_trace_deviation: f64,
}

#[derive(Clone, Debug)]
pub struct TransferResult {
    /// Output-mode photon number after a single-photon input.
    pub efficiency: f64,
    /// Output-mode photon number from the thermal, no-input run.
    pub noise: f64,
    /// Output-mode photon number of the SNR signal run.
    pub signal: f64,
    pub fidelity_snr: f64,
    pub fidelity_flag: Option<FidelityFlag>,
    /// Thermal occupation of the microwave mode.
    pub nbar: f64,
    pub trajectory: Vec<TrajectoryPoint>,
    pub step: f64,
    pub steps: usize,
    pub orientation: ScheduleOrientation,
    pub max_trace_deviation: f64,
}

/// The schedule-driven Hamiltonian in units of G.
struct ScheduleHamiltonian<'a> {
    modes: &'a TransducerModes,
    alpha: f64,
    orientation: ScheduleOrientation,
}

impl Hamiltonian for ScheduleHamiltonian<'_> {
    fn at(&self, t: f64) -> Operator {
        // t ≥ 0 inside the integration window
        let (g1, g2) = coupling_schedule(t.max(0.0), 1.0, self.alpha, self.orientation)
            .expect("nonnegative time");
        self.modes.hamiltonian(g1, g2)
    }

    fn terms(&self) -> Option<Vec<Operator>> {
        Some(vec![self.modes.optical_spin.clone(), self.modes.microwave_spin.clone()])
    }

    fn coefficients(&self, t: f64, out: &mut Vec<f64>) {
        let (g1, g2) = coupling_schedule(t.max(0.0), 1.0, self.alpha, self.orientation)
            .expect("nonnegative time");
        out.extend([g1, g2]);
    }
}

/// Precomputed operators shared by the runs of one transfer.
struct Setup {
    modes: TransducerModes,
    dissipators: Vec<Dissipator>,
    /// Total excitation number of each basis state.
    sectors: Vec<i64>,
    alpha: f64,
    t_final: f64,
    step: f64,
}

impl Setup {
    fn new(params: &ProtocolParams) -> Result<Self> {
        params.validate()?;
        let space = ModeSpace::new(&params.dims)?;
        let modes = TransducerModes::new(&space)?;
        let g = params.coupling;
        let nb = modes.number(SPIN);
        let dissipators = vec![
            Dissipator::new(modes.a1.clone(), params.kappa1 / g)?,
            Dissipator::new(modes.a2.clone(), params.kappa2 / g)?,
            Dissipator::new(modes.b.clone(), params.gamma_s / g)?,
            Dissipator::new(nb, params.gamma_star / g)?,
        ];
        let alpha = params.alpha_over_g();
        let sectors = (0..space.total_dim())
            .map(|i| space.occupations(i).iter().sum::<usize>() as i64)
            .collect();
        Ok(Self {
            sectors,
            modes,
            dissipators,
            alpha,
            t_final: params.time_ratio / alpha,
            step: params.step_in_g_units(),
        })
    }

    fn run(
        &self,
        params: &ProtocolParams,
        initial: DensityMatrix,
        capture_stride: usize,
    ) -> Result<Evolution> {
        let hamiltonian = ScheduleHamiltonian {
            modes: &self.modes,
            alpha: self.alpha,
            orientation: params.orientation,
        };
        let problem = EvolutionProblem {
            hamiltonian: &hamiltonian,
            dissipators: self.dissipators.clone(),
            initial_state: initial,
            t_start: 0.0,
            t_end: self.t_final,
            step: self.step.min(self.t_final),
            capture_stride,
            sectors: Some(self.sectors.clone()),
        };
        evolve(&problem)
    }

    fn observe(&self, rho: &DensityMatrix, mode: usize) -> Result<f64> {
        Ok(expectation(rho, &self.modes.number(mode))?.re)
    }
}

/// Product state from per-mode occupation distributions.
fn product_state(dims: [usize; 3], dists: [Vec<f64>; 3]) -> Result<DensityMatrix> {
    let mut factors = Vec::with_capacity(3);
    for (d, mut p) in dims.into_iter().zip(dists) {
        p.resize(d, 0.0);
        let total: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= total);
        factors.push(DensityMatrix::from_diagonal(&ModeSpace::single(d)?, &p)?);
    }
    DensityMatrix::product(&[&factors[0], &factors[1], &factors[2]])
}

fn vacuum() -> Vec<f64> {
    vec![1.0]
}

fn one_photon() -> Vec<f64> {
    vec![0.0, 1.0]
}

/// Thermal distribution shifted up by one photon.
fn thermal_plus_photon(dim: usize, nbar: f64) -> Result<Vec<f64>> {
    let p = thermal_probabilities(dim, nbar)?;
    let mut shifted = vec![0.0; dim];
    shifted[1..].copy_from_slice(&p[..dim - 1]);
    Ok(shifted)
}

fn signal_initial(params: &ProtocolParams) -> Result<DensityMatrix> {
    let (input, _) = params.direction.modes();
    let mut dists = [vacuum(), vacuum(), vacuum()];
    dists[input] = one_photon();
    product_state(params.dims, dists)
}

/// Run only the single-photon signal and measure the output mode.
pub fn run_efficiency(params: &ProtocolParams) -> Result<EfficiencyRun> {
    let setup = Setup::new(params)?;
    efficiency_with(&setup, params)
}

/// Raw evolution of the single-photon run, keeping every captured density
/// matrix. Times are in units of 1/G.
pub fn signal_evolution(params: &ProtocolParams) -> Result<Evolution> {
    let setup = Setup::new(params)?;
    setup.run(params, signal_initial(params)?, params.capture_stride)
}

fn efficiency_with(setup: &Setup, params: &ProtocolParams) -> Result<EfficiencyRun> {
    let (_, output) = params.direction.modes();
    let evo = setup.run(params, signal_initial(params)?, params.capture_stride)?;
    let g = params.coupling;
    let trajectory = evo
        .trajectory
        .iter()
        .map(|(t, rho)| {
            Ok(TrajectoryPoint {
                t: t / g,
                g_t: *t,
                optical: setup.observe(rho, OPTICAL)?,
                microwave: setup.observe(rho, MICROWAVE)?,
                spin: setup.observe(rho, SPIN)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EfficiencyRun {
        efficiency: setup.observe(&evo.final_state, output)?,
        trajectory,
        final_state: evo.final_state,
        step: evo.step,
        steps: evo.steps,
        max_trace_deviation: evo.max_trace_deviation,
    })
}

/// Signal, noise and fidelity for one parameter point.
///
/// Efficiency comes from a pure single-photon input. Noise is the output
/// photon number when the microwave mode starts thermal with no input.
/// The SNR signal follows `params.signal`.
pub fn run_transfer(params: &ProtocolParams) -> Result<TransferResult> {
    let setup = Setup::new(params)?;
    let (input, output) = params.direction.modes();
    let nbar = thermal_occupation(params.omega_mw, params.temperature)?;
    let eff = efficiency_with(&setup, params)?;
    let mut max_dev = eff.max_trace_deviation;
    let mw_dim = params.dims[MICROWAVE];

    // Vacuum stays vacuum under excitation-conserving H and pure loss.
    let noise = if nbar > 0.0 {
        let mut dists = [vacuum(), vacuum(), vacuum()];
        dists[MICROWAVE] = thermal_probabilities(mw_dim, nbar)?;
        let evo = setup.run(params, product_state(params.dims, dists)?, 0)?;
        max_dev = max_dev.max(evo.max_trace_deviation);
        setup.observe(&evo.final_state, output)?
    } else {
        0.0
    };

    let signal = match params.signal {
        SignalConvention::ThermalBackground if nbar > 0.0 => {
            let mut dists = [vacuum(), vacuum(), vacuum()];
            if input == MICROWAVE {
                dists[MICROWAVE] = thermal_plus_photon(mw_dim, nbar)?;
            } else {
                dists[input] = one_photon();
                dists[MICROWAVE] = thermal_probabilities(mw_dim, nbar)?;
            }
            let evo = setup.run(params, product_state(params.dims, dists)?, 0)?;
            max_dev = max_dev.max(evo.max_trace_deviation);
            setup.observe(&evo.final_state, output)?
        }
        _ => eff.efficiency,
    };

    let fidelity = snr_fidelity(signal.max(0.0), noise.max(0.0))?;
    Ok(TransferResult {
        efficiency: eff.efficiency,
        noise,
        signal,
        fidelity_snr: fidelity.value,
        fidelity_flag: fidelity.flag,
        nbar,
        trajectory: eff.trajectory,
        step: eff.step,
        steps: eff.steps,
        orientation: params.orientation,
        max_trace_deviation: max_dev,
    })
}

/// Record of the schedule-orientation calibration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrientationCalibration {
    /// Orientation that carries a microwave photon into the optical mode.
    pub mw_to_optical: ScheduleOrientation,
    pub efficiency_as_printed: f64,
    pub efficiency_reversed: f64,
    pub alpha_over_g: f64,
}

impl OrientationCalibration {
    pub fn orientation_for(&self, direction: Direction) -> ScheduleOrientation {
        match direction {
            Direction::MwToOptical => self.mw_to_optical,
            Direction::OpticalToMw => self.mw_to_optical.flipped(),
        }
    }
}

/// Evolve a microwave photon under both schedule orientations and keep the
/// one that delivers more of it to the optical cavity.
pub fn calibrate_orientation(params: &ProtocolParams) -> Result<OrientationCalibration> {
    let mut p = params.clone();
    p.direction = Direction::MwToOptical;
    p.capture_stride = 0;
    p.orientation = ScheduleOrientation::AsPrinted;
    let printed = run_efficiency(&p)?.efficiency;
    p.orientation = ScheduleOrientation::Reversed;
    let reversed = run_efficiency(&p)?.efficiency;
    let chosen = if reversed > printed {
        ScheduleOrientation::Reversed
    } else {
        ScheduleOrientation::AsPrinted
    };
    log::info!(
        "orientation calibration at alpha/G = {:.4}: as_printed {printed:.4}, reversed {reversed:.4} -> {chosen}",
        params.alpha_over_g()
    );
    Ok(OrientationCalibration {
        mw_to_optical: chosen,
        efficiency_as_printed: printed,
        efficiency_reversed: reversed,
        alpha_over_g: params.alpha_over_g(),
    })
}
