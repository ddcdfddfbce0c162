//! Ground-state spin Hamiltonian of ¹⁶⁷Er:Y₂SiO₅
//!
//! H = β_e B·g·S + I·A·S + I·Q·I − β_n g_n B·I
//!
//! in frequency units (GHz), with S = 1/2 and I = 7/2 giving 16 hyperfine
//! levels. Tensors are read from a parameter file; see
//! `data/er167_yso_site1.toml`.
//!
//! Field derivatives use the Zeeman operators ζ_i = β_e (g·S)_i − β_n g_n I_i
//! (GHz/T), so H(B) = H(0) + Σ_i B_i ζ_i. Levels closer than a degeneracy
//! tolerance are grouped into clusters; inside a cluster the basis is
//! rotated to diagonalize u·ζ, with u the field direction (or, at zero field,
//! a supplied direction or the cluster's principal Zeeman axis), so
//! first-order shifts and dipoles are well defined.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::opalg::{hermitian_eigen_matrix, Matrix, ModeSpace, Operator, C64};

/// Levels closer than this (GHz) are treated as degenerate.
pub const DEFAULT_DEGENERACY_TOL_GHZ: f64 = 1e-3;
/// Field fluctuation at the Er site, tesla.
pub const DEFAULT_DELTA_B: f64 = 26e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpinConstants {
    /// β_e/h, GHz/T.
    #[serde(rename = "beta_e_GHz_per_T")]
    pub beta_e_ghz_per_t: f64,
    /// β_n/h, MHz/T.
    #[serde(rename = "beta_n_MHz_per_T")]
    pub beta_n_mhz_per_t: f64,
}

impl Default for SpinConstants {
    fn default() -> Self {
        Self {
            beta_e_ghz_per_t: 13.996245,
            beta_n_mhz_per_t: 7.622593,
        }
    }
}

/// One spin-Hamiltonian parameter set. Hyperfine and quadrupole tensors are
/// held in GHz.
#[derive(Clone, Debug, PartialEq)]
pub struct SpinParams {
    pub site: String,
    pub source: String,
    pub g: Matrix3<f64>,
    pub a: Matrix3<f64>,
    pub q: Matrix3<f64>,
    pub g_n: f64,
    pub s: f64,
    pub i: f64,
    pub constants: SpinConstants,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTensor {
    units: String,
    values: [[f64; 3]; 3],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawParams {
    site: String,
    source: String,
    g_n: f64,
    #[serde(rename = "S")]
    s: f64,
    #[serde(rename = "I")]
    i: f64,
    g: [[f64; 3]; 3],
    #[serde(rename = "A")]
    a: RawTensor,
    #[serde(rename = "Q")]
    q: RawTensor,
    constants: SpinConstants,
}

fn rows_to_matrix(rows: &[[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| rows[i][j])
}

fn tensor_in_ghz(name: &str, raw: &RawTensor) -> Result<Matrix3<f64>> {
    let scale = match raw.units.as_str() {
        "GHz" => 1.0,
        "MHz" => 1e-3,
        "kHz" => 1e-6,
        "Hz" => 1e-9,
        other => {
            return Err(Error::SpinParams(format!(
                "{name}: unknown units `{other}` (expected GHz, MHz, kHz or Hz)"
            )))
        }
    };
    let m = rows_to_matrix(&raw.values) * scale;
    let asym = (m - m.transpose()).abs().max() / 2.0;
    if asym > 1e-6 {
        log::warn!("{name} tensor asymmetric by {:.3} kHz; symmetrizing", asym * 1e6);
    }
    Ok((m + m.transpose()) / 2.0)
}

impl SpinParams {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: RawParams = toml::from_str(text).map_err(|e| Error::SpinParams(e.to_string()))?;
        let params = Self {
            a: tensor_in_ghz("A", &raw.a)?,
            q: tensor_in_ghz("Q", &raw.q)?,
            site: raw.site,
            source: raw.source,
            g: rows_to_matrix(&raw.g),
            g_n: raw.g_n,
            s: raw.s,
            i: raw.i,
            constants: raw.constants,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::SpinParams(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::SpinParams(msg) => Error::SpinParams(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Bare electron spin with an isotropic g-factor and no nucleus.
    pub fn electron_only(g: f64) -> Self {
        Self {
            site: "toy".into(),
            source: "isotropic electron spin".into(),
            g: Matrix3::identity() * g,
            a: Matrix3::zeros(),
            q: Matrix3::zeros(),
            g_n: 0.0,
            s: 0.5,
            i: 0.0,
            constants: SpinConstants::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let half_integer = |x: f64| (2.0 * x - (2.0 * x).round()).abs() < 1e-12;
        if !(self.s > 0.0) || !half_integer(self.s) {
            return Err(Error::SpinParams(format!("S must be a positive half-integer, got {}", self.s)));
        }
        if !(self.i >= 0.0) || !half_integer(self.i) {
            return Err(Error::SpinParams(format!("I must be a nonnegative half-integer, got {}", self.i)));
        }
        let finite = self.g.iter().chain(self.a.iter()).chain(self.q.iter()).all(|x| x.is_finite());
        if !finite || !self.g_n.is_finite() {
            return Err(Error::SpinParams("tensor entries must be finite".into()));
        }
        let c = &self.constants;
        if !(c.beta_e_ghz_per_t > 0.0) || !(c.beta_n_mhz_per_t > 0.0) {
            return Err(Error::SpinParams("magnetons must be positive".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        ((2.0 * self.s + 1.0).round() * (2.0 * self.i + 1.0).round()) as usize
    }
}

/// (Jx, Jy, Jz) for angular momentum j, basis ordered m = j, j−1, …, −j.
pub fn spin_matrices(j: f64) -> Result<[Operator; 3]> {
    let twice = 2.0 * j;
    if !(j > 0.0) || (twice - twice.round()).abs() > 1e-12 {
        return Err(Error::InvalidParameter(format!("spin must be a positive half-integer, got {j}")));
    }
    let [x, y, z] = spin_matrix_set(j);
    let space = ModeSpace::single(x.nrows())?;
    Ok([
        Operator::new(space.clone(), x)?,
        Operator::new(space.clone(), y)?,
        Operator::new(space, z)?,
    ])
}

fn spin_matrix_set(j: f64) -> [Matrix; 3] {
    let d = (2.0 * j).round() as usize + 1;
    let m = |k: usize| j - k as f64;
    let mut plus = Matrix::zeros(d, d);
    for k in 1..d {
        plus[(k - 1, k)] = C64::new((j * (j + 1.0) - m(k) * (m(k) + 1.0)).sqrt(), 0.0);
    }
    let minus = plus.adjoint();
    let x = (&plus + &minus) * C64::new(0.5, 0.0);
    let y = (&plus - &minus) * C64::new(0.0, -0.5);
    let z = Matrix::from_diagonal(&nalgebra::DVector::from_fn(d, |k, _| C64::new(m(k), 0.0)));
    [x, y, z]
}

/// Field-independent part and Zeeman operators of one parameter set.
#[derive(Clone, Debug)]
pub struct SpinHamiltonian {
    space: ModeSpace,
    h0: Matrix,
    zeta: [Matrix; 3],
}

impl SpinHamiltonian {
    pub fn new(params: &SpinParams) -> Result<Self> {
        params.validate()?;
        let de = (2.0 * params.s).round() as usize + 1;
        let dn = (2.0 * params.i).round() as usize + 1;
        let s_ops = spin_matrix_set(params.s);
        let (space, s_full, i_full): (_, Vec<Matrix>, Vec<Matrix>) = if dn == 1 {
            (
                ModeSpace::single(de)?,
                s_ops.to_vec(),
                vec![Matrix::zeros(de, de); 3],
            )
        } else {
            let i_ops = spin_matrix_set(params.i);
            let (ie, in_) = (Matrix::identity(de, de), Matrix::identity(dn, dn));
            (
                ModeSpace::new(&[de, dn])?,
                s_ops.iter().map(|s| s.kronecker(&in_)).collect(),
                i_ops.iter().map(|i| ie.kronecker(i)).collect(),
            )
        };
        let n = space.total_dim();
        let re = |x: f64| C64::new(x, 0.0);
        let mut h0 = Matrix::zeros(n, n);
        for a in 0..3 {
            for b in 0..3 {
                if params.a[(a, b)] != 0.0 {
                    h0 += &i_full[a] * &s_full[b] * re(params.a[(a, b)]);
                }
                if params.q[(a, b)] != 0.0 {
                    h0 += &i_full[a] * &i_full[b] * re(params.q[(a, b)]);
                }
            }
        }
        let beta_e = params.constants.beta_e_ghz_per_t;
        let beta_n = params.constants.beta_n_mhz_per_t * 1e-3;
        let zeta = std::array::from_fn(|a| {
            let mut z = &i_full[a] * re(-beta_n * params.g_n);
            for b in 0..3 {
                z += &s_full[b] * re(beta_e * params.g[(a, b)]);
            }
            z
        });
        Ok(Self { space, h0, zeta })
    }

    pub fn dim(&self) -> usize {
        self.space.total_dim()
    }

    pub fn space(&self) -> &ModeSpace {
        &self.space
    }

    /// H(B) in GHz, B in tesla.
    pub fn at(&self, b: &Vector3<f64>) -> Operator {
        Operator::new(self.space.clone(), self.matrix_at(b)).expect("shape fixed at construction")
    }

    fn matrix_at(&self, b: &Vector3<f64>) -> Matrix {
        let mut h = self.h0.clone();
        for (z, &bi) in self.zeta.iter().zip(b.iter()) {
            if bi != 0.0 {
                h += z * C64::new(bi, 0.0);
            }
        }
        h
    }

    /// ζ_i = ∂H/∂B_i in GHz/T.
    pub fn zeeman_operators(&self) -> [Operator; 3] {
        std::array::from_fn(|i| Operator::new(self.space.clone(), self.zeta[i].clone()).expect("shape"))
    }
}

/// H(B) for `params` in GHz with B in tesla.
pub fn build_hamiltonian(params: &SpinParams, b: &Vector3<f64>) -> Result<Operator> {
    Ok(SpinHamiltonian::new(params)?.at(b))
}

/// Levels at one field with their derivatives.
#[derive(Clone, Debug)]
pub struct FieldAnalysis {
    pub field: Vector3<f64>,
    /// GHz, ascending; label = index + 1.
    pub energies: Vec<f64>,
    /// Eigenvectors as columns, cluster-adapted.
    pub vectors: Matrix,
    /// Cluster index of each level.
    pub cluster: Vec<usize>,
    /// ∂E/∂B per level, GHz/T.
    pub gradients: Vec<Vector3<f64>>,
    /// ∂²E/∂B_i∂B_j per level, GHz/T².
    pub curvatures: Vec<Matrix3<f64>>,
    /// ζ_i in the level basis.
    zeta_levels: [Matrix; 3],
}

impl FieldAnalysis {
    /// `direction` orients the basis inside degenerate clusters when the
    /// field is zero.
    pub fn new(
        ham: &SpinHamiltonian,
        field: Vector3<f64>,
        tol_ghz: f64,
        direction: Option<Vector3<f64>>,
    ) -> Result<Self> {
        if !(tol_ghz >= 0.0) {
            return Err(Error::InvalidParameter(format!("degeneracy tolerance must be nonnegative, got {tol_ghz}")));
        }
        let eig = hermitian_eigen_matrix(&ham.matrix_at(&field))?;
        let energies = eig.values;
        let mut vectors = eig.vectors;
        let n = energies.len();

        let mut cluster = vec![0; n];
        for k in 1..n {
            cluster[k] = cluster[k - 1] + usize::from(energies[k] - energies[k - 1] >= tol_ghz);
        }

        let axis = if field.norm() > 0.0 {
            Some(field.normalize())
        } else {
            direction.filter(|d| d.norm() > 0.0).map(|d| d.normalize())
        };
        let mut start = 0;
        while start < n {
            let mut end = start + 1;
            while end < n && cluster[end] == cluster[start] {
                end += 1;
            }
            if end - start > 1 {
                rotate_cluster(&mut vectors, start, end, &ham.zeta, axis);
            }
            start = end;
        }

        let zeta_levels: [Matrix; 3] = std::array::from_fn(|i| vectors.adjoint() * &ham.zeta[i] * &vectors);
        let gradients = (0..n)
            .map(|m| Vector3::from_fn(|i, _| zeta_levels[i][(m, m)].re))
            .collect();
        let curvatures = (0..n)
            .map(|m| {
                let mut c = Matrix3::zeros();
                for k in (0..n).filter(|&k| cluster[k] != cluster[m]) {
                    let denom = energies[m] - energies[k];
                    for i in 0..3 {
                        for j in i..3 {
                            let v = 2.0 * (zeta_levels[i][(m, k)] * zeta_levels[j][(k, m)]).re / denom;
                            c[(i, j)] += v;
                            if i != j {
                                c[(j, i)] += v;
                            }
                        }
                    }
                }
                c
            })
            .collect();

        Ok(Self {
            field,
            energies,
            vectors,
            cluster,
            gradients,
            curvatures,
            zeta_levels,
        })
    }

    pub fn num_levels(&self) -> usize {
        self.energies.len()
    }

    /// Zero-based indices for 1-based labels (m, n).
    fn pair(&self, m: usize, n: usize) -> Result<(usize, usize)> {
        let count = self.num_levels();
        let invalid = |reason: String| Error::InvalidPair { m, n, reason };
        if m == n {
            return Err(invalid("a level paired with itself is a static moment, not a transition".into()));
        }
        if m == 0 || n == 0 || m > count || n > count {
            return Err(invalid(format!("labels run from 1 to {count}")));
        }
        let (a, b) = (m - 1, n - 1);
        if self.cluster[a] == self.cluster[b] {
            return Err(Error::DegenerateTransition {
                m,
                n,
                gap_mhz: (self.energies[b] - self.energies[a]).abs() * 1e3,
            });
        }
        Ok((a, b))
    }

    /// |E_n − E_m| in GHz.
    pub fn frequency(&self, m: usize, n: usize) -> Result<f64> {
        let (a, b) = self.pair(m, n)?;
        Ok((self.energies[b] - self.energies[a]).abs())
    }

    /// Components |⟨m|ζ_i|n⟩| in GHz/T.
    pub fn dipole(&self, m: usize, n: usize) -> Result<Vector3<f64>> {
        let (a, b) = self.pair(m, n)?;
        Ok(Vector3::from_fn(|i, _| self.zeta_levels[i][(a, b)].norm()))
    }

    /// Field derivatives of the gap E_n − E_m, in Hz/T and Hz/T².
    pub fn sensitivity(&self, m: usize, n: usize) -> Result<ZeemanSensitivity> {
        let (a, b) = self.pair(m, n)?;
        Ok(ZeemanSensitivity {
            nu: (self.gradients[b] - self.gradients[a]) * 1e9,
            curvature: (self.curvatures[b] - self.curvatures[a]) * 1e9,
        })
    }

    /// Full record for the pair, labels ordered low to high.
    pub fn record(&self, m: usize, n: usize, model: &CoherenceModel) -> Result<TransitionRecord> {
        let (lower, upper) = if self.energies[m.max(1) - 1] <= self.energies[n.max(1) - 1] { (m, n) } else { (n, m) };
        let sens = self.sensitivity(lower, upper)?;
        let dipole = self.dipole(lower, upper)?;
        Ok(TransitionRecord {
            lower,
            upper,
            frequency_ghz: self.frequency(lower, upper)?,
            dipole_ghz_per_t: [dipole.x, dipole.y, dipole.z],
            s1_hz_per_t: sens.s1(),
            s2_hz_per_t2: sens.s2(),
            t2_s: coherence_time(&sens.nu, &sens.curvature, model)?,
        })
    }
}

/// Diagonalize u·ζ inside levels `start..end`. Without a direction, use the
/// axis along which the cluster splits most.
fn rotate_cluster(vectors: &mut Matrix, start: usize, end: usize, zeta: &[Matrix; 3], axis: Option<Vector3<f64>>) {
    let k = end - start;
    let block = vectors.columns(start, k).into_owned();
    let projected: [Matrix; 3] = std::array::from_fn(|i| block.adjoint() * &zeta[i] * &block);
    let u = axis.or_else(|| {
        let traceless: Vec<Matrix> = projected
            .iter()
            .map(|z| z - Matrix::identity(k, k) * (z.trace() / C64::new(k as f64, 0.0)))
            .collect();
        let m = Matrix3::from_fn(|i, j| (traceless[i].adjoint() * &traceless[j]).trace().re);
        if m.max() <= 0.0 {
            return None;
        }
        let eig = SymmetricEigen::new(m);
        let top = eig.eigenvalues.imax();
        let mut u: Vector3<f64> = eig.eigenvectors.column(top).into_owned();
        if u[u.iamax()] < 0.0 {
            u = -u;
        }
        Some(u)
    });
    let Some(u) = u else { return };
    let mut combined = DMatrix::zeros(k, k);
    for (z, &ui) in projected.iter().zip(u.iter()) {
        combined += z * C64::new(ui, 0.0);
    }
    let Ok(eig) = hermitian_eigen_matrix(&combined) else { return };
    let rotated = &block * &eig.vectors;
    vectors.columns_mut(start, k).copy_from(&rotated);
}

/// Ascending levels and cluster-adapted eigenvectors at field `b`.
#[derive(Clone, Debug)]
pub struct SpinLevels {
    /// GHz.
    pub frequencies: Vec<f64>,
    pub vectors: Matrix,
}

pub fn energy_levels(params: &SpinParams, b: &Vector3<f64>) -> Result<SpinLevels> {
    let ham = SpinHamiltonian::new(params)?;
    let fa = FieldAnalysis::new(&ham, *b, DEFAULT_DEGENERACY_TOL_GHZ, None)?;
    Ok(SpinLevels {
        frequencies: fa.energies,
        vectors: fa.vectors,
    })
}

/// Transition dipole components (D₁, D₂, b) in GHz/T for 1-based labels.
pub fn transition_dipole(params: &SpinParams, b: &Vector3<f64>, m: usize, n: usize) -> Result<Vector3<f64>> {
    let ham = SpinHamiltonian::new(params)?;
    FieldAnalysis::new(&ham, *b, DEFAULT_DEGENERACY_TOL_GHZ, None)?.dipole(m, n)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ZeemanSensitivity {
    /// ∇(E_n − E_m), Hz/T.
    pub nu: Vector3<f64>,
    /// Hessian of E_n − E_m, Hz/T².
    pub curvature: Matrix3<f64>,
}

impl ZeemanSensitivity {
    pub fn s1(&self) -> f64 {
        self.nu.norm()
    }

    pub fn s2(&self) -> f64 {
        spectral_radius(&self.curvature)
    }
}

fn spectral_radius(c: &Matrix3<f64>) -> f64 {
    let sym = (c + c.transpose()) / 2.0;
    SymmetricEigen::new(sym).eigenvalues.amax()
}

pub fn zeeman_sensitivity(params: &SpinParams, b: &Vector3<f64>, m: usize, n: usize) -> Result<ZeemanSensitivity> {
    let ham = SpinHamiltonian::new(params)?;
    FieldAnalysis::new(&ham, *b, DEFAULT_DEGENERACY_TOL_GHZ, None)?.sensitivity(m, n)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoherenceModel {
    /// Field fluctuation amplitude, tesla.
    pub delta_b: f64,
}

impl Default for CoherenceModel {
    fn default() -> Self {
        Self {
            delta_b: DEFAULT_DELTA_B,
        }
    }
}

/// T₂ = 1/(π(S₁ΔB + S₂ΔB²)) in seconds; +∞ when both sensitivities vanish.
pub fn coherence_time(nu: &Vector3<f64>, c: &Matrix3<f64>, model: &CoherenceModel) -> Result<f64> {
    if !(model.delta_b > 0.0) || !model.delta_b.is_finite() {
        return Err(Error::InvalidParameter(format!("delta_b must be positive, got {}", model.delta_b)));
    }
    if !nu.iter().chain(c.iter()).all(|x| x.is_finite()) {
        return Err(Error::InvalidParameter("sensitivities must be finite".into()));
    }
    let (s1, s2) = (nu.norm(), spectral_radius(c));
    let rate = s1 * model.delta_b + s2 * model.delta_b * model.delta_b;
    Ok(if rate == 0.0 { f64::INFINITY } else { 1.0 / (PI * rate) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub lower: usize,
    pub upper: usize,
    pub frequency_ghz: f64,
    /// (D₁, D₂, b), GHz/T.
    pub dipole_ghz_per_t: [f64; 3],
    pub s1_hz_per_t: f64,
    pub s2_hz_per_t2: f64,
    pub t2_s: f64,
}

/// Every resolvable transition with frequency in `[lo, hi]` GHz, longest T₂
/// first.
pub fn rank_transitions(params: &SpinParams, b: &Vector3<f64>, window_ghz: (f64, f64)) -> Result<Vec<TransitionRecord>> {
    let ham = SpinHamiltonian::new(params)?;
    let fa = FieldAnalysis::new(&ham, *b, DEFAULT_DEGENERACY_TOL_GHZ, None)?;
    rank_in(&fa, window_ghz, &CoherenceModel::default())
}

pub fn rank_in(fa: &FieldAnalysis, (lo, hi): (f64, f64), model: &CoherenceModel) -> Result<Vec<TransitionRecord>> {
    if !(lo >= 0.0) || !(hi >= lo) || !hi.is_finite() {
        return Err(Error::InvalidParameter(format!("frequency window [{lo}, {hi}] GHz is invalid")));
    }
    let n = fa.num_levels();
    let mut out = Vec::new();
    for m in 1..=n {
        for k in m + 1..=n {
            let f = fa.energies[k - 1] - fa.energies[m - 1];
            if f < lo || f > hi || fa.cluster[m - 1] == fa.cluster[k - 1] {
                continue;
            }
            out.push(fa.record(m, k, model)?);
        }
    }
    out.sort_by(|a, b| b.t2_s.total_cmp(&a.t2_s).then(a.frequency_ghz.total_cmp(&b.frequency_ghz)));
    Ok(out)
}

/// Level frequencies along a field ramp, each column following one level
/// by eigenvector overlap.
#[derive(Clone, Debug)]
pub struct FieldSweep {
    pub axis: Vector3<f64>,
    /// |B| at each point, tesla.
    pub fields: Vec<f64>,
    /// `levels[k][l]`: frequency (GHz) of tracked level l at point k. At
    /// zero field l + 1 is the usual ascending label.
    pub levels: Vec<Vec<f64>>,
    /// dE/d|B| along the axis for each tracked level, GHz/T.
    pub slopes: Vec<Vec<f64>>,
}

/// Sweep |B| from 0 to `b_max` along `axis` in `steps` points.
pub fn field_sweep(params: &SpinParams, axis: &Vector3<f64>, b_max: f64, steps: usize) -> Result<FieldSweep> {
    if steps < 2 {
        return Err(Error::InvalidParameter(format!("a sweep needs at least 2 points, got {steps}")));
    }
    if !(b_max > 0.0) || !b_max.is_finite() {
        return Err(Error::InvalidParameter(format!("b_max must be positive, got {b_max}")));
    }
    if !(axis.norm() > 0.0) {
        return Err(Error::InvalidParameter("sweep axis must be nonzero".into()));
    }
    let axis = axis.normalize();
    let ham = SpinHamiltonian::new(params)?;
    let fields: Vec<f64> = (0..steps).map(|k| b_max * k as f64 / (steps - 1) as f64).collect();
    let points = fields
        .par_iter()
        .map(|&b| FieldAnalysis::new(&ham, axis * b, DEFAULT_DEGENERACY_TOL_GHZ, Some(axis)))
        .collect::<Result<Vec<_>>>()?;

    let n = ham.dim();
    // track[l] = sorted index of tracked level l at the current point
    let mut track: Vec<usize> = (0..n).collect();
    let mut levels = Vec::with_capacity(steps);
    let mut slopes = Vec::with_capacity(steps);
    for (k, p) in points.iter().enumerate() {
        if k > 0 {
            track = follow(&points[k - 1].vectors, &p.vectors, &track);
        }
        levels.push(track.iter().map(|&s| p.energies[s]).collect());
        slopes.push(track.iter().map(|&s| p.gradients[s].dot(&axis)).collect());
    }
    Ok(FieldSweep {
        axis,
        fields,
        levels,
        slopes,
    })
}

/// Greedy maximum-overlap matching of tracked levels onto the next point.
fn follow(prev: &Matrix, next: &Matrix, track: &[usize]) -> Vec<usize> {
    let n = track.len();
    let overlap = prev.adjoint() * next;
    let mut candidates: Vec<(f64, usize, usize)> = Vec::with_capacity(n * n);
    for (l, &s) in track.iter().enumerate() {
        for t in 0..n {
            candidates.push((overlap[(s, t)].norm_sqr(), l, t));
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out = vec![usize::MAX; n];
    let mut taken = vec![false; n];
    for (_, l, t) in candidates {
        if out[l] == usize::MAX && !taken[t] {
            out[l] = t;
            taken[t] = true;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZefozEntry {
    /// Tesla.
    pub field: [f64; 3],
    pub record: TransitionRecord,
}

/// Transitions with first-order sensitivity S₁ below `tol_hz_per_t` at each
/// candidate field. Degenerate pairs are skipped.
pub fn find_zefoz(params: &SpinParams, candidates: &[Vector3<f64>], tol_hz_per_t: f64) -> Result<Vec<ZefozEntry>> {
    if !(tol_hz_per_t > 0.0) {
        return Err(Error::InvalidParameter(format!("tolerance must be positive, got {tol_hz_per_t}")));
    }
    let ham = SpinHamiltonian::new(params)?;
    let model = CoherenceModel::default();
    let mut out = Vec::new();
    for b in candidates {
        let fa = FieldAnalysis::new(&ham, *b, DEFAULT_DEGENERACY_TOL_GHZ, None)?;
        out.append(&mut zefoz_in(&fa, tol_hz_per_t, &model)?);
    }
    Ok(out)
}

/// ZEFOZ transitions at one analysed field, longest T₂ first.
pub fn zefoz_in(fa: &FieldAnalysis, tol_hz_per_t: f64, model: &CoherenceModel) -> Result<Vec<ZefozEntry>> {
    if !(tol_hz_per_t > 0.0) {
        return Err(Error::InvalidParameter(format!("tolerance must be positive, got {tol_hz_per_t}")));
    }
    let b = fa.field;
    Ok(rank_in(fa, (0.0, f64::MAX), model)?
        .into_iter()
        .filter(|r| r.s1_hz_per_t < tol_hz_per_t)
        .map(|record| ZefozEntry {
            field: [b.x, b.y, b.z],
            record,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn er167() -> SpinParams {
        let text = include_str!("../../../data/er167_yso_site1.toml");
        SpinParams::from_toml_str(text).unwrap()
    }

    fn op_close(a: &Matrix, b: &Matrix, tol: f64) -> bool {
        (a - b).iter().all(|z| z.norm() < tol)
    }

    #[test]
    fn spin_half_is_half_pauli() {
        let [x, y, z] = spin_matrices(0.5).unwrap();
        let h = C64::new(0.5, 0.0);
        assert_eq!(x.matrix()[(0, 1)], h);
        assert_eq!(y.matrix()[(0, 1)], C64::new(0.0, -0.5));
        assert_eq!(z.matrix()[(0, 0)], h);
        assert_eq!(z.matrix()[(1, 1)], -h);
    }

    #[test]
    fn seven_halves_casimir() {
        let [x, y, z] = spin_matrices(3.5).unwrap();
        let diag: Vec<f64> = (0..8).map(|k| z.matrix()[(k, k)].re).collect();
        assert_eq!(diag, vec![3.5, 2.5, 1.5, 0.5, -0.5, -1.5, -2.5, -3.5]);
        let cas = &(&(&x * &x) + &(&y * &y)) + &(&z * &z);
        let expect = Operator::identity(x.space()).scale(C64::new(15.75, 0.0));
        assert!((&cas - &expect).max_abs() < 1e-12);
    }

    #[test]
    fn angular_momentum_algebra() {
        for j in [0.5, 1.0, 1.5, 3.5, 6.0] {
            let [x, y, z] = spin_matrices(j).unwrap();
            let i = C64::new(0.0, 1.0);
            for (a, b, c) in [(&x, &y, &z), (&y, &z, &x), (&z, &x, &y)] {
                let lhs = a.commutator(b).unwrap();
                assert!((&lhs - &c.scale(i)).norm() < 1e-12, "j = {j}");
            }
        }
        assert!(spin_matrices(0.0).is_err());
        assert!(spin_matrices(0.7).is_err());
    }

    #[test]
    fn parameter_file_loads() {
        let p = er167();
        assert_eq!(p.dim(), 16);
        assert_eq!(p.site, "1");
        assert!((p.a[(1, 1)] - 0.8275).abs() < 1e-12);
        assert_eq!(p.a, p.a.transpose());
    }

    #[test]
    fn asymmetric_tensor_symmetrized() {
        let text = include_str!("../../../data/er167_yso_site1.toml").replace("[-202.5, 827.5", "[-200.5, 827.5");
        let p = SpinParams::from_toml_str(&text).unwrap();
        assert!((p.a[(0, 1)] - (-0.2015)).abs() < 1e-12);
        assert_eq!(p.a[(0, 1)], p.a[(1, 0)]);
    }

    #[test]
    fn unknown_key_and_units_rejected() {
        let base = include_str!("../../../data/er167_yso_site1.toml");
        let err = SpinParams::from_toml_str(&format!("bogus = 1\n{base}")).unwrap_err();
        assert!(err.to_string().contains("bogus"));
        let err = SpinParams::from_toml_str(&base.replacen("units = \"MHz\"", "units = \"mT\"", 1)).unwrap_err();
        assert!(err.to_string().contains("mT"));
    }

    #[test]
    fn interactions_off_give_zero_hamiltonian() {
        let mut p = er167();
        p.a = Matrix3::zeros();
        p.q = Matrix3::zeros();
        let h = build_hamiltonian(&p, &Vector3::zeros()).unwrap();
        assert_eq!(h.max_abs(), 0.0);
    }

    #[test]
    fn isotropic_zeeman_ladder() {
        let mut p = er167();
        p.a = Matrix3::zeros();
        p.q = Matrix3::zeros();
        let g = 2.5;
        p.g = Matrix3::identity() * g;
        let bz = 0.1;
        let levels = energy_levels(&p, &Vector3::new(0.0, 0.0, bz)).unwrap().frequencies;
        let be = p.constants.beta_e_ghz_per_t;
        let bn = p.constants.beta_n_mhz_per_t * 1e-3;
        // E = ±β_e g B/2 − β_n g_n B m_I
        let mut expect: Vec<f64> = [0.5, -0.5]
            .iter()
            .flat_map(|ms| (0..8).map(move |k| ms * be * g * bz - bn * p.g_n * bz * (3.5 - k as f64)))
            .collect();
        expect.sort_by(f64::total_cmp);
        for (a, b) in levels.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn hamiltonian_is_affine_in_field() {
        let ham = SpinHamiltonian::new(&er167()).unwrap();
        let b = Vector3::new(0.013, -0.02, 0.031);
        let h0 = ham.matrix_at(&Vector3::zeros());
        let h1 = ham.matrix_at(&b);
        let h2 = ham.matrix_at(&(b * 2.0));
        let lhs = &h2 - &h0;
        let rhs = (&h1 - &h0) * C64::new(2.0, 0.0);
        assert!(op_close(&lhs, &rhs, 1e-12));
        let mut built = h0.clone();
        for (z, op) in b.iter().zip(ham.zeeman_operators()) {
            built += op.matrix() * C64::new(*z, 0.0);
        }
        assert!(op_close(&built, &h1, 1e-12));
        let h = ham.at(&b);
        assert!(h.hermiticity_error() < 1e-12 * h.norm());
    }

    #[test]
    fn level_sum_matches_trace() {
        let p = er167();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let b = Vector3::from_fn(|_, _| rng.random_range(-0.1..0.1));
            let tr = build_hamiltonian(&p, &b).unwrap().trace().re;
            let sum: f64 = energy_levels(&p, &b).unwrap().frequencies.iter().sum();
            assert!((sum - tr).abs() <= 1e-9 * tr.abs().max(1.0));
        }
    }

    #[test]
    fn dipole_symmetric_and_phase_invariant() {
        let p = er167();
        let ham = SpinHamiltonian::new(&p).unwrap();
        let b = Vector3::new(0.0, 0.0, 0.0);
        let fa = FieldAnalysis::new(&ham, b, DEFAULT_DEGENERACY_TOL_GHZ, None).unwrap();
        let d1 = fa.dipole(7, 10).unwrap();
        let d2 = fa.dipole(10, 7).unwrap();
        assert!((d1 - d2).norm() < 1e-14);

        let mut phased = fa.clone();
        let phase = C64::from_polar(1.0, 0.7);
        for r in 0..16 {
            phased.vectors[(r, 9)] *= phase;
        }
        let z = ham.zeeman_operators();
        let direct = |v: &Matrix| -> Vec<f64> {
            z.iter()
                .map(|op| (v.column(6).adjoint() * op.matrix() * v.column(9))[(0, 0)].norm())
                .collect()
        };
        let (a, b2) = (direct(&fa.vectors), direct(&phased.vectors));
        for ((x, y), d) in a.iter().zip(&b2).zip(d1.iter()) {
            assert!((x - y).abs() < 1e-12 && (x - d).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_pairs() {
        let p = er167();
        let b = Vector3::zeros();
        assert!(matches!(transition_dipole(&p, &b, 4, 4), Err(Error::InvalidPair { .. })));
        assert!(matches!(transition_dipole(&p, &b, 0, 4), Err(Error::InvalidPair { .. })));
        assert!(matches!(transition_dipole(&p, &b, 3, 17), Err(Error::InvalidPair { .. })));
        // levels 1 and 2 lie within 1 MHz at zero field
        assert!(matches!(zeeman_sensitivity(&p, &b, 1, 2), Err(Error::DegenerateTransition { .. })));
    }

    #[test]
    fn electron_only_doublet() {
        let g = 2.0;
        let p = SpinParams::electron_only(g);
        let b = Vector3::new(0.01, 0.02, -0.03);
        let sens = zeeman_sensitivity(&p, &b, 1, 2).unwrap();
        let be = p.constants.beta_e_ghz_per_t * 1e9;
        assert!((sens.s1() - be * g).abs() < 1e-6 * be * g);
        // The gap β_e g|B| is linear along the field, while its transverse
        // Hessian is β_e g (I − b̂b̂ᵀ)/|B|.
        let u = b.normalize();
        assert!((u.transpose() * sens.curvature * u)[(0, 0)].abs() < 1e-6 * sens.s2());
        let exact = (Matrix3::identity() - u * u.transpose()) * (be * g / b.norm());
        assert!((sens.curvature - exact).norm() < 1e-6 * exact.norm());
        let t2 = coherence_time(&sens.nu, &sens.curvature, &CoherenceModel::default()).unwrap();
        assert!(t2.is_finite());
        // no field-insensitive transition exists
        let found = find_zefoz(&p, &[b, Vector3::new(0.5, 0.0, 0.0)], 0.5 * be * g).unwrap();
        assert!(found.is_empty());
    }

    #[test]
    fn coherence_time_cases() {
        let model = CoherenceModel::default();
        assert_eq!(coherence_time(&Vector3::zeros(), &Matrix3::zeros(), &model).unwrap(), f64::INFINITY);
        let nu = Vector3::new(3e9, 0.0, 4e9);
        let t2 = coherence_time(&nu, &Matrix3::zeros(), &model).unwrap();
        assert!((t2 - 1.0 / (PI * 5e9 * 26e-6)).abs() < 1e-18);
        let c = Matrix3::from_diagonal(&Vector3::new(1e12, -3e12, 2e12));
        let t2 = coherence_time(&Vector3::zeros(), &c, &model).unwrap();
        assert!((t2 - 1.0 / (PI * 3e12 * 26e-6 * 26e-6)).abs() < 1e-12 * t2);
        assert!(coherence_time(&nu, &c, &CoherenceModel { delta_b: 0.0 }).is_err());
        assert!(coherence_time(&nu, &c, &CoherenceModel { delta_b: -1e-6 }).is_err());
    }

    /// Sorted eigenvalues without any cluster handling.
    fn raw_levels(ham: &SpinHamiltonian, b: &Vector3<f64>) -> Vec<f64> {
        hermitian_eigen_matrix(&ham.matrix_at(b)).unwrap().values
    }

    /// Central differences of the gap E_n − E_m, step `h` tesla.
    fn fd_gap(ham: &SpinHamiltonian, b: &Vector3<f64>, m: usize, n: usize, h: f64) -> (Vector3<f64>, Matrix3<f64>) {
        let gap = |x: &Vector3<f64>| {
            let l = raw_levels(ham, x);
            (l[n - 1] - l[m - 1]) * 1e9
        };
        let e = |i: usize| Vector3::from_fn(|k, _| if k == i { h } else { 0.0 });
        let g0 = gap(b);
        let grad = Vector3::from_fn(|i, _| (gap(&(b + e(i))) - gap(&(b - e(i)))) / (2.0 * h));
        let hess = Matrix3::from_fn(|i, j| {
            if i == j {
                (gap(&(b + e(i))) - 2.0 * g0 + gap(&(b - e(i)))) / (h * h)
            } else {
                (gap(&(b + e(i) + e(j))) - gap(&(b + e(i) - e(j))) - gap(&(b - e(i) + e(j)))
                    + gap(&(b - e(i) - e(j))))
                    / (4.0 * h * h)
            }
        });
        (grad, hess)
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let p = er167();
        let ham = SpinHamiltonian::new(&p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut checked = 0;
        while checked < 6 {
            let b = Vector3::from_fn(|_, _| rng.random_range(-0.03..0.03));
            let fa = FieldAnalysis::new(&ham, b, DEFAULT_DEGENERACY_TOL_GHZ, None).unwrap();
            let isolated = |l: usize| (0..16).all(|k| k == l || (fa.energies[k] - fa.energies[l]).abs() > 0.03);
            let m = rng.random_range(1..=16);
            let n = rng.random_range(1..=16);
            if m == n || !isolated(m - 1) || !isolated(n - 1) {
                continue;
            }
            let s = fa.sensitivity(m, n).unwrap();
            let (g, c) = fd_gap(&ham, &b, m, n, 1e-5);
            assert!((s.nu - g).norm() <= 0.01 * g.norm(), "{m}->{n} at {b:?}: {} vs {}", s.nu, g);
            assert!((s.curvature - c).norm() <= 0.01 * c.norm(), "{m}->{n}: {} vs {}", s.curvature, c);
            assert!((s.curvature - s.curvature.transpose()).norm() <= 1e-8 * s.curvature.norm());
            checked += 1;
        }
    }

    #[test]
    fn zero_field_nondegenerate_levels_have_no_linear_shift() {
        let p = er167();
        let ham = SpinHamiltonian::new(&p).unwrap();
        let fa = FieldAnalysis::new(&ham, Vector3::zeros(), DEFAULT_DEGENERACY_TOL_GHZ, None).unwrap();
        for l in 0..16 {
            let alone = (0..16).all(|k| k == l || fa.cluster[k] != fa.cluster[l]);
            if alone {
                assert!(fa.gradients[l].norm() < 1e-9, "level {} gradient {}", l + 1, fa.gradients[l]);
            }
        }
    }

    #[test]
    fn ranking_and_windows() {
        let p = er167();
        let b = Vector3::zeros();
        let ranked = rank_transitions(&p, &b, (1.0, 3.0)).unwrap();
        assert!(!ranked.is_empty());
        assert!(ranked.windows(2).all(|w| w[0].t2_s >= w[1].t2_s));
        assert!(ranked.iter().all(|r| (1.0..=3.0).contains(&r.frequency_ghz) && r.lower < r.upper));
        assert!(rank_transitions(&p, &b, (100.0, 101.0)).unwrap().is_empty());
        assert!(rank_transitions(&p, &b, (3.0, 1.0)).is_err());
    }

    #[test]
    fn sweep_starts_at_zero_field_levels() {
        let p = er167();
        let axis = Vector3::new(0.0, 0.0, 1.0);
        let sweep = field_sweep(&p, &axis, 0.05, 26).unwrap();
        let zero = energy_levels(&p, &Vector3::zeros()).unwrap().frequencies;
        assert_eq!(sweep.levels[0], zero);
        assert_eq!(sweep.levels.len(), 26);
        let db = sweep.fields[1] - sweep.fields[0];
        for k in 0..25 {
            for l in 0..16 {
                let jump = (sweep.levels[k + 1][l] - sweep.levels[k][l]).abs();
                let slope = sweep.slopes[k][l].abs().max(sweep.slopes[k + 1][l].abs());
                assert!(jump <= 10.0 * slope * db + 1e-9, "level {l} step {k}: {jump} vs slope {slope}");
            }
        }
        assert!(field_sweep(&p, &axis, 0.05, 1).is_err());
        assert!(field_sweep(&p, &Vector3::zeros(), 0.05, 5).is_err());
    }

    #[test]
    fn strong_field_splits_into_electron_manifolds() {
        let p = er167();
        let b = 1.0;
        let levels = energy_levels(&p, &Vector3::new(0.0, 0.0, b)).unwrap().frequencies;
        let lower: f64 = levels[..8].iter().sum::<f64>() / 8.0;
        let upper: f64 = levels[8..].iter().sum::<f64>() / 8.0;
        let g_eff = (p.g * Vector3::z()).norm();
        let expect = p.constants.beta_e_ghz_per_t * g_eff * b;
        assert!(((upper - lower) - expect).abs() < 0.01 * expect, "{} vs {expect}", upper - lower);
        assert!(levels[8] - levels[7] > 10.0 * (levels[7] - levels[0]));
    }
}
