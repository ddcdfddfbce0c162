//! Fixed-step RK4 integration of the time-dependent Lindblad master equation
//!
//! dρ/dt = −i[H(t), ρ] + Σ_k γ_k (A_k ρ A_k† − ½{A_k†A_k, ρ}).
//!
//! States are stored densely. The stepping kernel reads H(t) and the jump
//! operators through compressed rows, since they are very sparse in the Fock
//! basis, and fills only the upper triangle of dρ/dt. When the caller labels
//! basis states by a conserved sector (for example total excitation number),
//! only entries inside a sector are evaluated.

use crate::error::{Error, Result};
use crate::opalg::{DensityMatrix, Matrix, ModeSpace, Operator, C64};

const TRACE_DIVERGENCE: f64 = 1e-3;
/// Largest off-sector entry tolerated in the initial state.
const SECTOR_LEAK: f64 = 1e-12;
/// Above this many entries per row a jump term goes through an explicit
/// product instead of the double sum.
const DIRECT_JUMP_ROW: usize = 4;

/// Time-indexed Hermitian generator.
pub trait Hamiltonian: Sync {
    fn at(&self, t: f64) -> Operator;

    /// Fixed operators H_k with H(t) = Σ_k c_k(t) H_k, if the generator has
    /// that form. The integrator then updates coefficients instead of
    /// rebuilding H(t) at every stage.
    fn terms(&self) -> Option<Vec<Operator>> {
        None
    }

    /// The c_k(t) matching [`Hamiltonian::terms`].
    fn coefficients(&self, _t: f64, _out: &mut Vec<f64>) {}
}

impl<F> Hamiltonian for F
where
    F: Fn(f64) -> Operator + Sync,
{
    fn at(&self, t: f64) -> Operator {
        self(t)
    }
}

/// One dissipative channel γ·D[A].
#[derive(Clone, Debug)]
pub struct Dissipator {
    jump: Operator,
    rate: f64,
}

impl Dissipator {
    pub fn new(jump: Operator, rate: f64) -> Result<Self> {
        if !(rate >= 0.0) || !rate.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "dissipator rate must be finite and nonnegative, got {rate}"
            )));
        }
        Ok(Self { jump, rate })
    }

    pub fn jump(&self) -> &Operator {
        &self.jump
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }
}

/// Everything needed for one integration run.
pub struct EvolutionProblem<'a> {
    pub hamiltonian: &'a dyn Hamiltonian,
    pub dissipators: Vec<Dissipator>,
    pub initial_state: DensityMatrix,
    pub t_start: f64,
    pub t_end: f64,
    /// Requested step; the span is split into ⌈span/step⌉ equal steps.
    pub step: f64,
    /// Capture every `capture_stride`-th step; 0 keeps only the final state.
    pub capture_stride: usize,
    /// Optional conserved label per basis state. When set, the initial state
    /// must be block-diagonal in it, H(t) must not connect different labels
    /// and every jump operator must shift the label by a fixed amount; the
    /// state then stays block-diagonal and only those blocks are integrated.
    pub sectors: Option<Vec<i64>>,
}

impl EvolutionProblem<'_> {
    fn validate(&self) -> Result<()> {
        if !(self.t_end > self.t_start) {
            return Err(Error::InvalidParameter(format!(
                "t_end ({}) must exceed t_start ({})",
                self.t_end, self.t_start
            )));
        }
        if !(self.step > 0.0) || self.step > self.t_end - self.t_start {
            return Err(Error::InvalidParameter(format!(
                "step {} must be positive and no longer than the span {}",
                self.step,
                self.t_end - self.t_start
            )));
        }
        let space = self.initial_state.space();
        for d in &self.dissipators {
            if d.jump.space() != space {
                return Err(Error::InvalidDimension(format!(
                    "jump operator on {} but state on {}",
                    d.jump.space(),
                    space
                )));
            }
        }
        if let Some(labels) = &self.sectors {
            let n = space.total_dim();
            if labels.len() != n {
                return Err(Error::InvalidDimension(format!(
                    "{} sector labels for a space of dimension {n}",
                    labels.len()
                )));
            }
            let rho = self.initial_state.as_operator().matrix();
            for j in 0..n {
                for i in 0..n {
                    if labels[i] != labels[j] && rho[(i, j)].norm() > SECTOR_LEAK {
                        return Err(Error::InvalidOperator(format!(
                            "initial state couples sectors {} and {} at ({i}, {j})",
                            labels[i], labels[j]
                        )));
                    }
                }
            }
            for (k, d) in self.dissipators.iter().enumerate() {
                sector_shift(d.jump.matrix(), labels).ok_or_else(|| {
                    Error::InvalidOperator(format!("jump operator {k} does not shift sectors uniformly"))
                })?;
            }
        }
        Ok(())
    }

    /// Number of equal steps actually taken.
    pub fn num_steps(&self) -> usize {
        let span = self.t_end - self.t_start;
        ((span / self.step) - 1e-9).ceil().max(1.0) as usize
    }
}

/// The common label difference label(i) − label(j) over the nonzero entries,
/// or `None` if it is not unique. An all-zero operator shifts by 0.
fn sector_shift(m: &Matrix, labels: &[i64]) -> Option<i64> {
    let mut shift = None;
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            let z = m[(i, j)];
            if z.re == 0.0 && z.im == 0.0 {
                continue;
            }
            let d = labels[i] - labels[j];
            match shift {
                None => shift = Some(d),
                Some(s) if s != d => return None,
                _ => {}
            }
        }
    }
    Some(shift.unwrap_or(0))
}

/// Result of [`evolve`].
#[derive(Clone, Debug)]
pub struct Evolution {
    pub final_state: DensityMatrix,
    pub trajectory: Vec<(f64, DensityMatrix)>,
    /// Largest |Tr ρ − 1| seen before the final renormalization.
    pub max_trace_deviation: f64,
    pub steps: usize,
    pub step: f64,
}

/// Reference right-hand side, evaluated with dense products.
pub fn lindblad_rhs(rho: &DensityMatrix, h: &Operator, dissipators: &[Dissipator]) -> Result<Operator> {
    let space = rho.space();
    if h.space() != space {
        return Err(Error::InvalidDimension(format!(
            "Hamiltonian on {} but state on {}",
            h.space(),
            space
        )));
    }
    let r = rho.as_operator().matrix();
    let hm = h.matrix();
    let mut out = (hm * r - r * hm) * C64::new(0.0, -1.0);
    for d in dissipators {
        if d.jump.space() != space {
            return Err(Error::InvalidDimension(format!(
                "jump operator on {} but state on {}",
                d.jump.space(),
                space
            )));
        }
        let a = d.jump.matrix();
        let ad = a.adjoint();
        let ada = &ad * a;
        let term = a * r * &ad - (&ada * r + r * &ada) * C64::new(0.5, 0.0);
        out += term * C64::new(d.rate, 0.0);
    }
    Operator::new(space.clone(), out)
}

/// Integrate the master equation with classical RK4.
///
/// The state is symmetrized after each step and renormalized in trace at the
/// end. Fails with [`Error::IntegrationDiverged`] when the trace drifts by
/// more than 10⁻³ or the state leaves the unit ball entrywise.
pub fn evolve(problem: &EvolutionProblem) -> Result<Evolution> {
    problem.validate()?;
    let space = problem.initial_state.space().clone();
    let n_steps = problem.num_steps();
    let h = (problem.t_end - problem.t_start) / n_steps as f64;

    let mut kernel = Kernel::new(&space, &problem.dissipators, problem.sectors.as_deref());
    let decomposed = match problem.hamiltonian.terms() {
        Some(terms) => {
            kernel.set_terms(&terms)?;
            true
        }
        None => false,
    };
    let mut coeffs = Vec::new();
    let mut load = |kernel: &mut Kernel, t: f64| -> Result<()> {
        if decomposed {
            coeffs.clear();
            problem.hamiltonian.coefficients(t, &mut coeffs);
            kernel.load_coefficients(&coeffs)
        } else {
            kernel.load_hamiltonian(&problem.hamiltonian.at(t))
        }
    };

    let mut rho = problem.initial_state.as_operator().matrix().clone();
    symmetrize(&mut rho);
    kernel.project(&mut rho);
    let n = space.total_dim();
    let mut k1 = Matrix::zeros(n, n);
    let mut k2 = Matrix::zeros(n, n);
    let mut k3 = Matrix::zeros(n, n);
    let mut k4 = Matrix::zeros(n, n);
    let mut stage = Matrix::zeros(n, n);

    let mut trajectory = Vec::new();
    let capture = problem.capture_stride > 0;
    if capture {
        trajectory.push((problem.t_start, problem.initial_state.clone()));
    }

    let pairs = kernel.pairs.clone();
    let mut max_dev: f64 = 0.0;
    for s in 0..n_steps {
        let t = problem.t_start + s as f64 * h;
        load(&mut kernel, t)?;
        kernel.rhs(&rho, &mut k1);
        axpy_into(&pairs, n, &rho, 0.5 * h, &k1, &mut stage);
        load(&mut kernel, t + 0.5 * h)?;
        kernel.rhs(&stage, &mut k2);
        axpy_into(&pairs, n, &rho, 0.5 * h, &k2, &mut stage);
        kernel.rhs(&stage, &mut k3);
        axpy_into(&pairs, n, &rho, h, &k3, &mut stage);
        load(&mut kernel, t + h)?;
        kernel.rhs(&stage, &mut k4);

        // Update the upper triangle and mirror it, which keeps ρ exactly
        // Hermitian.
        let w = h / 6.0;
        let mut trace = 0.0;
        let mut max_sq: f64 = 0.0;
        {
            let r = rho.as_mut_slice();
            let (a, b, c, d) = (k1.as_slice(), k2.as_slice(), k3.as_slice(), k4.as_slice());
            for &(i, j) in &pairs {
                let x = i + j * n;
                let mut v = r[x] + (a[x] + (b[x] + c[x]) * 2.0 + d[x]) * w;
                if i == j {
                    v.im = 0.0;
                    trace += v.re;
                } else {
                    r[j + i * n] = v.conj();
                }
                r[x] = v;
                max_sq = max_sq.max(v.norm_sqr());
            }
        }

        let dev = (trace - 1.0).abs();
        max_dev = max_dev.max(dev);
        if !max_sq.is_finite() || !dev.is_finite() || max_sq.sqrt() > 1.0 + TRACE_DIVERGENCE || dev > TRACE_DIVERGENCE {
            return Err(Error::IntegrationDiverged {
                step: h,
                reason: format!(
                    "at t = {:.6}: trace deviation {dev:e}, largest entry {:e}",
                    t + h,
                    max_sq.sqrt()
                ),
            });
        }

        let last = s + 1 == n_steps;
        if capture && ((s + 1) % problem.capture_stride == 0 || last) {
            let op = Operator::new(space.clone(), rho.clone())?;
            trajectory.push((t + h, DensityMatrix::from_operator_unchecked(op)));
        }
    }

    let tr = rho.trace().re;
    log::debug!("trace deviation before renormalization: {:e}", (tr - 1.0).abs());
    rho /= C64::new(tr, 0.0);
    let final_state = DensityMatrix::from_operator_unchecked(Operator::new(space, rho)?);
    Ok(Evolution {
        final_state,
        trajectory,
        max_trace_deviation: max_dev,
        steps: n_steps,
        step: h,
    })
}

/// out = x + α·y on the tracked pairs, mirrored.
fn axpy_into(pairs: &[(usize, usize)], n: usize, x: &Matrix, alpha: f64, y: &Matrix, out: &mut Matrix) {
    let (xs, ys, os) = (x.as_slice(), y.as_slice(), out.as_mut_slice());
    for &(i, j) in pairs {
        let v = xs[i + j * n] + ys[i + j * n] * alpha;
        os[i + j * n] = v;
        os[j + i * n] = v.conj();
    }
}

fn symmetrize(m: &mut Matrix) {
    let n = m.nrows();
    for i in 0..n {
        m[(i, i)].im = 0.0;
        for j in i + 1..n {
            let avg = (m[(i, j)] + m[(j, i)].conj()) * 0.5;
            m[(i, j)] = avg;
            m[(j, i)] = avg.conj();
        }
    }
}

/// Compressed-row copy of a square matrix without its exact zeros.
#[derive(Clone, Debug, Default)]
struct Csr {
    row_ptr: Vec<usize>,
    entries: Vec<(usize, C64)>,
    max_row: usize,
}

impl Csr {
    fn from_dense(m: &Matrix) -> Self {
        let mut csr = Self::default();
        csr.refill(m, None).expect("no sector check");
        csr
    }

    /// Rebuild from `m`; with labels, fail on entries that connect sectors.
    fn refill(&mut self, m: &Matrix, labels: Option<&[i64]>) -> Result<()> {
        let n = m.nrows();
        self.row_ptr.clear();
        self.entries.clear();
        self.row_ptr.push(0);
        self.max_row = 0;
        for i in 0..n {
            for j in 0..n {
                let z = m[(i, j)];
                if z.re == 0.0 && z.im == 0.0 {
                    continue;
                }
                if let Some(l) = labels {
                    if l[i] != l[j] {
                        return Err(Error::InvalidOperator(format!(
                            "Hamiltonian couples sectors {} and {} at ({i}, {j})",
                            l[i], l[j]
                        )));
                    }
                }
                self.entries.push((j, z));
            }
            let start = *self.row_ptr.last().unwrap();
            self.max_row = self.max_row.max(self.entries.len() - start);
            self.row_ptr.push(self.entries.len());
        }
        Ok(())
    }

    #[inline]
    fn row(&self, i: usize) -> &[(usize, C64)] {
        &self.entries[self.row_ptr[i]..self.row_ptr[i + 1]]
    }

    /// out = self · x, all n×n column-major.
    fn mul_dense(&self, x: &[C64], n: usize, out: &mut [C64]) {
        for c in 0..n {
            let xc = &x[c * n..(c + 1) * n];
            for i in 0..n {
                let mut acc = C64::new(0.0, 0.0);
                for &(k, a) in self.row(i) {
                    acc += a * xc[k];
                }
                out[i + c * n] = acc;
            }
        }
    }
}

/// Preassembled pieces of the generator; the Hamiltonian part is refreshed
/// at every stage time.
struct Kernel {
    n: usize,
    labels: Option<Vec<i64>>,
    /// Entries (i, j), i ≤ j, that can be nonzero.
    pairs: Vec<(usize, usize)>,
    /// √γ·A for each channel.
    jumps: Vec<Csr>,
    /// −(i/2) Σ γ A†A
    anti_hermitian: Matrix,
    h_eff: Matrix,
    h_eff_csr: Csr,
    /// Anti-Hermitian part and each fixed Hamiltonian term, laid out on the
    /// entries of `h_eff_csr`, when the Hamiltonian is decomposed.
    base_vals: Vec<C64>,
    term_vals: Vec<Vec<C64>>,
    scratch: Matrix,
}

impl Kernel {
    fn new(space: &ModeSpace, dissipators: &[Dissipator], labels: Option<&[i64]>) -> Self {
        let n = space.total_dim();
        let mut anti_hermitian = Matrix::zeros(n, n);
        let mut jumps = Vec::new();
        for d in dissipators.iter().filter(|d| d.rate > 0.0) {
            let a = d.jump.matrix();
            anti_hermitian += (a.adjoint() * a) * C64::new(0.0, -0.5 * d.rate);
            jumps.push(Csr::from_dense(&(a * C64::new(d.rate.sqrt(), 0.0))));
        }
        let pairs = (0..n)
            .flat_map(|j| (0..=j).map(move |i| (i, j)))
            .filter(|&(i, j)| labels.is_none_or(|l| l[i] == l[j]))
            .collect();
        Self {
            n,
            labels: labels.map(<[i64]>::to_vec),
            pairs,
            jumps,
            anti_hermitian,
            h_eff: Matrix::zeros(n, n),
            h_eff_csr: Csr::default(),
            base_vals: Vec::new(),
            term_vals: Vec::new(),
            scratch: Matrix::zeros(n, n),
        }
    }

    /// Fix the sparsity pattern to the union of the terms and the
    /// anti-Hermitian part.
    fn set_terms(&mut self, terms: &[Operator]) -> Result<()> {
        let n = self.n;
        let mut pattern = self.anti_hermitian.map(|z| C64::new(z.norm(), 0.0));
        for (k, term) in terms.iter().enumerate() {
            if term.dim() != n {
                return Err(Error::InvalidDimension(format!(
                    "Hamiltonian term {k} has dimension {} for a state of dimension {n}",
                    term.dim()
                )));
            }
            pattern += term.matrix().map(|z| C64::new(z.norm(), 0.0));
        }
        self.h_eff_csr.refill(&pattern, self.labels.as_deref())?;
        let gather = |m: &Matrix| -> Vec<C64> {
            (0..n)
                .flat_map(|i| self.h_eff_csr.row(i).iter().map(move |&(j, _)| m[(i, j)]))
                .collect()
        };
        self.base_vals = gather(&self.anti_hermitian);
        self.term_vals = terms.iter().map(|t| gather(t.matrix())).collect();
        Ok(())
    }

    fn load_coefficients(&mut self, coeffs: &[f64]) -> Result<()> {
        if coeffs.len() != self.term_vals.len() {
            return Err(Error::InvalidParameter(format!(
                "{} coefficients for {} Hamiltonian terms",
                coeffs.len(),
                self.term_vals.len()
            )));
        }
        for (e, (idx, base)) in self.h_eff_csr.entries.iter_mut().zip(self.base_vals.iter().enumerate()) {
            let mut v = *base;
            for (vals, &c) in self.term_vals.iter().zip(coeffs) {
                v += vals[idx] * c;
            }
            e.1 = v;
        }
        Ok(())
    }

    /// Zero everything outside the integrated sectors.
    fn project(&self, rho: &mut Matrix) {
        if let Some(l) = &self.labels {
            for j in 0..self.n {
                for i in 0..self.n {
                    if l[i] != l[j] {
                        rho[(i, j)] = C64::new(0.0, 0.0);
                    }
                }
            }
        }
    }

    fn load_hamiltonian(&mut self, h: &Operator) -> Result<()> {
        if h.dim() != self.n {
            return Err(Error::InvalidDimension(format!(
                "Hamiltonian of dimension {} for a state of dimension {}",
                h.dim(),
                self.n
            )));
        }
        self.h_eff.copy_from(h.matrix());
        self.h_eff += &self.anti_hermitian;
        self.h_eff_csr.refill(&self.h_eff, self.labels.as_deref())
    }

    /// out = −i(H_eff ρ − ρ H_eff†) + Σ J ρ J† on the tracked entries,
    /// assuming ρ Hermitian. Untracked entries of `out` are left untouched.
    fn rhs(&mut self, rho: &Matrix, out: &mut Matrix) {
        let n = self.n;
        let r = rho.as_slice();
        let o = out.as_mut_slice();
        let minus_i = C64::new(0.0, -1.0);
        let h = &self.h_eff_csr;
        for &(i, j) in &self.pairs {
            // (H_eff ρ)_ij − conj((H_eff ρ)_ji)
            let mut xij = C64::new(0.0, 0.0);
            for &(k, a) in h.row(i) {
                xij += a * r[k + j * n];
            }
            let mut xji = C64::new(0.0, 0.0);
            for &(k, a) in h.row(j) {
                xji += a * r[k + i * n];
            }
            o[i + j * n] = (xij - xji.conj()) * minus_i;
        }
        for jump in &self.jumps {
            if jump.max_row <= DIRECT_JUMP_ROW {
                for &(i, j) in &self.pairs {
                    let mut acc = C64::new(0.0, 0.0);
                    for &(k, a) in jump.row(i) {
                        for &(l, b) in jump.row(j) {
                            acc += a * r[k + l * n] * b.conj();
                        }
                    }
                    o[i + j * n] += acc;
                }
            } else {
                let y = self.scratch.as_mut_slice();
                jump.mul_dense(r, n, y);
                for &(i, j) in &self.pairs {
                    let mut acc = C64::new(0.0, 0.0);
                    for &(l, b) in jump.row(j) {
                        acc += y[i + l * n] * b.conj();
                    }
                    o[i + j * n] += acc;
                }
            }
        }
        for &(i, j) in &self.pairs {
            if i != j {
                o[j + i * n] = o[i + j * n].conj();
            } else {
                o[i + i * n].im = 0.0;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::opalg::{annihilation, embed, expectation, number, thermal_state};

    fn single_mode_decay(kappa: f64) -> (ModeSpace, Dissipator) {
        let space = ModeSpace::single(3).unwrap();
        let a = annihilation(3).unwrap();
        (space, Dissipator::new(a, kappa).unwrap())
    }

    #[test]
    fn no_dynamics_gives_zero_rhs() {
        let rho = thermal_state(4, 0.7).unwrap();
        let h = Operator::zeros(rho.space());
        let rhs = lindblad_rhs(&rho, &h, &[]).unwrap();
        assert_eq!(rhs.max_abs(), 0.0);
    }

    #[test]
    fn vacuum_is_fixed_point_of_decay() {
        let (space, d) = single_mode_decay(0.3);
        let rho = DensityMatrix::fock(3, 0).unwrap();
        let rhs = lindblad_rhs(&rho, &Operator::zeros(&space), &[d]).unwrap();
        assert!(rhs.max_abs() < 1e-15);
    }

    #[test]
    fn single_photon_decay_rhs() {
        let kappa = 0.7;
        let (space, d) = single_mode_decay(kappa);
        let rho = DensityMatrix::fock(3, 1).unwrap();
        let rhs = lindblad_rhs(&rho, &Operator::zeros(&space), &[d]).unwrap();
        // κ(|0⟩⟨0| − |1⟩⟨1|), by hand from A ρ A† − ½{A†A, ρ}
        let expect = Operator::from_diagonal(&space, &[kappa, -kappa, 0.0]).unwrap();
        assert!((&rhs - &expect).max_abs() < 1e-15);
    }

    #[test]
    fn rhs_space_mismatch() {
        let rho = thermal_state(3, 0.1).unwrap();
        let h = Operator::zeros(&ModeSpace::single(4).unwrap());
        assert!(matches!(lindblad_rhs(&rho, &h, &[]), Err(Error::InvalidDimension(_))));
    }

    #[test]
    fn kernel_matches_reference_rhs() {
        let space = ModeSpace::new(&[3, 4]).unwrap();
        let a = embed(&annihilation(3).unwrap(), 0, &space).unwrap();
        let b = embed(&annihilation(4).unwrap(), 1, &space).unwrap();
        let x = &a * &b.adjoint();
        let h = &(&x + &x.adjoint()) * 0.8;
        let nb = &b.adjoint() * &b;
        let diss = vec![
            Dissipator::new(a.clone(), 0.3).unwrap(),
            Dissipator::new(b.clone(), 0.1).unwrap(),
            Dissipator::new(nb, 0.05).unwrap(),
        ];
        let r1 = thermal_state(3, 0.4).unwrap();
        let r2 = thermal_state(4, 0.9).unwrap();
        let mut rho = DensityMatrix::product(&[&r1, &r2]).unwrap().into_operator().into_matrix();
        // add coherences so the commutator is exercised
        rho[(1, 4)] = C64::new(0.01, 0.02);
        rho[(4, 1)] = C64::new(0.01, -0.02);
        let rho = DensityMatrix::from_operator_unchecked(Operator::new(space.clone(), rho).unwrap());

        let reference = lindblad_rhs(&rho, &h, &diss).unwrap();
        let mut kernel = Kernel::new(&space, &diss, None);
        kernel.load_hamiltonian(&h).unwrap();
        let mut out = Matrix::zeros(12, 12);
        kernel.rhs(rho.as_operator().matrix(), &mut out);
        let diff = (reference.matrix() - &out).iter().fold(0.0f64, |m, z| m.max(z.norm()));
        assert!(diff < 1e-14, "kernel deviates by {diff:e}");
        assert!(reference.trace().norm() < 1e-10);
        assert!(reference.hermiticity_error() < 1e-10);
    }

    #[test]
    fn frozen_dynamics() {
        let rho0 = thermal_state(5, 0.6).unwrap();
        let zero = Operator::zeros(rho0.space());
        let h = move |_t: f64| zero.clone();
        let problem = EvolutionProblem {
            hamiltonian: &h,
            dissipators: vec![],
            initial_state: rho0.clone(),
            t_start: 0.0,
            t_end: 3.0,
            step: 0.01,
            capture_stride: 0,
            sectors: None,
        };
        let out = evolve(&problem).unwrap();
        let diff = (out.final_state.as_operator() - rho0.as_operator()).max_abs();
        assert!(diff < 1e-10);
        assert!(out.trajectory.is_empty());
    }

    #[test]
    fn amplitude_damping_matches_exponential() {
        let kappa = 1.0;
        let (space, d) = single_mode_decay(kappa);
        let zero = Operator::zeros(&space);
        let h = move |_t: f64| zero.clone();
        let problem = EvolutionProblem {
            hamiltonian: &h,
            dissipators: vec![d],
            initial_state: DensityMatrix::fock(3, 1).unwrap(),
            t_start: 0.0,
            t_end: 5.0,
            step: 1.0 / 400.0,
            capture_stride: 40,
            sectors: None,
        };
        let out = evolve(&problem).unwrap();
        let n = number(3).unwrap();
        for (t, rho) in &out.trajectory {
            let got = expectation(rho, &n).unwrap().re;
            let exact = (-kappa * t).exp();
            assert!(((got - exact) / exact).abs() < 1e-6, "t={t}: {got} vs {exact}");
        }
    }

    #[test]
    fn beam_splitter_rabi_oscillation() {
        let g = 1.0;
        let space = ModeSpace::new(&[3, 3]).unwrap();
        let a1 = embed(&annihilation(3).unwrap(), 0, &space).unwrap();
        let a2 = embed(&annihilation(3).unwrap(), 1, &space).unwrap();
        let x = &a1.adjoint() * &a2;
        let hop = &(&x + &x.adjoint()) * g;
        let h = move |_t: f64| hop.clone();
        let photon_in_2 = DensityMatrix::product(&[
            &DensityMatrix::fock(3, 0).unwrap(),
            &DensityMatrix::fock(3, 1).unwrap(),
        ])
        .unwrap();
        let problem = EvolutionProblem {
            hamiltonian: &h,
            dissipators: vec![],
            initial_state: photon_in_2.clone(),
            t_start: 0.0,
            t_end: 4.0,
            step: 1.0 / 400.0,
            capture_stride: 25,
            sectors: None,
        };
        let out = evolve(&problem).unwrap();
        let n1 = &a1.adjoint() * &a1;
        let p0 = photon_in_2.purity();
        for (t, rho) in &out.trajectory {
            let got = expectation(rho, &n1).unwrap().re;
            let exact = (g * t).sin().powi(2);
            assert!((got - exact).abs() < 1e-6 * exact.max(1e-3), "t={t}: {got} vs {exact}");
            assert!((rho.purity() - p0).abs() < 1e-6);
        }
    }

    #[test]
    fn oversized_step_diverges() {
        let (space, d) = single_mode_decay(1.0);
        let zero = Operator::zeros(&space);
        let h = move |_t: f64| zero.clone();
        let problem = EvolutionProblem {
            hamiltonian: &h,
            dissipators: vec![d],
            initial_state: DensityMatrix::fock(3, 2).unwrap(),
            t_start: 0.0,
            t_end: 100.0,
            step: 5.0,
            capture_stride: 0,
            sectors: None,
        };
        match evolve(&problem) {
            Err(Error::IntegrationDiverged { step, .. }) => assert_eq!(step, 5.0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn invalid_problems_rejected() {
        let rho0 = thermal_state(3, 0.1).unwrap();
        let zero = Operator::zeros(rho0.space());
        let h = move |_t: f64| zero.clone();
        let mut problem = EvolutionProblem {
            hamiltonian: &h,
            dissipators: vec![],
            initial_state: rho0,
            t_start: 1.0,
            t_end: 1.0,
            step: 0.1,
            capture_stride: 0,
            sectors: None,
        };
        assert!(evolve(&problem).is_err());
        problem.t_end = 2.0;
        problem.step = 2.0;
        assert!(evolve(&problem).is_err());
        problem.step = 0.1;
        problem.dissipators = vec![Dissipator::new(annihilation(4).unwrap(), 1.0).unwrap()];
        assert!(matches!(evolve(&problem), Err(Error::InvalidDimension(_))));
        assert!(Dissipator::new(annihilation(3).unwrap(), -1.0).is_err());
    }

    fn excitation_labels(space: &ModeSpace) -> Vec<i64> {
        (0..space.total_dim())
            .map(|i| space.occupations(i).iter().sum::<usize>() as i64)
            .collect()
    }

    struct Coupled {
        space: ModeSpace,
        hop: Operator,
        diss: Vec<Dissipator>,
        rho0: DensityMatrix,
    }

    fn coupled_pair() -> Coupled {
        let space = ModeSpace::new(&[3, 4]).unwrap();
        let a = embed(&annihilation(3).unwrap(), 0, &space).unwrap();
        let b = embed(&annihilation(4).unwrap(), 1, &space).unwrap();
        let x = &a * &b.adjoint();
        let hop = &x + &x.adjoint();
        let nb = &b.adjoint() * &b;
        let diss = vec![
            Dissipator::new(a, 0.2).unwrap(),
            Dissipator::new(b, 0.05).unwrap(),
            Dissipator::new(nb, 0.3).unwrap(),
        ];
        let rho0 = DensityMatrix::product(&[
            &DensityMatrix::fock(3, 1).unwrap(),
            &thermal_state(4, 0.6).unwrap(),
        ])
        .unwrap();
        Coupled { space, hop, diss, rho0 }
    }

    #[test]
    fn sector_restricted_evolution_matches_full() {
        let c = coupled_pair();
        let hop = c.hop.clone();
        let h = move |t: f64| &hop * (0.5 + 0.4 * t.sin());
        let run = |sectors: Option<Vec<i64>>| {
            evolve(&EvolutionProblem {
                hamiltonian: &h,
                dissipators: c.diss.clone(),
                initial_state: c.rho0.clone(),
                t_start: 0.0,
                t_end: 3.0,
                step: 1e-2,
                capture_stride: 0,
                sectors,
            })
            .unwrap()
        };
        let full = run(None);
        let blocked = run(Some(excitation_labels(&c.space)));
        let diff = (full.final_state.as_operator() - blocked.final_state.as_operator()).max_abs();
        assert!(diff < 1e-13, "sector restriction changed the state by {diff:e}");
    }

    #[test]
    fn sector_violations_rejected() {
        let c = coupled_pair();
        let labels = excitation_labels(&c.space);
        let hop = c.hop.clone();
        let h = move |_t: f64| hop.clone();
        let mut problem = EvolutionProblem {
            hamiltonian: &h,
            dissipators: c.diss.clone(),
            initial_state: c.rho0.clone(),
            t_start: 0.0,
            t_end: 1.0,
            step: 0.1,
            capture_stride: 0,
            sectors: Some(labels.clone()),
        };
        assert!(evolve(&problem).is_ok());

        // a jump mixing shifts −1 and 0
        let a = c.diss[0].jump().clone();
        let mixed = &a + &Operator::identity(&c.space);
        problem.dissipators = vec![Dissipator::new(mixed, 0.1).unwrap()];
        assert!(matches!(evolve(&problem), Err(Error::InvalidOperator(_))));
        problem.dissipators = c.diss.clone();

        // coherence between sectors 0 and 1
        let mut m = c.rho0.as_operator().matrix().clone();
        m[(0, 1)] = C64::new(0.01, 0.0);
        m[(1, 0)] = C64::new(0.01, 0.0);
        problem.initial_state = DensityMatrix::from_operator_unchecked(Operator::new(c.space.clone(), m).unwrap());
        assert!(matches!(evolve(&problem), Err(Error::InvalidOperator(_))));
        problem.initial_state = c.rho0.clone();

        // a drive term that does not conserve excitations
        let drive_op = c.diss[0].jump() + &c.diss[0].jump().adjoint();
        let drive = move |_t: f64| drive_op.clone();
        problem.hamiltonian = &drive;
        assert!(matches!(evolve(&problem), Err(Error::InvalidOperator(_))));

        problem.sectors = Some(vec![0; 3]);
        assert!(matches!(evolve(&problem), Err(Error::InvalidDimension(_))));
    }

    struct Ramp {
        hop: Operator,
        detune: Operator,
    }

    impl Hamiltonian for Ramp {
        fn at(&self, t: f64) -> Operator {
            &(&self.hop * t.cos()) + &(&self.detune * 0.3)
        }

        fn terms(&self) -> Option<Vec<Operator>> {
            Some(vec![self.hop.clone(), self.detune.clone()])
        }

        fn coefficients(&self, t: f64, out: &mut Vec<f64>) {
            out.extend([t.cos(), 0.3]);
        }
    }

    /// Same generator, only reachable through `at`.
    struct Opaque<'a>(&'a Ramp);

    impl Hamiltonian for Opaque<'_> {
        fn at(&self, t: f64) -> Operator {
            self.0.at(t)
        }
    }

    #[test]
    fn decomposed_hamiltonian_matches_rebuilt() {
        let c = coupled_pair();
        let ramp = Ramp {
            hop: c.hop.clone(),
            detune: c.diss[2].jump().clone(),
        };
        let opaque = Opaque(&ramp);
        let run = |h: &dyn Hamiltonian, sectors: Option<Vec<i64>>| {
            evolve(&EvolutionProblem {
                hamiltonian: h,
                dissipators: c.diss.clone(),
                initial_state: c.rho0.clone(),
                t_start: 0.0,
                t_end: 2.0,
                step: 1e-2,
                capture_stride: 0,
                sectors,
            })
            .unwrap()
            .final_state
        };
        let a = run(&ramp, Some(excitation_labels(&c.space)));
        let b = run(&opaque, None);
        let diff = (a.as_operator() - b.as_operator()).max_abs();
        assert!(diff < 1e-13, "{diff:e}");
    }
}
