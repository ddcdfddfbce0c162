use ertrans_core::lindblad::{evolve, Dissipator, EvolutionProblem};
use ertrans_core::opalg::{annihilation, embed, hermitian_eigensolve};
use ertrans_core::protocol::{
    coupling_schedule, eigenmodes, snr_fidelity, thermal_occupation, ScheduleOrientation,
};
use ertrans_core::spinham::{
    build_hamiltonian, coherence_time, CoherenceModel, FieldAnalysis, SpinHamiltonian, SpinParams,
    DEFAULT_DEGENERACY_TOL_GHZ,
};
use ertrans_core::{DensityMatrix, ModeSpace, Operator, C64};
use nalgebra::{DMatrix, Matrix3, Vector3};
use proptest::prelude::*;

fn er167() -> SpinParams {
    SpinParams::from_toml_str(include_str!("../../../data/er167_yso_site1.toml")).unwrap()
}

fn field() -> impl Strategy<Value = Vector3<f64>> {
    prop::array::uniform3(-0.05f64..0.05).prop_map(Vector3::from)
}

/// Random Hermitian operator from 2n² reals.
fn hermitian(space: &ModeSpace, re: &[f64], im: &[f64]) -> Operator {
    let n = space.total_dim();
    let m = DMatrix::from_fn(n, n, |i, j| C64::new(re[i * n + j], im[i * n + j]));
    Operator::new(space.clone(), (&m + m.adjoint()) * C64::new(0.5, 0.0)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schedule_stays_on_the_circle(t in 0.0f64..200.0, g in 0.1f64..10.0, alpha in 1e-3f64..5.0) {
        for o in [ScheduleOrientation::AsPrinted, ScheduleOrientation::Reversed] {
            let (g1, g2) = coupling_schedule(t, g, alpha, o).unwrap();
            prop_assert!(g1 >= 0.0 && g2 >= 0.0);
            prop_assert!((g1 * g1 + g2 * g2 - g * g).abs() <= 4.0 * f64::EPSILON * g * g);
        }
        let (a1, a2) = coupling_schedule(t, g, alpha, ScheduleOrientation::AsPrinted).unwrap();
        let (r1, r2) = coupling_schedule(t, g, alpha, ScheduleOrientation::Reversed).unwrap();
        prop_assert_eq!((a1, a2), (r2, r1));
    }

    #[test]
    fn schedule_is_monotone(t in 0.0f64..50.0, dt in 1e-6f64..1.0, alpha in 1e-2f64..2.0) {
        let (g1a, g2a) = coupling_schedule(t, 1.0, alpha, ScheduleOrientation::AsPrinted).unwrap();
        let (g1b, g2b) = coupling_schedule(t + dt, 1.0, alpha, ScheduleOrientation::AsPrinted).unwrap();
        prop_assert!(g1b >= g1a && g2b <= g2a);
    }

    #[test]
    fn eigenmodes_are_orthonormal_and_dark(g1 in 0.0f64..3.0, g2 in 0.0f64..3.0) {
        prop_assume!(g1.hypot(g2) > 1e-6);
        let m = eigenmodes(g1, g2).unwrap();
        let coupling = [[0.0, 0.0, g1], [0.0, 0.0, g2], [g1, g2, 0.0]];
        let vecs = [m.dark, m.bright_plus, m.bright_minus];
        for (a, v) in vecs.iter().enumerate() {
            for (b, w) in vecs.iter().enumerate() {
                let dot: f64 = v.iter().zip(w).map(|(x, y)| x * y).sum();
                prop_assert!((dot - f64::from(u8::from(a == b))).abs() < 1e-14);
            }
            for (row, c) in coupling.iter().enumerate() {
                let mv: f64 = c.iter().zip(v).map(|(x, y)| x * y).sum();
                prop_assert!((mv - m.frequencies[a] * v[row]).abs() < 1e-12);
            }
        }
        prop_assert_eq!(m.dark[2], 0.0);
    }

    #[test]
    fn occupation_orders_with_temperature(t in 1e-3f64..1.0, dt in 1e-4f64..1.0, f in 0.1e9f64..20e9) {
        let w = 2.0 * std::f64::consts::PI * f;
        let n1 = thermal_occupation(w, t).unwrap();
        let n2 = thermal_occupation(w, t + dt).unwrap();
        let n3 = thermal_occupation(w * 1.1, t).unwrap();
        prop_assert!(n1 >= 0.0 && n2 > n1 && n3 < n1 || n1 == 0.0);
    }

    #[test]
    fn fidelity_bounded_and_decreasing(s in 1e-6f64..2.0, n in 0.0f64..2.0, dn in 1e-6f64..1.0) {
        let f = snr_fidelity(s, n).unwrap().value;
        let g = snr_fidelity(s, n + dn).unwrap().value;
        prop_assert!((0.0..=1.0).contains(&f) && g < f);
    }

    #[test]
    fn coherence_time_shrinks_with_noise(nu in prop::array::uniform3(-1e9f64..1e9), d in 1e-7f64..1e-3) {
        let nu = Vector3::from(nu);
        let c = Matrix3::new(1e12, 2e11, 0.0, 2e11, -3e12, 0.0, 0.0, 0.0, 5e11);
        let t1 = coherence_time(&nu, &c, &CoherenceModel { delta_b: d }).unwrap();
        let t2 = coherence_time(&nu, &c, &CoherenceModel { delta_b: 2.0 * d }).unwrap();
        prop_assert!(t1 > 0.0 && t2 < t1);
    }

    #[test]
    fn spin_hamiltonian_is_affine_and_hermitian(b in field(), c in field()) {
        let p = er167();
        let h0 = build_hamiltonian(&p, &Vector3::zeros()).unwrap().into_matrix();
        let hb = build_hamiltonian(&p, &b).unwrap();
        prop_assert!(hb.hermiticity_error() < 1e-12 * hb.norm());
        let hb = hb.into_matrix();
        let hc = build_hamiltonian(&p, &c).unwrap().into_matrix();
        let hbc = build_hamiltonian(&p, &(b + c)).unwrap().into_matrix();
        let residual = (&hbc - &hb - &hc + &h0).norm();
        prop_assert!(residual < 1e-12 * hbc.norm().max(1.0));
    }

    #[test]
    fn levels_sum_to_trace(b in field()) {
        let p = er167();
        let h = build_hamiltonian(&p, &b).unwrap();
        let fa = FieldAnalysis::new(&SpinHamiltonian::new(&p).unwrap(), b, DEFAULT_DEGENERACY_TOL_GHZ, None).unwrap();
        let total: f64 = fa.energies.iter().sum();
        let scale: f64 = fa.energies.iter().map(|e| e.abs()).sum();
        prop_assert!((total - h.trace().re).abs() <= 1e-9 * scale);
        prop_assert!(fa.energies.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn dipoles_ignore_eigenvector_phases(b in field(), m in 1usize..17, n in 1usize..17, phi in 0.0f64..6.3, psi in 0.0f64..6.3) {
        prop_assume!(m != n);
        let p = er167();
        let ham = SpinHamiltonian::new(&p).unwrap();
        let fa = FieldAnalysis::new(&ham, b, DEFAULT_DEGENERACY_TOL_GHZ, None).unwrap();
        prop_assume!(fa.cluster[m - 1] != fa.cluster[n - 1]);
        let d = fa.dipole(m, n).unwrap();
        prop_assert!((fa.dipole(n, m).unwrap() - d).norm() <= 1e-12 * d.norm().max(1.0));
        let vm = fa.vectors.column(m - 1) * C64::from_polar(1.0, phi);
        let vn = fa.vectors.column(n - 1) * C64::from_polar(1.0, psi);
        for (i, z) in ham.zeeman_operators().iter().enumerate() {
            let amp = (vm.adjoint() * z.matrix() * &vn)[(0, 0)].norm();
            prop_assert!((amp - d[i]).abs() <= 1e-10 * d.norm().max(1.0));
        }
    }

    #[test]
    fn curvature_tensor_is_symmetric(b in field(), m in 1usize..17, n in 1usize..17) {
        prop_assume!(m != n);
        let p = er167();
        let fa = FieldAnalysis::new(&SpinHamiltonian::new(&p).unwrap(), b, DEFAULT_DEGENERACY_TOL_GHZ, None).unwrap();
        prop_assume!(fa.cluster[m - 1] != fa.cluster[n - 1]);
        let c = fa.sensitivity(m, n).unwrap().curvature;
        prop_assert!((c - c.transpose()).norm() <= 1e-8 * c.norm());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn evolution_keeps_a_valid_state(
        re in prop::collection::vec(-1.0f64..1.0, 36),
        im in prop::collection::vec(-1.0f64..1.0, 36),
        rates in prop::array::uniform2(0.0f64..1.0),
        p0 in 0.0f64..1.0,
    ) {
        let space = ModeSpace::new(&[3, 2]).unwrap();
        let h = hermitian(&space, &re, &im);
        let hamiltonian = |_t: f64| h.clone();
        let jumps = vec![
            Dissipator::new(embed(&annihilation(3).unwrap(), 0, &space).unwrap(), rates[0]).unwrap(),
            Dissipator::new(embed(&annihilation(2).unwrap(), 1, &space).unwrap(), rates[1]).unwrap(),
        ];
        let mut diag = vec![0.0; 6];
        diag[0] = p0;
        diag[5] = 1.0 - p0;
        let evo = evolve(&EvolutionProblem {
            hamiltonian: &hamiltonian,
            dissipators: jumps,
            initial_state: DensityMatrix::from_diagonal(&space, &diag).unwrap(),
            t_start: 0.0,
            t_end: 2.0,
            step: 2e-3,
            capture_stride: 100,
            sectors: None,
        })
        .unwrap();
        prop_assert!(evo.max_trace_deviation < 1e-10);
        for (_, rho) in &evo.trajectory {
            prop_assert!(rho.as_operator().hermiticity_error() < 1e-12);
            let eig = hermitian_eigensolve(rho.as_operator()).unwrap();
            prop_assert!(eig.values.iter().all(|&v| v > -1e-9));
        }
    }
}
