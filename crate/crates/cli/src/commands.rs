use std::path::PathBuf;

use ertrans_core::experiments::{
    alpha_grid, efficiency_vs_time, grid, run_sweep, schedule_trace, sweep_temperature, temperature_grid, temperature_grid_mk,
    time_ratio_grid,
    Outputs, SweepSpec, SweepTable, SweptParameter, DEPHASING_SET,
};
use ertrans_core::protocol::{
    calibrate_orientation, run_transfer, OrientationCalibration, ProtocolParams, ScheduleOrientation,
};
use ertrans_core::spinham::{
    field_sweep, rank_in, zefoz_in, FieldAnalysis, SpinHamiltonian, SpinParams, TransitionRecord,
};
use nalgebra::Vector3;

use crate::config::RunConfig;
use crate::output::{emit, num, provenance, Meta, Plot, Table, PROVENANCE_COLUMNS};
use crate::CliError;

/// Dephasing rates γ*/G for the fidelity-vs-temperature curves.
const FIG3A_RATES: [f64; 2] = [0.0008, 1.0];
/// α/G values of the schedule plot.
const FIGA1_ALPHAS: [f64; 3] = [0.1, 0.24, 1.0];
const FIGA1_T_MAX_G: f64 = 20.0;
const FIGA1_SAMPLES: usize = 401;
pub const TABLE1_ROWS: usize = 5;

pub struct Context {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub command: String,
}

fn describe(c: &OrientationCalibration) -> String {
    format!(
        "mw_to_optical = {} at alpha/G = {} (as_printed eta {}, reversed eta {})",
        c.mw_to_optical,
        num(c.alpha_over_g),
        num(c.efficiency_as_printed),
        num(c.efficiency_reversed)
    )
}

impl Context {
    fn meta(&self) -> Meta {
        Meta::new(&self.command)
    }

    fn protocol_meta(&self, p: &ProtocolParams, cal: Option<&OrientationCalibration>) -> Meta {
        self.meta().protocol(p, cal.map(describe)).config(&self.cfg.to_toml())
    }

    /// Protocol parameters with the orientation resolved.
    fn params(&self) -> Result<(ProtocolParams, Option<OrientationCalibration>), CliError> {
        let mut p = self.cfg.protocol.params()?;
        if !self.cfg.protocol.calibrate() {
            return Ok((p, None));
        }
        let cal = calibrate_orientation(&p)?;
        p.orientation = cal.orientation_for(p.direction);
        eprintln!("calibration: {}", describe(&cal));
        Ok((p, Some(cal)))
    }

    fn workers(&self) -> usize {
        self.cfg.sweep.workers
    }

    fn spin_params(&self) -> Result<SpinParams, CliError> {
        let path = &self.cfg.spin.params_file;
        if !path.is_file() {
            return Err(CliError::Config(format!(
                "spin parameter file {} not found. Point [spin] params_file (or --set spin.params_file=...) at a \
                 TOML file with keys site, source, g_n, S, I, g (3x3, dimensionless), [A] and [Q] tables with \
                 `units` (GHz/MHz/kHz/Hz) and 3x3 `values`, and [constants] beta_e_GHz_per_T, beta_n_MHz_per_T; \
                 see data/er167_yso_site1.toml",
                path.display()
            )));
        }
        SpinParams::load(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    fn spin_meta(&self, sp: &SpinParams) -> Meta {
        self.meta()
            .line(format!("spin parameters: {} (site {})", self.cfg.spin.params_file.display(), sp.site))
            .line(format!("source: {}", sp.source))
            .config(&self.cfg.to_toml())
    }

    fn analysis(&self, sp: &SpinParams) -> Result<FieldAnalysis, CliError> {
        let ham = SpinHamiltonian::new(sp)?;
        let b = Vector3::from(self.cfg.spin.B_T);
        Ok(FieldAnalysis::new(&ham, b, self.cfg.spin.degeneracy_tol_MHz * 1e-3, None)?)
    }

    pub fn protocol_run(&self) -> Result<(), CliError> {
        let (p, cal) = self.params()?;
        let r = run_transfer(&p)?;
        println!("efficiency   {:.6}", r.efficiency);
        println!("noise        {:.6}", r.noise);
        println!("signal       {:.6}", r.signal);
        println!("fidelity_snr {:.6}", r.fidelity_snr);
        println!("nbar         {:.6}", r.nbar);
        println!("orientation  {}", r.orientation);
        println!("steps        {} (step {} /G)", r.steps, num(r.step));
        if let Some(flag) = r.fidelity_flag {
            println!("flag         {flag:?}");
        }
        let mut t = Table::new(["t_s", "G_t", "optical", "microwave", "spin"]);
        for pt in &r.trajectory {
            t.push(vec![num(pt.t), num(pt.g_t), num(pt.optical), num(pt.microwave), num(pt.spin)]);
        }
        let meta = self.protocol_meta(&p, cal.as_ref()).line(format!(
            "efficiency {} noise {} signal {} fidelity_snr {} nbar {}",
            num(r.efficiency),
            num(r.noise),
            num(r.signal),
            num(r.fidelity_snr),
            num(r.nbar)
        ));
        emit(
            &self.out,
            "protocol_run.csv",
            &meta,
            &t,
            Some(Plot {
                x: "t_s",
                ys: &["optical", "microwave", "spin"],
                xlabel: "t (s)",
                ylabel: "mean photon number",
                group_by: None,
            }),
        )?;
        Ok(())
    }

    /// `xs` are the swept values in config units, one per row.
    fn sweep_table(&self, label: &str, table: &SweepTable, xs: &[f64]) -> Table {
        let mut columns = vec![label.to_string()];
        columns.extend(["efficiency", "noise", "signal", "fidelity_snr", "nbar"].map(String::from));
        columns.extend(PROVENANCE_COLUMNS.map(String::from));
        let mut t = Table::new(columns);
        let opt = |v: Option<f64>| v.map(num).unwrap_or_default();
        for (r, &x) in table.rows.iter().zip(xs) {
            let mut row = vec![
                num(x),
                num(r.efficiency),
                opt(r.noise),
                opt(r.signal),
                opt(r.fidelity),
                opt(r.nbar),
            ];
            row.extend(provenance(&r.params));
            t.push(row);
        }
        t
    }

    fn report_peak(table: &SweepTable, label: &str, scale: f64) {
        if let Some(best) = table.argmax_efficiency() {
            let extra = best.fidelity.map(|f| format!(", fidelity_snr {f:.6}")).unwrap_or_default();
            println!("peak efficiency {:.6} at {label} = {}{extra}", best.efficiency, num(best.value * scale));
        }
    }

    pub fn protocol_sweep(&self) -> Result<(), CliError> {
        let s = &self.cfg.sweep;
        let base = self.cfg.protocol.params()?;
        let spec = SweepSpec {
            base,
            parameter: s.parameter.core(),
            values: s.values()?,
            outputs: if s.noise_and_fidelity { Outputs::ALL } else { Outputs::EFFICIENCY },
            workers: self.workers(),
            calibrate: self.cfg.protocol.calibrate(),
        };
        let table = run_sweep(&spec)?;
        let label = format!("{:?}", s.parameter);
        let scale = if spec.parameter == SweptParameter::Temperature { 1e3 } else { 1.0 };
        Self::report_peak(&table, &label, scale);
        let first = &table.rows[0].params;
        let meta = self.protocol_meta(first, table.calibration.as_ref());
        let name = format!("sweep_{label}.csv");
        emit(
            &self.out,
            &name,
            &meta,
            &self.sweep_table(&label, &table, &grid(s.start, s.stop, s.step)),
            Some(Plot {
                x: &label,
                ys: &["efficiency"],
                xlabel: &label,
                ylabel: "efficiency",
                group_by: None,
            }),
        )?;
        Ok(())
    }

    pub fn spin_levels(&self) -> Result<(), CliError> {
        let sp = self.spin_params()?;
        let fa = self.analysis(&sp)?;
        let mut t = Table::new(["level", "frequency_GHz"]);
        for (k, e) in fa.energies.iter().enumerate() {
            println!("{:>2} {e:.6}", k + 1);
            t.push(vec![(k + 1).to_string(), num(*e)]);
        }
        let meta = self.spin_meta(&sp).line(format!("B_T: {:?}", self.cfg.spin.B_T));
        emit(&self.out, "spin_levels.csv", &meta, &t, None)?;
        Ok(())
    }

    fn transition_table(records: &[TransitionRecord]) -> Table {
        let mut t = Table::new([
            "lower",
            "upper",
            "frequency_GHz",
            "d_D1_GHz_per_T",
            "d_D2_GHz_per_T",
            "d_b_GHz_per_T",
            "S1_Hz_per_T",
            "S2_Hz_per_T2",
            "T2_us",
        ]);
        for r in records {
            let d = r.dipole_ghz_per_t;
            t.push(vec![
                r.lower.to_string(),
                r.upper.to_string(),
                num(r.frequency_ghz),
                num(d[0]),
                num(d[1]),
                num(d[2]),
                num(r.s1_hz_per_t),
                num(r.s2_hz_per_t2),
                num(r.t2_s * 1e6),
            ]);
        }
        t
    }

    fn print_records(records: &[TransitionRecord]) {
        println!("{:<24} {:<24} {:>12}", "frequency (GHz)", "d(D1,D2,b) (GHz/T)", "T2 (us)");
        for r in records {
            let d = r.dipole_ghz_per_t;
            println!(
                "{:<24} {:<24} {:>12.2}",
                format!("{:.3} ({} <-> {})", r.frequency_ghz, r.lower, r.upper),
                format!("({:.2}, {:.2}, {:.2})", d[0], d[1], d[2]),
                r.t2_s * 1e6
            );
        }
    }

    fn ranked(&self, sp: &SpinParams) -> Result<Vec<TransitionRecord>, CliError> {
        let fa = self.analysis(sp)?;
        let [lo, hi] = self.cfg.spin.window_GHz;
        Ok(rank_in(&fa, (lo, hi), &self.cfg.spin.model())?)
    }

    pub fn spin_transitions(&self, name: &str, limit: Option<usize>) -> Result<(), CliError> {
        let sp = self.spin_params()?;
        let mut records = self.ranked(&sp)?;
        if let Some(n) = limit {
            records.truncate(n);
        }
        Self::print_records(&records);
        let meta = self
            .spin_meta(&sp)
            .line(format!("B_T: {:?}, window_GHz: {:?}", self.cfg.spin.B_T, self.cfg.spin.window_GHz));
        emit(&self.out, name, &meta, &Self::transition_table(&records), None)?;
        Ok(())
    }

    pub fn spin_sweep(&self, name: &str) -> Result<(), CliError> {
        let sp = self.spin_params()?;
        let s = &self.cfg.spin;
        let sweep = field_sweep(&sp, &Vector3::from(s.sweep_axis), s.sweep_Bmax_T, s.sweep_steps)?;
        let n = sweep.levels.first().map_or(0, Vec::len);
        let mut columns = vec!["B_T".to_string()];
        columns.extend((1..=n).map(|l| format!("level_{l}")));
        let mut t = Table::new(columns);
        for (b, levels) in sweep.fields.iter().zip(&sweep.levels) {
            let mut row = vec![num(*b)];
            row.extend(levels.iter().map(|&e| num(e)));
            t.push(row);
        }
        let ys: Vec<String> = (1..=n).map(|l| format!("level_{l}")).collect();
        let ys: Vec<&str> = ys.iter().map(String::as_str).collect();
        let meta = self.spin_meta(&sp).line(format!(
            "axis: ({}, {}, {}), levels tracked by eigenvector overlap",
            num(sweep.axis.x),
            num(sweep.axis.y),
            num(sweep.axis.z)
        ));
        emit(
            &self.out,
            name,
            &meta,
            &t,
            Some(Plot {
                x: "B_T",
                ys: &ys,
                xlabel: "B (T)",
                ylabel: "frequency (GHz)",
                group_by: None,
            }),
        )?;
        println!("{} field points, {} levels", sweep.fields.len(), n);
        Ok(())
    }

    pub fn spin_zefoz(&self, name: &str) -> Result<(), CliError> {
        let sp = self.spin_params()?;
        let fa = self.analysis(&sp)?;
        let tol = self.cfg.spin.zefoz_tol_MHz_per_T * 1e6;
        let entries = zefoz_in(&fa, tol, &self.cfg.spin.model())?;
        let records: Vec<TransitionRecord> = entries.into_iter().map(|e| e.record).collect();
        Self::print_records(&records);
        let meta = self.spin_meta(&sp).line(format!(
            "B_T: {:?}, S1 below {} Hz/T",
            self.cfg.spin.B_T,
            num(tol)
        ));
        emit(&self.out, name, &meta, &Self::transition_table(&records), None)?;
        Ok(())
    }

    pub fn reproduce_fig2(&self) -> Result<(), CliError> {
        let base = self.cfg.protocol.params()?;
        let mut spec = SweepSpec::new(base, SweptParameter::AlphaOverG, alpha_grid());
        spec.workers = self.workers();
        spec.calibrate = self.cfg.protocol.calibrate();
        let table = run_sweep(&spec)?;
        Self::report_peak(&table, "alpha/G", 1.0);
        let meta = self.protocol_meta(&table.rows[0].params, table.calibration.as_ref());
        emit(
            &self.out,
            "fig2.csv",
            &meta,
            &self.sweep_table("alpha_over_G", &table, &alpha_grid()),
            Some(Plot {
                x: "alpha_over_G",
                ys: &["efficiency", "fidelity_snr", "noise"],
                xlabel: "alpha/G",
                ylabel: "",
                group_by: None,
            }),
        )?;
        Ok(())
    }

    pub fn reproduce_tfinal(&self) -> Result<(), CliError> {
        let base = self.cfg.protocol.params()?;
        let mut spec = SweepSpec::new(base, SweptParameter::TimeRatio, time_ratio_grid());
        spec.outputs = Outputs::EFFICIENCY;
        spec.workers = self.workers();
        spec.calibrate = self.cfg.protocol.calibrate();
        let table = run_sweep(&spec)?;
        Self::report_peak(&table, "t_f*alpha", 1.0);
        let meta = self.protocol_meta(&table.rows[0].params, table.calibration.as_ref());
        emit(
            &self.out,
            "tfinal_sweep.csv",
            &meta,
            &self.sweep_table("t_final_ratio", &table, &time_ratio_grid()),
            Some(Plot {
                x: "t_final_ratio",
                ys: &["efficiency"],
                xlabel: "t_f * alpha",
                ylabel: "efficiency",
                group_by: None,
            }),
        )?;
        Ok(())
    }

    pub fn reproduce_fig3a(&self) -> Result<(), CliError> {
        let base = self.cfg.protocol.params()?;
        let temps = temperature_grid();
        let temps_mk = temperature_grid_mk();
        let curves = sweep_temperature(&base, &temps, &FIG3A_RATES, self.workers(), self.cfg.protocol.calibrate())?;
        let mut columns = vec!["gamma_star_over_G", "temperature_mK", "fidelity_snr", "efficiency", "noise", "signal"];
        columns.extend(PROVENANCE_COLUMNS);
        let mut t = Table::new(columns);
        for (gs, table) in &curves.curves {
            for (r, &mk) in table.rows.iter().zip(&temps_mk) {
                let mut row = vec![
                    num(*gs),
                    num(mk),
                    r.fidelity.map(num).unwrap_or_default(),
                    num(r.efficiency),
                    r.noise.map(num).unwrap_or_default(),
                    r.signal.map(num).unwrap_or_default(),
                ];
                row.extend(provenance(&r.params));
                t.push(row);
            }
            if let Some(r) = table.rows.iter().find(|r| (r.value - 0.05).abs() < 1e-12) {
                println!("gamma*/G = {gs}: fidelity_snr at 50 mK {:.6}", r.fidelity.unwrap_or(f64::NAN));
            }
        }
        let meta = self.protocol_meta(&curves.curves[0].1.rows[0].params, curves.calibration.as_ref());
        emit(
            &self.out,
            "fig3a.csv",
            &meta,
            &t,
            Some(Plot {
                x: "temperature_mK",
                ys: &["fidelity_snr"],
                xlabel: "T (mK)",
                ylabel: "F_SNR",
                group_by: Some("gamma_star_over_G"),
            }),
        )?;
        Ok(())
    }

    pub fn reproduce_fig3b(&self) -> Result<(), CliError> {
        let base = self.cfg.protocol.params()?;
        let stride = self.cfg.protocol.capture_stride.max(1);
        let traces = efficiency_vs_time(&base, &DEPHASING_SET, stride, self.workers(), self.cfg.protocol.calibrate())?;
        let mut t = Table::new(["gamma_star_over_G", "t_s", "G_t", "optical", "microwave", "spin"]);
        for tr in &traces.traces {
            println!("gamma*/G = {}: final efficiency {:.6}", tr.gamma_star_over_g, tr.final_efficiency);
            for pt in &tr.trajectory {
                t.push(vec![
                    num(tr.gamma_star_over_g),
                    num(pt.t),
                    num(pt.g_t),
                    num(pt.optical),
                    num(pt.microwave),
                    num(pt.spin),
                ]);
            }
        }
        let first = &traces.traces[0].params;
        let meta = self.protocol_meta(first, traces.calibration.as_ref());
        emit(
            &self.out,
            "fig3b.csv",
            &meta,
            &t,
            Some(Plot {
                x: "G_t",
                ys: &["optical"],
                xlabel: "G t",
                ylabel: "<a1^dag a1>",
                group_by: Some("gamma_star_over_G"),
            }),
        )?;
        Ok(())
    }

    pub fn reproduce_fig_a1(&self) -> Result<(), CliError> {
        let samples = schedule_trace(1.0, &FIGA1_ALPHAS, FIGA1_T_MAX_G, FIGA1_SAMPLES, ScheduleOrientation::AsPrinted)?;
        let mut t = Table::new(["alpha_over_G", "G_t", "G1_over_G", "G2_over_G", "residual"]);
        let mut worst: f64 = 0.0;
        for s in &samples {
            worst = worst.max(s.residual.abs());
            t.push(vec![num(s.alpha), num(s.t), num(s.g1), num(s.g2), num(s.residual)]);
        }
        println!("{} samples, max |G1^2 + G2^2 - G^2| = {worst:e} G^2", samples.len());
        let meta = self.meta().line("schedule as printed, G = 1");
        emit(
            &self.out,
            "figA1.csv",
            &meta,
            &t,
            Some(Plot {
                x: "G_t",
                ys: &["G1_over_G", "G2_over_G"],
                xlabel: "G t",
                ylabel: "coupling / G",
                group_by: Some("alpha_over_G"),
            }),
        )?;
        Ok(())
    }
}
