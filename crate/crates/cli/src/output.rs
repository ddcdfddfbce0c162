//! CSV files with a `#` metadata block, and matching matplotlib scripts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ertrans_core::protocol::ProtocolParams;

use crate::CliError;

/// Shortest representation that parses back to the same f64.
pub fn num(x: f64) -> String {
    format!("{x}")
}

/// Metadata lines written as `# ` comments at the top of every file.
#[derive(Clone, Debug, Default)]
pub struct Meta {
    lines: Vec<String>,
}

impl Meta {
    pub fn new(command: &str) -> Self {
        Self {
            lines: vec![
                format!("ertrans {}", env!("CARGO_PKG_VERSION")),
                format!("command: {command}"),
            ],
        }
    }

    pub fn line(mut self, text: impl Into<String>) -> Self {
        self.lines.push(text.into());
        self
    }

    pub fn protocol(self, p: &ProtocolParams, calibration: Option<String>) -> Self {
        let mut m = self
            .line(format!("orientation: {}", p.orientation))
            .line(format!("step_G_units: {}", num(p.step_in_g_units())))
            .line(format!("dims: {:?}", p.dims));
        if let Some(c) = calibration {
            m = m.line(format!("calibration: {c}"));
        }
        m
    }

    /// Append a TOML document, one comment line per line.
    pub fn config(mut self, toml: &str) -> Self {
        self.lines.push("resolved config:".into());
        self.lines.extend(toml.lines().map(|l| format!("  {l}")));
        self
    }
}

pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(columns: impl IntoIterator<Item = S>) -> Self {
        Self {
            columns: columns.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    fn render(&self, meta: &Meta) -> String {
        let mut s = String::new();
        for l in &meta.lines {
            let _ = writeln!(s, "{}", format!("# {l}").trim_end());
        }
        let _ = writeln!(s, "{}", self.columns.join(","));
        for r in &self.rows {
            let _ = writeln!(s, "{}", r.join(","));
        }
        s
    }
}

/// Column names and values describing a full parameter set.
pub const PROVENANCE_COLUMNS: [&str; 14] = [
    "coupling_rad_s",
    "alpha_rad_s",
    "kappa1_rad_s",
    "kappa2_rad_s",
    "gamma_s_rad_s",
    "gamma_star_rad_s",
    "omega_mw_rad_s",
    "temperature_K",
    "t_final_ratio",
    "dims",
    "direction",
    "orientation",
    "signal_convention",
    "steps_per_unit",
];

pub fn provenance(p: &ProtocolParams) -> Vec<String> {
    vec![
        num(p.coupling),
        num(p.alpha),
        num(p.kappa1),
        num(p.kappa2),
        num(p.gamma_s),
        num(p.gamma_star),
        num(p.omega_mw),
        num(p.temperature),
        num(p.time_ratio),
        format!("{}x{}x{}", p.dims[0], p.dims[1], p.dims[2]),
        p.direction.to_string(),
        p.orientation.to_string(),
        p.signal.to_string(),
        num(p.steps_per_unit),
    ]
}

pub struct Plot<'a> {
    pub x: &'a str,
    pub ys: &'a [&'a str],
    pub xlabel: &'a str,
    pub ylabel: &'a str,
    /// Draw one curve per distinct value of this column.
    pub group_by: Option<&'a str>,
}

fn script(csv: &str, plot: &Plot) -> String {
    let ys = plot.ys.iter().map(|y| format!("{y:?}")).collect::<Vec<_>>().join(", ");
    let mut s = format!(
        "import io\n\nimport matplotlib.pyplot as plt\nimport numpy as np\n\n\
         with open({csv:?}) as f:\n    body = \"\".join(l for l in f if not l.startswith(\"#\"))\n\
         d = np.genfromtxt(io.StringIO(body), delimiter=\",\", names=True, dtype=None, encoding=None)\n\
         fig, ax = plt.subplots()\n"
    );
    match plot.group_by {
        Some(g) => {
            let _ = write!(
                s,
                "for v in np.unique(d[{g:?}]):\n    sel = d[d[{g:?}] == v]\n    for y in [{ys}]:\n        \
                 ax.plot(sel[{x:?}], sel[y], label=f\"{g} = {{v}}\" if len([{ys}]) == 1 else f\"{{y}}, {g} = {{v}}\")\n",
                x = plot.x
            );
        }
        None => {
            let _ = write!(s, "for y in [{ys}]:\n    ax.plot(d[{x:?}], d[y], label=y)\n", x = plot.x);
        }
    }
    let png = csv.trim_end_matches(".csv");
    let _ = write!(
        s,
        "ax.set_xlabel({:?})\nax.set_ylabel({:?})\nax.legend()\nfig.tight_layout()\nfig.savefig(\"{png}.png\", dpi=150)\n",
        plot.xlabel, plot.ylabel
    );
    s
}

/// Write `<dir>/<name>` and, with a plot, `<dir>/<stem>.py`.
pub fn emit(dir: &Path, name: &str, meta: &Meta, table: &Table, plot: Option<Plot>) -> Result<PathBuf, CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join(name);
    fs::write(&path, table.render(meta))
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    if let Some(plot) = plot {
        let py = dir.join(format!("{}.py", name.trim_end_matches(".csv")));
        fs::write(&py, script(name, &plot))
            .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", py.display())))?;
    }
    log::info!("wrote {}", path.display());
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_has_comment_block_then_header() {
        let mut t = Table::new(["a", "b"]);
        t.push(vec![num(1.0), num(0.1)]);
        let text = t.render(&Meta::new("test").config("x = 1\n"));
        let lines: Vec<_> = text.lines().collect();
        assert!(lines[0].starts_with("# ertrans "));
        assert_eq!(lines[3], "#   x = 1");
        assert_eq!(lines[4], "a,b");
        assert_eq!(lines[5], "1,0.1");
    }

    #[test]
    fn provenance_matches_columns() {
        assert_eq!(provenance(&ProtocolParams::fig2()).len(), PROVENANCE_COLUMNS.len());
    }

    #[test]
    fn script_mentions_columns() {
        let s = script(
            "fig2.csv",
            &Plot {
                x: "alpha_over_G",
                ys: &["efficiency"],
                xlabel: "alpha/G",
                ylabel: "",
                group_by: None,
            },
        );
        assert!(s.contains("\"fig2.csv\"") && s.contains("\"efficiency\"") && s.contains("fig2.png"));
    }
}
