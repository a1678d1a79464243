//! CSV artifacts, the control file reader and the gnuplot script.

use std::fs;
use std::path::{Path, PathBuf};

use ensemble_control::sde::TrialSet;
use ensemble_control::stats::{EnsembleStatistics, SweepRow};
use ensemble_control::synthesis::{ControllabilityDiagnostic, Svd};
use ensemble_control::{ControlSignal, EnsembleSystem, TimeGrid};

use crate::error::CliError;

/// Shortest representation that parses back to the same `f64`; exponent
/// notation outside `[1e-4, 1e15)`.
pub fn fmt_f64(x: f64) -> String {
    if x == 0.0 {
        return if x.is_sign_negative() {
            "-0".into()
        } else {
            "0".into()
        };
    }
    let a = x.abs();
    if a.is_finite() && (1e-4..1e15).contains(&a) {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    CliError::io(path, std::io::Error::other(e.to_string()))
}

pub fn write_csv<I>(path: &Path, header: &[String], rows: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn numbered(prefix: &str, count: usize) -> impl Iterator<Item = String> + '_ {
    (1..=count).map(move |i| format!("{prefix}{i}"))
}

fn beta_header(dim: usize) -> Vec<String> {
    if dim == 1 {
        vec!["beta".into()]
    } else {
        numbered("beta", dim).collect()
    }
}

/// `t,u1..um`, one row per interval `(t_{k-1}, t_k]`, labelled by `t_k`.
pub fn write_control(path: &Path, control: &ControlSignal) -> Result<(), CliError> {
    let header: Vec<String> = std::iter::once("t".to_string())
        .chain(numbered("u", control.input_dim()))
        .collect();
    let grid = control.grid();
    let rows = (1..=grid.steps()).map(|k| {
        std::iter::once(fmt_f64(grid.node(k)))
            .chain(control.value(k).iter().map(|&v| fmt_f64(v)))
            .collect()
    });
    write_csv(path, &header, rows)
}

/// Read a control written by [`write_control`] and check it against `sys`.
pub fn read_control(path: &Path, sys: &EnsembleSystem) -> Result<ControlSignal, CliError> {
    let bad = |message: String| CliError::ControlFile {
        path: path.to_path_buf(),
        message,
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let width = r.headers().map_err(|e| csv_error(path, e))?.len();
    if width != sys.input_dim() + 1 {
        return Err(bad(format!(
            "expected {} columns (t and {} inputs), found {width}",
            sys.input_dim() + 1,
            sys.input_dim()
        )));
    }
    let mut times = Vec::new();
    let mut values = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        for (c, field) in rec.iter().enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| bad(format!("row {}: '{field}' is not a number", line + 2)))?;
            if c == 0 {
                times.push(v);
            } else {
                values.push(v);
            }
        }
    }
    let steps = times.len();
    if steps == 0 {
        return Err(bad("no rows".into()));
    }
    let horizon = times[steps - 1];
    if (horizon - sys.horizon()).abs() > 1e-12 * sys.horizon() {
        return Err(bad(format!(
            "control ends at {horizon}, system horizon is {}",
            sys.horizon()
        )));
    }
    let grid = TimeGrid::new(sys.horizon(), steps)?;
    if let Some(k) = (1..=steps).find(|&k| (times[k - 1] - grid.node(k)).abs() > 1e-9 * sys.horizon()) {
        return Err(bad(format!("row {} is not on a uniform grid", k + 1)));
    }
    Ok(ControlSignal::new(grid, sys.input_dim(), values)?)
}

pub fn write_singular_values(path: &Path, svd: &Svd) -> Result<(), CliError> {
    let rows = svd
        .s
        .iter()
        .enumerate()
        .map(|(i, &s)| vec![(i + 1).to_string(), fmt_f64(s)]);
    write_csv(path, &["index".into(), "s".into()], rows)
}

/// `index,s,coefficient,partial_sum` with `coefficient = ξ̂ᵀu_j`.
pub fn write_diagnostic(path: &Path, svd: &Svd, diag: &ControllabilityDiagnostic) -> Result<(), CliError> {
    let header = ["index", "s", "coefficient", "partial_sum"].map(String::from);
    let rows = (0..svd.s.len()).map(|i| {
        vec![
            (i + 1).to_string(),
            fmt_f64(svd.s[i]),
            fmt_f64(diag.coefficients[i]),
            fmt_f64(diag.partial_sums[i]),
        ]
    });
    write_csv(path, &header, rows)
}

fn beta_fields(beta: &[f64]) -> impl Iterator<Item = String> + '_ {
    beta.iter().map(|&b| fmt_f64(b))
}

/// `trial,beta,x1..xn`, grouped by parameter sample.
pub fn write_terminals(path: &Path, sets: &[TrialSet], n: usize, dim: usize) -> Result<(), CliError> {
    let header: Vec<String> = std::iter::once("trial".to_string())
        .chain(beta_header(dim))
        .chain(numbered("x", n))
        .collect();
    let rows = sets.iter().flat_map(|set| {
        set.samples.iter().enumerate().map(move |(i, s)| {
            std::iter::once(i.to_string())
                .chain(beta_fields(&set.beta))
                .chain(s.terminal.iter().map(|&v| fmt_f64(v)))
                .collect()
        })
    });
    write_csv(path, &header, rows)
}

/// `beta,meanx1..meanxn,mse,mse_se,mse_theory`.
pub fn write_stats(path: &Path, stats: &EnsembleStatistics, n: usize, dim: usize) -> Result<(), CliError> {
    let header: Vec<String> = beta_header(dim)
        .into_iter()
        .chain(numbered("meanx", n))
        .chain(["mse", "mse_se", "mse_theory"].map(String::from))
        .collect();
    let rows = stats.per_beta.iter().map(|b| {
        beta_fields(&b.beta)
            .chain(b.mean_terminal.iter().map(|&v| fmt_f64(v)))
            .chain([b.mse_empirical, b.mse_se, b.mse_theory].map(fmt_f64))
            .collect()
    });
    write_csv(path, &header, rows)
}

pub fn write_summary(path: &Path, stats: &EnsembleStatistics) -> Result<(), CliError> {
    write_csv(
        path,
        &["J1", "J2_emp", "J2_theory"].map(String::from),
        [vec![
            fmt_f64(stats.j1),
            fmt_f64(stats.j2_empirical),
            fmt_f64(stats.j2_theory),
        ]],
    )
}

pub fn write_sweep(path: &Path, label: &str, rows: &[SweepRow]) -> Result<(), CliError> {
    let header = [label, "mse", "mse_se", "mse_theory"].map(String::from);
    let rows = rows.iter().map(|r| {
        [r.value, r.mse_empirical, r.mse_se, r.mse_theory]
            .map(fmt_f64)
            .to_vec()
    });
    write_csv(path, &header, rows)
}

/// One `t,x1..xn` file per trial under `dir`.
pub fn write_trajectories(dir: &Path, sets: &[TrialSet], n: usize) -> Result<Vec<PathBuf>, CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let header: Vec<String> = std::iter::once("t".to_string()).chain(numbered("x", n)).collect();
    let mut written = Vec::new();
    for set in sets {
        for (i, s) in set.samples.iter().enumerate() {
            let path = dir.join(format!("beta{}_trial{}.csv", set.beta_index, i));
            let rows = s.times.iter().zip(&s.states).map(|(t, x)| {
                std::iter::once(fmt_f64(*t))
                    .chain(x.iter().map(|&v| fmt_f64(v)))
                    .collect()
            });
            write_csv(&path, &header, rows)?;
            written.push(path);
        }
    }
    Ok(written)
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Which artifacts exist, for the plot script.
#[derive(Debug, Clone, Copy, Default)]
pub struct PlotInputs {
    pub control: bool,
    pub singular_values: bool,
    pub stats: bool,
    pub sweeps: bool,
    pub state_dim: usize,
    pub input_dim: usize,
}

/// Gnuplot script drawing whichever CSVs were produced, one PNG each.
pub fn plot_script(p: &PlotInputs) -> String {
    let mut s = String::from(
        "# gnuplot plot.gp\nset datafile separator ','\nset key autotitle columnhead\nset terminal pngcairo size 900,600\n",
    );
    if p.control {
        s.push_str("\nset output 'control.png'\nset xlabel 't'\nset ylabel 'u(t)'\nplot ");
        let series: Vec<String> = (0..p.input_dim)
            .map(|i| format!("'control.csv' using 1:{} with lines", i + 2))
            .collect();
        s.push_str(&series.join(", \\\n     "));
        s.push('\n');
    }
    if p.singular_values {
        s.push_str(
            "\nset output 'singular_values.png'\nset logscale y\nset xlabel 'index'\nset ylabel 's'\n\
             plot 'singular_values.csv' using 1:2 with linespoints\nunset logscale y\n",
        );
    }
    if p.stats {
        let mse_col = 2 + p.state_dim;
        s.push_str(&format!(
            "\nset output 'mse.png'\nset xlabel 'beta'\nset ylabel 'E|X(T) - XF|^2'\n\
             plot 'stats.csv' using 1:{m}:{se} with yerrorbars title 'empirical', \\\n     \
             'stats.csv' using 1:{th} with lines title 'tr C(T, beta)'\n",
            m = mse_col,
            se = mse_col + 1,
            th = mse_col + 2
        ));
        s.push_str("\nset output 'mean.png'\nset ylabel 'mean terminal state'\nplot ");
        let series: Vec<String> = (0..p.state_dim)
            .map(|i| format!("'stats.csv' using 1:{} with linespoints", i + 2))
            .collect();
        s.push_str(&series.join(", \\\n     "));
        s.push('\n');
    }
    if p.sweeps {
        for (file, label) in [("sweep_beta", "beta"), ("sweep_horizon", "T")] {
            s.push_str(&format!(
                "\nset output '{file}.png'\nset xlabel '{label}'\nset ylabel 'MSE'\n\
                 plot '{file}.csv' using 1:2:3 with yerrorbars title 'empirical', \\\n     \
                 '{file}.csv' using 1:4 with lines title 'tr C'\n"
            ));
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_format_round_trips() {
        for x in [
            0.1,
            1.0 / 3.0,
            1e-5,
            -2.5e-7,
            123456.789,
            1e15,
            6.02e23,
            -0.0,
            5e-324,
            0.0001,
        ] {
            let s = fmt_f64(x);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), x.to_bits(), "{s}");
        }
        assert_eq!(fmt_f64(0.05), "0.05");
        assert_eq!(fmt_f64(2.5e-5), "2.5e-5");
        assert_eq!(fmt_f64(40000.0), "40000");
    }

    #[test]
    fn control_round_trip() {
        let sys = ensemble_control::builtin_example("bm-oscillator").unwrap().system;
        let grid = TimeGrid::new(1.0, 7).unwrap();
        let vals: Vec<f64> = (0..14).map(|i| (i as f64 * 0.7).sin() / 3.0).collect();
        let u = ControlSignal::new(grid, 2, vals).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("control.csv");
        write_control(&path, &u).unwrap();
        assert_eq!(read_control(&path, &sys).unwrap(), u);

        let scalar = ensemble_control::builtin_example("scalar-tv").unwrap().system;
        let err = read_control(&path, &scalar).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn plot_script_mentions_outputs() {
        let s = plot_script(&PlotInputs {
            control: true,
            singular_values: true,
            stats: true,
            sweeps: false,
            state_dim: 2,
            input_dim: 2,
        });
        assert!(s.contains("'control.csv' using 1:3"));
        assert!(s.contains("'stats.csv' using 1:4:5"));
        assert!(!s.contains("sweep"));
    }
}
