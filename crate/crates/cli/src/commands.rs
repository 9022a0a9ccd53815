use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use dipole_asmc::estimates::posterior_n_dipoles;
use dipole_asmc::geometry::{
    build_sensor_array, build_spherical_grid, compute_leadfield, read_points_csv,
    write_points_csv, write_sensors_csv,
};
use dipole_asmc::metrics::{delta_nd, delta_r};
use dipole_asmc::rng::derive_seed;
use dipole_asmc::sampler::History;
use dipole_asmc::synthgen::{generate_suite, write_suite, Manifest};
use dipole_asmc::{
    point_estimate, Config, EstimatedConfig, Error, Execution, LeadField, Result, Sampler,
    SourceConfig, SourceGrid, Topography,
};
use serde::Serialize;

use crate::{Cli, Command};

const THREADS_VAR: &str = "DIPOLE_ASMC_THREADS";

pub fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p).map_err(|e| match e {
            Error::Io(io) => Error::InvalidConfig(format!("{}: {io}", p.display())),
            other => other,
        })?,
        None => Config::default(),
    };
    if let Some(n) = cli.particles {
        cfg.adapt.n_particles = n;
    }
    if let Some(g) = cli.groups {
        cfg.suite.n_groups = g;
    }
    cfg.validate()?;
    match cli.command {
        Command::Leadfield { out } => cmd_leadfield(&cfg, &out),
        Command::Gen { leadfield, out } => cmd_gen(&cfg, cli.seed, &leadfield, &out),
        Command::Sample { topography, leadfield, out } => {
            cmd_sample(&cfg, cli.seed, &topography, &leadfield, &out)
        }
        Command::Bench { suite, leadfield, out, resume } => {
            cmd_bench(&cfg, cli.seed, &suite, &leadfield, &out, resume)
        }
        Command::Eval { estimate, truth, leadfield } => cmd_eval(&cfg, &estimate, &truth, &leadfield),
    }
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::InvalidParameter(format!("{THREADS_VAR}={v:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))
}

fn cmd_leadfield(cfg: &Config, out: &Path) -> Result<()> {
    let g = &cfg.geometry;
    let grid = build_spherical_grid(g.conductor_radius, g.shell_radius, g.spacing)?;
    let sensors = build_sensor_array(g.n_sensors, g.helmet_radius)?;
    let lf = compute_leadfield(&grid, &sensors, Execution::default())?;
    fs::create_dir_all(out)?;
    lf.save(out.join("leadfield.bin"))?;
    write_points_csv(out.join("grid.csv"), grid.points())?;
    write_sensors_csv(out.join("sensors.csv"), &sensors)?;
    eprintln!("wrote {} cells x {} sensors to {}", lf.n_cells(), lf.n_sensors(), out.display());
    Ok(())
}

fn load_leadfield(path: &Path) -> Result<LeadField> {
    LeadField::load(path).map_err(|e| match e {
        Error::Io(io) => Error::Malformed { path: path.to_path_buf(), reason: io.to_string() },
        other => other,
    })
}

/// The grid written next to the lead field by `leadfield`.
fn load_grid(cfg: &Config, lf_path: &Path, lf: &LeadField) -> Result<SourceGrid> {
    let path = lf_path.parent().unwrap_or(Path::new(".")).join("grid.csv");
    let points = read_points_csv(&path).map_err(|e| match e {
        Error::Io(io) => Error::Malformed { path: path.clone(), reason: io.to_string() },
        other => other,
    })?;
    let grid = SourceGrid::from_points(
        points,
        cfg.geometry.spacing,
        cfg.moves.neighbor_radius,
        cfg.moves.loc_gauss_sd,
    )?;
    if grid.len() != lf.n_cells() {
        return Err(Error::DimensionMismatch(format!(
            "{} has {} points, lead field has {} cells",
            path.display(),
            grid.len(),
            lf.n_cells()
        )));
    }
    Ok(grid)
}

fn cmd_gen(cfg: &Config, seed: u64, lf_path: &Path, out: &Path) -> Result<()> {
    let lf = load_leadfield(lf_path)?;
    let items = generate_suite(seed, &lf, &cfg.suite, Execution::default())?;
    fs::create_dir_all(out)?;
    let m = write_suite(out, seed, &lf, &cfg.suite, &items)?;
    eprintln!("wrote {} topographies to {}", m.items.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct EnsembleReport<'a> {
    f: f64,
    log_weights: &'a [f64],
    particles: Vec<&'a SourceConfig>,
}

#[derive(Serialize)]
struct SampleReport<'a> {
    seed: u64,
    n_particles: usize,
    sigma: f64,
    n_iterations: usize,
    estimate: &'a EstimatedConfig,
    posterior_n_dipoles: Vec<f64>,
    history: &'a History,
    ensemble: EnsembleReport<'a>,
}

struct RunResult {
    estimate: EstimatedConfig,
    output: dipole_asmc::SamplerOutput,
}

fn run_one(
    cfg: &Config,
    grid: &SourceGrid,
    lf: &LeadField,
    data: &Topography,
    sigma: dipole_asmc::NoiseModel,
    seed: u64,
) -> Result<RunResult> {
    let sampler = Sampler::new(grid, lf, cfg.prior, cfg.moves, cfg.adapt, sigma)?;
    let output = sampler.run(data, seed)?;
    let estimate = point_estimate(
        &output.ensemble,
        sampler.grid(),
        cfg.prior.max_dipoles,
        cfg.estimates.peak_radius,
    )?;
    Ok(RunResult { estimate, output })
}

fn history_path(out: &Path) -> PathBuf {
    out.with_extension("history.csv")
}

fn cmd_sample(cfg: &Config, seed: u64, topo: &Path, lf_path: &Path, out: &Path) -> Result<()> {
    let lf = load_leadfield(lf_path)?;
    let grid = load_grid(cfg, lf_path, &lf)?;
    let data = Topography::load(topo)?;
    let noise = cfg.noise.model()?;
    let r = run_one(cfg, &grid, &lf, &data, noise, seed)?;
    let ens = &r.output.ensemble;
    let report = SampleReport {
        seed,
        n_particles: ens.len(),
        sigma: noise.sigma(),
        n_iterations: r.output.n_iterations(),
        estimate: &r.estimate,
        posterior_n_dipoles: posterior_n_dipoles(ens, cfg.prior.max_dipoles),
        history: &r.output.history,
        ensemble: EnsembleReport {
            f: ens.f,
            log_weights: &ens.log_weights,
            particles: ens.configs().collect(),
        },
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    fs::write(out, text)?;
    fs::write(history_path(out), r.output.history.to_csv_string())?;
    eprintln!(
        "{} iterations in {:.2?}; estimated {} dipole(s) at cells {:?}",
        r.output.n_iterations(),
        r.output.wall_time,
        r.estimate.n,
        r.estimate.sources.iter().map(|s| s.cell).collect::<Vec<_>>()
    );
    Ok(())
}

const RESULTS_HEADER: &str = "group,n_true,noise_level,delta_nd,delta_r_m,flag";

fn row_key(group: usize, n_true: usize, noise_level: f64) -> String {
    format!("{group},{n_true},{noise_level}")
}

fn read_truth(path: &Path) -> Result<SourceConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Malformed {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Malformed {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn previous_rows(path: &Path) -> Result<HashMap<String, String>> {
    let mut out = HashMap::new();
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(out);
    };
    let mut lines = text.lines();
    if lines.next() != Some(RESULTS_HEADER) {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            reason: "unexpected header; cannot resume".into(),
        });
    }
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            // an interrupted write leaves at most one partial row
            continue;
        }
        out.insert(fields[..3].join(","), line.to_string());
    }
    Ok(out)
}

struct Row {
    noise_level: f64,
    n_true: usize,
    delta_nd: f64,
    delta_r: f64,
    cardinality_only: bool,
}

fn parse_row(line: &str) -> Row {
    let f: Vec<&str> = line.split(',').collect();
    Row {
        n_true: f[1].parse().unwrap_or(0),
        noise_level: f[2].parse().unwrap_or(f64::NAN),
        delta_nd: f[3].parse().unwrap_or(f64::NAN),
        delta_r: f[4].parse().unwrap_or(f64::NAN),
        cardinality_only: f[5] == "cardinality_only",
    }
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let sd = if xs.len() > 1 {
        (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (m, sd)
}

/// Mean and sample sd per (noise level, true count); rows flagged
/// cardinality-only are left out of the location average.
fn summarize(lines: &[String]) -> (String, String) {
    let rows: Vec<Row> = lines.iter().map(|l| parse_row(l)).collect();
    let mut levels: Vec<f64> = rows.iter().map(|r| r.noise_level).collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    let mut counts: Vec<usize> = rows.iter().map(|r| r.n_true).collect();
    counts.sort_unstable();
    counts.dedup();
    let mut csv = String::from(
        "noise_level,n_true,runs,delta_nd_mean,delta_nd_sd,delta_r_mm_mean,delta_r_mm_sd,delta_r_runs\n",
    );
    let mut table = String::from("noise\\N_D");
    for n in &counts {
        let _ = write!(table, " | {n:^28}");
    }
    table.push('\n');
    for &level in &levels {
        let _ = write!(table, "{:>9}", format!("{}%", level * 100.0));
        for &n in &counts {
            let sel: Vec<&Row> = rows.iter().filter(|r| r.noise_level == level && r.n_true == n).collect();
            let nd: Vec<f64> = sel.iter().map(|r| r.delta_nd).collect();
            let dr: Vec<f64> = sel
                .iter()
                .filter(|r| !r.cardinality_only)
                .map(|r| r.delta_r * 1e3)
                .collect();
            let (ndm, nds) = mean_sd(&nd);
            let (drm, drs) = mean_sd(&dr);
            let _ = writeln!(
                csv,
                "{level},{n},{},{ndm},{nds},{drm},{drs},{}",
                sel.len(),
                dr.len()
            );
            let _ = write!(table, " | {ndm:5.2}±{nds:4.2} ({drm:5.1}±{drs:4.1} mm)");
        }
        table.push('\n');
    }
    (csv, table)
}

fn cmd_bench(cfg: &Config, seed: u64, suite: &Path, lf_path: &Path, out: &Path, resume: bool) -> Result<()> {
    let manifest = Manifest::load(suite).map_err(|e| match e {
        Error::Io(io) => Error::Malformed { path: suite.join("manifest.json"), reason: io.to_string() },
        other => other,
    })?;
    let lf = load_leadfield(lf_path)?;
    let grid = load_grid(cfg, lf_path, &lf)?;
    if manifest.n_cells != lf.n_cells() || manifest.n_sensors != lf.n_sensors() {
        return Err(Error::DimensionMismatch(format!(
            "suite was generated for {}x{}, lead field is {}x{}",
            manifest.n_cells,
            manifest.n_sensors,
            lf.n_cells(),
            lf.n_sensors()
        )));
    }
    // truths are checked up front so a missing file fails before any sampling
    let truths = manifest
        .items
        .iter()
        .map(|e| read_truth(&suite.join(&e.truth)))
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(out)?;
    let results_path = out.join("results.csv");
    let done = if resume { previous_rows(&results_path)? } else { HashMap::new() };

    let mut file = fs::File::create(&results_path)?;
    writeln!(file, "{RESULTS_HEADER}")?;
    let mut lines = Vec::with_capacity(manifest.items.len());
    for (entry, truth) in manifest.items.iter().zip(&truths) {
        let key = row_key(entry.group, entry.n_dipoles, entry.noise_level);
        let line = match done.get(&key) {
            Some(l) => l.clone(),
            None => {
                let data = Topography::load(suite.join(&entry.file))?;
                let noise = cfg.noise.model_for_sd(entry.noise_sd)?;
                let r = run_one(cfg, &grid, &lf, &data, noise, derive_seed(seed, &entry.file))?;
                let dr = delta_r(&r.estimate, truth, &grid)?;
                let line = format!(
                    "{key},{},{},{}",
                    delta_nd(&r.estimate, truth),
                    dr.value,
                    if dr.cardinality_only { "cardinality_only" } else { "" }
                );
                eprintln!("{}: {line} ({} iterations, {:.2?})", entry.file, r.output.n_iterations(), r.output.wall_time);
                line
            }
        };
        writeln!(file, "{line}")?;
        file.flush()?;
        lines.push(line);
    }
    let (csv, table) = summarize(&lines);
    fs::write(out.join("summary.csv"), csv)?;
    println!("{table}");
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    delta_nd: i64,
    delta_r_m: f64,
    cardinality_only: bool,
}

fn cmd_eval(cfg: &Config, estimate: &Path, truth: &Path, lf_path: &Path) -> Result<()> {
    let lf = load_leadfield(lf_path)?;
    let grid = load_grid(cfg, lf_path, &lf)?;
    let text = fs::read_to_string(estimate)?;
    let mut v: serde_json::Value = serde_json::from_str(&text)?;
    if let Some(inner) = v.get_mut("estimate") {
        v = inner.take();
    }
    let est: EstimatedConfig = serde_json::from_value(v).map_err(|e| Error::Malformed {
        path: estimate.to_path_buf(),
        reason: e.to_string(),
    })?;
    let truth = read_truth(truth)?;
    let dr = delta_r(&est, &truth, &grid)?;
    let report = EvalReport {
        delta_nd: delta_nd(&est, &truth),
        delta_r_m: dr.value,
        cardinality_only: dr.cardinality_only,
    };
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_means_match_rows() {
        let lines: Vec<String> = [
            "0,1,0,0,0,",
            "1,1,0,1,0.004,",
            "0,1,0.05,-1,0,cardinality_only",
            "1,1,0.05,0,0.002,",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let (csv, _) = summarize(&lines);
        let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
        assert_eq!(rows[0][..3], ["0", "1", "2"]);
        assert_eq!(rows[0][3].parse::<f64>().unwrap(), 0.5);
        assert!((rows[0][5].parse::<f64>().unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(rows[1][3].parse::<f64>().unwrap(), -0.5);
        assert!((rows[1][5].parse::<f64>().unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(rows[1][7], "1");
    }
}
