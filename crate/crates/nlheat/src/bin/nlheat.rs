//! Command-line driver: build kernel tables, evaluate the Fourier oracle,
//! simulate the jump diffusion, and run the estimate check suite.
//!
//! Exit codes: 0 all pass, 1 check failure, 2 configuration error,
//! 3 numerical failure.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use nlheat::coefficients::{make_coefficient, Coefficient, CoefficientSpec};
use nlheat::duhamel::{
    build_kernel, build_series, duhamel_residual, extend_time, BuildOptions, ResidualForm,
};
use nlheat::estimates::{
    check_conservativeness, check_finite_range, check_lemma_inequalities, check_near_diag_lower,
    check_oracle_agreement, check_positivity, check_two_sided, write_reports, CheckReport,
};
use nlheat::oracle::{density, LevySymbol};
use nlheat::sim::{empirical_density_check, jump_log_csv, simulate, SimConfig};
use nlheat::table::SpaceTimeGrid;
use nlheat::{KernelTable, NlError};

#[derive(Parser)]
#[command(name = "nlheat", about = "heat kernel of Δ + S^b: build, check, simulate")]
struct Cli {
    /// worker thread cap (or env NLHK_THREADS)
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// coefficient spec (JSON file)
    #[arg(long)]
    coef: PathBuf,
    /// time horizon
    #[arg(long, default_value_t = 0.25)]
    t: f64,
    /// grid override "K,dx,L" (time steps, spacing, half extent)
    #[arg(long)]
    grid: Option<String>,
    /// output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// sum the Duhamel series and write the kernel table + build log
    Build {
        #[command(flatten)]
        common: Common,
        /// also dump the table as CSV
        #[arg(long)]
        csv: bool,
    },
    /// Fourier-inversion reference density on a (t, r) grid (translation
    /// invariant coefficients only)
    Oracle {
        #[command(flatten)]
        common: Common,
    },
    /// Monte Carlo paths: summary statistics JSON + jump log CSV
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10_000)]
        paths: usize,
        #[arg(long, default_value_t = 1e-3)]
        dt: f64,
        /// small-jump cutoff
        #[arg(long, default_value_t = 0.05)]
        eps: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// compare the empirical law at t against this kernel table
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// build and run the estimate check suite, JSONL to stdout and disk
    Check {
        #[command(flatten)]
        common: Common,
        /// run only checks whose id starts with this prefix
        #[arg(long)]
        only: Option<String>,
    },
    /// summarize a checks.jsonl produced by `check`
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    let threads = cli.threads.or_else(|| {
        std::env::var("NLHK_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = threads {
        if rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .is_err()
        {
            eprintln!("warning: thread pool already initialized, --threads ignored");
        }
    }
    match run(cli.command) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

fn load_coef(path: &Path) -> Result<(CoefficientSpec, Coefficient), NlError> {
    let text = fs::read_to_string(path)?;
    let spec = CoefficientSpec::from_json(&text)?;
    let coef = make_coefficient(&spec)?;
    Ok((spec, coef))
}

fn parse_grid(s: &str) -> Result<(usize, f64, f64), NlError> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(NlError::config("grid override must be \"K,dx,L\""));
    }
    let k = parts[0]
        .trim()
        .parse()
        .map_err(|_| NlError::config("bad K in grid override"))?;
    let dx = parts[1]
        .trim()
        .parse()
        .map_err(|_| NlError::config("bad dx in grid override"))?;
    let l = parts[2]
        .trim()
        .parse()
        .map_err(|_| NlError::config("bad L in grid override"))?;
    Ok((k, dx, l))
}

fn ensure_out(dir: &Path) -> Result<(), NlError> {
    fs::create_dir_all(dir)?;
    Ok(())
}

/// Build to the requested horizon, honoring an explicit grid override.
fn build(coef: &Coefficient, t: f64, grid: &Option<String>) -> Result<(KernelTable, serde_json::Value), NlError> {
    let opts = BuildOptions::default();
    if let Some(spec) = grid {
        let (k, dx, l) = parse_grid(spec)?;
        let g = SpaceTimeGrid::new(coef.params, t, k, dx, l)?;
        let (table, log) = build_series(coef, &g, &opts)?;
        Ok((table, serde_json::to_value(&log)?))
    } else {
        let (mut table, mut log) = build_kernel(coef, t, &opts)?;
        // trim overshoot bookkeeping: keep the table as built, note horizon
        if table.grid.horizon() < t {
            table = extend_time(&table, 2.0 * table.grid.horizon())?;
            log.extensions += 1;
        }
        Ok((table, serde_json::to_value(&log)?))
    }
}

fn run(cmd: Command) -> Result<i32, NlError> {
    match cmd {
        Command::Build { common, csv } => {
            ensure_out(&common.out)?;
            let (spec, coef) = load_coef(&common.coef)?;
            let (table, build_log) = build(&coef, common.t, &common.grid)?;
            table.save(&common.out.join("table.nlhk"))?;
            let mut residuals = serde_json::Map::new();
            if table.translation_invariant() {
                residuals.insert(
                    "duhamel_first".into(),
                    json!(duhamel_residual(&table, &coef, ResidualForm::First)?),
                );
                if coef.params.d == 1 {
                    residuals.insert(
                        "duhamel_second".into(),
                        json!(duhamel_residual(&table, &coef, ResidualForm::Second)?),
                    );
                }
            }
            let positivity = check_positivity(&table, coef.nonneg);
            let log = json!({
                "command": "build",
                "coef_path": common.coef,
                "coef_hash": spec.content_hash(),
                "requested_horizon": common.t,
                "grid_override": common.grid,
                "construction": build_log,
                "residuals": residuals,
                "positivity": positivity,
            });
            fs::write(
                common.out.join("build_log.json"),
                serde_json::to_string_pretty(&log)?,
            )?;
            if csv {
                let mut f = std::io::BufWriter::new(fs::File::create(common.out.join("table.csv"))?);
                table.export_csv(&mut f)?;
            }
            println!("wrote {}", common.out.join("table.nlhk").display());
            Ok(0)
        }
        Command::Oracle { common } => {
            ensure_out(&common.out)?;
            let (spec, coef) = load_coef(&common.coef)?;
            if !coef.translation_invariant {
                return Err(NlError::config(
                    "the Fourier oracle needs a translation-invariant coefficient",
                ));
            }
            let grid = match &common.grid {
                Some(s) => {
                    let (k, dx, l) = parse_grid(s)?;
                    SpaceTimeGrid::new(coef.params, common.t, k, dx, l)?
                }
                None => SpaceTimeGrid::default_for_coef(coef.params, common.t, coef.support_radius)?,
            };
            let arc = std::sync::Arc::new(coef.clone());
            let sym = LevySymbol::from_coefficient(&arc)?.tabulated_for_time(grid.times[0]);
            let path = common.out.join("oracle.csv");
            let mut f = std::io::BufWriter::new(fs::File::create(&path)?);
            use std::io::Write;
            writeln!(f, "t,r,p")?;
            use rayon::prelude::*;
            let radii: Vec<f64> = grid.axis().into_iter().filter(|&r| r >= 0.0).collect();
            for &t in &grid.times {
                let row: Vec<f64> = radii.par_iter().map(|&r| density(&sym, t, r)).collect();
                for (&r, &p) in radii.iter().zip(&row) {
                    writeln!(f, "{t},{r},{p}")?;
                }
            }
            let log = json!({
                "command": "oracle",
                "coef_hash": spec.content_hash(),
                "horizon": common.t,
                "k_steps": grid.k_steps(),
                "dx": grid.dx,
                "half_extent": grid.half_extent,
            });
            fs::write(common.out.join("oracle_log.json"), serde_json::to_string_pretty(&log)?)?;
            println!("wrote {}", path.display());
            Ok(0)
        }
        Command::Simulate {
            common,
            paths,
            dt,
            eps,
            seed,
            table,
        } => {
            ensure_out(&common.out)?;
            let (spec, coef) = load_coef(&common.coef)?;
            let cfg = SimConfig::new(paths, dt, eps, seed, common.t);
            let x0 = vec![0.0; coef.params.d];
            let run = simulate(&coef, &cfg, &x0)?;
            let k = run.time_index(common.t)?;
            let n = run.paths.len() as f64;
            let mut var = vec![0.0f64; run.d];
            for p in 0..run.paths.len() {
                let pos = run.position(p, k);
                for a in 0..run.d {
                    var[a] += (pos[a] - x0[a]).powi(2) / n;
                }
            }
            let jumps: usize = run.paths.iter().map(|p| p.jumps.len()).sum();
            let ks = match &table {
                Some(path) => {
                    let tb = KernelTable::load(path)?;
                    let (d, se) = empirical_density_check(&run, &tb, common.t)?;
                    Some(json!({"ks": d, "se": se}))
                }
                None => None,
            };
            let stats = json!({
                "command": "simulate",
                "coef_hash": spec.content_hash(),
                "config": cfg,
                "t": common.t,
                "variance_per_axis": var,
                "jump_rate": run.jump_rate,
                "acceptance_rate": run.acceptance_rate,
                "truncated_tail_mass": run.truncated_tail_mass,
                "total_jumps": jumps,
                "density_check": ks,
            });
            fs::write(
                common.out.join("sim_stats.json"),
                serde_json::to_string_pretty(&stats)?,
            )?;
            let mut f = std::io::BufWriter::new(fs::File::create(common.out.join("jumps.csv"))?);
            jump_log_csv(&run, &mut f)?;
            println!("{}", serde_json::to_string(&stats)?);
            Ok(0)
        }
        Command::Check { common, only } => {
            ensure_out(&common.out)?;
            let (spec, coef) = load_coef(&common.coef)?;
            let (table, _) = build(&coef, common.t, &common.grid)?;
            let mut reports: Vec<CheckReport> = Vec::new();
            reports.push(check_conservativeness(&table, &coef, 2e-3));
            reports.push(check_near_diag_lower(&table, 0.5));
            reports.push(check_positivity(&table, coef.nonneg));
            reports.push(check_two_sided(&table, &coef, 1e4));
            if coef.translation_invariant {
                let arc = std::sync::Arc::new(coef.clone());
                let sym = LevySymbol::from_coefficient(&arc)?;
                let t_hi = table.grid.horizon();
                reports.push(check_oracle_agreement(&table, &sym, t_hi / 5.0, t_hi, 4.0, 0.02)?);
            }
            if coef.support_radius.is_finite() && coef.support_radius > 0.0 && coef.sup_norm > 0.0 {
                reports.extend(check_finite_range(&table, &coef, common.t, 50.0, 2.0)?);
            }
            reports.extend(check_lemma_inequalities(coef.params));
            if let Some(prefix) = &only {
                reports.retain(|r| r.check_id.starts_with(prefix.as_str()));
                if reports.is_empty() {
                    return Err(NlError::config(format!("no check matches --only {prefix}")));
                }
            }
            let mut out = std::io::stdout().lock();
            write_reports(&reports, &mut out)?;
            let mut f = std::io::BufWriter::new(fs::File::create(common.out.join("checks.jsonl"))?);
            write_reports(&reports, &mut f)?;
            let meta = json!({
                "command": "check",
                "coef_hash": spec.content_hash(),
                "horizon": common.t,
                "grid_override": common.grid,
                "checks": reports.len(),
            });
            fs::write(common.out.join("check_log.json"), serde_json::to_string_pretty(&meta)?)?;
            Ok(if reports.iter().all(|r| r.verdict) { 0 } else { 1 })
        }
        Command::Report { out } => {
            let text = fs::read_to_string(out.join("checks.jsonl"))?;
            let mut all_pass = true;
            for line in text.lines() {
                if line.trim().is_empty() {
                    continue;
                }
                let v: serde_json::Value = serde_json::from_str(line)?;
                let id = v["check_id"].as_str().unwrap_or("?");
                let verdict = v["verdict"].as_bool().unwrap_or(false);
                let margin = v["margin"].as_f64().unwrap_or(f64::NAN);
                all_pass &= verdict;
                println!(
                    "{:<24} {} (margin {:+.3e})",
                    id,
                    if verdict { "PASS" } else { "FAIL" },
                    margin
                );
            }
            Ok(if all_pass { 0 } else { 1 })
        }
    }
}
