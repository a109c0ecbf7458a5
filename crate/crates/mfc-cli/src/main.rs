//! Command-line front end: generate scenarios, solve them, render density
//! heatmaps, and export kernels.
//!
//! Exit codes: 0 success, 1 usage or internal error, 2 infeasible
//! constraint, 3 solver did not converge (outputs are still written),
//! 4 file I/O error.

mod density;
mod render;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use mfc_core::kernel::{build_cost_matrix, build_kernel, build_kernels, write_coo_csv};
use mfc_core::scenario::{generate_example, parse_scenario_with_base, render_scenario, Problem};
use mfc_core::solver::{
    problem_hash, read_checkpoint, solve_view, write_checkpoint, ProblemView, Resume, SolveError,
    SolveHooks, SolveOptions, Solution, SweepRecord,
};

#[derive(Parser)]
#[command(
    name = "mfc",
    version,
    about = "Multispecies density-steering solver on terrain grids"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the built-in three-species search-and-rescue coverage scenario.
    Generate(GenerateArgs),
    /// Solve a scenario and write density trajectories.
    Solve(SolveArgs),
    /// Render solve outputs as portable-pixmap heatmaps.
    Render(RenderArgs),
    /// Export a species' movement costs or kernel as a coordinate list.
    KernelExport(KernelExportArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Grid side length (cells per side, at least 10).
    #[arg(long, default_value_t = 100)]
    grid: usize,
    /// Number of time steps (at least 2).
    #[arg(long, default_value_t = 60)]
    horizon: usize,
    /// Output scenario path.
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct SolveArgs {
    /// Scenario document to solve.
    #[arg(long)]
    scenario: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Convergence tolerance.
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 5000)]
    max_sweeps: usize,
    /// Override the scenario's entropic regularization.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Worker threads (falls back to the MFC_THREADS variable, then 1).
    #[arg(long)]
    threads: Option<usize>,
    /// Force strictly sequential arithmetic (same as --threads 1).
    #[arg(long)]
    deterministic: bool,
    /// Run in the log domain (for small epsilon or coarse grids).
    #[arg(long)]
    log_domain: bool,
    /// Keep every Nth convergence record.
    #[arg(long, default_value_t = 1)]
    record_every: usize,
    /// Write checkpoints: `every=N`.
    #[arg(long)]
    checkpoint: Option<String>,
    /// Resume from a checkpoint file written by a previous run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    /// Directory holding solve outputs (manifest.json and CSVs).
    #[arg(long)]
    solution: PathBuf,
    /// Output directory for images (defaults to the solution directory).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Scenario path override (defaults to the path in the manifest).
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Fixed color-scale maximum (the congestion bound by default).
    #[arg(long, default_value_t = 1.0)]
    max: f64,
    /// Number of time columns in the summary strip (0 disables the strip).
    #[arg(long, default_value_t = 7)]
    strip: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExportKind {
    Cost,
    Kernel,
}

#[derive(Args)]
struct KernelExportArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// 1-based species id.
    #[arg(long)]
    species: usize,
    #[arg(long, value_enum, default_value_t = ExportKind::Cost)]
    kind: ExportKind,
    #[arg(short, long)]
    out: PathBuf,
}

const EXIT_INFEASIBLE: u8 = 2;
const EXIT_NO_CONVERGENCE: u8 = 3;
const EXIT_IO: u8 = 4;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Solve(args) => cmd_solve(args),
        Command::Render(args) => cmd_render(args),
        Command::KernelExport(args) => cmd_kernel_export(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn io_fail(context: String, e: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {context}: {e}");
    ExitCode::from(EXIT_IO)
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

fn load_problem(path: &Path) -> Result<Result<Problem, ExitCode>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            return Ok(Err(io_fail(format!("reading {}", path.display()), e)));
        }
    };
    let base = path.parent().unwrap_or(Path::new("."));
    let problem = parse_scenario_with_base(&text, base)
        .with_context(|| format!("parsing {}", path.display()))?;
    Ok(Ok(problem))
}

fn cmd_generate(args: GenerateArgs) -> Result<ExitCode> {
    let problem = generate_example(args.grid, args.horizon)?;
    let text = render_scenario(&problem);
    if let Err(e) = fs::write(&args.out, text) {
        return Ok(io_fail(format!("writing {}", args.out.display()), e));
    }
    eprintln!(
        "wrote {} ({}x{} cells, {} steps, {} species)",
        args.out.display(),
        problem.grid.width,
        problem.grid.height,
        problem.horizon,
        problem.num_species()
    );
    Ok(ExitCode::SUCCESS)
}

fn parse_checkpoint_interval(spec: &str) -> Result<usize> {
    let value = spec
        .strip_prefix("every=")
        .ok_or_else(|| anyhow!("expected `every=N`, got `{spec}`"))?;
    let every: usize = value.parse().context("checkpoint interval")?;
    if every == 0 {
        bail!("checkpoint interval must be positive");
    }
    Ok(every)
}

fn cmd_solve(args: SolveArgs) -> Result<ExitCode> {
    let mut problem = match load_problem(&args.scenario)? {
        Ok(p) => p,
        Err(code) => return Ok(code),
    };
    if let Some(eps) = args.epsilon {
        problem.epsilon = eps;
        problem.validate()?;
    }

    let threads = if args.deterministic {
        1
    } else {
        args.threads
            .or_else(|| {
                std::env::var("MFC_THREADS")
                    .ok()
                    .and_then(|v| v.parse().ok())
            })
            .unwrap_or(1)
    };
    if threads > 1 {
        // Ignore the error if a pool already exists (repeat calls in tests).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    let options = SolveOptions {
        tol: args.tol,
        max_sweeps: args.max_sweeps,
        log_domain: args.log_domain,
        record_every: args.record_every,
        threads,
    };
    let hash = problem_hash(&problem, options.log_domain);

    if let Err(e) = fs::create_dir_all(&args.out) {
        return Ok(io_fail(format!("creating {}", args.out.display()), e));
    }

    let resume = match &args.resume {
        Some(path) => {
            let file = match fs::File::open(path) {
                Ok(f) => f,
                Err(e) => return Ok(io_fail(format!("reading {}", path.display()), e)),
            };
            let (state, sweeps_done, saved_hash) =
                read_checkpoint(std::io::BufReader::new(file))?;
            if saved_hash != hash {
                bail!(
                    "checkpoint {} belongs to a different problem or domain",
                    path.display()
                );
            }
            eprintln!("resuming after sweep {sweeps_done}");
            Some(Resume { state, sweeps_done })
        }
        None => None,
    };

    let mut written: Vec<String> = Vec::new();
    let checkpoint_every = match &args.checkpoint {
        Some(spec) => parse_checkpoint_interval(spec)?,
        None => 0,
    };
    let out_dir = args.out.clone();
    let mut checkpoint_files: Vec<String> = Vec::new();
    let mut checkpoint_error: Option<std::io::Error> = None;
    let mut on_checkpoint = |sweep: usize, state: &mfc_core::propagation::ScalingState| {
        let name = format!("checkpoint_{sweep}.bin");
        let path = out_dir.join(&name);
        let result = fs::File::create(&path)
            .and_then(|f| write_checkpoint(std::io::BufWriter::new(f), state, sweep, hash));
        match result {
            Ok(()) => checkpoint_files.push(name),
            Err(e) => checkpoint_error = Some(e),
        }
    };
    let mut hooks = SolveHooks {
        checkpoint_every,
        ..SolveHooks::default()
    };
    if checkpoint_every > 0 {
        hooks.on_checkpoint = Some(&mut on_checkpoint);
    }

    let started = unix_now();
    let wall = Instant::now();
    let view = ProblemView::from(&problem);
    let kernels = build_kernels(&problem);
    let solution = match solve_view(&view, &kernels, &options, resume, hooks) {
        Ok(s) => s,
        Err(e @ SolveError::Infeasible { .. }) => {
            eprintln!("error: {e}");
            return Ok(ExitCode::from(EXIT_INFEASIBLE));
        }
        Err(e) => return Err(e.into()),
    };
    let finished = unix_now();
    if let Some(e) = checkpoint_error {
        return Ok(io_fail("writing checkpoint".into(), e));
    }
    written.extend(checkpoint_files);

    match write_outputs(
        &args, &problem, &options, &solution, hash, started, finished, written,
    ) {
        Ok(()) => {}
        Err(e) => return Ok(io_fail("writing outputs".into(), e)),
    }
    eprintln!(
        "{} after {} sweeps in {:.1?} (residual {:.3e}, log change {:.3e})",
        if solution.converged {
            "converged"
        } else {
            "did not converge"
        },
        solution.sweeps_used,
        wall.elapsed(),
        solution
            .residual_history
            .last()
            .map(|r| r.max_residual)
            .unwrap_or(f64::NAN),
        solution
            .residual_history
            .last()
            .map(|r| r.max_log_change)
            .unwrap_or(f64::NAN),
    );
    if solution.converged {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(EXIT_NO_CONVERGENCE))
    }
}

#[allow(clippy::too_many_arguments)]
fn write_outputs(
    args: &SolveArgs,
    problem: &Problem,
    options: &SolveOptions,
    solution: &Solution,
    hash: u64,
    started: f64,
    finished: f64,
    mut written: Vec<String>,
) -> std::io::Result<()> {
    let grid = &problem.grid;
    let (width, height) = (grid.width, grid.height);
    let num_species = problem.num_species();

    for j in 0..=problem.horizon {
        let name = format!("total_t{j}.csv");
        let mut f = std::io::BufWriter::new(fs::File::create(args.out.join(&name))?);
        density::write_density(
            &mut f,
            width,
            height,
            j,
            0,
            solution.totals[j].as_slice().unwrap(),
        )
        .map_err(std::io::Error::other)?;
        written.push(name);
        for l in 0..num_species {
            let name = format!("species{}_t{j}.csv", l + 1);
            let mut f = std::io::BufWriter::new(fs::File::create(args.out.join(&name))?);
            let row = solution.species_marginals[j].row(l).to_vec();
            density::write_density(&mut f, width, height, j, l + 1, &row)
                .map_err(std::io::Error::other)?;
            written.push(name);
        }
    }

    let mut conv = std::io::BufWriter::new(fs::File::create(args.out.join("convergence.jsonl"))?);
    for SweepRecord {
        sweep,
        max_residual,
        max_log_change,
    } in &solution.residual_history
    {
        let line = serde_json::json!({
            "sweep": sweep,
            "max_residual": max_residual,
            "max_log_change": max_log_change,
        });
        writeln!(conv, "{line}")?;
    }
    drop(conv);
    written.push("convergence.jsonl".into());

    let total_masses: Vec<f64> = solution.totals.iter().map(|t| t.sum()).collect();
    let species_masses: Vec<Vec<f64>> = (0..num_species)
        .map(|l| {
            solution
                .species_marginals
                .iter()
                .map(|m| m.row(l).sum())
                .collect()
        })
        .collect();
    written.push("manifest.json".into());
    let last = solution.residual_history.last();
    let manifest = serde_json::json!({
        "scenario": args.scenario.display().to_string(),
        "scenario_hash": format!("{hash:016x}"),
        "options": {
            "tol": options.tol,
            "max_sweeps": options.max_sweeps,
            "epsilon": problem.epsilon,
            "log_domain": options.log_domain,
            "threads": options.threads,
            "record_every": options.record_every,
        },
        "started_unix": started,
        "finished_unix": finished,
        "grid": { "width": width, "height": height },
        "horizon": problem.horizon,
        "num_species": num_species,
        "sweeps_used": solution.sweeps_used,
        "converged": solution.converged,
        "final_max_residual": last.map(|r| r.max_residual),
        "final_max_log_change": last.map(|r| r.max_log_change),
        "masses": { "total": total_masses, "species": species_masses },
        "files": written,
    });
    fs::write(
        args.out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    Ok(())
}

fn cmd_render(args: RenderArgs) -> Result<ExitCode> {
    let manifest_path = args.solution.join("manifest.json");
    let manifest: serde_json::Value = match fs::read_to_string(&manifest_path) {
        Ok(text) => serde_json::from_str(&text)
            .with_context(|| format!("parsing {}", manifest_path.display()))?,
        Err(e) => return Ok(io_fail(format!("reading {}", manifest_path.display()), e)),
    };
    let scenario_path = match &args.scenario {
        Some(p) => p.clone(),
        None => PathBuf::from(
            manifest["scenario"]
                .as_str()
                .context("manifest lacks a scenario path")?,
        ),
    };
    let problem = match load_problem(&scenario_path)? {
        Ok(p) => p,
        Err(code) => return Ok(code),
    };
    let horizon = manifest["horizon"]
        .as_u64()
        .context("manifest lacks horizon")? as usize;
    let num_species = manifest["num_species"]
        .as_u64()
        .context("manifest lacks num_species")? as usize;
    let out_dir = args.out.clone().unwrap_or_else(|| args.solution.clone());
    if let Err(e) = fs::create_dir_all(&out_dir) {
        return Ok(io_fail(format!("creating {}", out_dir.display()), e));
    }

    let grid = &problem.grid;
    let load = |name: String, time: usize, species: usize| -> Result<Option<Vec<f64>>> {
        let f = match fs::File::open(args.solution.join(&name)) {
            Ok(f) => f,
            Err(e) => {
                eprintln!("error: missing solve output {name}: {e}");
                return Ok(None);
            }
        };
        let data = density::read_density(std::io::BufReader::new(f))?;
        if data.width != grid.width || data.height != grid.height {
            bail!("{name}: dimensions do not match the scenario grid");
        }
        if data.time != time || data.species != species {
            bail!("{name}: header does not match the file name");
        }
        Ok(Some(data.values))
    };

    // Per-frame images, keeping the frames the strip needs.
    let strip_cols = args.strip.min(horizon + 1);
    let strip_times: Vec<usize> = if strip_cols > 1 {
        (0..strip_cols)
            .map(|c| c * horizon / (strip_cols - 1))
            .collect()
    } else {
        vec![horizon]
    };
    let mut strip_frames: Vec<Vec<Vec<render::Rgb>>> = vec![Vec::new(); num_species + 1];
    for j in 0..=horizon {
        for layer in 0..=num_species {
            let name = if layer == 0 {
                format!("total_t{j}.csv")
            } else {
                format!("species{layer}_t{j}.csv")
            };
            let values = match load(name, j, layer)? {
                Some(v) => v,
                None => return Ok(ExitCode::from(EXIT_IO)),
            };
            let pixels = render::frame_pixels(grid, &values, layer, args.max);
            let out_name = if layer == 0 {
                format!("render_total_t{j}.ppm")
            } else {
                format!("render_species{layer}_t{j}.ppm")
            };
            let mut f = std::io::BufWriter::new(fs::File::create(out_dir.join(out_name))?);
            render::write_ppm(&mut f, grid.width, grid.height, &pixels)?;
            if args.strip > 0 && strip_times.contains(&j) {
                strip_frames[layer].push(pixels);
            }
        }
    }
    if args.strip > 0 {
        let strip = render::compose_strip(grid, &strip_frames);
        let mut f = std::io::BufWriter::new(fs::File::create(out_dir.join("strip.ppm"))?);
        render::write_ppm(&mut f, strip.width, strip.height, &strip.pixels)?;
    }
    eprintln!(
        "rendered {} frames into {}",
        (horizon + 1) * (num_species + 1),
        out_dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_kernel_export(args: KernelExportArgs) -> Result<ExitCode> {
    let problem = match load_problem(&args.scenario)? {
        Ok(p) => p,
        Err(code) => return Ok(code),
    };
    if args.species == 0 || args.species > problem.num_species() {
        bail!("species id must be in 1..={}", problem.num_species());
    }
    let l = args.species - 1;
    let cost = build_cost_matrix(&problem.grid, &problem.species[l], l);
    let mat = match args.kind {
        ExportKind::Cost => cost.mat,
        ExportKind::Kernel => build_kernel(&cost, problem.epsilon).fwd,
    };
    let f = match fs::File::create(&args.out) {
        Ok(f) => f,
        Err(e) => return Ok(io_fail(format!("writing {}", args.out.display()), e)),
    };
    write_coo_csv(&mat, std::io::BufWriter::new(f))?;
    eprintln!("wrote {} ({} entries)", args.out.display(), mat.nnz());
    Ok(ExitCode::SUCCESS)
}
