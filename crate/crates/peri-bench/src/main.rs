//! Command-line driver: one subcommand per benchmark.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use peri_lps::bench::{run, BenchmarkSpec, Normals, ProblemId};
use peri_lps::Exec;

#[derive(Parser, Debug)]
#[command(name = "peri-bench", version, about = "Run LPS peridynamics benchmarks and write CSV/JSON results")]
struct Cli {
    #[command(subcommand)]
    problem: Problem,
    #[command(flatten)]
    opts: Opts,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Problem {
    /// Linear patch, Dirichlet everywhere
    Patch1,
    /// Linear patch, traction on the top edge
    Patch2,
    /// Linear patch, traction on top and right edges
    Patch3,
    Manufactured1,
    Manufactured2,
    Manufactured3,
    /// Traction-free hole in a square under remote tension
    Hole,
    /// Pressurized annulus
    Disk,
    /// Circular inclusion in a matrix
    Composite,
    /// Pre-cracked glass plate under tension
    GlassBranch,
    /// V-notched glass under impact
    Vnotch,
    /// Expanding ring fragmentation
    Ring,
}

impl Problem {
    fn id(self) -> ProblemId {
        match self {
            Problem::Patch1 => ProblemId::Patch1,
            Problem::Patch2 => ProblemId::Patch2,
            Problem::Patch3 => ProblemId::Patch3,
            Problem::Manufactured1 => ProblemId::Manufactured1,
            Problem::Manufactured2 => ProblemId::Manufactured2,
            Problem::Manufactured3 => ProblemId::Manufactured3,
            Problem::Hole => ProblemId::Hole,
            Problem::Disk => ProblemId::Disk,
            Problem::Composite => ProblemId::Composite,
            Problem::GlassBranch => ProblemId::GlassBranch,
            Problem::Vnotch => ProblemId::Vnotch,
            Problem::Ring => ProblemId::Ring,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum NormalsArg {
    Estimated,
    Exact,
}

#[derive(Args, Debug, Default)]
struct Opts {
    /// TOML file with any BenchmarkSpec fields; flags override it
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    h: Option<f64>,
    /// Comma-separated resolutions for a convergence study
    #[arg(long, global = true, value_delimiter = ',')]
    h_list: Option<Vec<f64>>,
    /// Horizon over spacing, δ = M h
    #[arg(long, global = true)]
    m_ratio: Option<f64>,
    #[arg(long, global = true)]
    nu: Option<f64>,
    #[arg(long, global = true)]
    youngs: Option<f64>,
    /// Random point perturbation as a fraction of h
    #[arg(long, global = true)]
    perturb: Option<f64>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Perturbed runs average the errors over this many seeds
    #[arg(long, global = true)]
    seeds: Option<u64>,
    #[arg(long, global = true, value_enum)]
    normals: Option<NormalsArg>,
    #[arg(long, global = true)]
    dt: Option<f64>,
    #[arg(long, global = true)]
    t_end: Option<f64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Write a field snapshot every N steps (0 = none)
    #[arg(long, global = true)]
    dump_fields: Option<usize>,
    /// Sample damage for crack features every N steps
    #[arg(long, global = true)]
    feature_every: Option<usize>,
    /// Ring particle count (sets h)
    #[arg(long, global = true)]
    particles: Option<usize>,
    /// Run the per-point loops on one thread
    #[arg(long, global = true)]
    sequential: bool,
}

fn build_spec(problem: ProblemId, o: &Opts) -> Result<BenchmarkSpec> {
    let mut s = match &o.config {
        Some(path) => {
            let s = BenchmarkSpec::load(path).with_context(|| format!("reading {}", path.display()))?;
            anyhow::ensure!(s.problem == problem, "config is for {} but the subcommand is {problem}", s.problem);
            s
        }
        None => BenchmarkSpec::for_problem(problem),
    };
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = o.$f.clone() { s.$f = v; })* };
    }
    set!(h, h_list, m_ratio, nu, youngs, perturb, seed, seeds, dt, t_end, out, dump_fields, feature_every);
    if o.h.is_some() && o.h_list.is_none() {
        s.h_list.clear();
    }
    if let Some(n) = o.particles {
        s.particles = Some(n);
    }
    if let Some(n) = o.normals {
        s.normals = match n {
            NormalsArg::Estimated => Normals::Estimated,
            NormalsArg::Exact => Normals::Exact,
        };
    }
    s.validate()?;
    Ok(s)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let spec = build_spec(cli.problem.id(), &cli.opts)?;
    let exec = if cli.opts.sequential { Exec::Sequential } else { Exec::Parallel };
    let summary = run(&spec, exec).with_context(|| format!("running {}", spec.problem))?;
    if let Some(t) = &summary.table {
        println!("{:>12} {:>12} {:>14} {:>14}", "h", "delta", "err_u_l2", "err_theta_l2");
        for r in &t.rows {
            println!("{:>12.5e} {:>12.5e} {:>14.6e} {:>14.6e}", r.h, r.delta, r.err_u, r.err_theta);
        }
        if t.rows.len() > 1 {
            println!("slope_u = {:.3}  slope_theta = {:.3}", t.slope_u, t.slope_theta);
        }
    }
    if let Some(f) = &summary.features {
        println!("{}", serde_json::to_string_pretty(f)?);
    }
    for f in &summary.files {
        log::info!("wrote {}", f.display());
    }
    Ok(())
}
