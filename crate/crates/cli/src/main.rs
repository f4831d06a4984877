#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chemo_limit::diagnostics::{dissipation, initial_layer, lyapunov, mass, ManifoldKind};
use chemo_limit::dynamics::{simulate, ModelParams, Regime, State};
use chemo_limit::experiments::{
    emit_csv, energy_check, run_ids_sweep, run_pes_sweep, FitOutcome, Metric, RateReport, FLOOR_FACTOR,
};
use chemo_limit::operators::{elliptic_solve, resolvent_by_semigroup};
use chemo_limit::{Error, Field64, State64};
use clap::{Parser, Subcommand};

use config::{ConfigError, RunConfig, SignalInit};

/// Simulation and singular-limit rate checks for indirect-signalling
/// chemotaxis.
///
/// Exit codes: 0 success, 1 check failed or I/O error, 2 configuration
/// error, 3 rate fit rejected, 4 trajectory failure.
#[derive(Parser)]
#[command(name = "chemo-limit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// INI run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output.dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for sweeps.
    #[arg(long, global = true, env = "CHEMO_LIMIT_THREADS")]
    threads: Option<usize>,
    /// Seed for random initial profiles; overrides `initial.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// One trajectory: state snapshots and energy series as CSV.
    Simulate,
    /// Relaxed vs parabolic-elliptic sweep over eps.
    PesRates,
    /// Relaxed vs Keller-Segel sweep over (eps, tau).
    IdsRates,
    /// Energy identity defect at dt and dt/2.
    EnergyCheck,
    /// Semigroup quadrature of the resolvent against the direct solve.
    SemigroupCheck,
}

enum Failure {
    Check(String),
    Io(String),
    Config(String),
    Fit(String),
    Run(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Check(_) | Failure::Io(_) => 1,
            Failure::Config(_) => 2,
            Failure::Fit(_) => 3,
            Failure::Run(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Check(m) | Failure::Io(m) | Failure::Config(m) | Failure::Fit(m) | Failure::Run(m) => m,
        }
    }

    fn core(path: &Path, e: Error) -> Self {
        let m = format!("{}: {e}", path.display());
        match e {
            Error::InsufficientPoints(_) => Failure::Fit(m),
            Error::RunFailed { .. } | Error::NegativeDensity { .. } | Error::SolverDiverged { .. } => Failure::Run(m),
            Error::Io(_) | Error::MalformedReport(_) => Failure::Io(m),
            _ => Failure::Config(m),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

struct Context {
    path: PathBuf,
    cfg: RunConfig,
    out_dir: PathBuf,
}

impl Context {
    fn output(&self, suffix: &str) -> Result<PathBuf, Failure> {
        std::fs::create_dir_all(&self.out_dir).map_err(|e| Failure::Io(format!("{}: {e}", self.out_dir.display())))?;
        Ok(self.out_dir.join(format!("{}_{suffix}", self.cfg.prefix)))
    }

    fn core<T>(&self, r: chemo_limit::Result<T>) -> Result<T, Failure> {
        r.map_err(|e| Failure::core(&self.path, e))
    }

    fn manifold(&self) -> ManifoldKind<f64> {
        match self.cfg.regime {
            Regime::IdsLimit => ManifoldKind::Ids,
            _ => ManifoldKind::Pes { tau: self.cfg.tau },
        }
    }

    fn initial_state(&self) -> Result<State64, Failure> {
        let grid = self.core(self.cfg.grid.build())?;
        let n0 = self.core(self.cfg.n0.sample(&grid))?;
        let layer = self.core(initial_layer(&n0, &n0, &n0, self.manifold()))?;
        let pick = |s: &SignalInit, limit: &Field64| match s {
            SignalInit::Manifold => Ok(limit.clone()),
            SignalInit::Profile(p) => self.core(p.sample(&grid)),
        };
        let c0 = pick(&self.cfg.c0, &layer.c_limit0)?;
        let w0 = pick(&self.cfg.w0, &layer.w_limit0)?;
        self.core(State::new(0.0, n0, c0, w0))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn run(cli: &Cli) -> Outcome {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Config(format!("--threads {n}: {e}")))?;
    }
    let path = cli
        .config
        .clone()
        .ok_or_else(|| Failure::Config("--config <path> is required".into()))?;
    let cfg = RunConfig::load(&path, cli.seed)?;
    let out_dir = cli.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    let ctx = Context { path, cfg, out_dir };
    match cli.command {
        Command::Simulate => cmd_simulate(&ctx),
        Command::PesRates => cmd_rates(&ctx, "pes"),
        Command::IdsRates => cmd_rates(&ctx, "ids"),
        Command::EnergyCheck => cmd_energy_check(&ctx),
        Command::SemigroupCheck => cmd_semigroup_check(&ctx),
    }
}

fn cmd_simulate(ctx: &Context) -> Outcome {
    let cfg = &ctx.cfg;
    let init = ctx.initial_state()?;
    let (eps, tau) = match cfg.regime {
        Regime::Full { eps, tau } => (eps, tau),
        // residual terms of D vanish on the manifold
        Regime::PesLimit { tau } => (f64::INFINITY, tau),
        Regime::IdsLimit => (f64::INFINITY, 0.0),
    };
    let states_path = ctx.output("states.csv")?;
    let energy_path = ctx.output("energy.csv")?;
    let mut states = BufWriter::new(File::create(&states_path)?);
    let mut energy = BufWriter::new(File::create(&energy_path)?);
    writeln!(states, "t,node,x,y,n,c,w")?;
    writeln!(energy, "t,energy,dissipation,mass")?;

    let mut failure: Option<Failure> = None;
    let mut record = |_: usize, s: &State64| {
        if failure.is_some() {
            return;
        }
        let row = (|| -> Result<(), Failure> {
            let grid = s.grid();
            for i in 0..grid.len() {
                let p = grid.position(i);
                writeln!(
                    states,
                    "{:.16e},{i},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                    s.t,
                    p[0],
                    p[1],
                    s.n.values()[i],
                    s.c.values()[i],
                    s.w.values()[i]
                )?;
            }
            let e = ctx.core(lyapunov(s, tau))?;
            let d = ctx.core(dissipation(s, eps, tau))?;
            let m = ctx.core(mass(s))?;
            writeln!(energy, "{:.16e},{e:.16e},{d:.16e},{m:.16e}", s.t)?;
            Ok(())
        })();
        failure = row.err();
    };
    let traj = ctx.core(simulate(
        &ModelParams::new(cfg.regime, cfg.dt, cfg.t_end),
        &init,
        cfg.stride,
        &mut [&mut record],
    ))?;
    if let Some(f) = failure {
        return Err(f);
    }
    states.flush()?;
    energy.flush()?;
    println!(
        "{} steps, {} snapshots -> {}, {}",
        traj.steps,
        traj.samples,
        states_path.display(),
        energy_path.display()
    );
    Ok(())
}

fn cmd_rates(ctx: &Context, kind: &str) -> Outcome {
    let sweep = ctx.cfg.sweep_config(&ctx.path, kind)?;
    let report = ctx.core(if kind == "pes" {
        run_pes_sweep(&sweep)
    } else {
        run_ids_sweep(&sweep)
    })?;
    let path = ctx.output("rates.csv")?;
    ctx.core(emit_csv(&report, &path))?;
    print_report(&report);
    println!("report: {}", path.display());
    ctx.core(report.require_fits())
}

fn print_report(r: &RateReport) {
    println!(
        "{:>10} {:>10} {:>10} {:>10} {:>10}",
        "abscissa", "dist", "layer_c", "layer_w", "seconds"
    );
    for p in &r.points {
        println!(
            "{:>10.3e} {:>10.3e} {:>10.3e} {:>10.3e} {:>10.2}{}",
            p.abscissa,
            p.dist,
            p.layer_c,
            p.layer_w,
            p.runtime.as_secs_f64(),
            p.failure
                .as_deref()
                .map(|f| format!("  failed: {f}"))
                .unwrap_or_default()
        );
    }
    println!();
    println!(
        "{:<18} {:>8} {:>8} {:>4} {:>10}",
        "metric", "slope", "stderr", "pts", "floor"
    );
    for m in Metric::ALL {
        let floor = r.floors.get(&m).copied().unwrap_or(f64::NAN);
        match &r.fits[&m] {
            FitOutcome::Fitted(f) => println!(
                "{:<18} {:>8.3} {:>8.3} {:>4} {:>10.2e}",
                m.name(),
                f.slope,
                f.stderr,
                f.points,
                floor
            ),
            FitOutcome::Rejected { reason, .. } => {
                println!(
                    "{:<18} {:>8} {:>8} {:>4} {:>10.2e}  {reason}",
                    m.name(),
                    "-",
                    "-",
                    "-",
                    floor
                )
            }
        }
    }
    println!("(points below {FLOOR_FACTOR}x floor are excluded from fits)");
    for f in &r.flags {
        println!("flag: {f}");
    }
}

fn cmd_energy_check(ctx: &Context) -> Outcome {
    let init = ctx.initial_state()?;
    let check = ctx.core(energy_check(&init, ctx.cfg.eps, ctx.cfg.tau, ctx.cfg.dt, ctx.cfg.t_end))?;
    println!("identity defect at dt   : {:.6e}", check.coarse);
    println!("identity defect at dt/2 : {:.6e}", check.fine);
    if check.at_roundoff() {
        println!("ratio                   : n/a (both defects at round-off)");
    } else {
        println!("ratio                   : {:.4}", check.ratio());
    }
    if check.passes() {
        Ok(())
    } else {
        Err(Failure::Check(format!("ratio {:.4} outside [1.5, 3]", check.ratio())))
    }
}

/// Largest accepted deviation of the quadrature from the direct solve.
const SEMIGROUP_TOLERANCE: f64 = 1e-4;

fn cmd_semigroup_check(ctx: &Context) -> Outcome {
    let init = ctx.initial_state()?;
    let sg = &ctx.cfg.semigroup;
    let mut worst = 0.0f64;
    for &a in &sg.coefficients {
        for (name, g) in [("n0", &init.n), ("c0", &init.c), ("w0", &init.w)] {
            let quad = ctx.core(resolvent_by_semigroup(g, a, sg.delta, sg.horizon))?;
            let direct = ctx.core(elliptic_solve(a, g))?;
            let defect = (&quad - &direct).max_abs();
            worst = worst.max(defect);
            println!("a = {a:<8} field {name}: max defect {defect:.3e}");
        }
    }
    if worst <= SEMIGROUP_TOLERANCE {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "defect {worst:.3e} exceeds {SEMIGROUP_TOLERANCE:e}"
        )))
    }
}
