use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use wormflow_core::composition::{assemble, converged, simulate, SimTrace, SystemAssembly};
use wormflow_core::config::ScenarioConfig;
use wormflow_core::flow_dynamics::{FlowState, OracleOptions};
use wormflow_core::ib_wormhole::beta_curve;
use wormflow_core::passivity::audit_run;
use wormflow_core::plant::{co_simulate, final_third_variance};
use wormflow_core::topology::{HopGraph, LinkKind};
use wormflow_core::trace_io::{emit_trace, read_trace};
use wormflow_core::Error;

mod plots;

#[derive(Parser)]
#[command(name = "wormflow", version, about = "Fluid-flow routing simulator with wormhole adversaries")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario with an out-of-band tunnel (or none).
    RunOob(RunArgs),
    /// Simulate a scenario with an in-band tunnel.
    RunIb(RunArgs),
    /// Simulate any scenario, including both tunnel kinds at once.
    RunJoint(RunArgs),
    /// Co-simulate the sampled plant closed over the network.
    RunPlant(RunArgs),
    /// Solve for the equilibrium directly.
    Oracle(RunArgs),
    /// Passivity report on an existing trace.
    Audit {
        #[command(flatten)]
        run: RunArgs,
        /// Trace to audit.
        #[arg(long)]
        trace: PathBuf,
    },
    /// Estimate the tunnel-length curve for the in-band adversary.
    Beta(RunArgs),
}

#[derive(Args, Clone)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_plots: bool,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    horizon: Option<f64>,
}

impl RunArgs {
    fn load(&self) -> anyhow::Result<ScenarioConfig> {
        let mut cfg = ScenarioConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.sim.seed = seed;
        }
        if let Some(dt) = self.dt {
            cfg.sim.dt = dt;
        }
        if let Some(h) = self.horizon {
            cfg.sim.horizon = h;
        }
        let text = cfg.to_toml_string()?;
        Ok(ScenarioConfig::from_toml_str(&text)?)
    }

    fn prepare_out(&self) -> anyhow::Result<()> {
        fs::create_dir_all(&self.out).map_err(Error::from).with_context(|| format!("creating {}", self.out.display()))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Config(_) | Error::Input(_) | Error::Model(_)) => 1,
        Some(Error::Audit(_)) => 3,
        Some(_) => 2,
        None => 1,
    }
}

fn run(command: Command) -> anyhow::Result<u8> {
    match command {
        Command::RunOob(args) => {
            let cfg = args.load()?;
            if cfg.adversary.ib.is_some() {
                bail!(Error::Config("run-oob takes no in-band adversary; use run-ib or run-joint".into()));
            }
            run_network(&args, &cfg)
        }
        Command::RunIb(args) => {
            let cfg = args.load()?;
            if cfg.adversary.oob.is_some() {
                bail!(Error::Config("run-ib takes no out-of-band adversary; use run-oob or run-joint".into()));
            }
            run_network(&args, &cfg)
        }
        Command::RunJoint(args) => {
            let cfg = args.load()?;
            run_network(&args, &cfg)
        }
        Command::RunPlant(args) => run_plant(&args),
        Command::Oracle(args) => run_oracle(&args),
        Command::Audit { run, trace } => run_audit(&run, &trace),
        Command::Beta(args) => run_beta(&args),
    }
}

fn run_network(args: &RunArgs, cfg: &ScenarioConfig) -> anyhow::Result<u8> {
    args.prepare_out()?;
    let asm = assemble(cfg)?;
    let trace = simulate(&asm, cfg.sim.horizon, cfg.sim.dt)?;
    emit_trace(&trace, &args.out.join("trace.csv"))?;
    let mut s = String::new();
    network_summary(&mut s, cfg, &asm, &trace)?;
    write_summary(&args.out, &s)?;
    if !args.no_plots {
        plots::network(&trace, &args.out)?;
    }
    print!("{s}");
    Ok(0)
}

fn run_plant(args: &RunArgs) -> anyhow::Result<u8> {
    let cfg = args.load()?;
    args.prepare_out()?;
    let asm = assemble(&cfg)?;
    let trace = co_simulate(&asm, cfg.sim.horizon, cfg.sim.dt)?;
    emit_trace(&trace, &args.out.join("trace.csv"))?;
    let mut s = String::new();
    network_summary(&mut s, &cfg, &asm, &trace)?;
    let drops = trace.rows.iter().filter(|r| r.plant.is_some_and(|p| p.dropped)).count();
    writeln!(s, "plant final-third variance: {}", final_third_variance(&trace)?)?;
    writeln!(s, "plant final state: {}", trace.last().plant.map(|p| p.x).unwrap_or(f64::NAN))?;
    writeln!(s, "rows with a dropped sample: {drops}")?;
    write_summary(&args.out, &s)?;
    if !args.no_plots {
        plots::network(&trace, &args.out)?;
        plots::plant(&trace, &args.out)?;
    }
    print!("{s}");
    Ok(0)
}

fn run_oracle(args: &RunArgs) -> anyhow::Result<u8> {
    let cfg = args.load()?;
    args.prepare_out()?;
    let asm = assemble(&cfg)?;
    let x_star = asm.x_limit(cfg.sim.dt)?;
    let sol = asm.oracle(x_star, OracleOptions::default())?;
    let state = FlowState::new(&asm.spec, sol.rates.clone())?;
    let mut quiet = asm.with_initial(state);
    quiet.detector = None;
    quiet.x0 = x_star.or(quiet.x0);
    let trace = simulate(&quiet, 0.0, cfg.sim.dt)?;
    emit_trace(&trace, &args.out.join("trace.csv"))?;

    let mut s = String::new();
    header(&mut s, &cfg)?;
    writeln!(s, "equilibrium (oracle)")?;
    if let Some(x) = x_star {
        writeln!(s, "compromise fraction: {x}")?;
    }
    for (i, src) in asm.spec.sources().iter().enumerate() {
        writeln!(s, "source {} rates: {}", src.id, join(&sol.rates[i]))?;
        writeln!(s, "source {} delays: {}", src.id, join(&sol.path_delays[asm.spec.path_range(i)]))?;
    }
    writeln!(s, "objective: {}", sol.objective)?;
    writeln!(s, "wardrop gap: {}", sol.gap)?;
    writeln!(s, "iterations: {}", sol.iterations)?;
    writeln!(s, "strictly increasing laws: {}", sol.strictly_increasing)?;
    write_summary(&args.out, &s)?;
    print!("{s}");
    Ok(0)
}

fn run_audit(args: &RunArgs, trace_path: &Path) -> anyhow::Result<u8> {
    let cfg = args.load()?;
    args.prepare_out()?;
    let asm = assemble(&cfg)?;
    let trace = read_trace(trace_path).with_context(|| format!("reading {}", trace_path.display()))?;
    let tol = 10.0 * cfg.sim.dt;
    let evals = audit_run(&asm, &trace, tol)?;

    let mut csv = String::from("block,passed,violations,max_excess,min_value,supply_total\n");
    let mut s = String::new();
    header(&mut s, &cfg)?;
    writeln!(s, "passivity audit, tolerance {tol}")?;
    for e in &evals {
        writeln!(csv, "{},{},{},{},{},{}", e.block, u8::from(e.passed()), e.violations, e.max_excess, e.min_value, e.supply_total)?;
        writeln!(
            s,
            "{:<14} {}  violations {}  max excess {:.3e}  min storage {:.3e}",
            e.block,
            if e.passed() { "PASS" } else { "FAIL" },
            e.violations,
            e.max_excess,
            e.min_value
        )?;
    }
    fs::write(args.out.join("audit.csv"), csv).map_err(Error::from)?;
    write_summary(&args.out, &s)?;
    print!("{s}");
    if evals.iter().all(|e| e.passed()) {
        Ok(0)
    } else {
        eprintln!("error: passivity audit failed");
        Ok(3)
    }
}

fn run_beta(args: &RunArgs) -> anyhow::Result<u8> {
    let cfg = args.load()?;
    args.prepare_out()?;
    let ib = cfg
        .adversary
        .ib
        .as_ref()
        .ok_or_else(|| Error::Config("beta needs an [adversary.ib] section".into()))?;
    let (Some(entry), Some(exit)) = (ib.entry.as_deref(), ib.exit.as_deref()) else {
        bail!(Error::Config("beta needs adversary.ib.entry and adversary.ib.exit".into()));
    };
    let spec = cfg.network_spec()?;
    let graph = HopGraph::legitimate(&spec);
    let grid = ib.grid.clone().unwrap_or_else(|| (1..=10).map(|k| k as f64 / 10.0).collect());
    let curve = beta_curve(&graph, entry, exit, &grid, ib.trials.unwrap_or(2000), cfg.sim.seed, ib.fallback)?;

    let mut csv = String::from("x,mean,std_err,fit\n");
    for k in 0..curve.xs.len() {
        writeln!(csv, "{},{},{},{}", curve.xs[k], curve.means[k], curve.std_errs[k], curve.fit()[k])?;
    }
    fs::write(args.out.join("beta.csv"), csv).map_err(Error::from)?;
    let mut s = String::new();
    header(&mut s, &cfg)?;
    writeln!(s, "tunnel {entry} -> {exit}, {} trials, {} nodes", curve.trials, graph.node_count())?;
    for k in 0..curve.xs.len() {
        writeln!(s, "x = {:<5} beta = {:.4} +- {:.4}", curve.xs[k], curve.means[k], curve.std_errs[k])?;
    }
    write_summary(&args.out, &s)?;
    if !args.no_plots {
        plots::beta(&curve, &args.out)?;
    }
    print!("{s}");
    Ok(0)
}

fn header(s: &mut String, cfg: &ScenarioConfig) -> anyhow::Result<()> {
    writeln!(s, "scenario: {}", cfg.name.as_deref().unwrap_or("unnamed"))?;
    writeln!(s, "seed: {}", cfg.sim.seed)?;
    Ok(())
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(", ")
}

fn write_summary(out: &Path, s: &str) -> anyhow::Result<()> {
    fs::write(out.join("summary.txt"), s).map_err(Error::from)?;
    Ok(())
}

fn network_summary(s: &mut String, cfg: &ScenarioConfig, asm: &SystemAssembly, trace: &SimTrace) -> anyhow::Result<()> {
    header(s, cfg)?;
    let last = trace.last();
    writeln!(s, "steps: {}  final time: {}", trace.rows.len() - 1, last.t)?;
    writeln!(
        s,
        "converged: {} (window {}, tol {})",
        converged(trace, cfg.sim.window, cfg.sim.tol),
        cfg.sim.window,
        cfg.sim.tol
    )?;
    for (i, src) in asm.spec.sources().iter().enumerate() {
        let range = asm.spec.path_range(i);
        writeln!(s, "source {} final rates: {}", src.id, join(&last.rates[range.clone()]))?;
        writeln!(s, "source {} final delays: {}", src.id, join(&last.delays[range]))?;
        writeln!(s, "source {} mean delay: {:.6}", src.id, trace.source_delay(last, i, true))?;
    }
    for (l, link) in asm.spec.links().iter().enumerate() {
        if !link.kind.is_wormhole() {
            continue;
        }
        let flow: f64 = (0..asm.incidence.cols())
            .filter(|&p| asm.incidence.get(l, p) == 1)
            .map(|p| last.rates[p])
            .sum();
        let kind = if link.kind == LinkKind::OobWormhole { "out-of-band" } else { "in-band" };
        writeln!(s, "{kind} link {} path flow: {flow:.6}  drop: {:.6}", link.id, last.drop[l])?;
    }
    if asm.beta_link().is_some() {
        writeln!(s, "compromise fraction: {:.6}", last.x_compromise)?;
    }
    if let Some(plan) = &asm.plan {
        writeln!(s, "planned drop rate: {}  attracted flow: {}", plan.phi_star, plan.flow)?;
    }
    writeln!(s, "events: {}", trace.events.len())?;
    for e in trace.events.iter().take(20) {
        let link = e.link.map(|l| format!(" link {l}")).unwrap_or_default();
        writeln!(s, "  t = {}{link}: {:?} {}", e.t, e.kind, e.detail)?;
    }
    Ok(())
}
