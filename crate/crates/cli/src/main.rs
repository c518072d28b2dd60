use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adaptnet::genplan::GpConfig;
use adaptnet::mapek::{export_kb, import_kb, KnowledgeBase};
use adaptnet::netmodel::{full_topology, mnp_topology};
use adaptnet::sim::{
    invocations_csv, load_kb, run_scenario, trace_csv, MetricsRecord, Router, RunOutput, Scenario,
    DEFAULT_LINK_BANDWIDTH, DEFAULT_LINK_DELAY, METRICS_CSV_HEADER,
};
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Self-adaptive SDN routing simulator.
#[derive(Debug, Parser)]
#[command(name = "adaptnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one scenario and write its trace and metrics.
    Run {
        #[command(flatten)]
        common: ScenarioArgs,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every router against every seed and summarize.
    Compare {
        #[arg(long)]
        scenario: PathBuf,
        /// Routers to compare (repeatable or comma separated).
        #[arg(long, value_delimiter = ',', required = true)]
        router: Vec<String>,
        /// Seeds as `A..B` (inclusive) or a comma list.
        #[arg(long, default_value = "0..29")]
        seeds: String,
        /// Knowledge base for genadapt-reuse.
        #[arg(long)]
        kb: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export or validate knowledge-base files.
    Transfer {
        #[command(subcommand)]
        action: Transfer,
    },
    /// Write a generated topology as an edge list.
    GenTopology {
        kind: TopologyKind,
        size: usize,
        #[arg(long, default_value_t = DEFAULT_LINK_BANDWIDTH)]
        bandwidth: f64,
        #[arg(long, default_value_t = DEFAULT_LINK_DELAY)]
        delay: f64,
        /// Destination file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum Transfer {
    /// Run a scenario and save the planner's retained formulas.
    Export {
        #[command(flatten)]
        common: ScenarioArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate a knowledge-base file.
    Import {
        #[arg(long)]
        kb: PathBuf,
    },
}

#[derive(Debug, Args)]
struct ScenarioArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// Overrides the scenario's router.
    #[arg(long)]
    router: Option<String>,
    /// Knowledge base for genadapt-reuse.
    #[arg(long)]
    kb: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TopologyKind {
    Full,
    Mnp,
}

/// Exit code 1: bad input. Exit code 2: failure while running.
enum Failure {
    Invalid(String),
    Runtime(String),
}

impl Failure {
    fn invalid(e: impl ToString) -> Self {
        Failure::Invalid(e.to_string())
    }

    fn runtime(e: impl ToString) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run { common, seed, out } => cmd_run(&common, seed, &out),
        Command::Compare {
            scenario,
            router,
            seeds,
            kb,
            out,
        } => cmd_compare(&scenario, &router, &seeds, kb.as_deref(), &out),
        Command::Transfer {
            action: Transfer::Export { common, seed, out },
        } => cmd_export(&common, seed, &out),
        Command::Transfer {
            action: Transfer::Import { kb },
        } => cmd_import(&kb),
        Command::GenTopology {
            kind,
            size,
            bandwidth,
            delay,
            out,
        } => cmd_gen_topology(kind, size, bandwidth, delay, out.as_deref()),
    }
}

fn parse_router(name: &str) -> Result<Router, Failure> {
    name.trim().parse().map_err(Failure::invalid)
}

fn read_kb(path: &Path, gp: &GpConfig) -> Result<KnowledgeBase, Failure> {
    load_kb(path, gp).map_err(Failure::invalid)
}

fn load_scenario(args: &ScenarioArgs, seed: Option<u64>) -> Result<Scenario, Failure> {
    let mut scenario = Scenario::load(&args.scenario).map_err(Failure::invalid)?;
    let kb = match &args.kb {
        Some(p) => Some(read_kb(p, &scenario.gp)?),
        None => None,
    };
    let router = match &args.router {
        Some(name) => parse_router(name)?,
        None => scenario.router,
    };
    scenario.set_router(router, kb).map_err(Failure::invalid)?;
    if let Some(seed) = seed {
        scenario.seed = seed;
    }
    Ok(scenario)
}

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    fs::write(path, contents)
        .map_err(|e| Failure::runtime(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), Failure> {
    fs::create_dir_all(path)
        .map_err(|e| Failure::runtime(format!("cannot create {}: {e}", path.display())))
}

fn metrics_csv(router: Router, seed: u64, metrics: &MetricsRecord) -> String {
    format!(
        "router,seed,{METRICS_CSV_HEADER}\n{router},{seed},{}\n",
        metrics.csv_row()
    )
}

fn routes_csv(scenario: &Scenario, out: &RunOutput) -> String {
    let mut s = String::from("t,request,cause,nodes\n");
    for r in &out.routes {
        let nodes: Vec<String> = scenario
            .network
            .path_nodes(&r.path)
            .iter()
            .map(ToString::to_string)
            .collect();
        let _ = writeln!(s, "{},{},{:?},{}", r.t, r.request, r.cause, nodes.join(" "));
    }
    s.to_lowercase()
}

fn cmd_run(args: &ScenarioArgs, seed: Option<u64>, out: &Path) -> Result<(), Failure> {
    let scenario = load_scenario(args, seed)?;
    let result = run_scenario(&scenario).map_err(Failure::runtime)?;
    create_dir(out)?;
    write_file(&out.join("trace.csv"), &trace_csv(&result.trace))?;
    write_file(
        &out.join("metrics.csv"),
        &metrics_csv(scenario.router, scenario.seed, &result.metrics),
    )?;
    write_file(&out.join("routes.csv"), &routes_csv(&scenario, &result))?;
    write_file(
        &out.join("invocations.csv"),
        &invocations_csv(&result.invocations),
    )?;
    let m = &result.metrics;
    println!(
        "{} seed {}: {} congestion occurrence(s), {} s congested, loss proxy {:.6}, {} planner invocation(s)",
        scenario.router,
        scenario.seed,
        m.congestion_occurrences,
        m.congestion_duration,
        m.packet_loss_proxy,
        m.planner_invocations
    );
    Ok(())
}

fn parse_seeds(text: &str) -> Result<Vec<u64>, Failure> {
    let bad = || Failure::Invalid(format!("invalid --seeds `{text}` (use `A..B` or `1,2,3`)"));
    let seeds: Vec<u64> = if let Some((a, b)) = text.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().parse().map_err(|_| bad())?;
        if a > b {
            return Err(bad());
        }
        (a..=b).collect()
    } else {
        text.split(',')
            .map(|s| s.trim().parse().map_err(|_| bad()))
            .collect::<Result<_, _>>()?
    };
    if seeds.is_empty() {
        return Err(bad());
    }
    let unique: BTreeSet<_> = seeds.iter().collect();
    if unique.len() != seeds.len() {
        return Err(Failure::Invalid(format!(
            "--seeds `{text}` lists a seed twice"
        )));
    }
    Ok(seeds)
}

const SUMMARY_COLUMNS: [&str; 6] = [
    "congestion_occurrences",
    "congestion_duration",
    "packet_loss_proxy",
    "planner_invocations",
    "final_max_util",
    "mean_planner_ms",
];

fn metric_values(m: &MetricsRecord) -> [f64; 6] {
    [
        m.congestion_occurrences as f64,
        m.congestion_duration as f64,
        m.packet_loss_proxy,
        m.planner_invocations as f64,
        m.final_max_util,
        m.mean_planner_ms(),
    ]
}

fn cmd_compare(
    scenario_path: &Path,
    router_names: &[String],
    seeds: &str,
    kb: Option<&Path>,
    out: &Path,
) -> Result<(), Failure> {
    let base = Scenario::load(scenario_path).map_err(Failure::invalid)?;
    let routers = router_names
        .iter()
        .map(|r| parse_router(r))
        .collect::<Result<Vec<_>, _>>()?;
    let seeds = parse_seeds(seeds)?;
    let kb = match kb {
        Some(p) => Some(read_kb(p, &base.gp)?),
        None => None,
    };

    let mut raw = format!("router,seed,{}\n", SUMMARY_COLUMNS.join(","));
    let mut summary = format!("router,runs,{}\n", SUMMARY_COLUMNS.join(","));
    let mut table = Vec::new();
    for &router in &routers {
        let mut scenario = base.clone();
        scenario
            .set_router(router, kb.clone())
            .map_err(Failure::invalid)?;
        let mut sums = [0.0; 6];
        for &seed in &seeds {
            scenario.seed = seed;
            let result = run_scenario(&scenario).map_err(|e| {
                Failure::runtime(format!("run failed for router {router}, seed {seed}: {e}"))
            })?;
            let values = metric_values(&result.metrics);
            let cells: Vec<String> = values.iter().map(|v| format!("{v:.6}")).collect();
            let _ = writeln!(raw, "{router},{seed},{}", cells.join(","));
            for (s, v) in sums.iter_mut().zip(values) {
                *s += v;
            }
        }
        let means = sums.map(|s| s / seeds.len() as f64);
        let cells: Vec<String> = means.iter().map(|v| format!("{v:.6}")).collect();
        let _ = writeln!(summary, "{router},{},{}", seeds.len(), cells.join(","));
        table.push((router, means));
    }
    create_dir(out)?;
    write_file(&out.join("runs.csv"), &raw)?;
    write_file(&out.join("summary.csv"), &summary)?;

    println!(
        "{:<16} {:>12} {:>12} {:>10} {:>12} {:>12}",
        "router", "occurrences", "duration_s", "loss", "invocations", "planner_ms"
    );
    for (router, m) in table {
        println!(
            "{:<16} {:>12.3} {:>12.3} {:>10.4} {:>12.3} {:>12.3}",
            router.name(),
            m[0],
            m[1],
            m[2],
            m[3],
            m[5]
        );
    }
    Ok(())
}

fn cmd_export(args: &ScenarioArgs, seed: Option<u64>, out: &Path) -> Result<(), Failure> {
    let scenario = load_scenario(args, seed)?;
    if !scenario.router.is_adaptive() {
        return Err(Failure::Invalid(format!(
            "router {} does not learn formulas; use genadapt or genadapt-reuse",
            scenario.router
        )));
    }
    let result = run_scenario(&scenario).map_err(Failure::runtime)?;
    if result.metrics.planner_invocations == 0 {
        return Err(Failure::Runtime(
            "no congestion occurred, so there is nothing to export".into(),
        ));
    }
    let mut buf = Vec::new();
    export_kb(&result.kb, &mut buf).map_err(Failure::runtime)?;
    let text = String::from_utf8(buf).map_err(Failure::runtime)?;
    write_file(out, &text)?;
    println!("{} formulas exported to {}", result.kb.len(), out.display());
    Ok(())
}

fn cmd_import(path: &Path) -> Result<(), Failure> {
    let file = fs::File::open(path)
        .map_err(|e| Failure::Invalid(format!("cannot read {}: {e}", path.display())))?;
    let kb = import_kb(
        BufReader::new(file),
        path.display().to_string(),
        &GpConfig::default(),
    )
    .map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
    println!("{} formulas accepted", kb.len());
    if kb.is_empty() {
        eprintln!("warning: {} contains no formulas", path.display());
    }
    Ok(())
}

fn cmd_gen_topology(
    kind: TopologyKind,
    size: usize,
    bandwidth: f64,
    delay: f64,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let net = match kind {
        TopologyKind::Full => full_topology(size, bandwidth, delay),
        TopologyKind::Mnp => mnp_topology(size, bandwidth, delay),
    }
    .map_err(Failure::invalid)?;
    let text = net.to_edge_list();
    match out {
        Some(path) => write_file(path, &text),
        None => io::stdout()
            .write_all(text.as_bytes())
            .map_err(Failure::runtime),
    }
}
