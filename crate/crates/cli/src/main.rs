use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};

use choreo_core::parser::{load_package, parse_package};
use choreo_core::projection::{infer_role, project};
use choreo_harness::device::{Arm, Device, ServeConfig};
use choreo_harness::invariants::{check_order, check_pairing, order_rules};
use choreo_harness::render::{latency_histogram, samples_from_trace, sequence_diagram, Histogram, RenderError, Sample};
use choreo_harness::runner::{Mode, SimError, Simulation};
use choreo_harness::scenario::{Scenario, ScenarioError};
use choreo_harness::trace::{read_ndjson, write_ndjson, TraceEvent};

const CONFIG_ENV: &str = "CHOREO_CONFIG";

#[derive(Parser)]
#[command(name = "choreo", version, about = "Validate, project, serve and simulate WS-CDL choreographies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and validate a package; prints diagnostics.
    Validate { package: PathBuf },
    /// Write the projection of a package onto one role.
    Project {
        package: PathBuf,
        #[arg(long)]
        role: String,
        /// Output file; standard output when absent.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Run one device serving a projection until told to stop.
    Serve {
        projection: PathBuf,
        #[arg(long, default_value = "127.0.0.1:0")]
        endpoint: String,
        /// Device settings (TOML). Defaults to $CHOREO_CONFIG when set.
        #[arg(long, env = CONFIG_ENV)]
        config: Option<PathBuf>,
        /// Role to serve; overrides the config and inference.
        #[arg(long)]
        role: Option<String>,
    },
    /// Run a scenario and write trace, diagram and histogram.
    Simulate {
        scenario: PathBuf,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        /// Exit 1 if any trace or transaction invariant fails.
        #[arg(long)]
        check: bool,
        /// One OS process per device instead of threads.
        #[arg(long)]
        spawn: bool,
    },
    /// Regenerate an artifact from a trace file.
    Render {
        trace: PathBuf,
        #[arg(long, value_enum)]
        format: Format,
        /// Diagram: execution to draw, the first one by default.
        #[arg(long)]
        token: Option<u64>,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        /// Diagram text, or per-run CSV for histograms.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Diagram,
    Histogram,
}

enum Failure {
    Validation(String),
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::Io { .. } => Failure::Runtime(e.into()),
            _ => Failure::Validation(e.to_string()),
        }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Scenario(s) => s.into(),
            SimError::NoInitiator | SimError::Projection(..) => Failure::Validation(e.to_string()),
            other => Failure::Runtime(other.into()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Validate { package } => validate(&package),
        Command::Project { package, role, output } => project_cmd(&package, &role, output.as_deref()),
        Command::Serve { projection, endpoint, config, role } => serve(&projection, &endpoint, config, role),
        Command::Simulate { scenario, runs, seed, out, bins, check, spawn } => {
            simulate(&scenario, runs, seed, &out, bins, check, spawn)
        }
        Command::Render { trace, format, token, bins, output } => render(&trace, format, token, bins, output),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display())).map_err(Failure::Runtime)
}

fn validate(path: &Path) -> Outcome {
    let text = read(path)?;
    let parsed = parse_package(&text).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))?;
    for d in &parsed.diagnostics {
        println!("{d}");
    }
    if parsed.has_errors() {
        return Err(Failure::Validation(format!("{}: invalid", path.display())));
    }
    let p = &parsed.package;
    println!(
        "{}: ok ({} choreographies, {} roles, {} interactions)",
        path.display(),
        p.choreographies.len(),
        p.role_types.len(),
        p.interactions().len()
    );
    Ok(())
}

fn package_from(path: &Path) -> Result<choreo_core::model::ChoreographyPackage, Failure> {
    let text = read(path)?;
    load_package(&text).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))
}

fn project_cmd(path: &Path, role: &str, output: Option<&Path>) -> Outcome {
    let pkg = package_from(path)?;
    let projection = project(&pkg, role).map_err(|e| Failure::Usage(e.to_string()))?;
    let doc = projection.to_document();
    match output {
        Some(out) => fs::write(out, doc).with_context(|| format!("cannot write {}", out.display()))?,
        None => io::stdout().write_all(doc.as_bytes())?,
    }
    Ok(())
}

fn serve(path: &Path, endpoint: &str, config: Option<PathBuf>, role: Option<String>) -> Outcome {
    let pkg = package_from(path)?;
    let cfg: ServeConfig = match &config {
        Some(p) => toml::from_str(&read(p)?).map_err(|e| Failure::Validation(format!("{}: {e}", p.display())))?,
        None => ServeConfig::default(),
    };
    let role = role
        .or_else(|| cfg.role.clone())
        .or_else(|| infer_role(&pkg))
        .ok_or_else(|| Failure::Usage("cannot tell which role to serve; pass --role".into()))?;
    let projection = Arc::new(project(&pkg, &role).map_err(|e| Failure::Usage(e.to_string()))?);
    let device = Device::launch(cfg.setup(&role, projection, endpoint), cfg.sink())
        .with_context(|| format!("cannot listen on {endpoint}"))?;
    if !cfg.peers.is_empty() {
        let mut primaries = cfg.peers.clone();
        primaries.entry(role.clone()).or_insert_with(|| device.endpoint().to_string());
        device.arm(&Arm { primaries, clones: cfg.clones.clone(), ..Arm::default() }, Instant::now());
    }
    println!("listening on {}", device.endpoint());
    io::stdout().flush()?;
    device.wait_for_shutdown();
    // Let the shutdown reply leave before the process exits.
    std::thread::sleep(std::time::Duration::from_millis(100));
    Ok(())
}

fn simulate(
    path: &Path,
    runs: Option<usize>,
    seed: Option<u64>,
    out: &Path,
    bins: usize,
    check: bool,
    spawn: bool,
) -> Outcome {
    let mut scenario = Scenario::load(path)?;
    if let Some(r) = runs {
        scenario.runs = r;
    }
    if let Some(s) = seed {
        scenario.seed = s;
    }
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let mode = if spawn {
        Mode::Processes { exe: std::env::current_exe()?, workdir: out.join("devices") }
    } else {
        Mode::InProcess
    };
    let mut sim = Simulation::new(scenario, mode)?;
    let reports = sim.run_all()?;
    let events = sim.collector().events();

    write_ndjson(&events, BufWriter::new(File::create(out.join("trace.ndjson"))?))?;
    if let Some(first) = reports.first() {
        match sequence_diagram(&sim.events_for(first.metrics.token)) {
            Ok(d) => fs::write(out.join("diagram.txt"), d)?,
            Err(e) => log::warn!("no diagram: {e}"),
        }
    }
    let samples: Vec<Sample> = reports
        .iter()
        .map(|r| Sample {
            run: r.metrics.run,
            token: r.metrics.token,
            duration_ms: r.metrics.duration_ms,
            outcome: r.metrics.outcome.as_str().to_string(),
            failed: r.metrics.failed,
        })
        .collect();
    write_histogram(&samples, bins, out)?;

    let count = |o: &str| samples.iter().filter(|s| s.outcome == o).count();
    println!(
        "{} runs: {} completed, {} aborted, {} past deadline; artifacts in {}",
        samples.len(),
        count("completed"),
        count("aborted"),
        count("deadline"),
        out.display()
    );

    if check {
        let mut problems = check_pairing(&events);
        let rules = order_rules(sim.package());
        for r in &reports {
            let tok = r.metrics.token;
            problems.extend(check_order(&sim.events_for(tok), &rules).into_iter().map(|p| format!("token {tok}: {p}")));
            if let Some(a) = &r.atomicity {
                problems.extend(a.violations.iter().map(|v| format!("token {tok}: {v}")));
            }
        }
        if !problems.is_empty() {
            let unique: BTreeSet<String> = problems.into_iter().collect();
            return Err(Failure::Validation(unique.into_iter().collect::<Vec<_>>().join("\n")));
        }
        println!("invariants hold");
    }
    Ok(())
}

fn write_histogram(samples: &[Sample], bins: usize, out: &Path) -> Outcome {
    let histogram = match latency_histogram(samples, bins) {
        Ok(h) => h,
        Err(RenderError::NoData) => {
            log::warn!("every run failed; histogram has no bins");
            Histogram {
                bins: Vec::new(),
                counted: 0,
                discarded: samples.len(),
                min_ms: 0.0,
                max_ms: 0.0,
                mean_ms: 0.0,
                placement: vec![None; samples.len()],
            }
        }
        Err(e) => return Err(Failure::Usage(e.to_string())),
    };
    histogram.runs_csv(samples, File::create(out.join("histogram.csv"))?).map_err(|e| anyhow!(e))?;
    histogram.bins_csv(File::create(out.join("bins.csv"))?).map_err(|e| anyhow!(e))?;
    fs::write(out.join("histogram.txt"), histogram.text_chart(50))?;
    Ok(())
}

fn load_trace(path: &Path) -> Result<Vec<TraceEvent>, Failure> {
    let file = File::open(path).with_context(|| format!("cannot read {}", path.display()))?;
    read_ndjson(BufReader::new(file)).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))
}

fn render(path: &Path, format: Format, token: Option<u64>, bins: usize, output: Option<PathBuf>) -> Outcome {
    let events = load_trace(path)?;
    match format {
        Format::Diagram => {
            let token = token.or_else(|| events.first().map(|e| e.token));
            let chosen: Vec<TraceEvent> = events.into_iter().filter(|e| Some(e.token) == token).collect();
            let diagram = sequence_diagram(&chosen).map_err(|e| Failure::Validation(e.to_string()))?;
            match output {
                Some(o) => fs::write(&o, diagram).with_context(|| format!("cannot write {}", o.display()))?,
                None => print!("{diagram}"),
            }
        }
        Format::Histogram => {
            let samples = samples_from_trace(&events);
            let h = latency_histogram(&samples, bins).map_err(|e| match e {
                RenderError::NoBins => Failure::Usage(e.to_string()),
                other => Failure::Validation(other.to_string()),
            })?;
            if let Some(o) = output {
                let f = File::create(&o).with_context(|| format!("cannot write {}", o.display()))?;
                h.runs_csv(&samples, f).map_err(|e| anyhow!(e))?;
            }
            print!("{}", h.text_chart(50));
        }
    }
    Ok(())
}
