use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context as _;
use clap::{Parser, Subcommand};
use ctaplab::attacks::{enumerate_confusions, MatrixConfig, Testbed, TestbedConfig};
use ctaplab::authenticator::{Authenticator, Transport};
use ctaplab::dissect::{dissect, MACHINE_HEADER};
use ctaplab::scenario::{self, attack_table, run_scenario, template_table, Scenario, ScenarioError};
use ctaplab::transports::trace::{read_trace, write_trace};

#[derive(Parser)]
#[command(name = "ctaplab", version, about = "CTAP2 authenticator lab")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario file or a bundled scenario by name.
    Run {
        scenario: String,
        /// Write the device-side frame log here.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Write report lines here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Append result tables after the report lines.
        #[arg(long)]
        summary: bool,
    },
    /// Print the API confusion feasibility grid.
    Matrix {
        /// Treat proximity-only cells as infeasible.
        #[arg(long)]
        no_nfc: bool,
        /// Assume every RP registers with a strict credProtect policy.
        #[arg(long)]
        strict_credprotect: bool,
    },
    /// Decode a frame log.
    Dissect {
        file: PathBuf,
        /// Tab-separated columns with a header row.
        #[arg(long)]
        machine: bool,
    },
    /// Persist or inspect authenticator state.
    State {
        #[command(subcommand)]
        op: StateOp,
    },
    /// List bundled scenarios.
    List,
}

#[derive(Subcommand)]
enum StateOp {
    /// Provision a testbed and save its authenticator.
    Save {
        path: PathBuf,
        #[arg(long, default_value = "solo2-like")]
        profile: String,
        #[arg(long, default_value = "usb")]
        transport: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Ship the RP enumeration flaw.
        #[arg(long)]
        cve: bool,
    },
    /// Load a snapshot, verify it and print a summary.
    Load { path: PathBuf },
}

/// An error plus the exit code it maps to.
struct Failure(u8, anyhow::Error);

impl Failure {
    fn parse(e: impl Into<anyhow::Error>) -> Self {
        Failure(1, e.into())
    }

    fn runtime(e: impl Into<anyhow::Error>) -> Self {
        Failure(2, e.into())
    }
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        Failure(e.exit_code() as u8, e.into())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Run { scenario, trace, out, seed, summary } => {
            cmd_run(&scenario, trace.as_deref(), out.as_deref(), seed, summary)
        }
        Cmd::Matrix { no_nfc, strict_credprotect } => {
            cmd_matrix(MatrixConfig { nfc: !no_nfc, weak_credprotect: !strict_credprotect })
        }
        Cmd::Dissect { file, machine } => cmd_dissect(&file, machine),
        Cmd::State { op } => cmd_state(op),
        Cmd::List => {
            for n in scenario::bundled_names() {
                println!("{n}");
            }
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(code, e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}

fn load_scenario(arg: &str) -> Result<Scenario, Failure> {
    let path = Path::new(arg);
    if path.exists() {
        let text = fs::read_to_string(path).with_context(|| format!("reading {arg}")).map_err(Failure::parse)?;
        return Ok(Scenario::parse(&text)?);
    }
    scenario::bundled(arg).ok_or_else(|| Failure::parse(anyhow::anyhow!("no scenario file or bundled scenario named {arg:?}")))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display())).map_err(Failure::runtime)
}

fn cmd_run(arg: &str, trace: Option<&Path>, out: Option<&Path>, seed: Option<u64>, summary: bool) -> Result<(), Failure> {
    let s = load_scenario(arg)?;
    let output = run_scenario(&s, seed)?;
    let mut text = output.report_text();
    if summary {
        text.push('\n');
        text.push_str(&attack_table(&output.reports));
        if output.reports.iter().any(|r| r.template.is_some()) {
            text.push('\n');
            text.push_str(&template_table(&output.reports));
        }
    }
    match out {
        Some(p) => write_file(p, text.as_bytes())?,
        None => io::stdout().write_all(text.as_bytes()).map_err(Failure::runtime)?,
    }
    if let Some(p) = trace {
        let mut buf = Vec::new();
        write_trace(&mut buf, &output.trace).map_err(Failure::runtime)?;
        write_file(p, &buf)?;
    }
    Ok(())
}

fn cmd_matrix(config: MatrixConfig) -> Result<(), Failure> {
    let m = enumerate_confusions(config);
    println!("{}", m.metadata());
    print!("{}", m.render());
    println!("totals: {}", m.totals_line());
    println!("legend: ✓ always, ✓¹ proximity only, ✓² weak credProtect only, n/a infeasible");
    Ok(())
}

fn cmd_dissect(file: &Path, machine: bool) -> Result<(), Failure> {
    let f = fs::File::open(file).with_context(|| format!("opening {}", file.display())).map_err(Failure::parse)?;
    let entries = read_trace(BufReader::new(f)).map_err(Failure::parse)?;
    let records = dissect(&entries);
    let mut stdout = io::stdout().lock();
    if machine {
        writeln!(stdout, "{MACHINE_HEADER}").map_err(Failure::runtime)?;
    }
    for r in &records {
        let line = if machine { r.to_machine() } else { r.to_string() };
        writeln!(stdout, "{line}").map_err(Failure::runtime)?;
    }
    let bad = records.iter().filter(|r| r.is_error()).count();
    if bad > 0 {
        return Err(Failure::parse(anyhow::anyhow!("{bad} of {} lines failed to dissect", records.len())));
    }
    Ok(())
}

fn cmd_state(op: StateOp) -> Result<(), Failure> {
    match op {
        StateOp::Save { path, profile, transport, seed, cve } => {
            let t = Transport::parse(&transport)
                .ok_or_else(|| Failure::parse(anyhow::anyhow!("unknown transport {transport:?}")))?;
            let cfg = TestbedConfig::new(&profile, t).with_seed(seed).with_cve(cve);
            let tb = Testbed::new(cfg).map_err(Failure::runtime)?;
            let auth = tb.dev.authenticator();
            auth.save(&path).map_err(Failure::runtime)?;
            print!("{}", state_summary(auth));
        }
        StateOp::Load { path } => {
            let auth = Authenticator::load(&path).map_err(Failure::parse)?;
            print!("{}", state_summary(&auth));
        }
    }
    Ok(())
}

fn state_summary(auth: &Authenticator) -> String {
    let s = auth.state();
    let discoverable = s.credentials.iter().filter(|c| c.discoverable).count();
    format!(
        "profile={}\nclock_ms={}\ncredentials={}\ndiscoverable={}\npin_set={}\npin_retries={}\npin_blocked={}\n",
        auth.config().profile,
        auth.now(),
        s.credentials.len(),
        discoverable,
        s.pin.pin_hash.is_some(),
        s.pin.total_retries_remaining,
        s.pin.hard_locked,
    )
}
