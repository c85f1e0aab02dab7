//! The `medirelay` command line: the server plus operator tools.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use chrono::NaiveDate;
use clap::{Parser, Subcommand};
use medirelay_core::store::{month_window, ArchiveVolume, TierStore};
use medirelay_core::sync::scenario::{simulate, verify_transcript, Scenario};
use medirelay_core::Timestamp;

use crate::config::{ConfigOverrides, ServiceConfig};
use crate::demo::seed_demo;
use crate::node::{DirLock, Node, STORE_DIR};

#[derive(Debug, Parser)]
#[command(
    name = "medirelay",
    version,
    about = "Telemedicine portal and rural/center record relay"
)]
pub struct Cli {
    #[command(flatten)]
    pub overrides: ConfigOverrides,
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Run the HTTP service.
    Serve,
    /// Account administration against the data directory.
    #[command(subcommand)]
    Admin(AdminCmd),
    /// Long-term archive volumes.
    #[command(subcommand)]
    Archive(ArchiveCmd),
    /// Deterministic sync simulations.
    #[command(subcommand)]
    Sim(SimCmd),
}

#[derive(Debug, Subcommand)]
pub enum AdminCmd {
    /// Create the first administrator account.
    Bootstrap {
        #[arg(long)]
        email: String,
        #[arg(long, env = "MEDIRELAY_ADMIN_PASSWORD")]
        password: String,
        #[arg(long, default_value = "Administrator")]
        name: String,
    },
    /// Approve a doctor awaiting approval, by account id or email.
    ApproveDoctor { who: String },
    /// Doctors awaiting approval.
    ListPending,
    /// Load the fixed demo fixture into an empty data directory.
    SeedDemo,
}

#[derive(Debug, Subcommand)]
pub enum ArchiveCmd {
    /// Move aged records to the long-term buffer and seal one window.
    Pack {
        /// A calendar month (`2026-07`) or `START..END` in RFC 3339.
        #[arg(long)]
        window: String,
    },
    /// Check every checksum in a volume file; exits 1 on any fault.
    Verify { file: PathBuf },
    /// List a volume's header and index.
    Ls { file: PathBuf },
}

#[derive(Debug, Subcommand)]
pub enum SimCmd {
    /// Run a scenario and print its transcript.
    Run {
        scenario: PathBuf,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Re-run a scenario and compare with a recorded transcript.
    Verify {
        scenario: PathBuf,
        transcript: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Parses `2026-07` as that UTC month, or `START..END` as given.
pub fn parse_window(raw: &str) -> anyhow::Result<(Timestamp, Timestamp)> {
    if let Some((a, b)) = raw.split_once("..") {
        let start: Timestamp = a.parse().with_context(|| format!("window start {a:?}"))?;
        let end: Timestamp = b.parse().with_context(|| format!("window end {b:?}"))?;
        if start >= end {
            bail!("window start must be before its end");
        }
        return Ok((start, end));
    }
    let first = NaiveDate::parse_from_str(&format!("{raw}-01"), "%Y-%m-%d")
        .with_context(|| format!("window {raw:?} is neither YYYY-MM nor START..END"))?;
    let at = first.and_hms_opt(0, 0, 0).expect("midnight").and_utc();
    Ok(month_window(Timestamp::from_datetime(at)))
}

fn load_scenario(path: &Path, seed: Option<u64>) -> anyhow::Result<Scenario> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut s = Scenario::parse(&text)?;
    if let Some(seed) = seed {
        s.seed = seed;
    }
    Ok(s)
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let stdout = std::io::stdout();
    match run(cli, &mut stdout.lock()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// Executes one command, writing its report to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> anyhow::Result<ExitCode> {
    match cli.command {
        Cmd::Serve => {
            let config = ServiceConfig::load(&cli.overrides)?;
            crate::server::run(Node::open(config)?)?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Admin(cmd) => admin(ServiceConfig::load(&cli.overrides)?, cmd, out),
        Cmd::Archive(ArchiveCmd::Pack { window }) => {
            let config = ServiceConfig::load(&cli.overrides)?;
            archive_pack(&config, &window, out)
        }
        Cmd::Archive(ArchiveCmd::Verify { file }) => archive_verify(&file, out),
        Cmd::Archive(ArchiveCmd::Ls { file }) => archive_ls(&file, out),
        Cmd::Sim(SimCmd::Run { scenario, seed }) => {
            let s = load_scenario(&scenario, seed)?;
            let sim = simulate(&s)?;
            out.write_all(sim.transcript.to_text().as_bytes())?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Sim(SimCmd::Verify {
            scenario,
            transcript,
            seed,
        }) => {
            let s = load_scenario(&scenario, seed)?;
            let recorded =
                std::fs::read_to_string(&transcript).with_context(|| format!("reading {}", transcript.display()))?;
            if verify_transcript(&s, &recorded)? {
                writeln!(out, "transcript matches")?;
                Ok(ExitCode::SUCCESS)
            } else {
                writeln!(out, "transcript differs from a fresh run")?;
                Ok(ExitCode::from(1))
            }
        }
    }
}

fn admin(config: ServiceConfig, cmd: AdminCmd, out: &mut dyn Write) -> anyhow::Result<ExitCode> {
    let node = Node::open(config)?;
    match cmd {
        AdminCmd::Bootstrap { email, password, name } => {
            let profile = [("name".to_string(), name)].into();
            let a = node.bootstrap_admin(&email, &password, profile)?;
            writeln!(out, "administrator {} <{}> created", a.account_id, a.email)?;
        }
        AdminCmd::ApproveDoctor { who } => {
            let a = node.approve_doctor(&who)?;
            writeln!(out, "{} <{}> is now {:?}", a.account_id, a.email, a.state)?;
        }
        AdminCmd::ListPending => {
            let portal = node.portal();
            writeln!(out, "{:<26}  {:<36}  {:<24}  REGISTERED", "ACCOUNT", "EMAIL", "NAME")?;
            for d in portal.pending_doctors() {
                let name = d.profile.get("name").map(String::as_str).unwrap_or("");
                writeln!(
                    out,
                    "{:<26}  {:<36}  {:<24}  {}",
                    d.account_id, d.email, name, d.created_at
                )?;
            }
        }
        AdminCmd::SeedDemo => {
            let s = seed_demo(&node)?;
            writeln!(out, "seeded demo fixture; every password is {:?}", s.password)?;
            writeln!(out, "admin    {}  {}", s.admin.account_id, s.admin.email)?;
            for d in &s.doctors {
                writeln!(out, "doctor   {}  {}  {}", d.account_id, d.email, d.name)?;
            }
            for p in &s.patients {
                writeln!(out, "patient  {}  {}  {}", p.account_id, p.email, p.name)?;
            }
            writeln!(out, "booking  {}", s.booking)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn archive_pack(config: &ServiceConfig, window: &str, out: &mut dyn Write) -> anyhow::Result<ExitCode> {
    let (start, end) = parse_window(window)?;
    let _lock = DirLock::acquire(&config.data_dir)?;
    let mut store = TierStore::open(config.data_dir.join(STORE_DIR), config.retention())?;
    let policy = store.policy();
    let moved = store.migrate(Timestamp::now(), &policy)?;
    let vol = store.pack_volume(start, end)?;
    let path = store
        .volume_path(&vol)
        .ok_or_else(|| anyhow!("store has no directory"))?;
    writeln!(
        out,
        "migrated {} record(s); sealed {} with {} record(s) at {}",
        moved.len(),
        vol.volume_id(),
        vol.len(),
        path.display()
    )?;
    Ok(ExitCode::SUCCESS)
}

fn archive_verify(file: &Path, out: &mut dyn Write) -> anyhow::Result<ExitCode> {
    let result = ArchiveVolume::open(file).and_then(|v| v.verify().map(|r| (v, r)));
    match result {
        Ok((v, r)) => {
            let (s, e) = v.window();
            writeln!(
                out,
                "OK {}: {} record(s), {} payload byte(s), window [{s}, {e})",
                file.display(),
                r.records,
                r.payload_bytes
            )?;
            Ok(ExitCode::SUCCESS)
        }
        Err(err) => {
            writeln!(out, "CORRUPT {}: {err}", file.display())?;
            Ok(ExitCode::from(1))
        }
    }
}

fn archive_ls(file: &Path, out: &mut dyn Write) -> anyhow::Result<ExitCode> {
    let v = ArchiveVolume::open(file).with_context(|| format!("opening {}", file.display()))?;
    let (s, e) = v.window();
    writeln!(out, "volume {} window [{s}, {e}) entries {}", v.volume_id(), v.len())?;
    writeln!(
        out,
        "{:<26}  {:<26}  {:<26}  {:<20}  {:>10}  {:>8}  CHECKSUM",
        "RECORD", "PATIENT", "PROBLEM", "CREATED", "OFFSET", "LENGTH"
    )?;
    for x in v.index() {
        writeln!(
            out,
            "{:<26}  {:<26}  {:<26}  {:<20}  {:>10}  {:>8}  {}",
            x.record_id,
            x.patient_id,
            x.problem_id,
            x.created_at.to_string(),
            x.payload_offset,
            x.payload_len,
            x.checksum.to_hex()
        )?;
    }
    Ok(ExitCode::SUCCESS)
}
