use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use clap::{Parser, Subcommand};
use ilog_core::diary::DiaryStore;
use ilog_core::export::{compliance_report, export_tables, volume_report, write_compliance};
use ilog_core::ingest::{Backend, Registry};
use ilog_core::store::{verify_dir, Store};
use ilog_core::study::expected_daily_volume;
use ilog_core::TsMs;
use ilog_server::{HttpClient, ServerOptions};
use ilog_sim::{run_fleet, Fleet, SimOptions};
use ilogctl::{inspect_chunk, load_study, parse_time, store_root, ServerEnv, ENV_DATA_DIR};

const BYTES_PER_READING: u64 = 32;

#[derive(Parser)]
#[command(name = "ilogctl", version, about = "Run and inspect a smartphone time-use study")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the ingest server. Key, data directory and silence threshold come
    /// from ILOG_MAC_KEY, ILOG_DATA_DIR, ILOG_SILENCE_THRESHOLD_H and
    /// ILOG_SUPERVISOR_TOKEN.
    Serve {
        /// Study document, or a preset name.
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        /// Take the request clock from the X-Ilog-Now header. For simulations only.
        #[arg(long, env = "ILOG_TRUST_CLIENT_CLOCK")]
        trust_client_clock: bool,
    },
    /// Drive a fleet of simulated devices against a running server.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        fleet: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        server: String,
        /// Simulated seconds per wall second. Without it devices run unpaced.
        #[arg(long)]
        faster_than_real: Option<f64>,
        /// Keep every n-th fixed-rate sample.
        #[arg(long, default_value_t = SimOptions::thinned().rate_divisor)]
        rate_divisor: u64,
        /// Keep every n-th polled sample.
        #[arg(long, default_value_t = SimOptions::thinned().poll_divisor)]
        poll_divisor: u64,
        /// Send every chunk twice.
        #[arg(long)]
        duplicate_uploads: bool,
    },
    /// Print the header and per-sensor counts of a chunk file.
    Inspect {
        chunk: PathBuf,
        /// Device key, 64 hex digits.
        #[arg(long)]
        key: String,
    },
    /// Write sensor, answer and telemetry tables for [from, to).
    Export {
        #[arg(long, value_parser = parse_time)]
        from: TsMs,
        #[arg(long, value_parser = parse_time)]
        to: TsMs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, env = ENV_DATA_DIR, default_value = "ilog-data")]
        data: PathBuf,
    },
    /// Write report.txt and the series CSVs the supervisor dashboard plots.
    Report {
        #[arg(long)]
        study: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, env = ENV_DATA_DIR, default_value = "ilog-data")]
        data: PathBuf,
    },
    /// Check every segment checksum under a store directory.
    StoreVerify { root: PathBuf },
}

fn now_ms() -> TsMs {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as TsMs)
}

fn serve(config: &Path, addr: &str, trust_client_clock: bool) -> anyhow::Result<()> {
    let study = load_study(config)?;
    let env = ServerEnv::from_lookup(|k| std::env::var(k).ok())?;
    let backend = Arc::new(Backend::open(study, env.backend_options()).context("opening the backend")?);
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
        tracing::info!(addr = %listener.local_addr()?, data = %env.data_dir.display(), "serving");
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
            tracing::info!("shutting down");
        };
        ilog_server::serve(listener, backend, ServerOptions { trust_client_clock }, shutdown).await?;
        Ok(())
    })
}

fn simulate(
    config: &Path,
    fleet: &Path,
    seed: u64,
    server: &str,
    opts: SimOptions,
) -> anyhow::Result<()> {
    let study = load_study(config)?;
    let fleet = Fleet::load(fleet)?;
    let client = HttpClient::new(server).with_sim_clock();
    client.health().with_context(|| format!("no server at {server}"))?;
    let run = run_fleet(&study, &fleet, seed, &client, &opts)?;
    tracing::info!(wall_s = run.wall_time.as_secs_f64(), "fleet finished");
    println!("{}", serde_json::to_string_pretty(&run.report)?);
    Ok(())
}

fn export(from: TsMs, to: TsMs, out: &Path, data: &Path) -> anyhow::Result<()> {
    let store = Store::open(data.join("store")).context("opening the store")?;
    let diary = DiaryStore::open(data.join("diary"), false)?;
    let manifest = export_tables(&store, &diary, from, to, out, now_ms())?;
    for t in &manifest.tables {
        println!("{:<28} {:>12} rows", t.name, t.row_count);
    }
    Ok(())
}

fn report(study: &Path, out: &Path, data: &Path) -> anyhow::Result<()> {
    let config = load_study(study)?;
    let store = Store::open(data.join("store")).context("opening the store")?;
    let diary = DiaryStore::open(data.join("diary"), false)?;
    let registered = Registry::open(&data.join("identity"), false)?.rows().count() as u64;
    let report = compliance_report(&store, &diary, &config, registered);
    write_compliance(&report, out)?;

    // each device is judged against the sensors it actually delivered
    let volume = volume_report(&store, config.start, config.end, BYTES_PER_READING, |p| {
        let delivered: BTreeSet<_> = store.partitions(p).iter().map(|x| x.sensor_id).collect();
        let mut own = config.clone();
        own.sensors_enabled.retain(|id, _| delivered.contains(id));
        expected_daily_volume(&own, BYTES_PER_READING)
    });
    volume.write_csv(&out.join("volume.csv"))?;
    print!("{}", std::fs::read_to_string(out.join("report.txt"))?);
    let flagged = volume.flagged().count();
    if flagged > 0 {
        println!("\n{flagged} device-days stray more than 50% from their expected volume (see volume.csv)");
    }
    Ok(())
}

fn store_verify(root: &Path) -> anyhow::Result<bool> {
    let root = store_root(root);
    let report = verify_dir(&root).with_context(|| format!("reading {}", root.display()))?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(report.is_ok())
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.cmd {
        Cmd::Serve {
            config,
            addr,
            trust_client_clock,
        } => serve(&config, &addr, trust_client_clock)?,
        Cmd::Simulate {
            config,
            fleet,
            seed,
            server,
            faster_than_real,
            rate_divisor,
            poll_divisor,
            duplicate_uploads,
        } => {
            let opts = SimOptions {
                rate_divisor,
                poll_divisor,
                duplicate_uploads,
                pace: faster_than_real,
                ..SimOptions::default()
            };
            simulate(&config, &fleet, seed, &server, opts)?
        }
        Cmd::Inspect { chunk, key } => print!("{}", inspect_chunk(&chunk, &key)?),
        Cmd::Export { from, to, out, data } => export(from, to, &out, &data)?,
        Cmd::Report { study, out, data } => report(&study, &out, &data)?,
        Cmd::StoreVerify { root } => return store_verify(&root),
    }
    Ok(true)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
