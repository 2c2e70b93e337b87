//! Memory node process.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use farview_core::server::{run_server, ServerConfig};

/// Flags override values from `--config`.
#[derive(Parser, Debug)]
#[command(name = "farview-node", version, about = "Disaggregated memory node with operator off-loading")]
struct Args {
    /// File of key=value lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    listen: Option<String>,
    /// Dynamic regions, one per connection.
    #[arg(long)]
    regions: Option<String>,
    /// Memory channels tables are striped across.
    #[arg(long)]
    channels: Option<String>,
    #[arg(long)]
    channel_capacity_bytes: Option<String>,
    #[arg(long)]
    stripe_bytes: Option<String>,
    /// Packet payload bytes.
    #[arg(long)]
    mtu: Option<String>,
    /// Data packets in flight per link.
    #[arg(long)]
    credit_window: Option<String>,
    #[arg(long)]
    cuckoo_tables: Option<String>,
    #[arg(long)]
    cuckoo_slots: Option<String>,
    #[arg(long)]
    cuckoo_max_evictions: Option<String>,
    #[arg(long)]
    lru_depth: Option<String>,
    #[arg(long)]
    queue_depth: Option<String>,
    #[arg(long)]
    max_overflow: Option<String>,
    #[arg(long)]
    reconfig_delay_ms: Option<String>,
    #[arg(long)]
    rcpu_enabled: Option<String>,
    /// Print the effective config and exit.
    #[arg(long)]
    print_config: bool,
}

impl Args {
    fn overrides(&self) -> [(&'static str, &Option<String>); 15] {
        [
            ("listen", &self.listen),
            ("regions", &self.regions),
            ("channels", &self.channels),
            ("channel_capacity_bytes", &self.channel_capacity_bytes),
            ("stripe_bytes", &self.stripe_bytes),
            ("mtu", &self.mtu),
            ("credit_window", &self.credit_window),
            ("cuckoo_tables", &self.cuckoo_tables),
            ("cuckoo_slots", &self.cuckoo_slots),
            ("cuckoo_max_evictions", &self.cuckoo_max_evictions),
            ("lru_depth", &self.lru_depth),
            ("queue_depth", &self.queue_depth),
            ("max_overflow", &self.max_overflow),
            ("reconfig_delay_ms", &self.reconfig_delay_ms),
            ("rcpu_enabled", &self.rcpu_enabled),
        ]
    }
}

fn config(args: &Args) -> Result<ServerConfig, Box<dyn std::error::Error>> {
    let mut cfg = ServerConfig::default();
    if let Some(p) = &args.config {
        cfg.apply_text(&std::fs::read_to_string(p)?)?;
    }
    for (k, v) in args.overrides() {
        if let Some(v) = v {
            cfg.set(k, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let cfg = match config(&args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("farview-node: {e}");
            return ExitCode::from(2);
        }
    };
    if args.print_config {
        print!("{}", cfg.to_text());
        return ExitCode::SUCCESS;
    }
    match run_server(cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("farview-node: {e}");
            ExitCode::FAILURE
        }
    }
}
