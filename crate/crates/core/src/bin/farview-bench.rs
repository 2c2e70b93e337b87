//! Runs one workload on the selected paths and writes per-run rows as CSV.

use std::fs::File;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use farview_core::bench::{run_experiment, write_csv, Path, QueryName, WorkloadSpec};

#[derive(Parser, Debug)]
#[command(name = "farview-bench", version, about = "Compare off-loaded and CPU query execution")]
struct Args {
    /// select, distinct, group_by, regex, encrypt_read, multi_client_distinct or projection_crossover.
    #[arg(long, default_value = "select")]
    query: QueryName,
    #[arg(long, default_value_t = 1 << 16)]
    rows: usize,
    #[arg(long, default_value_t = 64)]
    tuple_bytes: usize,
    #[arg(long, default_value_t = 1.0)]
    selectivity: f64,
    /// Distinct keys for distinct and group_by.
    #[arg(long, default_value_t = 256)]
    groups: usize,
    #[arg(long, default_value_t = 1)]
    clients: usize,
    #[arg(long, default_value_t = 10)]
    runs: usize,
    /// Comma-separated subset of fv,fvv,lcpu,rcpu.
    #[arg(long, default_value = "fv,fvv,lcpu,rcpu", value_delimiter = ',')]
    paths: Vec<Path>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "results.csv")]
    out: PathBuf,
    /// Use a running node instead of starting one in process.
    #[arg(long)]
    node: Option<SocketAddr>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let a = Args::parse();
    let spec = WorkloadSpec {
        query: a.query,
        rows: a.rows,
        tuple_bytes: a.tuple_bytes,
        selectivity: a.selectivity,
        groups: a.groups,
        clients: a.clients,
        runs: a.runs,
        seed: a.seed,
        ..Default::default()
    };
    let res = match run_experiment(&spec, &a.paths, a.node) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("farview-bench: {e}");
            return ExitCode::FAILURE;
        }
    };
    if let Err(e) = File::create(&a.out).map_err(Into::into).and_then(|f| write_csv(&res.records, f)) {
        eprintln!("farview-bench: {}: {e}", a.out.display());
        return ExitCode::FAILURE;
    }
    for p in &a.paths {
        let s = res.summary(*p);
        println!(
            "{:5} runs={} median_us={} mean_us={:.0} bytes_on_wire={} rows_out={}",
            p.label(),
            s.runs,
            s.median_wall_us,
            s.mean_wall_us,
            s.bytes_on_wire,
            s.rows_out
        );
    }
    if spec.query == QueryName::MultiClientDistinct {
        for p in &a.paths {
            println!("{:5} per-client bytes {:?}", p.label(), res.client_bytes(*p));
        }
    }
    ExitCode::SUCCESS
}
