//! gridbench: run one benchmark scenario as a gridmp application and emit
//! CSV at rank 0.

use clap::{Parser, ValueEnum};
use gridbench::{
    bcast_bench, category_bench, pingpong, to_csv, BCAST_HEADER, CATEGORY_HEADER, PINGPONG_HEADER,
};
use gridmp::CollAlgo;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Scenario {
    Pingpong,
    Category,
    Bcast,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Algo {
    Multilevel,
    Binomial,
}

#[derive(Parser, Debug)]
#[command(name = "gridbench", about = "latency, category, and collective benchmarks")]
struct Args {
    #[arg(value_enum)]
    scenario: Scenario,

    /// Message sizes in bytes, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0,8,1024,65536")]
    sizes: Vec<usize>,

    #[arg(long, default_value_t = 1000)]
    reps: usize,

    /// Broadcast algorithm (bcast scenario only).
    #[arg(long, value_enum, default_value_t = Algo::Multilevel)]
    algo: Algo,

    /// Write the CSV here instead of stdout (rank 0 only).
    #[arg(long)]
    csv: Option<std::path::PathBuf>,
}

fn main() {
    let args = Args::parse();
    let mut rt = match gridmp::Runtime::init() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("gridbench: {e}");
            std::process::exit(3);
        }
    };

    let result = match args.scenario {
        Scenario::Pingpong => {
            pingpong(&mut rt, &args.sizes, args.reps).map(|rows| {
                to_csv(PINGPONG_HEADER, &rows, |r| r.to_csv())
            })
        }
        Scenario::Category => {
            category_bench(&mut rt, args.reps).map(|rows| {
                to_csv(CATEGORY_HEADER, &rows, |r| r.to_csv())
            })
        }
        Scenario::Bcast => {
            let algo = match args.algo {
                Algo::Multilevel => CollAlgo::Multilevel,
                Algo::Binomial => CollAlgo::Binomial,
            };
            bcast_bench(&mut rt, algo, &args.sizes, args.reps).map(|rows| {
                to_csv(BCAST_HEADER, &rows, |r| r.to_csv())
            })
        }
    };

    let csv = match result {
        Ok(csv) => csv,
        Err(e) => {
            eprintln!("gridbench: {e}");
            std::process::exit(64);
        }
    };
    if rt.rank() == 0 {
        match &args.csv {
            Some(path) => std::fs::write(path, csv).unwrap_or_else(|e| {
                eprintln!("gridbench: writing {}: {e}", path.display());
                std::process::exit(64);
            }),
            None => print!("{csv}"),
        }
    }
    rt.finalize().unwrap();
}
