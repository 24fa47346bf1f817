//! Writes a synthetic two-class dataset in TU format.
//!
//! `cargo run --example write_synthetic -- DIR [PREFIX] [GRAPHS] [SEED]`

use std::path::PathBuf;

use graphpool::data::{synthetic_benchmark, write_tu_dataset};

fn main() -> graphpool::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "data/MUTAG".into()));
    let prefix = args.next().unwrap_or_else(|| "MUTAG".into());
    let graphs: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(188);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    write_tu_dataset(&dir, &prefix, &synthetic_benchmark(graphs, seed))?;
    println!("wrote {graphs} graphs to {}", dir.display());
    Ok(())
}
