//! Generates the planted-nuisance benchmark, prints per-task label counts
//! and writes the partitions as CSV.
//!
//! cargo run --release --example synthetic_data -- [out_dir]

use std::path::PathBuf;

use softsense::data::{class_weights, generate, write_csv, Partition, SyntheticSpec};

fn main() -> softsense::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("softsense-synthetic"));
    let spec = SyntheticSpec::benchmark(3, 0);
    let split = generate(&spec)?;

    for p in [Partition::Train, Partition::Valid, Partition::Test] {
        for (task, c) in split.counts(p).iter().enumerate() {
            println!("{:<5} task {task}: {:>4} neg {:>3} pos", p.name(), c.neg, c.pos);
        }
    }
    println!("informative {:?}", spec.informative);
    println!("nuisance    {:?}", spec.nuisance);
    println!("noise       {:?}", spec.noise_features());
    println!("beta        {:?}", class_weights(&split)?);

    let paths = write_csv(&split, &out)?;
    println!("wrote {}", paths.get(Partition::Train).display());
    Ok(())
}
