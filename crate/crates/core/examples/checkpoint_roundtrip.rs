//! Saves a checkpoint, reloads it bit-exactly, then shows that a single
//! flipped byte is rejected.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use softsense::checkpoint::{parse, Checkpoint};
use softsense::data::FeatureScaler;
use softsense::model::{ArchitectureConfig, ModelParams};
use softsense::Error;

fn main() -> softsense::Result<()> {
    let cfg = ArchitectureConfig::new(24, 3);
    let params = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(5))?;
    let ck = Checkpoint::new(params, FeatureScaler::identity(24));
    let path = std::env::temp_dir().join("softsense-example.ckpt");
    ck.save(&path)?;

    let back = Checkpoint::load(&path)?;
    assert_eq!(back, ck);
    let bytes = std::fs::read(&path).map_err(|e| Error::Argument(e.to_string()))?;
    let (_, records) = parse(&bytes)?;
    println!("{} bytes, {} tensors", bytes.len(), records.len());
    for r in records.iter().take(5) {
        println!("  {:<24} {:?}", r.name, r.tensor.shape());
    }

    let mut bad = bytes.clone();
    bad[bytes.len() / 2] ^= 1;
    match Checkpoint::from_bytes(&bad) {
        Err(e @ Error::CorruptCheckpoint(_)) => println!("flipped byte: {e} (exit code {})", e.exit_code()),
        other => panic!("corruption went unnoticed: {other:?}"),
    }
    Ok(())
}
