//! Generates a few clean synthetic images and reports, for every corruption
//! kind and severity, the mean absolute pixel change it causes.
//!
//! cargo run --release --example corruption

use m2a::data::{corrupt, generate_source, CorruptionKind, CorruptionOp, DatasetSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let spec = DatasetSpec {
        train_size: 100,
        stream_size: 50,
        ..DatasetSpec::default()
    };
    let data = generate_source(&spec, 0)?;
    let clean = &data.stream.images;
    println!("{} clean images, {}x{}x{}", clean.batch(), clean.channels(), clean.height(), clean.width());
    println!("{:<16} {:>7} {:>7} {:>7} {:>7} {:>7}", "kind", "s1", "s2", "s3", "s4", "s5");
    for kind in CorruptionKind::ALL {
        let mut row = format!("{:<16}", kind.name());
        for severity in 1..=5 {
            let mut rng = ChaCha8Rng::seed_from_u64(severity as u64);
            let x = corrupt(clean, CorruptionOp::new(kind, severity)?, &mut rng)?;
            let mad = x.data().iter().zip(clean.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.data().len() as f64;
            row.push_str(&format!(" {mad:>7.4}"));
        }
        println!("{row}");
    }
    Ok(())
}
