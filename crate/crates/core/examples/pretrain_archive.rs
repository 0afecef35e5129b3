//! Trains a source classifier, writes its parameter archive, restores it and
//! confirms the restored model produces bit-identical logits.
//!
//! cargo run --release --example pretrain_archive -- [archive path]

use m2a::archive;
use m2a::harness::{prepare_source, SourceConfig};
use m2a::train::accuracy;

fn main() -> anyhow::Result<()> {
    let path = std::env::args()
        .nth(1)
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("m2a-source.m2ap"));
    let cfg = SourceConfig::default();
    let t = std::time::Instant::now();
    let source = prepare_source(&cfg)?;
    let pre = source.pretrain.as_ref().expect("freshly trained");
    println!("trained in {:.1}s, loss per epoch {:?}", t.elapsed().as_secs_f64(), pre.loss_curve);
    println!(
        "train accuracy {:.4}, clean held-out accuracy {:.4}",
        pre.train_accuracy,
        pre.heldout_accuracy.unwrap_or(f64::NAN)
    );
    let m = &source.model;
    println!(
        "parameters: {} total, {} adaptable ({:.3}%)",
        m.total_param_count(),
        m.adaptable_param_count(),
        100.0 * m.adaptable_param_count() as f64 / m.total_param_count() as f64
    );

    archive::save(m, &path)?;
    let restored = archive::load(&path)?;
    let probe = source.dataset.stream.images.select(&(0..64).collect::<Vec<_>>());
    let same = m.logits(&probe)?.data().iter().zip(restored.logits(&probe)?.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    println!(
        "archive {} ({} bytes), restored logits bit-identical: {same}, restored held-out accuracy {:.4}",
        path.display(),
        std::fs::metadata(&path)?.len(),
        accuracy(&restored, &source.dataset.stream)?
    );
    Ok(())
}
