//! Evaluates the consistency and entropy objectives on hand-built view
//! predictions: identical uniform views, and views that drift away from a
//! confident anchor.
//!
//! cargo run --example losses -- [classes]

use m2a::objectives::{mcl_pairs, total_loss, LossMode, Orientation, ViewPredictions};
use m2a::{Tape, Tensor};

fn views(tape: &mut Tape, rows: &[Vec<f64>]) -> m2a::Result<ViewPredictions> {
    let k = rows[0].len();
    let vars = rows
        .iter()
        .map(|r| Tensor::new(vec![1, k], r.clone()).map(|t| tape.leaf(t)))
        .collect::<m2a::Result<Vec<_>>>()?;
    ViewPredictions::new(tape, vars)
}

fn report(title: &str, rows: &[Vec<f64>]) -> anyhow::Result<()> {
    let mut tape = Tape::new();
    let v = views(&mut tape, rows)?;
    let t = total_loss(&mut tape, &v, LossMode::MclEml, Orientation::TargetWeighted)?;
    println!(
        "{title}: mcl {:.6}  eml {:.6}  total {:.6}",
        tape.value(t.mcl).item(),
        tape.value(t.eml).item(),
        tape.value(t.total).item()
    );
    Ok(())
}

fn main() -> anyhow::Result<()> {
    let k: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(10);
    let n = 3;
    println!("n = {n}, pairs {:?}", mcl_pairs(n));
    let uniform = vec![1.0 / k as f64; k];
    report("identical uniform views", &vec![uniform; n])?;
    println!("  ln K = {:.6}, n ln K = {:.6}", (k as f64).ln(), n as f64 * (k as f64).ln());

    let peaked = |conf: f64| {
        let mut p = vec![(1.0 - conf) / (k - 1) as f64; k];
        p[0] = conf;
        p
    };
    report("agreeing confident views", &[peaked(0.9), peaked(0.9), peaked(0.9)])?;
    report("confidence decays with masking", &[peaked(0.9), peaked(0.6), peaked(0.3)])?;
    Ok(())
}
