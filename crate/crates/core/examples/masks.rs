//! Draws one mask per policy at each level of a schedule and prints it as a
//! character grid, together with its cardinality and budget.
//!
//! cargo run --example masks -- [n] [alpha]

use m2a::masking::{
    frequency_budget, make_schedule, sample_freq_mask, sample_patch_mask, sample_pixel_mask, spatial_budget, Band,
    BinaryMask,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SIDE: usize = 16;

fn show(title: &str, mask: &BinaryMask, budget: usize) {
    println!("{title}: {} masked (budget {budget})", mask.masked_count());
    for i in 0..mask.height() {
        let row: String = (0..mask.width()).map(|j| if mask.get(i, j) { '#' } else { '.' }).collect();
        println!("  {row}");
    }
}

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(3);
    let alpha: f64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0.1);
    let schedule = make_schedule(n, alpha)?;
    println!("levels {:?}", schedule.levels());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cells = SIDE * SIDE;
    for &m in &schedule.levels()[1..] {
        println!("\n== m = {m}");
        let patch = sample_patch_mask(SIDE, SIDE, m, 4, &mut rng)?;
        show("patch (side 4)", &patch.mask, spatial_budget(m, cells));
        show("pixel", &sample_pixel_mask(SIDE, SIDE, m, &mut rng)?, spatial_budget(m, cells));
        for band in [Band::All, Band::Low, Band::High] {
            let mask = sample_freq_mask(SIDE, SIDE, m, band, &mut rng)?;
            show(&format!("frequency {band:?}"), &mask, frequency_budget(m, cells));
        }
    }
    Ok(())
}
