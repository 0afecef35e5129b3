//! Transforms an oriented grating, locates its spectral peak, and checks the
//! inverse transform and Parseval's identity.
//!
//! cargo run --example spectrum -- [height] [width]

use m2a::spectral::{dft2, idft2};
use std::f64::consts::PI;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let h: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(32);
    let w: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(h);
    // 3 cycles vertically and 5 horizontally
    let x: Vec<f64> = (0..h * w)
        .map(|k| {
            let (i, j) = ((k / w) as f64, (k % w) as f64);
            0.5 + 0.25 * (2.0 * PI * (3.0 * i / h as f64 + 5.0 * j / w as f64)).cos()
        })
        .collect();
    let spec = dft2(&x, h, w);
    let mut peaks: Vec<(usize, usize, f64)> = (0..h)
        .flat_map(|u| (0..w).map(move |v| (u, v)))
        .map(|(u, v)| (u, v, spec.get(u, v).norm()))
        .collect();
    peaks.sort_by(|a, b| b.2.total_cmp(&a.2));
    println!("{h}x{w} grating, three largest bins:");
    for (u, v, m) in &peaks[..3] {
        println!("  ({u:>2}, {v:>2})  |X| = {m:.3}");
    }

    let back = idft2(&spec);
    let roundtrip = back.real().iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("roundtrip max abs error {roundtrip:.2e}, max imaginary residue {:.2e}", back.max_imag());

    let space: f64 = x.iter().map(|v| v * v).sum();
    let freq: f64 = spec.bins().iter().map(|c| c.norm_sqr()).sum::<f64>() / (h * w) as f64;
    println!("Parseval: spatial energy {space:.6}, spectral energy / HW {freq:.6}");
    Ok(())
}
