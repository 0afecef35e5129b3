//! Compares tape gradients of a small classifier-style objective with central
//! finite differences, and shows that a stop-gradient branch contributes
//! exactly zero.
//!
//! cargo run --example gradcheck

use m2a::gradcheck::{numeric_gradient, relative_error};
use m2a::objectives::entropy_rows;
use m2a::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Mean entropy of `softmax(layer_norm(x·w) * scale)` with `w` and `scale`
/// fixed, as a function of the input `x`.
fn objective(tape: &mut Tape, x: &Tensor, w: &Tensor, scale: &Tensor, detach: bool) -> m2a::Result<(m2a::Var, m2a::Var)> {
    let xv = tape.leaf(x.clone());
    let src = if detach { tape.stop_gradient(xv) } else { xv };
    let w = tape.constant(w.clone());
    let s = tape.constant(scale.clone());
    let z = tape.matmul(src, w)?;
    let z = tape.layer_norm(z, 1e-5);
    let z = tape.mul(z, s)?;
    let p = tape.softmax(z)?;
    let h = entropy_rows(tape, p);
    Ok((xv, tape.mean(h)))
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn main() -> m2a::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&mut rng, &[4, 6]);
    let w = random(&mut rng, &[6, 5]);
    let scale = random(&mut rng, &[5]);

    let mut tape = Tape::new();
    let (xv, loss) = objective(&mut tape, &x, &w, &scale, false)?;
    let analytic = tape.backward(loss)?.wrt(xv);
    let numeric = numeric_gradient(
        |probe| {
            let mut t = Tape::new();
            let (_, l) = objective(&mut t, probe, &w, &scale, false).unwrap();
            t.value(l).item()
        },
        &x,
        1e-5,
    );
    println!("loss {:.6}", tape.value(loss).item());
    println!("relative error tape vs finite differences: {:.3e}", relative_error(analytic.data(), numeric.data()));

    let mut tape = Tape::new();
    let (xv, loss) = objective(&mut tape, &x, &w, &scale, true)?;
    let blocked = tape.backward(loss)?.wrt(xv);
    let max = blocked.data().iter().fold(0.0f64, |m, g| m.max(g.abs()));
    println!("largest gradient through stop-gradient: {max}");
    Ok(())
}
