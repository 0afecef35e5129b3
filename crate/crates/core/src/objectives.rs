//! Mask-consistency and entropy objectives over per-view predictions.
//!
//! `cross_entropy(p, q) = -Σ_k p_k · log q_k` (log argument floored at
//! [`PROB_FLOOR`]). Inside the consistency loss each pair `(r, t)` with `r < t`
//! contributes a term in which the later view `t` is the student and the
//! detached view `r` is the target. With [`Orientation::TargetWeighted`] (the
//! default) the term is `cross_entropy(sg(p_r), p_t)`: the target weights the
//! student's log-probabilities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Lower bound applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

const SIMPLEX_TOL: f64 = 1e-6;

fn check_simplex(op: &'static str, p: &[f64]) -> Result<()> {
    let total: f64 = p.iter().sum();
    if p.iter().any(|v| !v.is_finite() || *v < -SIMPLEX_TOL) || (total - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::NumericDomain {
            op,
            detail: format!("not a probability vector (sum {total})"),
        });
    }
    Ok(())
}

/// Shannon entropy with `0·log 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    check_simplex("entropy", p)?;
    Ok(-p
        .iter()
        .filter(|v| **v > 0.0)
        .map(|v| v * v.ln())
        .sum::<f64>())
}

/// `-Σ p_k log max(q_k, PROB_FLOOR)`.
pub fn cross_entropy(p: &[f64], q: &[f64]) -> Result<f64> {
    check_simplex("cross_entropy", p)?;
    check_simplex("cross_entropy", q)?;
    if p.len() != q.len() {
        return Err(Error::shape("cross_entropy", &[p.len()], &[q.len()]));
    }
    Ok(-p
        .iter()
        .zip(q)
        .map(|(a, b)| a * b.max(PROB_FLOOR).ln())
        .sum::<f64>())
}

/// Which distribution sits inside the log of a consistency term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Orientation {
    /// `-Σ sg(target) · log student`.
    #[default]
    TargetWeighted,
    /// `-Σ student · log sg(target)`.
    StudentWeighted,
}

/// Which terms enter the adaptation objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossMode {
    #[default]
    #[serde(rename = "mcl+eml")]
    MclEml,
    #[serde(rename = "mcl")]
    Mcl,
    #[serde(rename = "eml")]
    Eml,
}

impl LossMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::MclEml => "mcl+eml",
            LossMode::Mcl => "mcl",
            LossMode::Eml => "eml",
        }
    }
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(self.as_str())
    }
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mcl+eml" => Ok(LossMode::MclEml),
            "mcl" => Ok(LossMode::Mcl),
            "eml" => Ok(LossMode::Eml),
            _ => Err(Error::Unknown {
                what: "loss mode",
                name: s.into(),
            }),
        }
    }
}

/// Probability batches `p^(0..n)`, each `[batch, K]`, recorded on a tape.
#[derive(Clone, Debug)]
pub struct ViewPredictions {
    probs: Vec<Var>,
}

impl ViewPredictions {
    /// Checks that all views share a shape and that every row is on the simplex.
    pub fn new(tape: &Tape, probs: Vec<Var>) -> Result<Self> {
        let Some(first) = probs.first() else {
            return Err(Error::Arity {
                op: "view predictions",
                min: 1,
                got: 0,
            });
        };
        let shape = tape.shape(*first).to_vec();
        if shape.len() != 2 {
            return Err(Error::shape("view predictions", &shape, &[0, 0]));
        }
        for &p in &probs {
            let v = tape.value(p);
            if v.shape() != shape.as_slice() {
                return Err(Error::shape("view predictions", &shape, v.shape()));
            }
            for row in v.data().chunks(shape[1]) {
                let total: f64 = row.iter().sum();
                if (total - 1.0).abs() > 1e-9 || row.iter().any(|x| *x < 0.0) {
                    return Err(Error::NumericDomain {
                        op: "view predictions",
                        detail: format!("row sums to {total}"),
                    });
                }
            }
        }
        Ok(ViewPredictions { probs })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn view(&self, t: usize) -> Var {
        self.probs[t]
    }
}

/// Per-row entropy, `[B, K] -> [B]`.
pub fn entropy_rows(tape: &mut Tape, p: Var) -> Var {
    let floored = tape.clamp_min(p, PROB_FLOOR);
    let logp = tape.log(floored).expect("floored probabilities are positive");
    let prod = tape.mul(p, logp).expect("same shape");
    let s = tape.sum_last_axis(prod);
    tape.neg(s)
}

/// Per-row `-Σ_k weights_k · log max(inside_k, PROB_FLOOR)`, `[B, K] -> [B]`.
pub fn cross_entropy_rows(tape: &mut Tape, weights: Var, inside: Var) -> Result<Var> {
    let floored = tape.clamp_min(inside, PROB_FLOOR);
    let logq = tape.log(floored)?;
    let prod = tape.mul(weights, logq)?;
    let s = tape.sum_last_axis(prod);
    Ok(tape.neg(s))
}

/// `(r, t)` index pairs of the consistency loss, in summation order: first the
/// anchor pairs `(0, t)`, then `(r, t)` with `1 <= r < t`.
pub fn mcl_pairs(n: usize) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(usize, usize)> = (1..n).map(|t| (0, t)).collect();
    for t in 1..n {
        for r in 1..t {
            pairs.push((r, t));
        }
    }
    pairs
}

/// Batch-mean cross-entropy of every later view against every earlier,
/// detached view.
pub fn mcl_loss(tape: &mut Tape, views: &ViewPredictions, orientation: Orientation) -> Result<Var> {
    let n = views.len();
    if n < 2 {
        return Err(Error::Arity {
            op: "mcl_loss",
            min: 2,
            got: n,
        });
    }
    let detached: Vec<Var> = views.probs[..n - 1]
        .iter()
        .map(|&p| tape.stop_gradient(p))
        .collect();
    let mut total: Option<Var> = None;
    for (r, t) in mcl_pairs(n) {
        let student = views.probs[t];
        let target = detached[r];
        let rows = match orientation {
            Orientation::TargetWeighted => cross_entropy_rows(tape, target, student)?,
            Orientation::StudentWeighted => cross_entropy_rows(tape, student, target)?,
        };
        let term = tape.mean(rows);
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(total.expect("n >= 2 gives at least one pair"))
}

/// `(1/n) Σ_t mean_batch H(p^(t))`.
pub fn eml_loss(tape: &mut Tape, views: &ViewPredictions) -> Result<Var> {
    let n = views.len();
    if n == 0 {
        return Err(Error::Arity {
            op: "eml_loss",
            min: 1,
            got: 0,
        });
    }
    let mut total: Option<Var> = None;
    for &p in &views.probs {
        let rows = entropy_rows(tape, p);
        let term = tape.mean(rows);
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(tape.scale(total.expect("n >= 1"), 1.0 / n as f64))
}

/// Both loss components plus the objective selected by the loss mode.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub mcl: Var,
    pub eml: Var,
}

pub fn total_loss(
    tape: &mut Tape,
    views: &ViewPredictions,
    mode: LossMode,
    orientation: Orientation,
) -> Result<LossTerms> {
    let mcl = mcl_loss(tape, views, orientation)?;
    let eml = eml_loss(tape, views)?;
    let total = match mode {
        LossMode::MclEml => tape.add(mcl, eml)?,
        LossMode::Mcl => mcl,
        LossMode::Eml => eml,
    };
    Ok(LossTerms { total, mcl, eml })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn probs(tape: &mut Tape, rows: &[&[f64]]) -> Var {
        let k = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        tape.constant(Tensor::new(vec![rows.len(), k], data).unwrap())
    }

    #[test]
    fn entropy_cases() {
        assert!((entropy(&[0.25; 4]).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert_eq!(entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        let p = [0.7, 0.2, 0.1];
        let direct = -(0.7f64 * 0.7f64.ln() + 0.2 * 0.2f64.ln() + 0.1 * 0.1f64.ln());
        assert!((entropy(&p).unwrap() - direct).abs() < 1e-12);
        assert!(entropy(&[0.5, 0.6]).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let p = [0.1, 0.6, 0.3];
        assert!((cross_entropy(&p, &p).unwrap() - entropy(&p).unwrap()).abs() < 1e-15);
        let one_hot = [0.0, 0.0, 1.0, 0.0, 0.0];
        let uniform = [0.2; 5];
        assert!((cross_entropy(&one_hot, &uniform).unwrap() - 5f64.ln()).abs() < 1e-12);
        let h = cross_entropy(&[0.5, 0.5], &[0.9, 0.1]).unwrap();
        assert!((h - 1.203972804325936).abs() < 1e-12);
        // zero target coordinate is floored, never infinite
        let floored = cross_entropy(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert!(floored.is_finite());
    }

    #[test]
    fn identical_views_term_counting() {
        let u = [0.1; 10];
        for (n, mcl_terms) in [(2usize, 1.0), (3, 3.0)] {
            let mut tape = Tape::new();
            let vs: Vec<Var> = (0..n).map(|_| probs(&mut tape, &[&u, &u])).collect();
            let views = ViewPredictions::new(&tape, vs).unwrap();
            let terms = total_loss(&mut tape, &views, LossMode::MclEml, Orientation::TargetWeighted).unwrap();
            let ln10 = 10f64.ln();
            assert!((tape.value(terms.mcl).item() - mcl_terms * ln10).abs() < 1e-12);
            assert!((tape.value(terms.eml).item() - ln10).abs() < 1e-12);
            assert!((tape.value(terms.total).item() - (mcl_terms + 1.0) * ln10).abs() < 1e-12);
        }
    }

    #[test]
    fn mcl_needs_two_views() {
        let mut tape = Tape::new();
        let p = probs(&mut tape, &[&[0.5, 0.5]]);
        let views = ViewPredictions::new(&tape, vec![p]).unwrap();
        assert!(matches!(
            mcl_loss(&mut tape, &views, Orientation::TargetWeighted),
            Err(Error::Arity { got: 1, .. })
        ));
        assert!(eml_loss(&mut tape, &views).is_ok());
    }

    #[test]
    fn one_hot_views_have_zero_eml() {
        let mut tape = Tape::new();
        let vs: Vec<Var> = (0..3)
            .map(|_| probs(&mut tape, &[&[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0]]))
            .collect();
        let views = ViewPredictions::new(&tape, vs).unwrap();
        let e = eml_loss(&mut tape, &views).unwrap();
        assert_eq!(tape.value(e).item(), 0.0);
    }

    #[test]
    fn mode_selection() {
        let mut tape = Tape::new();
        let a = probs(&mut tape, &[&[0.2, 0.8]]);
        let b = probs(&mut tape, &[&[0.6, 0.4]]);
        let views = ViewPredictions::new(&tape, vec![a, b]).unwrap();
        let only = total_loss(&mut tape, &views, LossMode::Mcl, Orientation::TargetWeighted).unwrap();
        assert_eq!(tape.value(only.total).item(), tape.value(only.mcl).item());
        let only = total_loss(&mut tape, &views, LossMode::Eml, Orientation::TargetWeighted).unwrap();
        assert_eq!(tape.value(only.total).item(), tape.value(only.eml).item());
    }

    #[test]
    fn pairs_enumeration() {
        assert_eq!(mcl_pairs(2), vec![(0, 1)]);
        assert_eq!(mcl_pairs(3), vec![(0, 1), (0, 2), (1, 2)]);
        assert_eq!(mcl_pairs(4).len(), 6);
    }

    #[test]
    fn view_shape_mismatch_rejected() {
        let mut tape = Tape::new();
        let a = probs(&mut tape, &[&[0.2, 0.8]]);
        let b = probs(&mut tape, &[&[0.2, 0.3, 0.5]]);
        assert!(ViewPredictions::new(&tape, vec![a, b]).is_err());
        let c = probs(&mut tape, &[&[0.2, 0.9]]);
        assert!(ViewPredictions::new(&tape, vec![a, c]).is_err());
    }

    #[test]
    fn loss_mode_strings() {
        for m in [LossMode::MclEml, LossMode::Mcl, LossMode::Eml] {
            assert_eq!(m.as_str().parse::<LossMode>().unwrap(), m);
        }
        assert!("both".parse::<LossMode>().is_err());
    }
}
