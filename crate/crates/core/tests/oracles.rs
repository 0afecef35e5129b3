use m2a::data::{corrupt, generate_source, CorruptionKind, CorruptionOp, DatasetSpec};
use m2a::masking::{
    apply_freq_mask, apply_spatial_mask, decode_mask, encode_mask, make_schedule, make_views, sample_freq_mask,
    sample_pixel_mask, symmetric_closure, Band, Family, MaskPolicy, Subtype,
};
use m2a::model::{Classifier, ClassifierConfig, ParamRole, Trainable};
use m2a::objectives::{total_loss, LossMode, Orientation, ViewPredictions};
use m2a::optim::{AdamConfig, AdamState};
use m2a::spectral::{dft2, idft2};
use m2a::{ImageTensor, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_model() -> (Classifier, ClassifierConfig) {
    let cfg = ClassifierConfig {
        channels: 2,
        height: 6,
        width: 6,
        hidden: 12,
        blocks: 2,
        classes: 5,
        ..ClassifierConfig::default()
    };
    let mut model = Classifier::new(cfg, 21);
    // move the affine parameters off their identity initialisation
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for p in model.params_mut().iter_mut().filter(|p| p.role == ParamRole::Adaptable) {
        for v in p.value.data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    (model, cfg)
}

fn softmax(z: &[f64], k: usize) -> Vec<f64> {
    z.chunks(k)
        .flat_map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(move |v| v / s)
        })
        .collect()
}

/// Loss of the stacked views computed from plain logits. `targets` fixes the
/// teacher distributions for the consistency terms.
fn loss_oracle(probs: &[f64], targets: &[f64], rows: usize, n: usize, k: usize, mode: LossMode) -> f64 {
    let view = |p: &[f64], t: usize| p[t * rows * k..(t + 1) * rows * k].to_vec();
    let mut mcl = 0.0;
    for t in 1..n {
        for r in 0..t {
            let (s, q) = (view(probs, t), view(targets, r));
            mcl -= q.iter().zip(&s).map(|(q, s)| q * s.max(1e-12).ln()).sum::<f64>() / rows as f64;
        }
    }
    let eml = (0..n)
        .map(|t| -view(probs, t).iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>() / rows as f64)
        .sum::<f64>()
        / n as f64;
    match mode {
        LossMode::MclEml => mcl + eml,
        LossMode::Mcl => mcl,
        LossMode::Eml => eml,
    }
}

#[test]
fn classifier_objective_gradients_match_finite_differences() {
    let (model, cfg) = small_model();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let rows = 4;
    let x = ImageTensor::new(rows, 2, 6, 6, (0..rows * 72).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
    let schedule = make_schedule(3, 0.2).unwrap();
    let views = make_views(&x, &schedule, &MaskPolicy::Pixel, &mut rng).unwrap();
    let stacked = ImageTensor::concat(&views.views.iter().collect::<Vec<_>>()).unwrap();
    let k = cfg.classes;
    let base = softmax(model.logits(&stacked).unwrap().data(), k);

    for mode in [LossMode::MclEml, LossMode::Mcl, LossMode::Eml] {
        let mut tape = Tape::new();
        let (bound, logits) = model.forward(&mut tape, &stacked, Trainable::Adaptable).unwrap();
        let p = tape.softmax(logits).unwrap();
        let per_view = (0..3).map(|t| tape.rows(p, t * rows, (t + 1) * rows).unwrap()).collect();
        let preds = ViewPredictions::new(&tape, per_view).unwrap();
        let terms = total_loss(&mut tape, &preds, mode, Orientation::TargetWeighted).unwrap();
        let value = tape.value(terms.total).item();
        assert!((value - loss_oracle(&base, &base, rows, 3, k, mode)).abs() < 1e-10);
        let grads = tape.backward(terms.total).unwrap();

        for (idx, var) in bound.leaves() {
            let analytic = grads.wrt(var);
            let h = 1e-6;
            for e in 0..analytic.numel() {
                let mut probe = model.clone();
                let orig = probe.params()[idx].value.data()[e];
                let mut eval = |v: f64| {
                    probe.params_mut()[idx].value.data_mut()[e] = v;
                    let p = softmax(probe.logits(&stacked).unwrap().data(), k);
                    loss_oracle(&p, &base, rows, 3, k, mode)
                };
                let numeric = (eval(orig + h) - eval(orig - h)) / (2.0 * h);
                let a = analytic.data()[e];
                assert!(
                    (a - numeric).abs() <= 1e-5 * a.abs().max(numeric.abs()).max(1e-3),
                    "{mode} {} [{e}]: {a} vs {numeric}",
                    model.params()[idx].name
                );
            }
        }
    }
}

#[test]
fn adam_matches_a_hand_rolled_recurrence_over_many_steps() {
    let (mut model, _) = small_model();
    let config = AdamConfig {
        lr: 0.01,
        weight_decay: 0.05,
        ..AdamConfig::default()
    };
    let mut opt = AdamState::new(&model, Trainable::Adaptable, config);
    let tracked: Vec<usize> = opt.tracked().collect();
    let mut reference: Vec<Vec<f64>> = tracked.iter().map(|&i| model.params()[i].value.data().to_vec()).collect();
    let mut m: Vec<Vec<f64>> = reference.iter().map(|v| vec![0.0; v.len()]).collect();
    let mut v = m.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for step in 1..=25 {
        let grads: Vec<(usize, Tensor)> = tracked
            .iter()
            .map(|&i| {
                let shape = model.params()[i].value.shape().to_vec();
                let n = shape.iter().product();
                (i, Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap())
            })
            .collect();
        opt.step(&mut model, &grads).unwrap();
        for (s, (_, g)) in grads.iter().enumerate() {
            for e in 0..reference[s].len() {
                let gk = g.data()[e] + 0.05 * reference[s][e];
                m[s][e] = 0.9 * m[s][e] + 0.1 * gk;
                v[s][e] = 0.999 * v[s][e] + 0.001 * gk * gk;
                let mh = m[s][e] / (1.0 - 0.9f64.powi(step));
                let vh = v[s][e] / (1.0 - 0.999f64.powi(step));
                reference[s][e] -= 0.01 * mh / (vh.sqrt() + 1e-8);
            }
        }
        assert_eq!(opt.step_count(), step as u64);
    }
    for (s, &i) in tracked.iter().enumerate() {
        for (a, b) in model.params()[i].value.data().iter().zip(&reference[s]) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn default_model_adapts_under_one_percent_of_its_parameters() {
    let model = Classifier::new(ClassifierConfig::default(), 0);
    let registry: usize = model.params().iter().map(|p| p.value.numel()).sum();
    assert_eq!(model.total_param_count(), registry);
    // 3072·128 + 2·128·128 + 128·10 weights, 3·128 + 10 biases, 3·2·128 affine
    assert_eq!(registry, 3072 * 128 + 2 * 128 * 128 + 128 * 10 + 3 * 128 + 10 + 3 * 2 * 128);
    assert_eq!(model.adaptable_param_count(), 3 * 2 * 128);
    assert!((model.adaptable_param_count() as f64) < 0.01 * registry as f64);
    let archive = m2a::archive::snapshot(&model);
    assert!(archive.len() > 8 * registry && archive.len() < 8 * registry + 4096);
}

fn mean_abs_change(a: &ImageTensor, b: &ImageTensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.data().len() as f64
}

#[test]
fn corruption_strength_grows_with_severity() {
    let spec = DatasetSpec {
        train_size: 100,
        stream_size: 40,
        ..DatasetSpec::default()
    };
    let clean = generate_source(&spec, 3).unwrap().stream.images;
    for kind in CorruptionKind::ALL {
        let mut previous = 0.0;
        for severity in 1..=5u8 {
            let x = corrupt(&clean, CorruptionOp::new(kind, severity).unwrap(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            let change = mean_abs_change(&x, &clean);
            assert!(change >= previous - 1e-12, "{kind} severity {severity}: {change} < {previous}");
            previous = change;
        }
        assert!(previous > 0.0, "{kind}");
    }
}

fn direct_dft_re_im(x: &[f64], h: usize, w: usize, u: usize, v: usize) -> (f64, f64) {
    let (mut re, mut im) = (0.0, 0.0);
    for i in 0..h {
        for j in 0..w {
            let a = -2.0 * std::f64::consts::PI * ((u * i) as f64 / h as f64 + (v * j) as f64 / w as f64);
            re += x[i * w + j] * a.cos();
            im += x[i * w + j] * a.sin();
        }
    }
    (re, im)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn dft_is_linear_and_matches_sampled_bins(
        h in 1usize..20, w in 1usize..20, seed in any::<u64>(), a in -3.0f64..3.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let combo: Vec<f64> = x.iter().zip(&y).map(|(x, y)| a * x + y).collect();
        let (fx, fy, fc) = (dft2(&x, h, w), dft2(&y, h, w), dft2(&combo, h, w));
        for ((p, q), r) in fx.bins().iter().zip(fy.bins()).zip(fc.bins()) {
            prop_assert!((a * p + q - r).norm() < 1e-9);
        }
        let (u, v) = (rng.gen_range(0..h), rng.gen_range(0..w));
        let (re, im) = direct_dft_re_im(&x, h, w, u, v);
        prop_assert!((fx.get(u, v).re - re).abs() < 1e-9 && (fx.get(u, v).im - im).abs() < 1e-9);
        let back = idft2(&fx);
        prop_assert!(back.real().iter().zip(&x).all(|(b, x)| (b - x).abs() < 1e-12));
    }

    #[test]
    fn symmetric_closure_is_closed_and_idempotent(h in 1usize..16, w in 1usize..16, seed in any::<u64>(), m in 0.0f64..0.9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = sample_freq_mask(h, w, m, Band::All, &mut rng).unwrap();
        let closed = symmetric_closure(&mask);
        for (u, v) in closed.ones_iter() {
            prop_assert!(closed.get((h - u) % h, (w - v) % w));
        }
        for (u, v) in mask.ones_iter() {
            prop_assert!(closed.get(u, v));
        }
        prop_assert_eq!(symmetric_closure(&closed), closed);
    }

    #[test]
    fn symmetric_frequency_masks_leave_no_imaginary_residue(seed in any::<u64>(), m in 0.01f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = ImageTensor::new(1, 2, 8, 10, (0..160).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let mask = symmetric_closure(&sample_freq_mask(8, 10, m, Band::All, &mut rng).unwrap());
        let (out, residue) = apply_freq_mask(&x, &mask).unwrap();
        prop_assert!(residue < 1e-12);
        prop_assert!(out.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn spatial_masks_zero_exactly_the_marked_pixels(seed in any::<u64>(), m in 0.0f64..0.95) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = ImageTensor::new(2, 3, 7, 9, (0..378).map(|_| rng.gen_range(0.1..1.0)).collect()).unwrap();
        let mask = sample_pixel_mask(7, 9, m, &mut rng).unwrap();
        let out = apply_spatial_mask(&x, &mask).unwrap();
        for img in 0..2 {
            for (c, plane) in out.image(img).chunks(63).enumerate() {
                for (p, v) in plane.iter().enumerate() {
                    let original = x.image(img)[c * 63 + p];
                    prop_assert_eq!(*v, if mask.bits()[p] { 0.0 } else { original });
                }
            }
        }
        let bytes = encode_mask(&mask, Family::Spatial, Subtype::Pixel);
        let (back, family, subtype) = decode_mask(&bytes).unwrap();
        prop_assert_eq!(back, mask);
        prop_assert_eq!((family, subtype), (Family::Spatial, Subtype::Pixel));
    }

    #[test]
    fn losses_stay_in_their_ranges(seed in any::<u64>(), rows in 1usize..5, k in 2usize..8, n in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let views = (0..n)
            .map(|_| {
                let z: Vec<f64> = (0..rows * k).map(|_| rng.gen_range(-4.0..4.0)).collect();
                tape.constant(Tensor::new(vec![rows, k], softmax(&z, k)).unwrap())
            })
            .collect();
        let views = ViewPredictions::new(&tape, views).unwrap();
        let t = total_loss(&mut tape, &views, LossMode::MclEml, Orientation::TargetWeighted).unwrap();
        let (mcl, eml, total) = (tape.value(t.mcl).item(), tape.value(t.eml).item(), tape.value(t.total).item());
        prop_assert!((0.0..=(k as f64).ln() + 1e-12).contains(&eml));
        // each cross-entropy term is at least the target's entropy
        prop_assert!(mcl >= 0.0);
        prop_assert!((total - mcl - eml).abs() < 1e-12);
    }
}
