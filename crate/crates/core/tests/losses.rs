mod common;

use common::{rng, unit_vector, Acc};
use proptest::prelude::*;
use viewgen::autograd::Tape;
use viewgen::losses::*;
use viewgen::tensor::Tensor;

fn vec_t(v: &[f64]) -> Tensor<f64> {
    Tensor::new(&[v.len()], v.to_vec()).unwrap()
}

fn rows(rs: &[Vec<f64>], d: usize) -> Tensor<f64> {
    let refs: Vec<&[f64]> = rs.iter().map(|r| r.as_slice()).collect();
    stack_rows(&refs, d).unwrap()
}

/// `-sum_j y_j log softmax(z)_j`, compensated.
fn soft_ce(z: &[f64], y: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = Acc::default();
    for v in z {
        s.add((v - m).exp());
    }
    let lse = m + s.value().ln();
    let mut out = Acc::default();
    for (t, v) in y.iter().zip(z) {
        out.add(-t * (v - lse));
    }
    out.value()
}

#[test]
fn uniform_logits_give_log_of_bank_size() {
    let mut r = rng(1);
    for n in [1usize, 7, 31, 2047] {
        let d = 16;
        let q = unit_vector(&mut r, d);
        let tape = Tape::new();
        let bank = Tensor::new(&[n, d], q.repeat(n)).unwrap();
        let qv = tape.constant(vec_t(&q));
        let l = info_nce(qv, qv, Some(tape.constant(bank)), DEFAULT_TAU).unwrap();
        let want = ((n + 1) as f64).ln();
        assert!((l.loss.item() - want).abs() < 1e-9, "N={n}: {} vs {want}", l.loss.item());
    }
}

#[test]
fn info_nce_matches_reference_softmax() {
    let mut r = rng(2);
    let d = 12;
    for n in [0usize, 1, 9, 64] {
        let q = unit_vector(&mut r, d);
        let k = unit_vector(&mut r, d);
        let negs: Vec<Vec<f64>> = (0..n).map(|_| unit_vector(&mut r, d)).collect();
        let tau = 0.1;
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let z: Vec<f64> = std::iter::once(dot(&q, &k) / tau).chain(negs.iter().map(|v| dot(&q, v) / tau)).collect();
        let mut y = vec![0.0; n + 1];
        y[0] = 1.0;
        let tape = Tape::new();
        let bank = (n > 0).then(|| tape.constant(rows(&negs, d)));
        let got = info_nce(tape.constant(vec_t(&q)), tape.constant(vec_t(&k)), bank, tau).unwrap();
        assert!((got.loss.item() - soft_ce(&z, &y)).abs() < 1e-9, "N={n}");
    }
}

struct MixFixture {
    mixed: Vec<f64>,
    keys: Vec<Vec<f64>>,
    negs: Vec<Vec<f64>>,
    d: usize,
}

fn fixture(seed: u64, b: usize, n: usize) -> MixFixture {
    let mut r = rng(seed);
    let d = 10;
    MixFixture {
        mixed: unit_vector(&mut r, d),
        keys: (0..b).map(|_| unit_vector(&mut r, d)).collect(),
        negs: (0..n).map(|_| unit_vector(&mut r, d)).collect(),
        d,
    }
}

fn mix_loss(f: &MixFixture, mix: &MixSample, mode: MixMode, tau: f64) -> f64 {
    let tape = Tape::new();
    let negs = (!f.negs.is_empty()).then(|| tape.constant(rows(&f.negs, f.d)));
    mixup_contrastive_loss(tape.constant(vec_t(&f.mixed)), tape.constant(rows(&f.keys, f.d)), negs, mix, mode, tau)
        .unwrap()
        .loss
        .item()
}

#[test]
fn mixup_at_lambda_one_is_plain_contrastive() {
    let (b, n, tau) = (6, 20, 0.07);
    let f = fixture(3, b, n);
    for partner in 0..b {
        let mix = MixSample::new(1.0, 1.0, b, 2, partner).unwrap();
        // cross-instance: positive is key 2, every other batch key and the queue are negatives
        let got = mix_loss(&f, &mix, MixMode::CrossInstance, tau);
        let mut negs: Vec<Vec<f64>> = f.keys.iter().enumerate().filter(|(i, _)| *i != 2).map(|(_, k)| k.clone()).collect();
        negs.extend(f.negs.iter().cloned());
        let tape = Tape::new();
        let want = info_nce(
            tape.constant(vec_t(&f.mixed)),
            tape.constant(vec_t(&f.keys[2])),
            Some(tape.constant(rows(&negs, f.d))),
            tau,
        )
        .unwrap()
        .loss
        .item();
        assert!((got - want).abs() < 1e-9, "partner {partner}: {got} vs {want}");
        // same-instance ignores the partner altogether
        let same = mix_loss(&f, &mix, MixMode::SameInstance, tau);
        let tape = Tape::new();
        let plain = info_nce(
            tape.constant(vec_t(&f.mixed)),
            tape.constant(vec_t(&f.keys[2])),
            Some(tape.constant(rows(&f.negs, f.d))),
            tau,
        )
        .unwrap()
        .loss
        .item();
        assert!((same - plain).abs() < 1e-9);
    }
}

#[test]
fn mixing_with_oneself_collapses_target() {
    let (b, n, tau) = (5, 8, 0.2);
    let f = fixture(4, b, n);
    let reference = mix_loss(&f, &MixSample::new(1.0, 1.0, b, 3, 3).unwrap(), MixMode::CrossInstance, tau);
    for lambda in [0.0, 0.1, 0.5, 0.77, 1.0] {
        let mix = MixSample::new(lambda, 1.0, b, 3, 3).unwrap();
        let t = mix.mixed_target(n);
        assert_eq!(t, mix.virtual_label(3, n));
        let got = mix_loss(&f, &mix, MixMode::CrossInstance, tau);
        assert!((got - reference).abs() < 1e-9, "lambda {lambda}");
    }
    // mixing a feature with itself returns it for any lambda
    let tape = Tape::new();
    let a = tape.constant(vec_t(&f.mixed));
    for lambda in [0.0, 0.3, 1.0] {
        let m = mix_features(a, a, lambda).unwrap().value();
        for (x, y) in m.data().iter().zip(&f.mixed) {
            assert!((x - y).abs() < 1e-15);
        }
    }
}

#[test]
fn reversing_twice_is_exact_identity() {
    let tape = Tape::new();
    let x = tape.leaf(vec_t(&[0.3, -1.2, 2.5]));
    let w = vec_t(&[1.5, -0.25, 0.7]);
    let plain = x.dot(tape.constant(w.clone())).square();
    let twice = gradient_reversal(gradient_reversal(x, 1.0).unwrap(), 1.0).unwrap();
    let rev = twice.dot(tape.constant(w.clone())).square();
    let once = gradient_reversal(x, 1.0).unwrap().dot(tape.constant(w)).square();
    assert_eq!(plain.item(), rev.item());
    assert_eq!(plain.item(), once.item());
    let g_plain = tape.backward(plain).get(x).unwrap().clone();
    let g_twice = tape.backward(rev).get(x).unwrap().clone();
    let g_once = tape.backward(once).get(x).unwrap().clone();
    assert_eq!(g_plain.data(), g_twice.data());
    for (a, b) in g_plain.data().iter().zip(g_once.data()) {
        assert_eq!(*b, -*a);
    }
}

#[test]
fn reversal_scale_multiplies_gradient() {
    for s in [0.0, 0.5, 1.0, 3.0] {
        let tape = Tape::new();
        let x = tape.leaf(vec_t(&[0.4, -0.9]));
        let y = gradient_reversal(x, s).unwrap().square().sum();
        let g = tape.backward(y).get(x).unwrap().clone();
        assert_eq!(g.data(), &[-s * 0.8, -s * -1.8][..]);
    }
    let tape = Tape::new();
    assert!(gradient_reversal(tape.leaf(vec_t(&[1.0])), -1.0).is_err());
}

/// One gradient step on a two-parameter toy with and without the reversal
/// layer: the displacements are exact opposites.
#[test]
fn reversal_flips_the_update_direction() {
    let p0 = [0.8, -0.3];
    let target = vec_t(&[0.1, 0.4]);
    let lr = 0.05;
    let step = |reverse: bool| -> [f64; 2] {
        let tape = Tape::new();
        let p = tape.leaf(vec_t(&p0));
        let h = if reverse { gradient_reversal(p, 1.0).unwrap() } else { p };
        let loss = adversarial_loss(h, tape.constant(target.clone())).unwrap();
        let g = tape.backward(loss).get(p).unwrap().clone();
        [p0[0] - lr * g.data()[0], p0[1] - lr * g.data()[1]]
    };
    let plain = step(false);
    let rev = step(true);
    for i in 0..2 {
        assert_eq!(rev[i] - p0[i], -(plain[i] - p0[i]));
    }
    let dist = |p: [f64; 2]| ((p[0] - 0.1f64).powi(2) + (p[1] - 0.4f64).powi(2)).sqrt();
    assert!(dist(plain) < dist(p0) && dist(rev) > dist(p0));
}

#[test]
fn orthogonal_codes_are_root_two_apart() {
    let d = 128;
    for (i, j) in [(0, 1), (5, 77), (127, 3)] {
        let mut a = vec![0.0; d];
        let mut b = vec![0.0; d];
        a[i] = 1.0;
        b[j] = 1.0;
        let tape = Tape::new();
        let l = three_d_loss(tape.constant(vec_t(&a)), tape.constant(vec_t(&b))).unwrap();
        assert!((l.item() - 2f64.sqrt()).abs() < 1e-9);
    }
    // any orthonormal pair, not only basis vectors
    let mut r = rng(9);
    let a = unit_vector(&mut r, 16);
    let raw = unit_vector(&mut r, 16);
    let proj: f64 = a.iter().zip(&raw).map(|(x, y)| x * y).sum();
    let b: Vec<f64> = raw.iter().zip(&a).map(|(y, x)| y - proj * x).collect();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let b: Vec<f64> = b.iter().map(|x| x / nb).collect();
    let tape = Tape::new();
    let l = three_d_loss(tape.constant(vec_t(&a)), tape.constant(vec_t(&b))).unwrap();
    assert!((l.item() - 2f64.sqrt()).abs() < 1e-9);
}

#[test]
fn adversarial_anchor_gets_no_gradient() {
    let tape = Tape::new();
    let a = tape.leaf(vec_t(&[1.0, 2.0]));
    let b = tape.leaf(vec_t(&[0.0, -1.0]));
    let l = adversarial_loss(a, b).unwrap();
    let g = tape.backward(l);
    assert!(g.get(b).map_or(true, |t| t.data().iter().all(|&x| x == 0.0)));
    assert!(g.get(a).unwrap().data().iter().any(|&x| x != 0.0));
}

proptest! {
    #[test]
    fn mixed_target_is_a_distribution(lambda in 0.0f64..=1.0, b in 1usize..8, n in 0usize..10, i in 0usize..8, r in 0usize..8) {
        let (i, r) = (i % b, r % b);
        let mix = MixSample::new(lambda, 1.0, b, i, r).unwrap();
        let t = mix.mixed_target(n);
        prop_assert_eq!(t.len(), b + n);
        prop_assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(t.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn cross_instance_loss_is_linear_in_lambda(lambda in 0.0f64..=1.0, seed in 0u64..1000) {
        let f = fixture(seed, 4, 6);
        let tau = 0.1;
        let l = |lam: f64| mix_loss(&f, &MixSample::new(lam, 1.0, 4, 0, 2).unwrap(), MixMode::CrossInstance, tau);
        let want = lambda * l(1.0) + (1.0 - lambda) * l(0.0);
        prop_assert!((l(lambda) - want).abs() < 1e-9);
    }

    #[test]
    fn info_nce_is_bounded_below_by_zero(seed in 0u64..1000, n in 0usize..20) {
        let f = fixture(seed, 1, n);
        let tape = Tape::new();
        let bank = (n > 0).then(|| tape.constant(rows(&f.negs, f.d)));
        let l = info_nce(tape.constant(vec_t(&f.mixed)), tape.constant(vec_t(&f.keys[0])), bank, 0.07).unwrap();
        prop_assert!(l.loss.item() >= 0.0);
        prop_assert!(l.loss.item().is_finite());
    }

    #[test]
    fn sampled_lambda_lies_in_unit_interval(alpha in 0.05f64..5.0, seed in 0u64..1000) {
        let mut r = rng(seed);
        let l = sample_lambda(alpha, &mut r).unwrap();
        prop_assert!((0.0..=1.0).contains(&l));
    }
}
