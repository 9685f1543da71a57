use super::*;
use crate::autograd::Tape;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t2(rows: usize, cols: usize, data: Vec<f64>) -> Tensor<f64> {
    Tensor::from_vec(&[rows, cols], data).unwrap()
}

fn unit_rows(r: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor<f64> {
    let mut data: Vec<f64> = (0..n * d).map(|_| r.random_range(-1.0..1.0)).collect();
    for row in data.chunks_mut(d) {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= norm);
    }
    t2(n, d, data)
}

/// Every class appears at least twice.
fn balanced_labels(r: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| (i / 2) % 4).collect();
    for i in (1..n).rev() {
        labels.swap(i, r.random_range(0..=i));
    }
    labels
}

/// Direct transcription of the directed loss: plain exponentials, explicit
/// indicator sums.
fn naive_pair(a: &Tensor<f64>, b: &Tensor<f64>, labels: &[usize], tau: f64) -> f64 {
    let n = labels.len();
    let dot = |i: usize, j: usize| a.row(i).iter().zip(b.row(j)).map(|(x, y)| x * y).sum::<f64>();
    let mut total = 0.0;
    for i in 0..n {
        let n_yi = labels.iter().filter(|&&y| y == labels[i]).count() as f64;
        let mut z_i = 0.0;
        for k in 0..n {
            if labels[k] != labels[i] {
                z_i += (dot(i, k) / tau).exp();
            }
        }
        let mut inner = 0.0;
        for j in 0..n {
            if labels[j] == labels[i] {
                let e = (dot(i, j) / tau).exp();
                inner += (e / (e + z_i)).ln();
            }
        }
        total -= inner / n_yi;
    }
    total
}

fn naive_total(vs: &[&Tensor<f64>], labels: &[usize], tau: f64) -> f64 {
    let mut s = 0.0;
    for a in 0..vs.len() {
        for b in 0..vs.len() {
            if a != b {
                s += naive_pair(vs[a], vs[b], labels, tau);
            }
        }
    }
    s
}

#[test]
fn softmax_of_log_two() {
    let p = softmax_prob(&t2(1, 4, vec![core::f64::consts::LN_2, 0.0, 0.0, 0.0])).unwrap();
    for (a, b) in p.data().iter().zip([0.4, 0.2, 0.2, 0.2]) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn softened_label_closed_form() {
    let q = soften_label::<f64>(0, 4, 2.0);
    for (a, b) in q.iter().zip([0.354662, 0.215113, 0.215113, 0.215113]) {
        assert!((a - b).abs() < 1e-5, "{:?}", q);
    }
    let e = 0.5f64.exp();
    assert!((q[0] - e / (e + 3.0)).abs() < 1e-15);
}

#[test]
fn uniform_logits_give_log_four() {
    let z = t2(3, 4, vec![0.0; 12]);
    for eps in [0.0, 0.1] {
        let (l, _) = ce_with_grad(&z, &[0, 2, 3], eps).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-9);
    }
}

#[test]
fn identical_embeddings_give_four_log_three() {
    let v = t2(4, 2, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
    let labels = [0, 0, 1, 1];
    let l = isicr_pair(&v, &v, &labels, 0.1).unwrap();
    assert!((l - 4.0 * 3f64.ln()).abs() < 1e-9);
    let total = isicr_total(&[&v, &v], &labels, 0.1).unwrap();
    assert!((total - 2.0 * l).abs() < 1e-12);
}

#[test]
fn vectorised_contrastive_loss_matches_naive_loops() {
    let mut r = ChaCha8Rng::seed_from_u64(42);
    for fixture in 0..50 {
        let m = 2 + fixture % 2;
        let labels = balanced_labels(&mut r, 16);
        let vs: Vec<_> = (0..m).map(|_| unit_rows(&mut r, 16, 8)).collect();
        let refs: Vec<&Tensor<f64>> = vs.iter().collect();
        let pair = isicr_pair(refs[0], refs[1], &labels, 0.1).unwrap();
        assert!((pair - naive_pair(refs[0], refs[1], &labels, 0.1)).abs() < 1e-6);
        let total = isicr_total(&refs, &labels, 0.1).unwrap();
        assert!((total - naive_total(&refs, &labels, 0.1)).abs() < 1e-6);
    }
}

#[test]
fn sharp_temperature_stays_finite() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let labels = balanced_labels(&mut r, 16);
    let a = unit_rows(&mut r, 16, 8);
    let b = unit_rows(&mut r, 16, 8);
    let (l, ga, gb) = isicr_pair_with_grad(&a, &b, &labels, 0.01).unwrap();
    assert!(l.is_finite() && l >= 0.0);
    assert!(ga.all_finite() && gb.all_finite());
    let (l32, _, _) = isicr_pair_with_grad(&a.cast::<f32>(), &b.cast::<f32>(), &labels, 0.01).unwrap();
    assert!(l32.is_finite());
    assert!(((l32 as f64) - l).abs() / l < 1e-3);
}

#[test]
fn contrastive_input_validation() {
    let v = t2(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
    assert_eq!(
        isicr_pair(&v, &v, &[0, 0, 1], 0.1),
        Err(Error::InsufficientPositives { class: 1, count: 1 })
    );
    let bad = t2(3, 2, vec![2.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
    assert!(matches!(
        isicr_pair(&bad, &v, &[0, 0, 0], 0.1),
        Err(Error::NotNormalized { row: 0, .. })
    ));
    assert!(isicr_total(&[&v], &[0, 0, 0], 0.1).is_err());
    let z = t2(2, 4, vec![0.0; 8]);
    assert_eq!(
        ce_with_grad(&z, &[0, 4], 0.1).unwrap_err(),
        Error::LabelOutOfRange { label: 4, classes: 4 }
    );
    let nan = t2(1, 4, vec![f64::NAN, 0.0, 0.0, 0.0]);
    assert!(matches!(ce_with_grad(&nan, &[0], 0.1), Err(Error::NonFinite { .. })));
}

#[test]
fn kl_of_matching_distribution_is_zero() {
    let q = soft_labels::<f64>(&[0, 3], 4, 2.0).unwrap();
    let l = kl_loss(&q, &[&q]).unwrap();
    assert!(l.total.abs() < 1e-15);
    // logits equal to the one-hot label reproduce the soft label exactly
    let z = t2(2, 4, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    let (v, g) = kl_with_grad(&q, &z, 2.0).unwrap();
    assert!(v.abs() < 1e-15);
    assert!(g.data().iter().all(|x| x.abs() < 1e-15));
}

#[test]
fn ce_decreases_as_true_logit_grows() {
    let mut last = f64::INFINITY;
    for k in 0..10 {
        let z = t2(1, 4, vec![0.0, k as f64 * 0.5, 0.0, 0.0]);
        let (l, _) = ce_with_grad(&z, &[1], 0.0).unwrap();
        assert!(l < last);
        last = l;
    }
}

#[test]
fn composite_weights_and_ablations() {
    let mut r = ChaCha8Rng::seed_from_u64(8);
    let labels = balanced_labels(&mut r, 8);
    let zs: Vec<_> = (0..3)
        .map(|_| t2(8, 4, (0..32).map(|_| r.random_range(-2.0..2.0)).collect()))
        .collect();
    let vr: Vec<_> = (0..3).map(|_| unit_rows(&mut r, 8, 5)).collect();
    let vc: Vec<_> = (0..3).map(|_| unit_rows(&mut r, 8, 5)).collect();
    let inputs = LossInputs {
        logits: zs.iter().collect(),
        v_rg: vr.iter().collect(),
        v_ch: vc.iter().collect(),
        labels: &labels,
    };
    let w = LossWeights::default();
    let (full, _) = total_loss(&inputs, &w, LossTerms::FULL).unwrap();
    let expect = full.ce + 4.0 * full.kl + 0.2 * full.cr_rg + 0.2 * full.cr_ch;
    assert!((full.total - expect).abs() < 1e-12);
    assert!((full.cr_rg - isicr_total(&inputs.v_rg, &labels, 0.1).unwrap()).abs() < 1e-12);

    let (base, g) = total_loss(&inputs, &w, LossTerms::BASELINE).unwrap();
    assert_eq!(base.total, base.ce);
    assert_eq!(
        (base.ce, base.kl, base.cr_rg, base.cr_ch),
        (full.ce, full.kl, full.cr_rg, full.cr_ch)
    );
    assert!(g.v_rg.iter().chain(&g.v_ch).all(|t| t.data().iter().all(|x| *x == 0.0)));
    for (m, z) in zs.iter().enumerate() {
        assert_eq!(g.logits[m], ce_with_grad(z, &labels, 0.1).unwrap().1);
    }

    let (no_kl, _) = total_loss(&inputs, &w, LossTerms::NO_KL).unwrap();
    assert_eq!(no_kl.kl_weight, 0.0);
    let (rg_only, _) = total_loss(&inputs, &w, LossTerms::NO_KL_NO_CR_CH).unwrap();
    assert!((rg_only.total - (full.ce + 0.2 * full.cr_rg)).abs() < 1e-12);
    assert_eq!(LossTerms::from_ablation("no-kl-cr-rg"), Some(LossTerms::NO_KL_NO_CR_RG));
    assert_eq!(LossTerms::NO_KL.ablation_name(), "no-kl");
    assert_eq!(LossTerms::from_ablation("bogus"), None);
}

fn check_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], g: &[f64], tol: f64) {
    let h = 1e-6;
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let up = f(&xp);
        xp[i] = x[i] - h;
        let down = f(&xp);
        xp[i] = x[i];
        let num = (up - down) / (2.0 * h);
        let err = (num - g[i]).abs() / num.abs().max(g[i].abs()).max(1e-8);
        assert!(
            err < tol || (num - g[i]).abs() < 1e-9,
            "entry {}: analytic {} numeric {}",
            i,
            g[i],
            num
        );
    }
}

#[test]
fn ce_and_kl_gradients_match_finite_differences() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let labels = balanced_labels(&mut r, 16);
    let z = t2(16, 4, (0..64).map(|_| r.random_range(-3.0..3.0)).collect());
    let (_, g) = ce_with_grad(&z, &labels, 0.1).unwrap();
    check_grad(
        |x| ce_with_grad(&t2(16, 4, x.to_vec()), &labels, 0.1).unwrap().0,
        z.data(),
        g.data(),
        1e-5,
    );
    let q = soft_labels::<f64>(&labels, 4, 2.0).unwrap();
    let (_, g) = kl_with_grad(&q, &z, 2.0).unwrap();
    check_grad(
        |x| kl_with_grad(&q, &t2(16, 4, x.to_vec()), 2.0).unwrap().0,
        z.data(),
        g.data(),
        1e-5,
    );
}

/// Contrastive loss of raw (unnormalised) embeddings through the tape's
/// l2-normalisation, with gradients for each raw input.
fn normalised_total(raw: &[Tensor<f64>], labels: &[usize], tau: f64) -> (f64, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let leaves: Vec<_> = raw.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let normed: Vec<_> = leaves.iter().map(|&v| tape.l2_normalize(v).unwrap()).collect();
    let values: Vec<Tensor<f64>> = normed.iter().map(|&v| tape.value(v).clone()).collect();
    let refs: Vec<&Tensor<f64>> = values.iter().collect();
    let (l, grads) = isicr_total_with_grad(&refs, labels, tau).unwrap();
    let seeds: Vec<_> = normed.iter().zip(&grads).map(|(v, g)| (*v, g.data())).collect();
    tape.backward(&seeds).unwrap();
    (l, leaves.iter().map(|&v| tape.grad(v).unwrap().to_vec()).collect())
}

#[test]
fn contrastive_gradients_match_finite_differences() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    for m in [2, 3] {
        let labels = balanced_labels(&mut r, 12);
        let raw: Vec<Tensor<f64>> = (0..m)
            .map(|_| t2(12, 6, (0..72).map(|_| r.random_range(-1.0..1.0)).collect()))
            .collect();
        let (_, grads) = normalised_total(&raw, &labels, 0.1);
        for p in 0..m {
            let f = |x: &[f64]| {
                let mut rr = raw.clone();
                rr[p] = t2(12, 6, x.to_vec());
                normalised_total(&rr, &labels, 0.1).0
            };
            check_grad(f, raw[p].data(), &grads[p], 1e-5);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kl_is_non_negative(seed in any::<u64>(), temp in 0.5f64..8.0) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = (0..6).map(|_| r.random_range(0..4)).collect();
        let z = t2(6, 4, (0..24).map(|_| r.random_range(-5.0..5.0)).collect());
        let q = soft_labels::<f64>(&labels, 4, temp).unwrap();
        let (v, _) = kl_with_grad(&q, &z, temp).unwrap();
        prop_assert!(v >= -1e-15);
        let p = soften_logits(&z, temp).unwrap();
        prop_assert!((kl_loss(&q, &[&p]).unwrap().total - v).abs() < 1e-12);
    }

    #[test]
    fn contrastive_loss_ignores_sample_order(seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let labels = balanced_labels(&mut r, 10);
        let a = unit_rows(&mut r, 10, 4);
        let b = unit_rows(&mut r, 10, 4);
        let mut perm: Vec<usize> = (0..10).collect();
        for i in (1..10).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        let pl: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let l0 = isicr_total(&[&a, &b], &labels, 0.1).unwrap();
        let l1 = isicr_total(&[&a.select_rows(&perm), &b.select_rows(&perm)], &pl, 0.1).unwrap();
        prop_assert!((l0 - l1).abs() < 1e-9 * l0.abs().max(1.0));
        // swapping the peers leaves the symmetric total unchanged
        let l2 = isicr_total(&[&b, &a], &labels, 0.1).unwrap();
        prop_assert!((l0 - l2).abs() < 1e-9 * l0.abs().max(1.0));
    }

    #[test]
    fn self_pair_is_half_the_duplicated_total(seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let labels = balanced_labels(&mut r, 8);
        let v = unit_rows(&mut r, 8, 3);
        let pair = isicr_pair(&v, &v, &labels, 0.2).unwrap();
        prop_assert!((isicr_total(&[&v, &v], &labels, 0.2).unwrap() - 2.0 * pair).abs() < 1e-9);
        prop_assert!(pair > 0.0);
    }
}
