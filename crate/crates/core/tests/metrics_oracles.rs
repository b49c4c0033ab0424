use exemplar_seg::metrics::{dsc, evaluate, hd95, hd95_sentinel, seg_loss, seg_loss_parts};
use exemplar_seg::numerics::gradcheck::{check_gradients, GradCheckTolerance};
use exemplar_seg::segnet::{ConstantSegmenter, GroundTruthOracle, NetConfig, SegNetwork};
use exemplar_seg::{Graph, Mask, Sample, Split, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_mask(h: usize, w: usize, k: u8, rng: &mut ChaCha8Rng) -> Mask {
    Mask::new(h, w, (0..h * w).map(|_| rng.random_range(0..k)).collect()).unwrap()
}

fn rect(h: usize, w: usize, y: usize, x: usize, side_y: usize, side_x: usize, k: u8) -> Mask {
    let mut m = Mask::zeros(h, w);
    for yy in y..y + side_y {
        for xx in x..x + side_x {
            m.set(yy, xx, k);
        }
    }
    m
}

/// Cross-entropy and soft Dice written out pixel by pixel.
fn seg_loss_oracle(logits: &[f64], k: usize, mask: &[u8]) -> f64 {
    let hw = mask.len();
    let mut ce = 0.0;
    let mut inter = vec![0.0; k];
    let mut psum = vec![0.0; k];
    let mut gsum = vec![0.0; k];
    for i in 0..hw {
        let col: Vec<f64> = (0..k).map(|c| logits[c * hw + i]).collect();
        let m = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = col.iter().map(|v| (v - m).exp()).sum();
        for c in 0..k {
            let p = (col[c] - m).exp() / z;
            let g = f64::from(u8::from(mask[i] as usize == c));
            inter[c] += p * g;
            psum[c] += p;
            gsum[c] += g;
        }
        ce -= (col[mask[i] as usize] - m) - z.ln();
    }
    ce /= hw as f64;
    let eps = 1e-5;
    let dice = (0..k).map(|c| (2.0 * inter[c] + eps) / (psum[c] + gsum[c] + eps)).sum::<f64>() / k as f64;
    0.5 * ce + 0.5 * (1.0 - dice)
}

fn loss_value(logits: Tensor<f64>, mask: &Mask) -> f64 {
    let mut g = Graph::new();
    let l = g.leaf(logits);
    let v = seg_loss(&mut g, l, mask).unwrap();
    g.scalar_value(v)
}

/// Boundary by explicit neighbour counting, then every pair's distance.
fn hd95_oracle(p: &Mask, q: &Mask, k: u8) -> f64 {
    let edge = |m: &Mask| {
        let mut out = Vec::new();
        for y in 0..m.height() as i64 {
            for x in 0..m.width() as i64 {
                if m.get(y as usize, x as usize) != k {
                    continue;
                }
                let mut inner = 0;
                for (dy, dx) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
                    let (v, u) = (y + dy, x + dx);
                    if v >= 0 && u >= 0 && v < m.height() as i64 && u < m.width() as i64 && m.get(v as usize, u as usize) == k {
                        inner += 1;
                    }
                }
                if inner < 4 {
                    out.push((y as f64, x as f64));
                }
            }
        }
        out
    };
    let (a, b) = (edge(p), edge(q));
    let pct = |from: &[(f64, f64)], to: &[(f64, f64)]| {
        let mut d: Vec<f64> = from
            .iter()
            .map(|f| to.iter().map(|t| ((f.0 - t.0).powi(2) + (f.1 - t.1).powi(2)).sqrt()).fold(f64::MAX, f64::min))
            .collect();
        d.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let r = 0.95 * (d.len() - 1) as f64;
        let lo = r.floor() as usize;
        let hi = r.ceil() as usize;
        d[lo] + (r - lo as f64) * (d[hi] - d[lo])
    };
    pct(&a, &b).max(pct(&b, &a))
}

fn sample(id: &str, mask: Mask) -> Sample {
    let (h, w) = (mask.height(), mask.width());
    let image = Tensor::from_vec(&[1, h, w], mask.data().iter().map(|&v| v as f32 * 0.1).collect()).unwrap();
    Sample {
        id: id.into(),
        split: Split::Test,
        image,
        mask,
    }
}

#[test]
fn confident_correct_logits_give_tiny_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mask = random_mask(8, 8, 3, &mut rng);
    let logits: Vec<f64> = (0..3)
        .flat_map(|c| mask.data().iter().map(move |&m| if m as usize == c { 20.0 } else { 0.0 }).collect::<Vec<_>>())
        .collect();
    assert!(loss_value(Tensor::from_vec(&[3, 8, 8], logits).unwrap(), &mask) < 1e-3);
}

#[test]
fn uniform_logits_give_log_k_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mask = random_mask(8, 8, 4, &mut rng);
    let mut g = Graph::new();
    let l = g.leaf(Tensor::full(&[4, 8, 8], 0.3));
    let parts = seg_loss_parts(&mut g, l, &mask).unwrap();
    let ce = g.scalar_value(parts.cross_entropy);
    assert!((ce - 4f64.ln()).abs() < 1e-12);
    assert!((ce - 1.3863).abs() < 1e-4);
}

#[test]
fn seg_loss_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..120 {
        let k = rng.random_range(2..6);
        let (h, w) = (rng.random_range(1..9), rng.random_range(1..9));
        let mask = random_mask(h, w, k as u8, &mut rng);
        let logits: Vec<f64> = (0..k * h * w).map(|_| rng.random_range(-4.0..4.0)).collect();
        let want = seg_loss_oracle(&logits, k, mask.data());
        let got = loss_value(Tensor::from_vec(&[k, h, w], logits).unwrap(), &mask);
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
}

#[test]
fn seg_loss_rejects_bad_class() {
    let mut g = Graph::new();
    let l = g.leaf(Tensor::<f64>::zeros(&[2, 2, 2]));
    let mask = Mask::new(2, 2, vec![0, 1, 2, 0]).unwrap();
    assert!(matches!(seg_loss(&mut g, l, &mask), Err(exemplar_seg::Error::Contract(_))));
}

#[test]
fn seg_loss_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mask = random_mask(5, 6, 3, &mut rng);
    let logits = Tensor::from_vec(&[3, 5, 6], (0..90).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    let probes: Vec<_> = (0..90).map(|i| (0, i)).collect();
    let rep = check_gradients("seg_loss", &[logits], &probes, &GradCheckTolerance::default(), |g, v| {
        seg_loss(g, v[0], &mask)
    })
    .unwrap();
    assert!(rep.passed, "{rep:?}");
}

#[test]
fn near_binary_soft_dice_tracks_dsc() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let gt = random_mask(10, 10, 3, &mut rng);
        let pred = random_mask(10, 10, 3, &mut rng);
        let logits: Vec<f64> = (0..3)
            .flat_map(|c| pred.data().iter().map(move |&m| if m as usize == c { 10.0 } else { 0.0 }).collect::<Vec<_>>())
            .collect();
        let mut g = Graph::new();
        let l = g.leaf(Tensor::from_vec(&[3, 10, 10], logits).unwrap());
        let dice = seg_loss_parts(&mut g, l, &gt).unwrap().dice;
        let soft = 1.0 - g.scalar_value(dice);
        let hard = (0..3u8).map(|k| dsc(&pred, &gt, k)).sum::<f64>() / 3.0;
        assert!((soft - hard).abs() < 0.02, "{soft} vs {hard}");
    }
}

#[test]
fn dsc_examples() {
    let a = rect(8, 8, 2, 2, 3, 3, 1);
    let b = rect(8, 8, 2, 3, 3, 3, 1);
    assert_eq!(dsc(&a, &a, 1), 1.0);
    assert!((dsc(&a, &b, 1) - 2.0 * 6.0 / 18.0).abs() < 1e-12);
    assert!((dsc(&a, &b, 1) - 0.6667).abs() < 1e-4);
    let far = rect(8, 8, 5, 5, 3, 3, 1);
    assert_eq!(dsc(&a, &far, 1), 0.0);
    assert_eq!(dsc(&a, &Mask::zeros(8, 8), 1), 0.0);
    assert_eq!(dsc(&Mask::zeros(8, 8), &Mask::zeros(8, 8), 1), 1.0);
}

#[test]
fn dsc_matches_counting_and_is_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..150 {
        let (h, w) = (rng.random_range(1..12), rng.random_range(1..12));
        let p = random_mask(h, w, 3, &mut rng);
        let q = random_mask(h, w, 3, &mut rng);
        for k in 0..3u8 {
            let pc = p.data().iter().filter(|&&v| v == k).count();
            let qc = q.data().iter().filter(|&&v| v == k).count();
            let both = p.data().iter().zip(q.data()).filter(|(a, b)| **a == k && **b == k).count();
            let want = if pc + qc == 0 { 1.0 } else { 2.0 * both as f64 / (pc + qc) as f64 };
            assert_eq!(dsc(&p, &q, k), want);
            assert_eq!(dsc(&p, &q, k), dsc(&q, &p, k));
        }
    }
}

#[test]
fn hd95_examples() {
    let a = rect(16, 16, 3, 3, 6, 6, 2);
    assert_eq!(hd95(&a, &a, 2), 0.0);
    let mut p = Mask::zeros(16, 16);
    p.set(2, 2, 1);
    let mut q = Mask::zeros(16, 16);
    q.set(5, 6, 1);
    assert_eq!(hd95(&p, &q, 1), 5.0);
    assert_eq!(hd95(&Mask::zeros(16, 16), &Mask::zeros(16, 16), 1), 0.0);
    assert_eq!(hd95(&Mask::zeros(16, 16), &q, 1), hd95_sentinel(16, 16));
    assert!((hd95_sentinel(64, 64) - 90.51).abs() < 0.01);
}

#[test]
fn hd95_shifted_square_matches_all_pairs() {
    let a = rect(24, 24, 5, 4, 10, 10, 1);
    let b = rect(24, 24, 5, 7, 10, 10, 1);
    assert_eq!(hd95(&a, &b, 1), hd95_oracle(&a, &b, 1));
}

#[test]
fn hd95_matches_all_pairs_on_random_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut checked = 0;
    while checked < 120 {
        let (h, w) = (rng.random_range(3..14), rng.random_range(3..14));
        let p = random_mask(h, w, 3, &mut rng);
        let q = random_mask(h, w, 3, &mut rng);
        let k = rng.random_range(1..3u8);
        if !p.contains(k) || !q.contains(k) {
            continue;
        }
        let (got, want) = (hd95(&p, &q, k), hd95_oracle(&p, &q, k));
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        assert_eq!(got, hd95(&q, &p, k));
        checked += 1;
    }
}

fn test_split() -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    (0..6)
        .map(|i| {
            let mut m = Mask::zeros(16, 16);
            for k in 1..=3u8 {
                if rng.random_bool(0.8) {
                    let (y, x) = (rng.random_range(0..12), rng.random_range(0..12));
                    for yy in y..y + 4 {
                        for xx in x..x + 4 {
                            m.set(yy, xx, k);
                        }
                    }
                }
            }
            sample(&format!("t{i}"), m)
        })
        .collect()
}

#[test]
fn ground_truth_oracle_scores_perfectly() {
    let r = evaluate(&GroundTruthOracle, &test_split(), 3).unwrap();
    assert_eq!(r.dsc_avg, 1.0);
    assert_eq!(r.hd95_avg, 0.0);
    assert!(r.table().contains("1.000"));
}

#[test]
fn all_background_scores_zero_with_sentinel() {
    let r = evaluate(&ConstantSegmenter(0), &test_split(), 3).unwrap();
    for k in 0..3 {
        assert_eq!(r.dsc[k], Some(0.0));
        assert_eq!(r.hd95[k], Some(hd95_sentinel(16, 16)));
    }
}

#[test]
fn evaluation_is_repeatable() {
    let cfg = NetConfig {
        num_outputs: 4,
        widths: vec![4, 4],
        embed_channels: 4,
        height: 16,
        width: 16,
        ..NetConfig::default()
    };
    let net = SegNetwork::<f32>::new(cfg, 3).unwrap();
    let split = test_split();
    let a = evaluate(&net, &split, 3).unwrap();
    let b = evaluate(&net, &split, 3).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.csv(), b.csv());
}

#[test]
fn empty_split_is_rejected() {
    assert!(evaluate(&GroundTruthOracle, &[], 3).is_err());
}
