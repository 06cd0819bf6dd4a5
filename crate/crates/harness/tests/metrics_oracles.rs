//! Metrics against direct reference implementations, plus oracle identities.

use proptest::prelude::*;
use synwarp_core::rng::Rng;
use synwarp_core::Tensor64;
use synwarp_harness::eval::{score, SequencePrediction};
use synwarp_harness::metrics::{l1, psnr, ssim, temporal_consistency};

const CASES: u64 = 60;

fn image(rng: &mut Rng, h: usize, w: usize) -> Tensor64 {
    rng.uniform_tensor(&[3, h, w], 0.0, 1.0)
}

fn noisy(rng: &mut Rng, a: &Tensor64, amp: f64) -> Tensor64 {
    let noise: Tensor64 = rng.uniform_tensor(a.shape(), -amp, amp);
    a.zip_map(&noise, |x, n| (x + n).clamp(0.0, 1.0)).unwrap()
}

/// SSIM with an explicit 2D Gaussian window evaluated at every valid position.
fn naive_ssim(a: &Tensor64, b: &Tensor64) -> f64 {
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let gray = |t: &Tensor64, y: usize, x: usize| (0..c).map(|ch| t.get(&[ch, y, x])).sum::<f64>() / c as f64;
    let g: Vec<f64> = (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / (2.0 * 1.5 * 1.5)).exp()).collect();
    let norm: f64 = g.iter().sum::<f64>().powi(2);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut count = 0;
    for y0 in 0..=h - 11 {
        for x0 in 0..=w - 11 {
            let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for u in 0..11 {
                for v in 0..11 {
                    let wt = g[u] * g[v] / norm;
                    let (p, q) = (gray(a, y0 + u, x0 + v), gray(b, y0 + u, x0 + v));
                    ma += wt * p;
                    mb += wt * q;
                    aa += wt * p * p;
                    bb += wt * q * q;
                    ab += wt * p * q;
                }
            }
            let (va, vb, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
            total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}

#[test]
pub fn ssim_matches_direct_window_sum() {
    for case in 0..CASES {
        let mut rng = Rng::new(case);
        let (h, w) = (11 + rng.below(8), 11 + rng.below(8));
        let a = image(&mut rng, h, w);
        let amp = rng.uniform(0.01, 0.5);
        let b = noisy(&mut rng, &a, amp);
        let got = ssim(&a, &b).unwrap();
        assert!((got - naive_ssim(&a, &b)).abs() <= 1e-6, "case {case}");
    }
}

#[test]
pub fn psnr_and_l1_match_direct_formulas() {
    for case in 0..CASES {
        let mut rng = Rng::new(500 + case);
        let (h, w) = (1 + rng.below(12), 1 + rng.below(12));
        let a = image(&mut rng, h, w);
        let amp = rng.uniform(0.01, 0.5);
        let b = noisy(&mut rng, &a, amp);
        let n = a.len() as f64;
        let mut se = 0.0;
        let mut ae = 0.0;
        for (x, y) in a.data().iter().zip(b.data()) {
            se += (x - y) * (x - y);
            ae += (x - y).abs();
        }
        assert!((l1(&a, &b).unwrap() - ae / n).abs() <= 1e-6);
        if se > 0.0 {
            assert!((psnr(&a, &b).unwrap() - 10.0 * (n / se).log10()).abs() <= 1e-6);
        }
    }
}

#[test]
pub fn ground_truth_as_prediction_scores_perfectly() {
    let mut rng = Rng::new(9);
    let gt: Vec<Tensor64> = (0..4).map(|_| image(&mut rng, 16, 16)).collect();
    let gt32: Vec<_> = gt.iter().map(|t| t.cast::<f32>()).collect();
    let seq = SequencePrediction { sequence: 0, first_frame: 1, pred: gt32.clone(), gt: gt32 };
    let (row, frames) = score("oracle", &[seq]).unwrap();
    assert_eq!(row.psnr, Some(f64::INFINITY));
    assert_eq!(row.ssim, Some(1.0));
    assert_eq!(row.l1, Some(0.0));
    assert_eq!(row.temporal, Some(0.0));
    assert_eq!(frames.len(), 4);
    assert_eq!(temporal_consistency(&gt, &gt).unwrap(), 0.0);
}

proptest! {
    #[test]
    fn ssim_is_symmetric_and_at_most_one(seed in 0u64..10_000, amp in 0.0f64..1.0) {
        let mut rng = Rng::new(seed);
        let a = image(&mut rng, 12, 13);
        let b = noisy(&mut rng, &a, amp);
        let (s1, s2) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        prop_assert!((s1 - s2).abs() < 1e-12);
        prop_assert!(s1 <= 1.0 + 1e-12);
    }

    #[test]
    fn psnr_orders_like_mse(seed in 0u64..10_000, amp in 0.01f64..0.4) {
        let mut rng = Rng::new(seed);
        let a = image(&mut rng, 8, 8);
        let noise: Tensor64 = rng.uniform_tensor(a.shape(), -1.0, 1.0);
        let small = a.zip_map(&noise, |x, n| x + amp * n).unwrap();
        let large = a.zip_map(&noise, |x, n| x + 2.0 * amp * n).unwrap();
        prop_assert!(psnr(&a, &small).unwrap() > psnr(&a, &large).unwrap());
        prop_assert!((psnr(&a, &small).unwrap() - psnr(&a, &large).unwrap() - 20.0 * 2f64.log10()).abs() < 1e-9);
    }

    #[test]
    fn l1_is_a_metric(seed in 0u64..10_000) {
        let mut rng = Rng::new(seed);
        let (a, b, c) = (image(&mut rng, 5, 5), image(&mut rng, 5, 5), image(&mut rng, 5, 5));
        prop_assert_eq!(l1(&a, &a).unwrap(), 0.0);
        prop_assert!((l1(&a, &b).unwrap() - l1(&b, &a).unwrap()).abs() < 1e-15);
        prop_assert!(l1(&a, &c).unwrap() <= l1(&a, &b).unwrap() + l1(&b, &c).unwrap() + 1e-12);
    }
}
