use dsm_core::adam::{AdamConfig, AdamState};
use dsm_core::io::{decode_pfm, encode_pfm};
use dsm_core::loss::{joint_loss, total_loss, LossWeights};
use dsm_core::matcher::cost::{build_cost_volume, MatchingVolume};
use dsm_core::matcher::features::FeatureMap;
use dsm_core::nn::{Activation, Tensor};
use dsm_core::refine::{cspn_refine, normalize_affinities, DEFAULT_ITERATIONS, KERNEL_SIZE};
use dsm_core::regression::{entropy_matchability, soft_argmin};
use dsm_core::synth::warp_to_left;
use dsm_core::volume::softmax_over_disparity;
use dsm_core::*;
use proptest::prelude::*;

const KK: usize = KERNEL_SIZE * KERNEL_SIZE;
const CENTER: usize = KK / 2;

fn map(h: usize, w: usize, v: Vec<f64>, role: MapRole) -> ScalarMap {
    ScalarMap::new(h, w, v, role).unwrap()
}

/// `(h, w, values)` with values drawn from `range`.
fn grid(range: std::ops::Range<f64>, max_side: usize) -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1..=max_side, 1..=max_side).prop_flat_map(move |(h, w)| {
        (Just(h), Just(w), prop::collection::vec(range.clone(), h * w))
    })
}

fn cost_volume() -> impl Strategy<Value = CostVolume> {
    (2usize..=9, 1usize..=4, 1usize..=5).prop_flat_map(|(d, h, w)| {
        prop::collection::vec(-20.0..20.0f64, d * h * w)
            .prop_map(move |v| CostVolume::new(VolumeDims::new(d, h, w), v).unwrap())
    })
}

fn raw_kernels(h: usize, w: usize, lo: f64) -> impl Strategy<Value = KernelMap> {
    prop::collection::vec(lo..1.0, h * w * KK)
        .prop_map(move |v| normalize_affinities(&KernelMap::new(h, w, KERNEL_SIZE, v).unwrap()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(cost in cost_volume(), tau in 0.05..5.0f64) {
        let p = softmax_over_disparity(&cost, tau).unwrap();
        let dims = p.volume().dims();
        for y in 0..dims.height {
            for x in 0..dims.width {
                let s: f64 = p.volume().pixel(y, x).sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
                prop_assert!(p.volume().pixel(y, x).all(|v| v >= 0.0));
            }
        }
    }

    #[test]
    fn softmax_ignores_per_pixel_offsets(cost in cost_volume(), shift in -50.0..50.0f64) {
        let dims = cost.volume().dims();
        let moved = Volume::from_fn(dims, |d, y, x| cost.volume().get(d, y, x) + shift * (1 + y + x) as f64);
        let a = softmax_over_disparity(&cost, 0.7).unwrap();
        let b = softmax_over_disparity(&CostVolume::from_volume(moved).unwrap(), 0.7).unwrap();
        for (u, v) in a.volume().data().iter().zip(b.volume().data()) {
            prop_assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn regression_outputs_stay_in_range(cost in cost_volume()) {
        let d = cost.volume().dims().disparities as f64;
        let p = softmax_over_disparity(&cost, 1.0).unwrap();
        let disp = soft_argmin(&p).unwrap();
        let ent = entropy_matchability(&p).unwrap();
        prop_assert!(disp.data().iter().all(|&v| (-1e-12..=d - 1.0 + 1e-12).contains(&v)));
        prop_assert!(ent.data().iter().all(|&v| (-1e-12..=d.ln() + 1e-9).contains(&v)));
    }

    #[test]
    fn absdiff_cost_is_nonnegative_and_zero_on_identity(
        (c, h, w, l, r) in (1usize..=4, 1usize..=4, 4usize..=10).prop_flat_map(|(c, h, w)| {
            let n = c * h * w;
            (Just(c), Just(h), Just(w), prop::collection::vec(-1.0..1.0f64, n), prop::collection::vec(-1.0..1.0f64, n))
        })
    ) {
        let fm = |v: &Vec<f64>| FeatureMap::new(Activation::new(c, 1, h, w, v.clone()).unwrap(), 1).unwrap();
        let (fl, fr) = (fm(&l), fm(&r));
        let cost = match build_cost_volume(&fl, &fr, 4, CostMode::AbsDiff).unwrap() {
            MatchingVolume::Cost(c) => c,
            MatchingVolume::Features(_) => unreachable!(),
        };
        prop_assert!(cost.volume().data().iter().all(|&v| v >= 0.0));
        let same = match build_cost_volume(&fl, &fl, 4, CostMode::AbsDiff).unwrap() {
            MatchingVolume::Cost(c) => c,
            MatchingVolume::Features(_) => unreachable!(),
        };
        for y in 0..h {
            for x in 0..w {
                prop_assert_eq!(same.volume().get(0, y, x), 0.0);
            }
        }
    }

    #[test]
    fn cspn_identity_kernels_change_nothing((h, w, v) in grid(-50.0..50.0, 8)) {
        let d0 = map(h, w, v, MapRole::Disparity);
        let out = cspn_refine(&d0, &KernelMap::identity(h, w, KERNEL_SIZE), DEFAULT_ITERATIONS).unwrap();
        prop_assert_eq!(out.data(), d0.data());
    }

    #[test]
    fn cspn_constant_map_is_fixed_point(
        (h, w, k) in (1usize..=6, 1usize..=6).prop_flat_map(|(h, w)| (Just(h), Just(w), raw_kernels(h, w, -1.0))),
        c in -100.0..100.0f64,
    ) {
        let d0 = ScalarMap::filled(h, w, c, MapRole::Disparity);
        let out = cspn_refine(&d0, &k, DEFAULT_ITERATIONS).unwrap();
        prop_assert!(out.data().iter().all(|&v| v == c));
    }

    #[test]
    fn cspn_nonnegative_kernels_stay_within_bounds(
        (h, w, k, v) in (1usize..=6, 1usize..=6).prop_flat_map(|(h, w)| {
            (Just(h), Just(w), raw_kernels(h, w, 0.0), prop::collection::vec(0.0..20.0f64, h * w))
        })
    ) {
        prop_assert!(k.data().iter().all(|&x| x >= -1e-12));
        let d0 = map(h, w, v, MapRole::Disparity);
        let (lo, hi) = d0.min_max();
        let out = cspn_refine(&d0, &k, DEFAULT_ITERATIONS).unwrap();
        prop_assert!(out.data().iter().all(|&x| x >= lo - 1e-9 && x <= hi + 1e-9));
    }

    #[test]
    fn normalized_kernels_sum_to_one(k in raw_kernels(3, 4, -2.0)) {
        for p in 0..12 {
            let ker = &k.data()[p * KK..(p + 1) * KK];
            prop_assert!((ker.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let abs: f64 = (0..KK).filter(|&i| i != CENTER).map(|i| ker[i].abs()).sum();
            prop_assert!(abs <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn metrics_match_per_pixel_loop(
        (d, g, m) in (prop::collection::vec(0.0..64.0f64, 256), prop::collection::vec(0.0..64.0f64, 256), prop::collection::vec(any::<bool>(), 256))
    ) {
        prop_assume!(m.iter().any(|&b| b));
        let mask: Vec<f64> = m.iter().map(|&b| b as u8 as f64).collect();
        let r = compute_metrics(
            &map(16, 16, d.clone(), MapRole::Disparity),
            &map(16, 16, g.clone(), MapRole::Disparity),
            &map(16, 16, mask, MapRole::Mask),
        ).unwrap();
        let (mut n, mut sum, mut a, mut b, mut c) = (0usize, 0.0, 0usize, 0usize, 0usize);
        for y in 0..16 {
            for x in 0..16 {
                let i = y * 16 + x;
                if !m[i] {
                    continue;
                }
                let e = (d[i] - g[i]).abs();
                n += 1;
                sum += e;
                if e > 1.0 { a += 1; }
                if e > 3.0 { b += 1; }
                if e > 3.0 && e > 0.05 * g[i] { c += 1; }
            }
        }
        prop_assert_eq!(r.valid_pixels, n);
        prop_assert_eq!(r.epe, sum / n as f64);
        prop_assert_eq!(r.pct_gt1, 100.0 * a as f64 / n as f64);
        prop_assert_eq!(r.pct_gt3, 100.0 * b as f64 / n as f64);
        prop_assert_eq!(r.d1, 100.0 * c as f64 / n as f64);
    }

    #[test]
    fn split_epes_recombine(
        (h, w, d) in grid(0.0..30.0, 12),
        seed in any::<u64>(),
    ) {
        let n = h * w;
        let mix = |i: usize, k: u64| (seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)).rotate_left(k as u32);
        let gt: Vec<f64> = (0..n).map(|i| (mix(i, 7) % 3000) as f64 / 100.0).collect();
        let bp: Vec<f64> = (0..n).map(|i| (mix(i, 19) % 200) as f64 / 50.0 - 2.0).collect();
        let mask: Vec<f64> = (0..n).map(|i| (mix(i, 31) % 5 != 0) as u8 as f64).collect();
        prop_assume!(mask.iter().any(|&v| v > 0.5));
        let r = split_metrics(
            &map(h, w, d, MapRole::Disparity),
            &map(h, w, gt, MapRole::Disparity),
            &map(h, w, bp, MapRole::LogScale),
            &map(h, w, mask, MapRole::Mask),
        ).unwrap();
        let nm = r.matchable_pixels as f64;
        let nu = (r.valid_pixels - r.matchable_pixels) as f64;
        let recombined = (r.epe_matchable.unwrap_or(0.0) * nm + r.epe_unmatchable.unwrap_or(0.0) * nu)
            / r.valid_pixels as f64;
        prop_assert!((recombined - r.epe).abs() < 1e-9);
        prop_assert!(r.matchable_pixels <= r.valid_pixels);
        for p in [r.pct_gt1, r.pct_gt3, r.d1] {
            prop_assert!((0.0..=100.0).contains(&p));
        }
    }

    #[test]
    fn adam_without_momentum_is_normalized_sgd(
        (x, g) in (1usize..=16).prop_flat_map(|n| (prop::collection::vec(-5.0..5.0f64, n), prop::collection::vec(-3.0..3.0f64, n))),
        lr in 1e-4..0.5f64,
        eps in 1e-8..1e-2f64,
    ) {
        let cfg = AdamConfig { lr, beta1: 0.0, beta2: 0.0, eps };
        let mut t = Tensor::from_values(&[x.len()], x.clone()).unwrap();
        let mut adam = AdamState::new(cfg, &[x.len()]).unwrap();
        for _ in 0..3 {
            let before = t.value.clone();
            t.grad = g.clone();
            adam.step_tensors(&mut [&mut t]).unwrap();
            for i in 0..x.len() {
                let want = before[i] - lr * g[i] / (g[i].abs() + eps);
                prop_assert!((t.value[i] - want).abs() <= 1e-12 * (1.0 + want.abs()));
            }
        }
    }

    #[test]
    fn synthetic_warp_recovers_visible_pixels(seed in any::<u64>(), frac in 0.0..0.4f64) {
        let cfg = SynthConfig { height: 16, width: 48, max_disp: 11, textureless_fraction: frac, constant_disparity: None };
        let s = gen_synthetic_pair(seed, &cfg).unwrap();
        let back = warp_to_left(&s.right, &s.disparity).unwrap();
        for i in 0..s.left.len() {
            if s.occlusion.data()[i] == 0.0 {
                prop_assert_eq!(back.data()[i], s.left.data()[i]);
            }
        }
    }

    #[test]
    fn pfm_round_trip_is_bitwise(
        (h, w, v) in (1usize..=9, 1usize..=9).prop_flat_map(|(h, w)| {
            (Just(h), Just(w), prop::collection::vec(any::<f32>().prop_filter("finite", |f| f.is_finite()), h * w))
        })
    ) {
        let m = map(h, w, v.iter().map(|&f| f as f64).collect(), MapRole::Disparity);
        let back = decode_pfm(&encode_pfm(&m)).unwrap();
        prop_assert_eq!((back.height(), back.width()), (h, w));
        for (a, b) in back.data().iter().zip(m.data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn loss_breakdown_total_is_weighted_sum(
        terms in prop::array::uniform3(0.0..100.0f64),
        weights in prop::array::uniform3(0.0..3.0f64),
    ) {
        let w = LossWeights { initial: weights[0], joint: weights[1], refined: weights[2] };
        let b = total_loss(terms[0], terms[1], terms[2], w, 10).unwrap();
        prop_assert_eq!(b.total, weights[0] * terms[0] + weights[1] * terms[1] + weights[2] * terms[2]);
    }

    #[test]
    fn joint_loss_minimum_sits_at_the_error(err in 0.01..50.0f64, offset in 0.05..2.0f64) {
        let one = |v: f64, role| map(1, 1, vec![v], role);
        let at = |b: f64| joint_loss(
            &one(err, MapRole::Disparity),
            &one(b, MapRole::LogScale),
            &one(0.0, MapRole::Disparity),
            &one(1.0, MapRole::Mask),
        ).unwrap();
        let best = at(err.ln());
        prop_assert!((best - (1.0 + err.ln())).abs() < 1e-12);
        prop_assert!(at(err.ln() + offset) > best);
        prop_assert!(at(err.ln() - offset) > best);
    }
}
