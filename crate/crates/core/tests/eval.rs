mod common;

use bitstain_core::data::{LabelVolume, Modality, Volume, VolumeMeta};
use bitstain_core::eval::{
    boundary_voxels, dice3d, evaluate_pair, hd95, kid, mean_instance_volume,
    stack_masks_2d_to_3d, EvalOptions, FeatureSet, Hd95Mode, HematoxylinDetector, LabelSlice,
    MetricsReport,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SPACING: [f64; 3] = [0.5, 0.5, 1.0];

fn labels(dims: [usize; 3], data: Vec<u32>) -> LabelVolume {
    Volume::new(VolumeMeta::new(dims, SPACING, Modality::Label).unwrap(), 1, data).unwrap()
}

fn volume_strategy() -> impl Strategy<Value = (LabelVolume, LabelVolume)> {
    (2usize..7, 2usize..7, 1usize..4).prop_flat_map(|(w, h, d)| {
        let n = w * h * d;
        (
            prop::collection::vec(prop::bool::weighted(0.3), n),
            prop::collection::vec(prop::bool::weighted(0.3), n),
        )
            .prop_map(move |(a, b)| {
                let to = |m: Vec<bool>| labels([w, h, d], m.into_iter().map(u32::from).collect());
                (to(a), to(b))
            })
    })
}

proptest! {
    #[test]
    fn dice_is_symmetric_and_bounded((a, b) in volume_strategy()) {
        let ab = dice3d(&a, &b).unwrap();
        prop_assert_eq!(ab, dice3d(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(dice3d(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn hd95_symmetric_and_below_hausdorff((a, b) in volume_strategy()) {
        prop_assume!(a.data().iter().any(|&v| v > 0) && b.data().iter().any(|&v| v > 0));
        let ab = hd95(&a, &b, SPACING, Hd95Mode::Pooled).unwrap();
        prop_assert_eq!(ab, hd95(&b, &a, SPACING, Hd95Mode::Pooled).unwrap());
        let full = hausdorff(&a, &b);
        prop_assert!(ab <= full + 1e-12);
        prop_assert!(hd95(&a, &b, SPACING, Hd95Mode::DirectedMax).unwrap() <= full + 1e-12);
        prop_assert_eq!(hd95(&a, &a, SPACING, Hd95Mode::Pooled).unwrap(), 0.0);
    }

    #[test]
    fn stricter_stacking_never_merges_more(seed in any::<u64>(), t1 in 0.05f64..0.95, dt in 0.0f64..0.5) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (8, 8);
        let slices: Vec<LabelSlice> = (0..5)
            .map(|_| {
                let mask: Vec<bool> = (0..w * h).map(|_| r.random_bool(0.4)).collect();
                LabelSlice {
                    width: w,
                    height: h,
                    labels: bitstain_core::eval::connected_components(&mask, w, h),
                }
            })
            .collect();
        let count = |t: f64| {
            let v = stack_masks_2d_to_3d(&slices, SPACING, t).unwrap();
            bitstain_core::eval::instance_sizes(&v).len()
        };
        prop_assert!(count((t1 + dt).min(1.0)) >= count(t1));
    }
}

fn hausdorff(a: &LabelVolume, b: &LabelVolume) -> f64 {
    let (pa, pb) = (boundary_voxels(a), boundary_voxels(b));
    let d = |p: &[[i64; 3]], q: &[[i64; 3]]| {
        p.iter()
            .map(|x| {
                q.iter()
                    .map(|y| bitstain_core::eval::masks::dist2(*x, *y, SPACING))
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max)
    };
    d(&pa, &pb).max(d(&pb, &pa)).sqrt()
}

#[test]
fn kid_is_unbiased_for_identical_distributions() {
    let mut r = ChaCha8Rng::seed_from_u64(11);
    let mut draw = |n: usize| {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..4).map(|_| r.random::<f64>() * 2.0 - 1.0).collect())
            .collect();
        FeatureSet::from_rows(&rows, "u").unwrap()
    };
    let trials = 400;
    let vals: Vec<f64> = (0..trials).map(|_| kid(&draw(10), &draw(12)).unwrap()).collect();
    let mean = vals.iter().sum::<f64>() / trials as f64;
    let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (trials - 1) as f64).sqrt();
    let se = sd / (trials as f64).sqrt();
    assert!(mean.abs() < 4.0 * se, "mean {mean} se {se}");
    assert!(vals.iter().any(|&v| v < 0.0));
}

#[test]
fn phantom_instance_volume_near_analytic() {
    for seed in 0..4 {
        let ph = common::phantom(seed);
        let analytic =
            ph.nuclei.iter().map(|n| n.analytic_volume_um3()).sum::<f64>() / ph.nuclei.len() as f64;
        let measured = mean_instance_volume(&ph.labels).unwrap();
        let rel = (measured - analytic).abs() / analytic;
        assert!(rel < 0.15, "seed {seed}: {measured} vs {analytic}");
    }
}

#[test]
fn deleting_an_instance_lowers_dice() {
    let ph = common::phantom(21);
    let gt = &ph.labels;
    let mut pred = gt.clone();
    pred.data_mut().iter_mut().filter(|v| **v == 1).for_each(|v| *v = 0);
    let opts = EvalOptions::default();
    let full = evaluate_pair(gt, gt, None, &opts);
    let cut = evaluate_pair(&pred, gt, None, &opts);
    assert_eq!(full.dice3d, Some(1.0));
    assert!(cut.dice3d.unwrap() < 1.0);
    assert_eq!(cut.pred_instances + 1, cut.gt_instances);
    assert!(cut.hd95_um.unwrap() >= 0.0);
    assert!(cut.fid.is_none() && cut.absent.contains_key("fid"));
}

#[test]
fn report_round_trips_through_json() {
    let ph = common::phantom(22);
    let rows: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, (i * i) as f64 * 0.1]).collect();
    let a = FeatureSet::from_rows(&rows, "x").unwrap();
    let b = FeatureSet::from_rows(&rows[1..], "x").unwrap();
    let report = evaluate_pair(&ph.labels, &ph.labels, Some((&a, &b)), &EvalOptions::default())
        .with_ids("pred", "gt");
    assert!(report.fid.is_some() && report.kid.is_some());
    let back = MetricsReport::from_json(&report.to_json()).unwrap();
    assert_eq!(back, report);
}

#[test]
fn detector_recovers_phantom_nuclei() {
    let ph = common::phantom(23);
    let seg = HematoxylinDetector::new(Default::default()).unwrap().segment(&ph.he).unwrap();
    assert_eq!(seg.dims(), ph.labels.dims());
    assert!(dice3d(&seg, &ph.labels).unwrap() > 0.9);
}

#[test]
fn empty_masks_report_absent_hd95() {
    let empty = labels([4, 4, 2], vec![0; 32]);
    let r = evaluate_pair(&empty, &empty, None, &EvalOptions::default());
    assert!(r.hd95_um.is_none());
    assert!(r.absent.contains_key("hd95_um"));
}
