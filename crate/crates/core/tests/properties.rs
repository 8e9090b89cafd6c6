use std::path::Path;

use nalgebra::Vector3;
use proptest::prelude::*;

use mondi::ensemble::{
    distill, distill_bundle, selection_histogram, sparse_deviation, teacher_weight, EnsembleConfig,
    TeacherHypothesis, Weighting,
};
use mondi::geometry::{backproject, bilinear_sample, project, reproject_image, CameraIntrinsics, RigidPose};
use mondi::grid::{DepthGrid, ErrorMap, ImageGrid, Mask};
use mondi::io::{decode_pfm, encode_pfm, FloatMap};
use mondi::losses::{objective, LossWeights, Supervision};
use mondi::metrics::{compare_methods, evaluate, Method, RunSettings};
use mondi::photometric::{depth_residual, photometric_error, ssim_map};
use mondi::scene::SceneBundle;
use mondi::solver::{initialize_depth, solve_from, Schedule, SolverConfig};
use mondi::synthetic::{generate_bundle, GenerateSpec, TeacherSuite};

fn small_spec(suite: TeacherSuite) -> GenerateSpec {
    let mut spec = GenerateSpec {
        suite,
        density: 0.05,
        ..Default::default()
    };
    spec.scene.width = 24;
    spec.scene.height = 20;
    spec.scene.focal = 21.0;
    spec
}

fn small_bundle(seed: u64) -> SceneBundle {
    generate_bundle(&small_spec(TeacherSuite::Complementary), seed).unwrap()
}

fn pool(threads: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap()
}

fn image(h: usize, w: usize, ch: usize) -> impl Strategy<Value = ImageGrid> {
    prop::collection::vec(0.0..1.0f64, h * w * ch).prop_map(move |d| ImageGrid::new(h, w, ch, d).unwrap())
}

fn residual_map(h: usize, w: usize) -> impl Strategy<Value = ErrorMap> {
    (
        prop::collection::vec(0.0..2.0f64, h * w),
        prop::collection::vec(prop::bool::weighted(0.9), h * w),
    )
        .prop_map(move |(v, ok)| ErrorMap::new(h, w, v, ok).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn project_inverts_backproject(
        fx in 20.0..120.0f64, fy in 20.0..120.0f64,
        cx in 5.0..40.0f64, cy in 5.0..30.0f64,
        u in 0.0..47.0f64, v in 0.0..35.0f64,
        depth in 0.05..20.0f64,
    ) {
        let k = CameraIntrinsics::new(fx, fy, cx, cy, 48, 36).unwrap();
        let p = backproject([u, v], depth, &k).unwrap();
        let q = project(&p, &k);
        prop_assert!(q.valid);
        prop_assert!((q.pixel[0] - u).abs() < 1e-9 && (q.pixel[1] - v).abs() < 1e-9);
    }

    #[test]
    fn warp_scale_invariance_needs_pure_rotation(
        img in image(12, 14, 1),
        depth in prop::collection::vec(0.8..3.0f64, 12 * 14),
        axis in prop::array::uniform3(-0.02..0.02f64),
        scale in 1.2..3.0f64,
    ) {
        let k = CameraIntrinsics::new(13.0, 13.0, 6.5, 5.5, 14, 12).unwrap();
        let d = DepthGrid::new(12, 14, depth.clone()).unwrap();
        let scaled = DepthGrid::new(12, 14, depth.iter().map(|v| v * scale).collect()).unwrap();
        let rot = RigidPose::from_axis_angle(Vector3::from(axis), Vector3::zeros());
        let (a, ma) = reproject_image(&img, &d, &k, &rot).unwrap();
        let (b, mb) = reproject_image(&img, &scaled, &k, &rot).unwrap();
        prop_assert_eq!(&ma, &mb);
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
        let moved = RigidPose::from_axis_angle(Vector3::from(axis), Vector3::new(0.2, 0.0, 0.0));
        let (c, mc) = reproject_image(&img, &d, &k, &moved).unwrap();
        let (e, me) = reproject_image(&img, &scaled, &k, &moved).unwrap();
        prop_assert!(mc != me || c.data().iter().zip(e.data()).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn shrinking_never_validates_a_sample(
        img in image(10, 12, 3),
        rows in 2..10usize, cols in 2..12usize,
        u in -1.0..13.0f64, v in -1.0..11.0f64,
    ) {
        let cropped = ImageGrid::from_fn(rows, cols, 3, |r, c, ch| img.get(r, c, ch));
        if let Some(small) = bilinear_sample(&cropped, [u, v]) {
            let full = bilinear_sample(&img, [u, v]);
            prop_assert!(full.is_some());
            for (a, b) in small.iter().zip(full.unwrap()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ssim_is_reflexive_symmetric_and_bounded(
        a in image(9, 11, 3),
        b in image(9, 11, 3),
        mask in prop::collection::vec(prop::bool::weighted(0.8), 99),
    ) {
        let mask = Mask::new(9, 11, mask).unwrap();
        let aa = ssim_map(&a, &a, &mask).unwrap();
        for (i, &ok) in aa.valid().iter().enumerate() {
            if ok {
                prop_assert!((aa.values()[i] - 1.0).abs() < 1e-12);
            }
        }
        let ab = ssim_map(&a, &b, &mask).unwrap();
        let ba = ssim_map(&b, &a, &mask).unwrap();
        prop_assert_eq!(ab.valid(), ba.valid());
        for (x, y) in ab.values().iter().zip(ba.values()) {
            prop_assert!((x - y).abs() < 1e-12);
            prop_assert!((0.0..=2.0).contains(&(1.0 - x)));
        }
    }

    #[test]
    fn photometric_error_ignores_view_order(
        target in image(8, 9, 3),
        views in prop::collection::vec((image(8, 9, 3), prop::collection::vec(prop::bool::weighted(0.7), 72)), 2..4),
    ) {
        let recs: Vec<(ImageGrid, Mask)> = views
            .into_iter()
            .map(|(img, m)| (img, Mask::new(8, 9, m).unwrap()))
            .collect();
        let mut reversed = recs.clone();
        reversed.reverse();
        let p = photometric_error(&target, &recs).unwrap();
        let r = photometric_error(&target, &reversed).unwrap();
        prop_assert_eq!(p.valid(), r.valid());
        for (x, y) in p.values().iter().zip(r.values()) {
            prop_assert!((x - y).abs() < 1e-12);
            prop_assert!((0.0..=2.0).contains(x));
        }
    }

    #[test]
    fn distilled_error_lower_bounds_and_monitor_is_monotone(
        residuals in prop::collection::vec(residual_map(6, 7), 1..5),
        lambda in 0.05..20.0f64,
    ) {
        let teachers: Vec<_> = (0..residuals.len())
            .map(|i| TeacherHypothesis { id: i + 1, depth: DepthGrid::filled(6, 7, 1.0 + i as f64) })
            .collect();
        let p = distill(&teachers, &residuals, lambda).unwrap();
        for x in 0..42 {
            match p.residual.at(x) {
                Some(e) => {
                    for r in &residuals {
                        if let Some(ei) = r.at(x) {
                            prop_assert!(e <= ei);
                        }
                    }
                    prop_assert!(p.monitor[x] > 0.0 && p.monitor[x] <= 1.0);
                }
                None => {
                    prop_assert!(residuals.iter().all(|r| r.at(x).is_none()));
                    prop_assert_eq!(p.monitor[x], 0.0);
                    prop_assert_eq!(p.selection[x], None);
                }
            }
        }
        for x in 0..42 {
            for y in 0..42 {
                if let (Some(ex), Some(ey)) = (p.residual.at(x), p.residual.at(y)) {
                    if ex < ey {
                        prop_assert!(p.monitor[x] >= p.monitor[y]);
                        if lambda * (ey - ex) > 1e-12 {
                            prop_assert!(p.monitor[x] > p.monitor[y]);
                        }
                    }
                }
            }
        }
        let edges = [0.0, 1.5, 2.5, 10.0];
        let hist = selection_histogram(&p, teachers.len(), &edges).unwrap();
        prop_assert_eq!(hist.total(), p.selection.iter().filter(|s| s.is_some()).count());
    }

    #[test]
    fn consistent_scale_has_smaller_deviation(
        depth in prop::collection::vec(0.5..4.0f64, 15 * 16),
        level in 0.5..4.0f64,
        picks in prop::collection::vec(0..240usize, 1..12),
        scale in prop_oneof![0.3..0.95f64, 1.05..3.0f64],
        alpha in 0.01..1.0f64,
    ) {
        // Point-wise windows on an arbitrary field, full windows on a flat one.
        let flat = vec![level; 240];
        for (field, k) in [(&depth, 1), (&flat, 7)] {
            let gt = DepthGrid::new(15, 16, field.clone()).unwrap();
            let mut sparse = vec![0.0; 240];
            for &i in &picks {
                sparse[i] = field[i];
            }
            let sparse = DepthGrid::new(15, 16, sparse).unwrap();
            let scaled = DepthGrid::new(15, 16, field.iter().map(|d| d * scale).collect()).unwrap();
            let z_true = sparse_deviation(&gt, &sparse, k).unwrap();
            let z_scaled = sparse_deviation(&scaled, &sparse, k).unwrap();
            prop_assert!(z_true < z_scaled);
            prop_assert!(teacher_weight(z_true, alpha) < teacher_weight(z_scaled, alpha));
        }
    }

    #[test]
    fn pfm_round_trip_is_bit_exact(
        (h, w, ch, data) in (1..6usize, 1..6usize, prop_oneof![Just(1usize), Just(3usize)])
            .prop_flat_map(|(h, w, ch)| (Just(h), Just(w), Just(ch), prop::collection::vec(any::<f32>(), h * w * ch))),
    ) {
        let map = FloatMap::new(w, h, ch, data.clone()).unwrap();
        let back = decode_pfm(&encode_pfm(&map), Path::new("mem.pfm")).unwrap();
        prop_assert_eq!((back.width, back.height, back.channels), (w, h, ch));
        let a: Vec<u32> = data.iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = back.data.iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn metric_power_mean_inequalities(
        pred in prop::collection::vec(0.01..10.0f64, 30),
        gt in prop::collection::vec(prop_oneof![Just(0.0), 0.2..5.0f64], 30),
    ) {
        prop_assume!(gt.iter().any(|&g| g > 0.0));
        let r = evaluate(
            &DepthGrid::new(5, 6, pred).unwrap(),
            &DepthGrid::new(5, 6, gt).unwrap(),
            (0.2, 5.0),
        ).unwrap();
        prop_assert!(r.rmse >= r.mae && r.mae >= 0.0);
        prop_assert!(r.irmse >= r.imae && r.imae >= 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn uniform_weights_select_by_raw_residual(seed in 0..1000u64) {
        let bundle = small_bundle(seed);
        let product = distill_bundle(&bundle, &EnsembleConfig::default(), Weighting::Uniform).unwrap();
        let raw: Vec<ErrorMap> = bundle
            .teachers
            .iter()
            .map(|t| depth_residual(&bundle.target, &bundle.views, &bundle.intrinsics, t.depth.data()).unwrap())
            .collect();
        let direct = distill(&bundle.teachers, &raw, EnsembleConfig::default().lambda).unwrap();
        prop_assert_eq!(product.selection, direct.selection);
    }

    #[test]
    fn loss_terms_are_non_negative_and_monitor_splits_them(
        seed in 0..1000u64,
        noise in prop::collection::vec(-0.3..0.3f64, 24 * 20),
        q in 0.1..0.8f64,
    ) {
        let bundle = small_bundle(seed);
        let product = distill_bundle(&bundle, &EnsembleConfig::default(), Weighting::SparseDeviation).unwrap();
        let d_hat: Vec<f64> = product
            .distilled
            .data()
            .iter()
            .zip(&noise)
            .map(|(d, n)| (d + n).max(0.2))
            .collect();
        let with_q = |q: f64| {
            let sup = Supervision {
                target: product.distilled.clone(),
                distill_weight: vec![q; d_hat.len()],
                fallback_weight: vec![1.0 - q; d_hat.len()],
            };
            objective(&d_hat, &bundle, &sup, &LossWeights::default()).unwrap()
        };
        let lo = with_q(q);
        let hi = with_q(q + 0.1);
        for b in [&lo, &hi] {
            prop_assert!(b.md >= 0.0 && b.co >= 0.0 && b.st >= 0.0 && b.sm >= 0.0 && b.total >= 0.0);
        }
        prop_assert!(hi.md > lo.md);
        prop_assert!(hi.co + hi.st + hi.sm < lo.co + lo.st + lo.sm);
    }

    #[test]
    fn objective_and_solve_ignore_thread_count(seed in 0..1000u64) {
        let bundle = small_bundle(seed);
        let product = distill_bundle(&bundle, &EnsembleConfig::default(), Weighting::SparseDeviation).unwrap();
        let sup = Supervision::monitored(&product);
        let cfg = SolverConfig { max_iters: 25, log_every: 5, ..Default::default() };
        let run = |threads| {
            pool(threads).install(|| {
                let loss = objective(product.distilled.data(), &bundle, &sup, &LossWeights::default()).unwrap();
                let init = initialize_depth(&bundle.sparse, &product.distilled, &cfg).unwrap();
                let (depth, trace) = solve_from(&bundle, &Schedule::Fixed(sup.clone()), &LossWeights::default(), &cfg, init).unwrap();
                (loss, depth, trace)
            })
        };
        let (l1, d1, t1) = run(1);
        let (l3, d3, t3) = run(3);
        prop_assert_eq!(l1.total.to_bits(), l3.total.to_bits());
        prop_assert_eq!(&l1.gradient, &l3.gradient);
        prop_assert_eq!(&d1, &d3);
        prop_assert_eq!(&t1, &t3);
        let (lo, hi) = cfg.depth_range();
        prop_assert!(d1.data().iter().all(|&d| d >= lo && d <= hi));
        prop_assert!(t1.entries.last().unwrap().total <= t1.entries[0].total);
    }

    #[test]
    fn identical_teachers_make_methods_agree(seed in 0..1000u64) {
        let mut bundle = generate_bundle(&small_spec(TeacherSuite::Perfect), seed).unwrap();
        let twin = bundle.teachers[0].depth.clone();
        bundle.teachers = (1..=3).map(|id| TeacherHypothesis { id, depth: twin.clone() }).collect();
        let mut settings = RunSettings::default();
        settings.solver.max_iters = 20;
        settings.seed = seed;
        let methods = [Method::Monitored, Method::Mean, Method::Median, Method::Random];
        let rows = compare_methods(&[bundle], &methods, &settings).unwrap();
        for row in &rows[1..] {
            prop_assert!((row.report.mae - rows[0].report.mae).abs() < 1e-9);
            prop_assert!((row.report.rmse - rows[0].report.rmse).abs() < 1e-9);
        }
    }
}
