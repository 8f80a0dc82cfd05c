use iron_core::bench::{param_accuracy, param_rmse, point_accuracy, point_rmse};
use iron_core::geometry::{
    pose_to_homography, sensed_to_reference, transform_points, CameraModel, PointSet2D, PoseParams,
};
use iron_core::landscape::{
    argmax_tensor, denormalize_offset, extract_subtensor, make_label, AxisRange, GridSpec,
    SimilarityTensor, DEFAULT_WINDOW, LABEL_SCALE,
};
use iron_core::net::{Architecture, InputNorm, IronModel};
use iron_core::similarity::{kernel_correlation, KernelConfig};
use iron_core::trainer::{read_dataset, write_dataset, TrainingSample};
use proptest::prelude::*;

fn grid(s: usize) -> GridSpec {
    GridSpec {
        x: AxisRange::new(-5.0, 5.0),
        y: AxisRange::new(-3.0, 9.0),
        z: AxisRange::new(-1.0, 1.0),
        nodes_per_axis: s,
    }
}

fn points(n: usize) -> impl Strategy<Value = Vec<[f64; 2]>> {
    prop::collection::vec(prop::array::uniform2(-200.0..200.0f64), n)
}

fn pose() -> impl Strategy<Value = PoseParams> {
    (
        prop::array::uniform3(-40.0..40.0f64),
        prop::array::uniform3(-0.2..0.2f64),
    )
        .prop_map(|(t, a)| PoseParams::from_translation(t, a))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn homography_directions_invert(p in pose(), pts in points(12)) {
        let cam = CameraModel::default();
        let set = PointSet2D::new(pts).unwrap();
        let there = transform_points(&set, &pose_to_homography(&p, &cam).unwrap()).unwrap();
        let back = transform_points(&there, &sensed_to_reference(&p, &cam).unwrap()).unwrap();
        for (a, b) in set.points().iter().zip(back.points()) {
            prop_assert!((a[0] - b[0]).abs() < 1e-8 && (a[1] - b[1]).abs() < 1e-8);
        }
    }

    #[test]
    fn kernel_correlation_symmetric_and_shift_invariant(
        a in points(7), b in points(5), shift in prop::array::uniform2(-50.0..50.0f64)
    ) {
        let cfg = KernelConfig::default();
        let (a, b) = (PointSet2D::new(a).unwrap(), PointSet2D::new(b).unwrap());
        let ab = kernel_correlation(&a, &b, &cfg).unwrap();
        prop_assert!((ab - kernel_correlation(&b, &a, &cfg).unwrap()).abs() < 1e-12);
        let moved = kernel_correlation(&a.translated(shift), &b.translated(shift), &cfg).unwrap();
        prop_assert!((ab - moved).abs() < 1e-12);
        prop_assert!(ab > 0.0 && ab <= 1.0);
    }

    #[test]
    fn argmax_matches_exhaustive_scan(vals in prop::collection::vec(-3i32..3, 11 * 11 * 11)) {
        let g = grid(11);
        let t = SimilarityTensor::new(g, vals.iter().map(|&v| v as f64).collect()).unwrap();
        let mut best = ([0usize; 3], f64::NEG_INFINITY);
        for i in 0..11 {
            for j in 0..11 {
                for k in 0..11 {
                    let v = vals[(i * 11 + j) * 11 + k] as f64;
                    if v > best.1 {
                        best = ([i, j, k], v);
                    }
                }
            }
        }
        prop_assert_eq!(argmax_tensor(&t), best.0);
    }

    #[test]
    fn windows_copy_exactly(vals in prop::collection::vec(-1.0..1.0f64, 13 * 13 * 13), c in prop::array::uniform3(4usize..9)) {
        let t = SimilarityTensor::new(grid(13), vals).unwrap();
        let w = extract_subtensor(&t, c, DEFAULT_WINDOW).unwrap();
        let mut n = 0;
        for l in 0..9 {
            for m in 0..9 {
                for k in 0..9 {
                    let v = t.get([c[0] + l - 4, c[1] + m - 4, c[2] + k - 4]);
                    prop_assert_eq!(w.values[n].to_bits(), v.to_bits());
                    n += 1;
                }
            }
        }
    }

    #[test]
    fn label_round_trip(c in prop::array::uniform3(0usize..31), o in prop::array::uniform3(0usize..31)) {
        let g = GridSpec::default();
        let l = make_label(c, o, LABEL_SCALE);
        let metres = denormalize_offset(l, LABEL_SCALE, &g);
        let (pc, po) = (g.node_params(c), g.node_params(o));
        for a in 0..3 {
            prop_assert!((metres[a] - (po[a] - pc[a])).abs() < 1e-9);
            prop_assert_eq!(c[a] as i64 + (l[a] * LABEL_SCALE).round() as i64, o[a] as i64);
        }
    }

    #[test]
    fn param_metrics_match_loops(
        pairs in prop::collection::vec((prop::array::uniform3(-2.0..2.0f64), prop::array::uniform3(-2.0..2.0f64)), 1..40),
        t_pm in 0.01..1.0f64,
    ) {
        let (est, truth): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let mut hits = 0.0;
        let mut sq = 0.0;
        for l in 0..est.len() {
            let mut ok = true;
            for a in 0..3 {
                let d = est[l][a] - truth[l][a];
                sq += d * d;
                ok &= d.abs() < t_pm;
            }
            if ok {
                hits += 1.0;
            }
        }
        let n = est.len() as f64;
        prop_assert!((param_accuracy(&est, &truth, t_pm).unwrap() - hits / n).abs() < 1e-12);
        prop_assert!((param_rmse(&est, &truth).unwrap() - (sq / n).sqrt()).abs() < 1e-9);
    }

    #[test]
    fn point_metrics_match_loops(p in pose(), est in pose(), pts in points(20), t_pt in 0.5..20.0f64) {
        let cam = CameraModel::default();
        let v = PointSet2D::new(pts).unwrap();
        let u = transform_points(&v, &pose_to_homography(&p, &cam).unwrap()).unwrap();
        let c: Vec<_> = (0..20).map(|i| (i, i)).collect();
        // Independent inverse: invert the forward matrix directly.
        let h = pose_to_homography(&est, &cam).unwrap().matrix().try_inverse().unwrap();
        let (mut sq, mut hits) = (0.0, 0.0);
        for (a, b) in u.points().iter().zip(v.points()) {
            let q = h * nalgebra::Vector3::new(a[0], a[1], 1.0);
            let d = ((q[0] / q[2] - b[0]).powi(2) + (q[1] / q[2] - b[1]).powi(2)).sqrt();
            sq += d * d;
            if d < t_pt {
                hits += 1.0;
            }
        }
        let rmse = point_rmse(&u, &v, &c, &est, &cam).unwrap();
        prop_assert!((rmse - (sq / 20.0).sqrt()).abs() < 1e-9 * (1.0 + rmse));
        prop_assert!((point_accuracy(&u, &v, &c, &est, &cam, t_pt).unwrap() - hits / 20.0).abs() < 1e-12);
    }

    #[test]
    fn dataset_files_round_trip(
        raw in prop::collection::vec((prop::collection::vec(-1e3..1e3f32, 729), prop::array::uniform3(-1.2..1.2f32)), 0..5)
    ) {
        let samples: Vec<TrainingSample> = raw
            .into_iter()
            .map(|(input, label)| TrainingSample { input, label, origin: None })
            .collect();
        let mut buf = Vec::new();
        write_dataset(&samples, &mut buf).unwrap();
        prop_assert_eq!(buf.len(), 24 + samples.len() * 4 * 732);
        let back = read_dataset(&buf[..]).unwrap();
        prop_assert_eq!(back.len(), samples.len());
        for (a, b) in back.iter().zip(&samples) {
            prop_assert_eq!(&a.input, &b.input);
            prop_assert_eq!(a.label, b.label);
        }
    }
}

#[test]
fn admissible_centers_are_exactly_the_interior() {
    let g = GridSpec::default();
    let t = SimilarityTensor::new(g, vec![0.0; g.len()]).unwrap();
    let admissible = g.admissible_centers(DEFAULT_WINDOW);
    assert_eq!(admissible.len(), 23 * 23 * 23);
    let mut accepted = 0;
    for i in 0..31 {
        for j in 0..31 {
            for k in 0..31 {
                if extract_subtensor(&t, [i, j, k], DEFAULT_WINDOW).is_ok() {
                    accepted += 1;
                    assert!([i, j, k].iter().all(|&c| (4..=26).contains(&c)));
                }
            }
        }
    }
    assert_eq!(accepted, 12167);
}

#[test]
fn saved_weights_reload_to_f32_values() {
    let m = IronModel::new(Architecture::reduced(), InputNorm::Standardize, 21).unwrap();
    let mut buf = Vec::new();
    m.save(&mut buf).unwrap();
    let back = IronModel::load(&buf[..], &Architecture::reduced()).unwrap();
    for (a, b) in m.parameters().iter().zip(back.parameters()) {
        for (x, y) in a.iter().zip(b) {
            assert_eq!((*x as f32) as f64, *y);
        }
    }
    let mut again = Vec::new();
    back.save(&mut again).unwrap();
    assert_eq!(buf, again);
}
