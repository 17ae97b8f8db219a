//! Otsu binarization, Moore tracing and the eleven contour descriptors.

use std::collections::HashSet;
use std::f64::consts::PI;

use histoswin::contour::{
    binarize_otsu, compute_features, components, equivalent_diameter, epsilon_for, features_report, image_features,
    trace_largest_contour, BinaryMask, ContourFeatures, Gray, CSV_HEADER,
};
use histoswin::data::{synth_dataset, Sample, SynthKind};
use histoswin::{Error, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Otsu by exhaustive search straight from the pixel list.
fn otsu_oracle(values: &[f64]) -> usize {
    let bins: Vec<usize> = values.iter().map(|v| v.round().clamp(0.0, 255.0) as usize).collect();
    let mut best = (0, -1.0);
    for t in 0..255 {
        let (lo, hi): (Vec<f64>, Vec<f64>) = {
            let lo = bins.iter().filter(|&&b| b <= t).map(|&b| b as f64).collect();
            let hi = bins.iter().filter(|&&b| b > t).map(|&b| b as f64).collect();
            (lo, hi)
        };
        if lo.is_empty() || hi.is_empty() {
            continue;
        }
        let n = bins.len() as f64;
        let (w0, w1) = (lo.len() as f64 / n, hi.len() as f64 / n);
        let m0 = lo.iter().sum::<f64>() / lo.len() as f64;
        let m1 = hi.iter().sum::<f64>() / hi.len() as f64;
        let v = w0 * w1 * (m0 - m1).powi(2);
        if v > best.1 + 1e-12 * v.abs().max(1.0) {
            best = (t, v);
        }
    }
    best.0
}

fn gray_of(mask: &BinaryMask, fg: f64, bg: f64) -> Gray {
    Gray::new(mask.height, mask.width, mask.data.iter().map(|&m| if m { fg } else { bg }).collect()).unwrap()
}

fn rect_mask(h: usize, w: usize, x0: usize, y0: usize, rw: usize, rh: usize) -> BinaryMask {
    BinaryMask::from_fn(h, w, |x, y| (x0..x0 + rw).contains(&x) && (y0..y0 + rh).contains(&y))
}

#[test]
fn two_level_image_splits_exactly() {
    let mask = rect_mask(10, 10, 2, 3, 4, 5);
    let bin = binarize_otsu(&gray_of(&mask, 255.0, 0.0)).unwrap();
    assert_eq!(bin.mask, mask);
    assert_eq!(bin.threshold, 0);
    let bin = binarize_otsu(&gray_of(&mask, 200.0, 40.0)).unwrap();
    assert_eq!(bin.mask, mask);
    assert!((40..200).contains(&bin.threshold));
}

#[test]
fn constant_image_is_degenerate() {
    let gray = Gray::new(4, 4, vec![77.0; 16]).unwrap();
    match binarize_otsu(&gray) {
        Err(Error::Data(msg)) => assert!(msg.contains("degenerate")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn mixed_gaussian_matches_exhaustive_search() {
    for seed in 0..8 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Normal::new(rng.gen_range(40.0..90.0), rng.gen_range(5.0..20.0)).unwrap();
        let b = Normal::new(rng.gen_range(140.0..220.0), rng.gen_range(5.0..25.0)).unwrap();
        let data: Vec<f64> = (0..900)
            .map(|_| {
                let v: f64 = if rng.gen_bool(0.4) { b.sample(&mut rng) } else { a.sample(&mut rng) };
                v.clamp(0.0, 255.0)
            })
            .collect();
        let gray = Gray::new(30, 30, data.clone()).unwrap();
        assert_eq!(binarize_otsu(&gray).unwrap().threshold as usize, otsu_oracle(&data), "seed {seed}");
    }
}

#[test]
fn single_pixel_has_zero_perimeter() {
    let mask = BinaryMask::from_fn(5, 5, |x, y| (x, y) == (2, 3));
    let trace = trace_largest_contour(&mask).unwrap();
    assert_eq!(trace.points, vec![(2, 3)]);
    assert_eq!(trace.perimeter(), 0.0);
    let f = compute_features(&trace, &gray_of(&mask, 9.0, 0.0)).unwrap();
    assert_eq!((f.area, f.width, f.height, f.extent), (1.0, 1.0, 1.0, 1.0));
}

#[test]
fn empty_mask_is_a_data_error() {
    assert!(matches!(trace_largest_contour(&BinaryMask::new(4, 4)), Err(Error::Data(_))));
}

/// Boundary pixels: foreground with a 4-neighbour outside the region.
fn boundary_oracle(mask: &BinaryMask) -> HashSet<(usize, usize)> {
    let mut out = HashSet::new();
    for y in 0..mask.height {
        for x in 0..mask.width {
            if !mask.get(x, y) {
                continue;
            }
            let open = [(0i64, -1i64), (1, 0), (0, 1), (-1, 0)].iter().any(|&(dx, dy)| {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                nx < 0 || ny < 0 || nx >= mask.width as i64 || ny >= mask.height as i64 || !mask.get(nx as usize, ny as usize)
            });
            if open {
                out.insert((x, y));
            }
        }
    }
    out
}

/// Step lengths of the closed walk counted independently.
fn walk_length(points: &[(usize, usize)]) -> (usize, usize) {
    let n = points.len();
    let (mut axis, mut diag) = (0, 0);
    for i in 0..n {
        let (a, b) = (points[i], points[(i + 1) % n]);
        let (dx, dy) = (a.0.abs_diff(b.0), a.1.abs_diff(b.1));
        assert!(dx <= 1 && dy <= 1 && dx + dy > 0, "{a:?} → {b:?} is not an 8-step");
        if dx + dy == 2 {
            diag += 1;
        } else {
            axis += 1;
        }
    }
    (axis, diag)
}

#[test]
fn filled_rectangle() {
    let mask = rect_mask(30, 40, 5, 7, 20, 10);
    let trace = trace_largest_contour(&mask).unwrap();
    assert_eq!(walk_length(&trace.points), (56, 0));
    assert_eq!(trace.perimeter(), 56.0);
    assert_eq!(trace.points.iter().copied().collect::<HashSet<_>>(), boundary_oracle(&mask));
    assert_eq!(trace.points[0], (5, 7));
    // clockwise in image coordinates: along the top edge first
    assert_eq!(trace.points[1], (6, 7));
    let f = compute_features(&trace, &gray_of(&mask, 200.0, 10.0)).unwrap();
    assert_eq!(f.area, 200.0);
    assert_eq!((f.width, f.height), (20.0, 10.0));
    assert_eq!(f.aspect_ratio, 2.0);
    assert_eq!(f.extent, 1.0);
    assert!((f.epsilon - 0.56).abs() < 1e-12);
    assert!((f.diameter - 15.957691216057307).abs() < 1e-12);
    assert_eq!((f.min_value, f.max_value, f.mean_color), (200.0, 200.0, 200.0));
}

#[test]
fn largest_component_is_traced() {
    let mut mask = rect_mask(20, 20, 1, 1, 2, 5);
    for (x, y) in rect_mask(20, 20, 10, 10, 6, 5).data.iter().enumerate().filter(|(_, &v)| v).map(|(i, _)| (i % 20, i / 20)) {
        mask.set(x, y, true);
    }
    assert_eq!(components(&mask).iter().map(Vec::len).collect::<Vec<_>>(), vec![10, 30]);
    let trace = trace_largest_contour(&mask).unwrap();
    assert_eq!(trace.region.count(), 30);
    assert_eq!(trace.points[0], (10, 10));
    // equal sizes: the component met first in raster order wins
    let tie = BinaryMask::from_fn(8, 8, |x, y| (y == 5 && x < 3) || (y == 1 && x > 4));
    assert_eq!(trace_largest_contour(&tie).unwrap().points[0], (5, 1));
}

#[test]
fn diagonal_runs_use_root_two_steps() {
    let mask = BinaryMask::from_fn(6, 6, |x, y| x == y);
    let trace = trace_largest_contour(&mask).unwrap();
    assert_eq!(walk_length(&trace.points), (0, 10));
    assert!((trace.perimeter() - 10.0 * 2f64.sqrt()).abs() < 1e-12);
}

fn disk(size: usize, cx: f64, cy: f64, r: f64) -> BinaryMask {
    BinaryMask::from_fn(size, size, |x, y| (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r * r)
}

#[test]
fn circles_approximate_continuous_geometry() {
    for r in [10.0, 20.0, 35.0] {
        let mask = disk(100, 49.5, 50.0, r);
        let trace = trace_largest_contour(&mask).unwrap();
        assert_eq!(trace.points.iter().copied().collect::<HashSet<_>>(), boundary_oracle(&mask));
        let f = compute_features(&trace, &gray_of(&mask, 180.0, 20.0)).unwrap();
        let p = 2.0 * PI * r;
        assert!((f.perimeter - p).abs() <= 0.1 * p, "r={r}: perimeter {}", f.perimeter);
        assert!((f.diameter - 2.0 * r).abs() <= 0.05 * 2.0 * r, "r={r}: diameter {}", f.diameter);
        assert!(f.extent <= 1.0 && f.extent > PI / 4.0 - 0.05);
    }
}

#[test]
fn reference_epsilons() {
    // perimeter, epsilon pairs as published to three decimals
    let table = [
        (5302.66, 53.027),
        (3951.46, 39.515),
        (7978.10, 79.781),
        (3160.22, 31.602),
        (2163.31, 21.633),
        (147.25, 1.473),
    ];
    for (p, eps) in table {
        assert!((epsilon_for(p) - eps).abs() <= 0.0005 + 1e-9, "{p}");
        assert_eq!(epsilon_for(p) / p, 0.01);
    }
    assert!((equivalent_diameter(200.0) - (800.0 / PI).sqrt()).abs() < 1e-15);
}

fn check_invariants(f: &ContourFeatures) {
    assert!((f.epsilon - 0.01 * f.perimeter).abs() <= 1e-12 * f.perimeter.max(1.0));
    assert!(f.extent > 0.0 && f.extent <= 1.0 + 1e-9);
    assert_eq!(f.aspect_ratio, f.width / f.height);
    assert!((f.diameter - (4.0 * f.area / PI).sqrt()).abs() < 1e-9);
    assert!(f.min_value <= f.mean_color && f.mean_color <= f.max_value);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn translation_leaves_shape_descriptors_unchanged(
        seed in any::<u64>(),
        dx in 0usize..12,
        dy in 0usize..12,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blob: Vec<bool> = (0..100).map(|_| rng.gen_bool(0.6)).collect();
        let place = |ox: usize, oy: usize| {
            BinaryMask::from_fn(32, 32, |x, y| {
                x >= ox && y >= oy && x < ox + 10 && y < oy + 10 && blob[(y - oy) * 10 + (x - ox)]
            })
        };
        let (a, b) = (place(2, 3), place(2 + dx, 3 + dy));
        prop_assume!(a.count() > 0);
        let fa = compute_features(&trace_largest_contour(&a).unwrap(), &gray_of(&a, 150.0, 30.0)).unwrap();
        let fb = compute_features(&trace_largest_contour(&b).unwrap(), &gray_of(&b, 150.0, 30.0)).unwrap();
        prop_assert_eq!(fa, fb);
        check_invariants(&fa);
    }

    #[test]
    fn descriptors_hold_their_invariants_on_noise(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = Tensor::<f32>::from_fn(vec![3, 20, 20], |_| rng.gen_range(0.0..1.0));
        let f = image_features(&img).unwrap();
        check_invariants(&f);
        let bin = binarize_otsu(&Gray::from_image(&img).unwrap()).unwrap();
        let trace = trace_largest_contour(&bin.mask).unwrap();
        prop_assert!(trace.points.iter().all(|&(x, y)| trace.region.get(x, y)));
        if trace.points.len() >= 3 {
            walk_length(&trace.points);
        }
    }
}

fn rect_sample(id: &str, label: usize) -> Sample {
    let mask = rect_mask(32, 32, 4, 6, 20, 10);
    let data: Vec<f32> = (0..3).flat_map(|_| mask.data.iter().map(|&m| if m { 0.8 } else { 0.1 })).collect();
    Sample {
        image: Tensor::new(vec![3, 32, 32], data).unwrap(),
        label,
        id: id.into(),
    }
}

#[test]
fn report_rows_and_means() {
    let names = vec!["a".to_string(), "b".to_string()];
    let one = features_report(&[rect_sample("a/1", 0)], &names).unwrap();
    let f = one.rows[0].features.clone().unwrap();
    assert_eq!((f.area, f.perimeter, f.aspect_ratio, f.extent), (200.0, 56.0, 2.0, 1.0));
    assert!((f.mean_color - 0.8 * 255.0).abs() < 1e-3);

    let two = features_report(&[rect_sample("a/1", 0), rect_sample("a/2", 0)], &names).unwrap();
    assert_eq!(two.means.len(), 1);
    assert_eq!(two.means[0].count, 2);
    assert_eq!(two.means[0].features, f);

    let mut flat = rect_sample("b/flat", 1);
    flat.image = Tensor::full(vec![3, 32, 32], 0.5);
    let mixed = features_report(&[rect_sample("a/1", 0), flat], &names).unwrap();
    assert!(mixed.rows[1].features.as_ref().unwrap_err().contains("degenerate"));
    let csv = mixed.to_csv().unwrap();
    let mut reader = csv::Reader::from_reader(csv.as_bytes());
    assert_eq!(reader.headers().unwrap().iter().collect::<Vec<_>>(), CSV_HEADER);
    let records: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(records.len(), 3);
    assert_eq!(&records[0][2], "200");
    assert_eq!(&records[1][0], "b/flat");
    assert!(records[1][13].contains("degenerate") && records[1][2].is_empty());
    assert_eq!((&records[2][0], &records[2][1]), ("mean", "a"));
    assert!(features_report(&[], &names).is_err());
}

#[test]
fn shapes_corpus_means_match_recomputation() {
    let samples = synth_dataset(SynthKind::Shapes, 24, 64, 3).unwrap();
    let names: Vec<String> = SynthKind::Shapes.class_names().iter().map(|s| s.to_string()).collect();
    let report = features_report(&samples, &names).unwrap();
    assert_eq!(report.rows.len(), 24);
    let csv = report.to_csv().unwrap();
    let mut reader = csv::Reader::from_reader(csv.as_bytes());
    let records: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    for class in &names {
        let rows: Vec<&csv::StringRecord> = records.iter().filter(|r| &r[1] == class && &r[0] != "mean").collect();
        assert_eq!(rows.len(), 12);
        assert!(rows.iter().all(|r| r[13].is_empty()));
        let mean_row = records.iter().find(|r| &r[0] == "mean" && &r[1] == class).unwrap();
        for col in 2..13 {
            let mean = rows.iter().map(|r| r[col].parse::<f64>().unwrap()).sum::<f64>() / rows.len() as f64;
            let got: f64 = mean_row[col].parse().unwrap();
            assert!((got - mean).abs() <= 1e-9 * mean.abs().max(1.0), "{class} col {col}: {got} vs {mean}");
        }
    }
    // rectangles fill their bounding boxes, ellipses do not
    let extent = |label: usize| report.means[label].features.extent;
    assert!(extent(1) > 0.95 && extent(0) < 0.85, "{} {}", extent(0), extent(1));
}
