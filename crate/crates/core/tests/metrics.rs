use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use udfkit::field::AnalyticField;
use udfkit::geometry::{Direction3, Point3, Vec3};
use udfkit::mesher::extract_mesh;
use udfkit::metrics::{
    chamfer, depth_mae, nn_squared_distances, normal_error, pairwise_sum, pixel_iou, sample_mesh_points, MapView,
    PixelValidity,
};

fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point3> {
    (0..n)
        .map(|_| Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)))
        .collect()
}

fn scan_min(p: Point3, set: &[Point3]) -> f64 {
    let mut best = f64::INFINITY;
    for q in set {
        let d = p.distance_squared(*q);
        if d < best {
            best = d;
        }
    }
    best
}

#[test]
fn chamfer_matches_quadratic_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..5 {
        let a = random_points(&mut rng, 500);
        let b = random_points(&mut rng, 500);
        let ab: Vec<f64> = a.iter().map(|&p| scan_min(p, &b)).collect();
        let ba: Vec<f64> = b.iter().map(|&p| scan_min(p, &a)).collect();
        assert_eq!(nn_squared_distances(&a, &b).unwrap(), ab);
        assert_eq!(nn_squared_distances(&b, &a).unwrap(), ba);
        let expected = pairwise_sum(&ab) / 500.0 + pairwise_sum(&ba) / 500.0;
        let got = chamfer(&a, &b).unwrap();
        assert_eq!(got, expected);
        assert_eq!(got, chamfer(&b, &a).unwrap());
        let naive = ab.iter().sum::<f64>() / 500.0 + ba.iter().sum::<f64>() / 500.0;
        assert!((got - naive).abs() <= 1e-12 * naive);
    }
}

#[test]
fn chamfer_is_permutation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random_points(&mut rng, 300);
    let b = random_points(&mut rng, 200);
    let mut ar = a.clone();
    ar.reverse();
    let c1 = chamfer(&a, &b).unwrap();
    let c2 = chamfer(&ar, &b).unwrap();
    assert!((c1 - c2).abs() <= 1e-15 * c1);
}

#[test]
fn normal_error_ignores_sign_flips() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 64;
    let rand_dir = |rng: &mut ChaCha8Rng| {
        Direction3::new(Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 1.0)).unwrap()
    };
    let gt: Vec<Option<Direction3>> = (0..n).map(|_| Some(rand_dir(&mut rng))).collect();
    let est: Vec<Option<Direction3>> = (0..n).map(|_| Some(rand_dir(&mut rng))).collect();
    let flipped: Vec<Option<Direction3>> =
        est.iter().enumerate().map(|(i, d)| if i % 3 == 0 { d.map(|d| d.flipped()) } else { *d }).collect();
    let depth = vec![1.0; n];
    let dm = MapView::new(8, 8, &depth).unwrap();
    let v = PixelValidity::from_depths(&dm, &dm).unwrap();
    let e1 = normal_error(&MapView::new(8, 8, &gt).unwrap(), &MapView::new(8, 8, &est).unwrap(), &v).unwrap();
    let e2 = normal_error(&MapView::new(8, 8, &gt).unwrap(), &MapView::new(8, 8, &flipped).unwrap(), &v).unwrap();
    assert_eq!(e1, e2);
    assert!(e1 > 0.0 && e1 <= 2f64.sqrt());
}

#[test]
fn iou_and_mae_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let a: Vec<f64> = (0..50).map(|_| if rng.random_bool(0.6) { rng.random() } else { f64::INFINITY }).collect();
        let b: Vec<f64> = (0..50).map(|_| if rng.random_bool(0.6) { rng.random() } else { f64::INFINITY }).collect();
        let (ma, mb) = (MapView::new(10, 5, &a).unwrap(), MapView::new(10, 5, &b).unwrap());
        let iou = pixel_iou(&ma, &mb).unwrap();
        assert!((0.0..=1.0).contains(&iou));
        assert_eq!(pixel_iou(&ma, &ma).unwrap(), 1.0);
        if let Ok(m) = depth_mae(&ma, &mb) {
            assert!((0.0..=1.0).contains(&m));
        }
    }
}

#[test]
fn extracted_sphere_is_close_to_true_sphere() {
    let r = 0.4;
    let (mesh, _) = extract_mesh(&AnalyticField::Sphere { center: Vec3::ZERO, radius: r }, 8, 2, None).unwrap();
    let pts = sample_mesh_points(&mesh, 5000, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let truth: Vec<Point3> = (0..5000)
        .map(|_| {
            let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            Direction3::new(v).unwrap().vec() * r
        })
        .collect();
    assert!(chamfer(&pts, &truth).unwrap() < 2e-3);
}
