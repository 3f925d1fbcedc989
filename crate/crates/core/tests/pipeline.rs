use std::fs::File;
use std::io::{BufReader, BufWriter};

use udfkit::field::{load_model, save_model, AnalyticField, Field};
use udfkit::geometry::{Direction3, Mesh, TriangleSoup, Vec3};
use udfkit::mlp::{train_fields, TrainConfig};
use udfkit::sampler::{generate_sample_set, read_sample_set, write_sample_set, SamplerConfig};
use udfkit::soup_io::{load_soup_auto, save_mesh, MeshFileFormat};
use udfkit::tracer::{render, Camera, Strategy, TraceConfig};

/// Two open quads meeting at a right angle along a shared edge.
fn corner_soup() -> TriangleSoup {
    let p = |x: f64, y: f64, z: f64| Vec3::new(x, y, z);
    let tris = vec![
        [p(-0.5, -0.5, 0.0), p(0.5, -0.5, 0.0), p(0.5, 0.5, 0.0)],
        [p(-0.5, -0.5, 0.0), p(0.5, 0.5, 0.0), p(-0.5, 0.5, 0.0)],
        [p(-0.5, 0.5, 0.0), p(0.5, 0.5, 0.0), p(0.5, 0.5, 0.5)],
        [p(-0.5, 0.5, 0.0), p(0.5, 0.5, 0.5), p(-0.5, 0.5, 0.5)],
    ];
    TriangleSoup::from_vertex_triples(tris).unwrap().0
}

#[test]
fn files_round_trip_through_every_format() {
    let dir = tempfile::tempdir().unwrap();
    let soup = corner_soup();
    let mesh = Mesh::from_soup(&soup);
    for (name, fmt) in [("a.obj", MeshFileFormat::ObjAscii), ("b.ply", MeshFileFormat::PlyBinaryLe), ("c.ply", MeshFileFormat::PlyAscii)] {
        let path = dir.path().join(name);
        save_mesh(&mesh, &path, fmt).unwrap();
        let loaded = load_soup_auto(&path).unwrap();
        assert_eq!(loaded.dropped_degenerate, 0);
        assert_eq!(loaded.soup.len(), soup.len());
        for (a, b) in loaded.soup.triangles().iter().zip(soup.triangles()) {
            for (u, v) in a.vertices().iter().zip(b.vertices()) {
                assert!(u.distance(v) < 1e-6, "{name}");
            }
        }
    }
}

#[test]
fn sample_labels_bound_the_exact_distance() {
    let soup = corner_soup();
    let exact = AnalyticField::SoupBrute(soup.clone());
    let set = generate_sample_set(&soup, &SamplerConfig { n_surface: 4000, n_uniform: 1000, seed: 17 });
    let face_normals: Vec<Direction3> = soup.triangles().iter().map(|t| t.face_normal).collect();
    for s in set.train.iter().chain(&set.val) {
        let d = exact.udf(s.query).unwrap();
        // Labels are distances to the nearest surface sample, which lies on
        // the soup, so they never undercut the exact distance.
        assert!(s.dist >= d - 1e-12);
        assert!(s.dist - d < 0.05, "label {} vs exact {d}", s.dist);
        assert!(face_normals.contains(&s.normal));
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("set.bin");
    write_sample_set(&mut BufWriter::new(File::create(&path).unwrap()), &set).unwrap();
    let back = read_sample_set(&mut BufReader::new(File::open(&path).unwrap())).unwrap();
    assert_eq!((back.train.len(), back.val.len()), (set.train.len(), set.val.len()));
    assert_eq!(back.source_digest, set.source_digest);
    // Records are stored as f32; a second pass is lossless.
    for (a, b) in back.train.iter().zip(&set.train) {
        assert_eq!(a.query.x, b.query.x as f32 as f64);
        assert_eq!(a.dist, b.dist as f32 as f64);
    }
    let (mut first, mut second) = (Vec::new(), Vec::new());
    write_sample_set(&mut first, &back).unwrap();
    write_sample_set(&mut second, &read_sample_set(&mut first.as_slice()).unwrap()).unwrap();
    assert_eq!(first, second);
}

#[test]
fn trained_model_survives_save_and_load() {
    let soup = corner_soup();
    let set = generate_sample_set(&soup, &SamplerConfig { n_surface: 1000, n_uniform: 200, seed: 2 });
    let cfg = TrainConfig { hidden_dim: 16, depth: 3, batch_size: 128, epochs: 3, ..Default::default() };
    let (model, _) = train_fields(&set, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model");
    save_model(&model, &path).unwrap();
    let back = load_model(&path).unwrap();
    assert_eq!(back, model);
    let cam = Camera {
        position: Vec3::new(0.8, -1.0, 0.9),
        look_at: Vec3::ZERO,
        up: Vec3::new(0.0, 0.0, 1.0),
        fov_y: 0.8,
        width: 24,
        height: 24,
    };
    let cfg = TraceConfig { eps: 1e-2, ..Default::default() };
    assert_eq!(render(&model, &cam, &cfg).unwrap(), render(&back, &cam, &cfg).unwrap());
}

#[test]
fn soup_render_matches_analytic_plane() {
    // A single large quad behaves like its supporting plane inside the view.
    let n = Vec3::new(0.2, 0.1, 1.0);
    let normal = Direction3::new(n).unwrap();
    let lift = |x: f64, y: f64| Vec3::new(x, y, -(n.x * x + n.y * y) / n.z);
    let quad = TriangleSoup::from_vertex_triples(vec![
        [lift(-3.0, -3.0), lift(3.0, -3.0), lift(3.0, 3.0)],
        [lift(-3.0, -3.0), lift(3.0, 3.0), lift(-3.0, 3.0)],
    ])
    .unwrap()
    .0;
    let soup = AnalyticField::SoupBrute(quad);
    let plane = AnalyticField::Plane { point: Vec3::ZERO, normal };
    let cam = Camera {
        position: Vec3::new(0.3, -0.4, 0.6),
        look_at: Vec3::ZERO,
        up: Vec3::new(0.0, 0.0, 1.0),
        fov_y: 0.7,
        width: 32,
        height: 32,
    };
    let cfg = TraceConfig { eps: 1e-3, strategy: Strategy::Projection, ..Default::default() };
    let a = render(&soup, &cam, &cfg).unwrap();
    let b = render(&plane, &cam, &cfg).unwrap();
    assert!(a.hit_count() > 32 * 32 / 2);
    for (x, y) in a.depth.iter().zip(&b.depth) {
        assert_eq!(x.is_finite(), y.is_finite());
        if x.is_finite() {
            assert!((x - y).abs() < 1e-9);
        }
    }
}
