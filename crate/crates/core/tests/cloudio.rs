use proptest::prelude::*;

use wsdet::cloudio::{
    decode_velodyne, encode_velodyne, format_detections, format_truth, generate_scene, parse_detections, read_truth,
    read_velodyne_bin, write_truth, write_velodyne_bin, Annotations, CloudError,
};
use wsdet::{Box3D, Point, PointCloud, Proposal, SceneSpec, TruthBox};

#[test]
fn seed_42_plants_three_populated_boxes() {
    let scene = generate_scene(&SceneSpec::with_seed(42)).unwrap();
    assert_eq!(scene.truth.len(), 3);
    for t in &scene.truth {
        assert!(scene.cloud.count_inside(&t.bbox) >= 50);
        assert_eq!(t.class, "Car");
    }
    assert_eq!(scene, generate_scene(&SceneSpec::with_seed(42)).unwrap());
    assert_ne!(scene.cloud, generate_scene(&SceneSpec::with_seed(43)).unwrap().cloud);
}

#[test]
fn planted_boxes_stay_within_the_field_of_view() {
    for seed in 0..20 {
        let spec = SceneSpec::with_seed(seed);
        let scene = generate_scene(&spec).unwrap();
        for t in &scene.truth {
            for c in t.bbox.corners() {
                assert!(c[0] > 0.0 && c[1].atan2(c[0]).abs() <= spec.max_azimuth + 1e-12);
            }
        }
        for (i, a) in scene.truth.iter().enumerate() {
            for b in &scene.truth[i + 1..] {
                assert_eq!(wsdet::geometry::iou_bev(&a.bbox, &b.bbox), 0.0);
            }
        }
    }
}

#[test]
fn velodyne_file_round_trip_and_bad_length() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = generate_scene(&SceneSpec::with_seed(1)).unwrap();
    let path = tmp.path().join("000001.bin");
    write_velodyne_bin(&scene.cloud, &path).unwrap();
    let back = read_velodyne_bin(&path).unwrap();
    assert_eq!(back.frame_id, "000001");
    assert_eq!(back.len(), scene.cloud.len());
    assert_eq!(std::fs::read(&path).unwrap().len(), 16 * scene.cloud.len());

    let bad = tmp.path().join("bad.bin");
    std::fs::write(&bad, [0u8; 17]).unwrap();
    assert!(matches!(read_velodyne_bin(&bad), Err(CloudError::Malformed { len: 17, .. })));
    assert!(matches!(read_velodyne_bin(tmp.path().join("none.bin")), Err(CloudError::Io { .. })));
}

proptest! {
    #[test]
    fn velodyne_bytes_survive_decode_encode(raw in prop::collection::vec(prop::array::uniform4(-100.0f32..100.0), 0..200)) {
        let bytes: Vec<u8> = raw.iter().flat_map(|q| q.iter().flat_map(|v| v.to_le_bytes())).collect();
        let pts = decode_velodyne(&bytes).unwrap();
        prop_assert_eq!(pts.len(), raw.len());
        for (p, q) in pts.iter().zip(&raw) {
            prop_assert_eq!([p.x as f32, p.y as f32, p.z as f32, p.intensity as f32], *q);
        }
        let again = encode_velodyne(&PointCloud::new(pts, "x"));
        let sum = |b: &[u8]| b.iter().fold(0u64, |acc, &x| acc.wrapping_mul(31).wrapping_add(u64::from(x)));
        prop_assert_eq!(sum(&again), sum(&bytes));
        prop_assert_eq!(again, bytes);
    }

    #[test]
    fn detections_round_trip(
        rows in prop::collection::vec(
            (prop::array::uniform3(-50.0..50.0f64), prop::array::uniform3(0.1..6.0f64), -3.2..3.2f64, 0.0..1.0f64, 0usize..100_000),
            0..20,
        )
    ) {
        let dets: Vec<Proposal> = rows
            .iter()
            .map(|&(c, s, yaw, score, anchor)| Proposal::new(Box3D::new(c, s, yaw), score, vec![1.0], anchor))
            .collect();
        let text = format_detections(&dets);
        prop_assert!(text.starts_with("# wsdet-detections v1\n"));
        let back = parse_detections(std::path::Path::new("mem.det"), &text).unwrap();
        prop_assert_eq!(back, dets);
    }
}

#[test]
fn truth_round_trip_with_and_without_annotations() {
    let tmp = tempfile::tempdir().unwrap();
    let truth = vec![
        TruthBox { bbox: Box3D::new([10.0, 1.0, -1.0], [3.9, 1.6, 1.5], 0.2), class: "Car".into(), annotations: None },
        TruthBox {
            bbox: Box3D::new([20.0, -3.0, -1.0], [4.1, 1.7, 1.4], -0.7),
            class: "Car".into(),
            annotations: Some(Annotations { height_px: 33.5, occlusion: 1, truncation: 0.1 }),
        },
    ];
    let path = tmp.path().join("x.truth");
    write_truth(&truth, &path).unwrap();
    assert!(format_truth(&truth).contains(" - - -\n"));
    assert_eq!(read_truth(&path).unwrap(), truth);
}

#[test]
fn malformed_detection_lines_are_located() {
    let p = std::path::Path::new("in.det");
    assert!(matches!(parse_detections(p, "nope\n"), Err(CloudError::Schema { .. })));
    let text = "# wsdet-detections v1\nCar 0.5 1 2 3 4 5 6 0 7 1\nCar 0.5 1 2 3 -4 5 6 0 7 1\n";
    match parse_detections(p, text) {
        Err(CloudError::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("{other:?}"),
    }
    let short = "# wsdet-detections v1\nCar 0.5 1 2\n";
    assert!(matches!(parse_detections(p, short), Err(CloudError::Parse { line: 2, .. })));
}

#[test]
fn rotation_preserves_ranges() {
    let cloud = PointCloud::new(vec![Point::new(3.0, 4.0, 1.0, 0.2)], "r");
    let r = cloud.rotated(1.1);
    let p = &r.points[0];
    assert!((p.x.hypot(p.y) - 5.0).abs() < 1e-12);
    assert_eq!((p.z, p.intensity), (1.0, 0.2));
}
