use std::collections::HashMap;

use proptest::prelude::*;

use wsdet::cloudio::{generate_scene, SceneSpec};
use wsdet::frontview::{build_map, crop_patch, ProjectionConfig};
use wsdet::geometry::Rect2D;
use wsdet::{Point, PointCloud};

fn arb_point() -> impl Strategy<Value = [f64; 3]> {
    (0.5..80.0f64, -0.78..0.78f64, -0.43..0.03f64).prop_map(|(r, az, el)| {
        [r * el.cos() * az.cos(), r * el.cos() * az.sin(), r * el.sin()]
    })
}

#[test]
fn default_grid_is_226_by_69() {
    let cfg = ProjectionConfig::default();
    assert_eq!((cfg.cols(), cfg.rows()), (226, 69));
}

proptest! {
    #[test]
    fn cell_is_scale_invariant(p in arb_point(), s in 0.01..100.0f64) {
        let cfg = ProjectionConfig::default();
        let q = [p[0] * s, p[1] * s, p[2] * s];
        prop_assert_eq!(cfg.raw_index(p).unwrap(), cfg.raw_index(q).unwrap());
    }

    #[test]
    fn columns_follow_azimuth(r in 1.0..60.0f64, a in -0.78..0.78f64, b in -0.78..0.78f64, z in -2.0..0.5f64) {
        let cfg = ProjectionConfig::default();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let ca = cfg.raw_index([r * lo.cos(), r * lo.sin(), z]).unwrap().1;
        let cb = cfg.raw_index([r * hi.cos(), r * hi.sin(), z]).unwrap().1;
        prop_assert!(ca <= cb);
    }

    #[test]
    fn rows_follow_elevation(x in 1.0..60.0f64, y in -20.0..20.0f64, z1 in -10.0..2.0f64, z2 in -10.0..2.0f64) {
        let cfg = ProjectionConfig::default();
        let (lo, hi) = if z1 <= z2 { (z1, z2) } else { (z2, z1) };
        prop_assert!(cfg.raw_index([x, y, lo]).unwrap().0 <= cfg.raw_index([x, y, hi]).unwrap().0);
    }

    #[test]
    fn occupancy_matches_distinct_cells(pts in prop::collection::vec(arb_point(), 0..300)) {
        let cfg = ProjectionConfig::default();
        let cloud = PointCloud::new(pts.iter().map(|p| Point::new(p[0], p[1], p[2], 0.5)).collect(), "t");
        let map = build_map(&cloud, &cfg).unwrap();

        // nearest point per in-range cell, computed with plain trigonometry
        let step = cfg.delta_theta;
        let col0 = (cfg.theta_range[0] / step + 1e-9).floor() as i64;
        let row0 = (cfg.phi_range[0] / cfg.delta_phi + 1e-9).floor() as i64;
        let mut nearest: HashMap<(i64, i64), f64> = HashMap::new();
        for p in &pts {
            let theta = p[1].atan2(p[0]);
            let phi = p[2].atan2(p[0].hypot(p[1]));
            let r = (phi / cfg.delta_phi + 1e-9).floor() as i64 - row0;
            let c = (theta / step + 1e-9).floor() as i64 - col0;
            if r < 0 || c < 0 || r >= cfg.rows() as i64 || c >= cfg.cols() as i64 {
                continue;
            }
            let d = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            let e = nearest.entry((r, c)).or_insert(d);
            *e = e.min(d);
        }
        prop_assert_eq!(map.occupied_count(), nearest.len());
        for ((r, c), d) in nearest {
            prop_assert!(map.is_occupied(r as usize, c as usize));
            prop_assert_eq!(map.channels(r as usize, c as usize)[1], d);
        }
    }
}

#[test]
fn whole_map_crop_at_native_size_is_identity() {
    let cfg = ProjectionConfig::default();
    let scene = generate_scene(&SceneSpec::with_seed(9)).unwrap();
    let map = build_map(&scene.cloud, &cfg).unwrap();
    let rect = Rect2D::axis_aligned([0.0, 0.0], [map.cols as f64, map.rows as f64]);
    let patch = crop_patch(&map, &rect, map.rows, map.cols).unwrap();
    assert_eq!(patch.mask, map.occupied);
    assert!((patch.occupied_fraction() - map.occupied_count() as f64 / (map.rows * map.cols) as f64).abs() < 1e-15);
}

#[test]
fn crop_off_the_map_is_rejected() {
    let cfg = ProjectionConfig::default();
    let map = build_map(&PointCloud::new(vec![], "e"), &cfg).unwrap();
    let rect = Rect2D::axis_aligned([-10.0, -10.0], [-1.0, -1.0]);
    assert!(crop_patch(&map, &rect, 4, 4).is_err());
    let partial = Rect2D::axis_aligned([-4.0, 0.0], [4.0, 8.0]);
    assert_eq!(crop_patch(&map, &partial, 4, 4).unwrap().occupied_fraction(), 0.0);
}

#[test]
fn origin_and_behind_points_are_skipped() {
    let cfg = ProjectionConfig::default();
    let cloud = PointCloud::new(
        vec![Point::new(0.0, 0.0, 1.0, 0.1), Point::new(-5.0, 0.0, -1.0, 0.1), Point::new(10.0, 0.0, -1.0, 0.1)],
        "t",
    );
    assert_eq!(build_map(&cloud, &cfg).unwrap().occupied_count(), 1);
}
