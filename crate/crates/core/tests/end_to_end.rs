use layoutfuse::io::{read_bundles, write_bundles};
use layoutfuse::metrics::{evaluate, MatchThresholds};
use layoutfuse::pipeline::{run_pipeline, PipelineParams};
use layoutfuse::scene::{all_ordered_pairs, emit_view_bundles, generate_room, SceneSpec, ViewBundle};
use proptest::prelude::*;

fn bundles(walls: usize, views: usize, seed: u64, noise: f64) -> Vec<ViewBundle> {
    let s = generate_room(&SceneSpec { wall_count: walls, camera_count: views, seed, ..SceneSpec::default() }).unwrap();
    emit_view_bundles(&s, &all_ordered_pairs(views), noise, seed).unwrap()
}

#[test]
fn bundles_survive_a_disk_round_trip() {
    let b = bundles(6, 2, 4, 0.02);
    let dir = tempfile::tempdir().unwrap();
    write_bundles(dir.path(), &b).unwrap();
    let once = read_bundles(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(once.len(), b.len());
    for (x, y) in once.iter().zip(&b) {
        assert_eq!((x.image_id, x.partner_id), (y.image_id, y.partner_id));
        assert_eq!(x.plane_masks, y.plane_masks);
        assert_eq!(x.pointmap_self.valid, y.pointmap_self.valid);
        for (p, q) in x.pointmap_self.points.iter().zip(&y.pointmap_self.points) {
            assert!((p - q).abs().max() <= 1e-6 * q.abs().max().max(1.0));
        }
    }
    // Stored values are f32, so a second trip changes nothing.
    let again = tempfile::tempdir().unwrap();
    write_bundles(again.path(), &once).unwrap();
    assert_eq!(read_bundles(&again.path().join("manifest.json")).unwrap(), once);
}

#[test]
fn pipeline_on_stored_bundles_scores_like_in_memory() {
    let s = generate_room(&SceneSpec { wall_count: 8, seed: 21, ..SceneSpec::default() }).unwrap();
    let b = emit_view_bundles(&s, &all_ordered_pairs(3), 0.0, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_bundles(dir.path(), &b).unwrap();
    let stored = read_bundles(&dir.path().join("manifest.json")).unwrap();
    let thr = MatchThresholds::default();
    for input in [&b, &stored] {
        let out = run_pipeline(input, &PipelineParams::default()).unwrap();
        let r = evaluate(&out.merge.layout, &out.camera_poses, 0, &s, &thr).unwrap();
        assert_eq!((r.planes.precision, r.planes.recall), (100.0, 100.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    /// Rescaling every pointmap rescales the layout and nothing else.
    #[test]
    fn layout_follows_input_scale(seed in 0u64..200, scale in 0.25f64..4.0) {
        let b = bundles(4, 2, seed, 0.0);
        let scaled: Vec<ViewBundle> = b
            .iter()
            .map(|x| ViewBundle { pointmap_self: x.pointmap_self.scaled(scale), pointmap_other: x.pointmap_other.scaled(scale), ..x.clone() })
            .collect();
        let params = PipelineParams::default();
        let a = run_pipeline(&b, &params).unwrap().merge.layout;
        let c = run_pipeline(&scaled, &params).unwrap().merge.layout;
        prop_assert_eq!(a.planes.len(), c.planes.len());
        for (p, q) in a.planes.iter().zip(&c.planes) {
            prop_assert!((p.plane.normal - q.plane.normal).norm() < 1e-6);
            prop_assert!((p.plane.offset * scale - q.plane.offset).abs() < 1e-6 * scale.max(1.0));
        }
    }
}
