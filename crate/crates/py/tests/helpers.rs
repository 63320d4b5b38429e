use lsnet_core::lsnet::evaluate;
use lsnet_core::synth::synth_scene;
use lsnet_py::{evaluation_parts, knn_rows};

#[test]
fn knn_rows_agree_across_projections_on_flat_clouds() {
    let scene = synth_scene(2, 400, 10.0).unwrap();
    let flat: Vec<[f64; 3]> = scene.cloud.positions.iter().map(|p| [p[0] as f64, p[1] as f64, 1.5]).collect();
    assert_eq!(knn_rows(&flat, 8, "xy").unwrap(), knn_rows(&flat, 8, "3d").unwrap());
}

#[test]
fn evaluation_parts_match_core() {
    let e = evaluate(&[0, 1, 1, 2], &[0, 1, 2, 2], 3).unwrap();
    let (oa, miou, iou) = evaluation_parts(&e);
    assert_eq!(oa, 0.75);
    assert_eq!(iou, vec![Some(1.0), Some(0.5), Some(0.5)]);
    assert!((miou - 2.0 / 3.0).abs() < 1e-15);
}
