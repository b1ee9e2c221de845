use bimamba_core::gradcheck::{primitive_suite, stage_model_check, tiny_stage_config};
use bimamba_core::model::StageModelConfig;

#[test]
fn every_primitive_at_ten_points() {
    for c in primitive_suite(10, 2024).unwrap() {
        assert_eq!(c.points, 10);
        assert!(c.max_rel_error < 1e-5, "{}: {:e}", c.name, c.max_rel_error);
    }
}

#[test]
fn tiny_stage_model_end_to_end() {
    let rep = stage_model_check(&tiny_stage_config(), 5).unwrap();
    assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    assert!(rep.coordinates > 256);
}

#[test]
fn tiny_stage_model_without_eca() {
    let cfg = StageModelConfig { eca: false, ..tiny_stage_config() };
    let rep = stage_model_check(&cfg, 6).unwrap();
    assert!(rep.max_rel_error < 1e-4, "{rep:?}");
}
