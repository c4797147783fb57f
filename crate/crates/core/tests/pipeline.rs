use lgom::geometry::{prolong, shapes, subdivide_levels};
use lgom::gom::{init_canonical, GaussianDefaults};
use lgom::io;
use lgom::reconstruct::{init_params, reconstruct_with, ReconConfig, Setup};
use lgom::trainkit::{evaluate, held_out_views, make_synthetic_subject, render_gom, train, BodyPose, EvalConfig, TrainConfig};
use proptest::prelude::*;

fn small_recon(subdivision: usize) -> ReconConfig {
    ReconConfig { feature_width: 4, pyramid_levels: 2, hidden: 8, sources: 2, mesh_rounds: 1, subdivision, ..ReconConfig::default() }
}

#[test]
fn untrained_reconstruction_renders_like_the_template() {
    let cfg = small_recon(1);
    let ecfg = EvalConfig { resolution: 24, ..EvalConfig::default() };
    let (data, src, target) = held_out_views(&ecfg, 2, 0, 0.0).unwrap();
    let setup = Setup::new(&data.rig, &cfg, 24, 24).unwrap();
    let params = init_params(&cfg, data.rig.template.vertices.len(), 0).unwrap();
    let rec = reconstruct_with(&setup, &src, 2, &params, &cfg).unwrap();
    let pose = target.pose.clone();
    let a = render_gom(rec.steps.last().unwrap(), &pose, &target.camera, &Default::default()).unwrap();
    let b = render_gom(&setup.template, &pose, &target.camera, &Default::default()).unwrap();
    assert_eq!(a.image, b.image);
    assert_eq!(a.alpha, b.alpha);
}

#[test]
fn template_survives_a_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let gom = init_canonical(&make_synthetic_subject(4).rig, 2, &GaussianDefaults::default()).unwrap();
    let (p, q) = (dir.path().join("a.lgom"), dir.path().join("b.lgom"));
    io::save_gom(&p, &gom).unwrap();
    let back = io::load_gom(&p).unwrap();
    io::save_gom(&q, &back).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
    assert_eq!(back.high_mesh.faces, gom.high_mesh.faces);
    let pose = BodyPose::sample(&mut lgom::trainkit::stream(1, 1), 0.3).skinning(&make_synthetic_subject(4).rig).unwrap();
    let posed = back.articulate(&pose).unwrap();
    assert_eq!(prolong(&back.prolongation, &posed.low_vertices).unwrap(), posed.high_vertices);
}

#[test]
fn short_training_run_evaluates_on_held_out_subjects() {
    let cfg = TrainConfig { iterations: 3, subjects: 2, resolution: 16, steps: 2, recon: small_recon(0), ..TrainConfig::default() };
    let result = train(&cfg).unwrap();
    assert_eq!(result.rows.len(), 3);
    assert!(result.rows.iter().all(|r| r.loss.is_finite() && r.loss > 0.0));
    let ecfg = EvalConfig { subjects: 1, resolution: 16, steps: vec![1, 2], subdivisions: vec![0], sigmas: vec![0.0], ..EvalConfig::default() };
    let rows = evaluate(&result.checkpoint, &ecfg).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.subject >= 1_000_000 && r.psnr.is_finite() && (0.0..=1.0).contains(&r.iou)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn capsule_subdivision_counts(around in 3usize..9, rings in 1usize..5, levels in 0usize..3) {
        let mesh = shapes::capsule(0.3, 0.8, around, rings);
        let (hi, p) = subdivide_levels(&mesh, levels).unwrap();
        prop_assert_eq!(hi.faces.len(), mesh.faces.len() << (2 * levels));
        prop_assert_eq!(hi.euler_characteristic(), mesh.euler_characteristic());
        prop_assert_eq!(prolong(&p, &mesh.vertices).unwrap(), hi.vertices);
    }
}
