use std::collections::BTreeMap;
use terra_ssl::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use terra_ssl::dataset::{self, NoiseSpec, NormMode, Task};
use terra_ssl::dem_synth::{generate_scene, write_scene, SynthConfig};
use terra_ssl::model::{build_model, Head, ModelConfig, Provenance};
use terra_ssl::Error;

fn synth(seed: u64) -> SynthConfig {
    SynthConfig {
        size_px: 64,
        seed,
        terrain_amplitude_m: 6.0,
        building_density: 900.0,
        building_size_m: [6.0, 14.0],
        ..Default::default()
    }
}

#[test]
fn manifest_roundtrip_with_noise() {
    let dir = tempfile::tempdir().unwrap();
    let mut records = Vec::new();
    let mut dirs = BTreeMap::new();
    for i in 0..4 {
        let cfg = synth(60 + i);
        let scene = generate_scene(&cfg).unwrap();
        let sd = dir.path().join(&scene.scene_id);
        write_scene(&scene, &cfg.hash(), &sd).unwrap();
        dirs.insert(scene.scene_id.clone(), sd);
        for t in dataset::tile_scene(&scene, 32, 32, Task::Segmentation).unwrap() {
            records.push(dataset::normalize_tile(&t, NormMode::PerTileMinshift).unwrap());
        }
    }
    let m = dataset::make_splits(records, [0.5, 0.25, 0.25], Task::Segmentation, 9).unwrap();
    let m = dataset::subsample_labels(&m, 0.5, 4).unwrap();
    let m = dataset::inject_label_noise(&m, &NoiseSpec::shift_benchmark(2)).unwrap();
    let path = dir.path().join("manifest.tsv");
    dataset::write_manifest(&m, &dirs, NormMode::PerTileMinshift, &path).unwrap();
    let back = dataset::read_manifest(&path).unwrap();
    assert_eq!(back, m);
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with(dataset::MANIFEST_HEADER));
}

#[test]
fn missing_manifest_is_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let err = dataset::read_manifest(&dir.path().join("nope.tsv")).unwrap_err();
    assert!(matches!(err, Error::Missing(_)), "{err:?}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn checkpoint_roundtrip_across_heads() {
    let dir = tempfile::tempdir().unwrap();
    for head in [Head::Reconstruction, Head::Segmentation] {
        let cfg = ModelConfig { base_width: 8, depth: 3, se_reduction: 4, head, ..Default::default() };
        let mut p = build_model(&cfg, 21).unwrap();
        p.set_provenance(Provenance::ProxyPretrained).unwrap();
        let mut meta = CheckpointMeta { epoch: 7, step: 70, ..Default::default() };
        meta.metrics.insert("val_loss".into(), 0.125);
        let sub = dir.path().join(head.to_string());
        save_checkpoint(&p, &meta, &sub).unwrap();
        let (q, m2) = load_checkpoint(&sub, Some(&cfg)).unwrap();
        assert_eq!(q, p);
        assert_eq!(m2, meta);
        let other = ModelConfig { depth: 2, ..cfg.clone() };
        assert!(matches!(load_checkpoint(&sub, Some(&other)), Err(Error::Config(_))));
    }
    assert!(matches!(load_checkpoint(&dir.path().join("absent"), None), Err(Error::Missing(_))));
}
