use std::fs;

use mbq::format::{load_dataset, load_model, load_mbt, read_mbt, save_dataset, save_model, save_mbt, write_mbt, MBT_MAGIC};
use mbq::qckpt::{load_quantized, read_manifest, save_quantized, verify, QuantMeta};
use mbq::Error;
use mbq_core::pipeline::{capture_inputs, quantize_methods, CalibContext, Method, PipelineConfig, QuantizedModel, Scheme};
use mbq_core::toyvlm::{gen_data, sensitivity_profile, token_grad_weights_all, KeySplit, SyntheticSample, ToyModel};
use mbq_core::{Matrix, Modality, Rng};

fn setup() -> (PipelineConfig, ToyModel, Vec<SyntheticSample>) {
    let cfg = PipelineConfig { d_model: 16, n_blocks: 2, ..PipelineConfig::default() };
    let model = ToyModel::init(cfg.model_config(), &mut Rng::new(1)).unwrap();
    let calib = gen_data(&cfg.task, &mut Rng::new(2), 6, KeySplit::Calibration).unwrap();
    (cfg, model, calib)
}

fn quantized(cfg: &PipelineConfig, model: &ToyModel, calib: &[SyntheticSample], methods: &[Method], scheme: Scheme) -> Vec<QuantizedModel> {
    let profile = sensitivity_profile(model, calib).unwrap();
    let tw = token_grad_weights_all(model, calib).unwrap();
    let inputs = capture_inputs(model, calib).unwrap();
    let ctx = CalibContext { inputs: &inputs, profile: Some(&profile), token_weights: Some(&tw), seed: 9 };
    quantize_methods(model, methods, scheme, cfg, &ctx).unwrap()
}

fn meta(cfg: &PipelineConfig) -> QuantMeta {
    QuantMeta { group_size: cfg.group_size, vision_factor: cfg.vision_factor, seed: 9 }
}

#[test]
fn mbt_round_trip_with_and_without_tags() {
    let m = Matrix::random_normal(3, 5, 1.0, &mut Rng::new(3));
    let tags = [Modality::Vision, Modality::Language, Modality::Vision];
    let mut buf = Vec::new();
    write_mbt(&mut buf, &m, Some(&tags)).unwrap();
    assert!(buf.starts_with(MBT_MAGIC));
    let header_end = buf.iter().skip(8).position(|b| *b == b'\n').unwrap() + 9;
    assert_eq!(&buf[8..header_end], b"{\"shape\":[3,5],\"tags\":[0,1,0]}\n");
    assert_eq!(buf.len(), header_end + 15 * 4);
    assert_eq!(read_mbt(&buf[..]).unwrap(), (m.clone(), Some(tags.to_vec())));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.mbt");
    save_mbt(&path, &m, None).unwrap();
    assert_eq!(load_mbt(&path).unwrap(), (m, None));
}

#[test]
fn mbt_rejects_malformed_files() {
    let m = Matrix::filled(2, 2, 1.5).unwrap();
    let mut good = Vec::new();
    write_mbt(&mut good, &m, None).unwrap();

    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    assert!(matches!(read_mbt(&bad_magic[..]), Err(Error::Format(_))));
    assert!(matches!(read_mbt(&good[..good.len() - 1]), Err(Error::Format(_))));
    assert!(matches!(read_mbt(&good[..4]), Err(Error::Format(_))));

    let mut bad_tags = MBT_MAGIC.to_vec();
    bad_tags.extend_from_slice(b"{\"shape\":[2,2],\"tags\":[0]}\n");
    bad_tags.extend_from_slice(&[0u8; 16]);
    assert!(matches!(read_mbt(&bad_tags[..]), Err(Error::Format(_))));

    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_mbt(&dir.path().join("missing.mbt")), Err(Error::Io { .. })));
}

#[test]
fn model_and_dataset_round_trip() {
    let (cfg, model, calib) = setup();
    let dir = tempfile::tempdir().unwrap();
    save_model(dir.path(), &model, Some(4)).unwrap();
    let (back, manifest) = load_model(dir.path()).unwrap();
    assert_eq!(back.params(), model.params());
    assert_eq!(manifest.seed, Some(4));
    assert_eq!(manifest.config, cfg.model_config());

    let path = dir.path().join("calib.jsonl");
    save_dataset(&path, &calib).unwrap();
    assert_eq!(fs::read_to_string(&path).unwrap().lines().count(), calib.len());
    assert_eq!(load_dataset(&path).unwrap(), calib);
}

#[test]
fn quantized_checkpoints_reload_and_verify() {
    let (cfg, model, calib) = setup();
    let dir = tempfile::tempdir().unwrap();
    let mut all = quantized(&cfg, &model, &calib, &Method::ALL, Scheme::W3);
    all.extend(quantized(&cfg, &model, &calib, &[Method::MbqMae], Scheme::W8A8));
    all.extend(quantized(&cfg, &model, &calib, &[Method::Cwe], Scheme::W4A8));
    for qm in &all {
        let path = dir.path().join(format!("{}-{}", qm.method, qm.scheme));
        save_quantized(&path, qm, model.config(), meta(&cfg)).unwrap();
        let (back, manifest) = load_quantized(&path).unwrap();
        assert_eq!(&back, qm, "{} {}", qm.method, qm.scheme);
        assert_eq!(manifest.layers.len(), model.config().n_linear());
        let audit = verify(&path, &model, &calib).unwrap();
        assert!(audit.ok, "{} {}: {:?}", qm.method, qm.scheme, audit.layers.iter().find(|l| !l.ok()));
    }
}

#[test]
fn verify_catches_tampering() {
    let (cfg, model, calib) = setup();
    let dir = tempfile::tempdir().unwrap();
    let qm = quantized(&cfg, &model, &calib, &[Method::MbqMae], Scheme::W3).remove(0);
    save_quantized(dir.path(), &qm, model.config(), meta(&cfg)).unwrap();

    // A stored objective that no longer matches the recomputation.
    let mut manifest = read_manifest(dir.path()).unwrap();
    let v = manifest.layers[0].objective_value.unwrap();
    manifest.layers[0].objective_value = Some(v * 0.5);
    fs::write(dir.path().join("manifest.json"), serde_json::to_string(&manifest).unwrap()).unwrap();
    let audit = verify(dir.path(), &model, &calib).unwrap();
    assert!(!audit.ok);
    assert!(!audit.layers[0].ok() && audit.layers[1..].iter().all(|l| l.ok()));

    // A flipped code bit in a weight blob.
    manifest.layers[0].objective_value = Some(v);
    fs::write(dir.path().join("manifest.json"), serde_json::to_string(&manifest).unwrap()).unwrap();
    let blob = dir.path().join(&manifest.layers[1].blob);
    let mut bytes = fs::read(&blob).unwrap();
    let last = bytes.len() - 8 * qm.layers[1].weight.scales.len() - 1;
    bytes[last] ^= 1;
    fs::write(&blob, bytes).unwrap();
    let audit = verify(dir.path(), &model, &calib).unwrap();
    assert!(!audit.layers[1].weights_match);

    // A different model shape is refused outright.
    let other = ToyModel::init(PipelineConfig { d_model: 8, ..cfg }.model_config(), &mut Rng::new(1)).unwrap();
    assert!(verify(dir.path(), &other, &calib).is_err());
}
