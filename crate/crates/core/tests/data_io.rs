//! Dataset files, configs and checkpoints on disk.

mod common;

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use sodm::boxes::BBox;
use sodm::checkpoint::{Checkpoint, FORMAT_VERSION};
use sodm::config::{DataSource, RunConfig};
use sodm::eval::GroundTruthBox;
use sodm::model::Detector;
use sodm::synth::{encode_ppm, generate_scene, load_dataset, write_dataset, Dataset, Profile, SceneSpec};
use sodm::{Error, Scalar};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn image_digest(specs: &[SceneSpec]) -> String {
    let mut h = Sha256::new();
    for spec in specs {
        h.update(encode_ppm(&generate_scene(spec).unwrap()));
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[test]
fn generated_images_match_golden_digests() {
    assert_eq!(
        image_digest(&Profile::Small.specs(8, 42)),
        "296198de893f81423b201de3504cd306a48ce9ab7cdfb503f5b3d2c54c4c0171"
    );
    assert_eq!(
        image_digest(&Profile::Mixed.specs(2, 42)),
        "253f3fdffd4c4d6e3cba8ea9a5537367bee4c4547e1243ee45cfa1707ad981d6"
    );
}

#[test]
fn hand_written_fixture_parses() {
    let ds = load_dataset(&fixture("two_images")).unwrap();
    assert_eq!(ds.len(), 2);
    let first = &ds.scenes[0];
    assert_eq!((first.width, first.height), (4, 3));
    // pixel (x, y) holds (10 x, 20 y, 7)
    assert_eq!(&first.pixels[..3], &[0, 0, 7]);
    let at = |x: usize, y: usize| &first.pixels[3 * (y * 4 + x)..3 * (y * 4 + x) + 3];
    assert_eq!(at(3, 2), &[30, 40, 7]);
    assert_eq!(
        first.boxes,
        vec![
            GroundTruthBox {
                image_id: 0,
                bbox: BBox::new(0.5, 0.0, 2.0, 1.5),
                class_id: 1
            },
            GroundTruthBox {
                image_id: 0,
                bbox: BBox::new(1.0, 1.0, 3.0, 2.0),
                class_id: 0
            },
        ]
    );
    let second = &ds.scenes[1];
    assert_eq!((second.width, second.height), (2, 2));
    assert!(second.pixels.iter().all(|&p| p == 255));
    assert!(second.boxes.is_empty());
    let t = second.to_tensor::<f64>();
    assert!(t.data().iter().all(|&v| v == 1.0));
}

#[test]
fn write_then_load_is_lossless() {
    let dir = tempfile::tempdir().unwrap();
    let specs = Profile::Mixed.specs(3, 7);
    let written = write_dataset(&specs, dir.path()).unwrap();
    let loaded = load_dataset(dir.path()).unwrap();
    assert_eq!(loaded, written);
    let (a, ga) = written.batch::<f32>().unwrap();
    let (b, gb) = loaded.batch::<f32>().unwrap();
    assert_eq!(a, b);
    assert_eq!(ga, gb);
    let recorded: Vec<SceneSpec> = serde_json::from_slice(&fs::read(dir.path().join("spec.json")).unwrap()).unwrap();
    assert_eq!(recorded, specs);
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn same_specs_write_identical_trees() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let specs = Profile::Small.specs(5, 3);
    write_dataset(&specs, a.path()).unwrap();
    write_dataset(&specs, b.path()).unwrap();
    let ta = tree(a.path());
    assert_eq!(ta.len(), 5 + 2);
    assert_eq!(ta, tree(b.path()));
}

#[test]
fn empty_dataset_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let ds = write_dataset(&[], dir.path()).unwrap();
    assert!(ds.is_empty());
    assert!(load_dataset(dir.path()).unwrap().is_empty());
}

#[test]
fn malformed_annotations_report_file_and_offset() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&Profile::Small.specs(1, 0), dir.path()).unwrap();
    let ann = dir.path().join("annotations.jsonl");
    let good = fs::read_to_string(&ann).unwrap();
    fs::write(&ann, format!("{good}{{\"image\": 3}}\n")).unwrap();
    match load_dataset(dir.path()) {
        Err(Error::Parse { file, offset, .. }) => {
            assert_eq!(file, ann);
            assert!(offset >= good.len(), "offset {offset} points into the valid line");
        }
        other => panic!("expected a parse error, got {other:?}"),
    }
    fs::write(&ann, good.replace("boxes", "bxoes")).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Parse { .. })));
}

#[test]
fn config_files_round_trip_for_every_data_source() {
    let dir = tempfile::tempdir().unwrap();
    let sources = [
        DataSource::Dir(PathBuf::from("data")),
        DataSource::Scenes(Profile::Small.specs(2, 1)),
        DataSource::Generated {
            profile: Profile::Mixed,
            images: 3,
            seed: 9,
        },
    ];
    for data in sources {
        let cfg = RunConfig {
            data,
            ..common::overfit_config(true, false, true)
        };
        let path = dir.path().join("run.json");
        cfg.save(&path).unwrap();
        let back = RunConfig::load(&path).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_json(), fs::read_to_string(&path).unwrap());
    }
}

#[test]
fn relative_data_dirs_resolve_against_the_config() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&Profile::Small.specs(2, 4), &dir.path().join("data")).unwrap();
    let cfg = RunConfig {
        data: DataSource::Dir(PathBuf::from("data")),
        ..common::overfit_config(false, false, false)
    };
    let loaded: Dataset = cfg.data.load(dir.path()).unwrap();
    assert_eq!(loaded.len(), 2);
}

fn assert_checkpoint_round_trip<T: Scalar>(model: &Detector) {
    let params = model.init_params::<T>(17).unwrap();
    let bytes = Checkpoint::from_params(&params).to_bytes();
    let back = Checkpoint::<T>::from_bytes(&bytes).unwrap();
    let mut restored = model.init_params::<T>(99).unwrap();
    back.restore_params(&mut restored, &[]).unwrap();
    for (a, b) in params.entries().iter().zip(restored.entries()) {
        assert_eq!(a.name, b.name);
        let same = a
            .tensor
            .data()
            .iter()
            .zip(b.tensor.data())
            .all(|(x, y)| x.to_f64().unwrap().to_bits() == y.to_f64().unwrap().to_bits());
        assert!(same, "{} changed", a.name);
    }
    assert_eq!(back.to_bytes(), bytes);
}

#[test]
fn checkpoints_round_trip_every_module() {
    for (s, m, a) in [(false, false, false), (true, true, true)] {
        let model = Detector::new(&common::toy_model(s, m, a)).unwrap();
        assert_checkpoint_round_trip::<f32>(&model);
        assert_checkpoint_round_trip::<f64>(&model);
    }
}

#[test]
fn checkpoint_files_reject_bad_versions_and_dtypes() {
    let dir = tempfile::tempdir().unwrap();
    let model = Detector::new(&common::toy_model(true, false, false)).unwrap();
    let path = dir.path().join("model.sodm");
    Checkpoint::from_params(&model.init_params::<f32>(1).unwrap())
        .save(&path)
        .unwrap();
    assert!(Checkpoint::<f64>::load(&path).is_err());
    let mut bytes = fs::read(&path).unwrap();
    bytes[4..8].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    fs::write(&path, &bytes).unwrap();
    let err = Checkpoint::<f32>::load(&path).unwrap_err().to_string();
    assert!(err.contains("version"), "{err}");
}

#[test]
fn checkpoint_from_another_model_is_rejected() {
    let small = Detector::new(&common::toy_model(false, false, false)).unwrap();
    let other = Detector::new(&common::toy_model(false, true, false)).unwrap();
    let ckpt = Checkpoint::from_params(&other.init_params::<f32>(1).unwrap());
    let mut params = small.init_params::<f32>(1).unwrap();
    assert!(ckpt.restore_params(&mut params, &[]).is_err());
}
