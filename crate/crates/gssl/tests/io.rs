use std::path::PathBuf;

use gssl::checkpoint::{load_checkpoint, save_checkpoint};
use gssl::dataset::{load_dataset, save_dataset};
use gssl::tensor_io::{read_tensor, write_tensor, Data, Stored};
use gssl::IoError;
use gssl_core::model::{ModelConfig, ModelState};
use gssl_core::synth::{generate_domain, DomainSpec, Style};
use gssl_core::Tensor;
use proptest::prelude::*;

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("gssl-io-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn spec(ood: bool) -> DomainSpec {
    DomainSpec {
        name: "t".into(),
        k_known: 4,
        include_ood: ood,
        style: Style { shift: 0.5, noise: 0.01 },
        n_images: 3,
        extent: [16, 20],
        seed: 9,
    }
}

fn data_strategy() -> impl Strategy<Value = Stored> {
    let shape = prop::collection::vec(0usize..4, 0..4);
    (shape, 0u8..4).prop_flat_map(|(shape, dtype)| {
        let n: usize = shape.iter().product();
        let data = match dtype {
            0 => prop::collection::vec(any::<f32>(), n).prop_map(Data::F32).boxed(),
            1 => prop::collection::vec(any::<f64>(), n).prop_map(Data::F64).boxed(),
            2 => prop::collection::vec(any::<u8>(), n).prop_map(Data::U8).boxed(),
            _ => prop::collection::vec(any::<i32>(), n).prop_map(Data::I32).boxed(),
        };
        data.prop_map(move |d| Stored::new(shape.clone(), d).unwrap())
    })
}

proptest! {
    #[test]
    fn tensors_round_trip_bit_exactly(t in data_strategy()) {
        let back = Stored::decode(&t.encode().unwrap()).unwrap();
        prop_assert_eq!(&back.shape, &t.shape);
        // compare encodings so NaN payloads count as equal
        prop_assert_eq!(back.encode().unwrap(), t.encode().unwrap());
    }

    #[test]
    fn truncation_is_always_reported(t in data_strategy(), cut in 0usize..64) {
        let bytes = t.encode().unwrap();
        prop_assume!(cut < bytes.len());
        let is_format = matches!(Stored::decode(&bytes[..cut]), Err(IoError::Format { .. }));
        prop_assert!(is_format);
    }
}

#[test]
fn image_file_round_trips_byte_identically() {
    let dir = scratch("image");
    let bytes: Vec<u8> = (0..3 * 64 * 64).map(|i| (i * 31 % 256) as u8).collect();
    let t = Stored::new(vec![3, 64, 64], Data::U8(bytes)).unwrap();
    let path = dir.join("x.gt");
    write_tensor(&path, &t).unwrap();
    assert_eq!(read_tensor(&path).unwrap(), t);
    let mut raw = std::fs::read(&path).unwrap();
    raw[0] = b'Q';
    std::fs::write(&path, raw).unwrap();
    match read_tensor(&path) {
        Err(IoError::FileFormat { offset, .. }) => assert_eq!(offset, 0),
        other => panic!("{other:?}"),
    }
}

#[test]
fn dataset_round_trips() {
    let dir = scratch("dataset");
    let d = generate_domain(&spec(true)).unwrap();
    save_dataset(&dir, &d).unwrap();
    assert_eq!(load_dataset(&dir).unwrap(), d);
}

#[test]
fn missing_labels_give_an_unlabelled_dataset() {
    let dir = scratch("unlabelled");
    let d = generate_domain(&spec(false)).unwrap();
    save_dataset(&dir, &d).unwrap();
    std::fs::remove_dir_all(dir.join("labels")).unwrap();
    let back = load_dataset(&dir).unwrap();
    assert!(back.labels.is_none());
    assert_eq!(back.images, d.images);
}

#[test]
fn out_of_range_label_is_rejected() {
    let dir = scratch("badlabel");
    let d = generate_domain(&spec(false)).unwrap();
    save_dataset(&dir, &d).unwrap();
    let mut map = d.labels.as_ref().unwrap()[1].clone();
    map[0] = 4; // K_total without the unknown family
    write_tensor(&dir.join("labels/00001.gt"), &Stored::new(vec![16, 20], Data::I32(map)).unwrap()).unwrap();
    let err = load_dataset(&dir).unwrap_err().to_string();
    assert!(err.contains("label map 1"), "{err}");
}

#[test]
fn checkpoint_round_trips_at_f32() {
    let dir = scratch("checkpoint");
    let mut state = ModelState::new(ModelConfig::default(), 4).unwrap();
    state.gamma = Some(0.123456789012345);
    state.step = 17;
    state.bank.vectors = Tensor::from_fn([64, 4], |i| (i as f64).sin());
    state.bank.available = vec![true, true, false, true];
    save_checkpoint(&dir, &state, "abc").unwrap();
    let (back, meta) = load_checkpoint(&dir).unwrap();
    assert_eq!(meta.config_sha256, "abc");
    assert_eq!(back.gamma, state.gamma);
    assert_eq!(back.step, 17);
    assert_eq!(back.bank.available, state.bank.available);
    for ((_, a), (_, b)) in back.params.named().into_iter().zip(state.params.named()) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| *x == f64::from(*y as f32)));
    }
    // saving the reloaded state reproduces the files exactly
    let again = scratch("checkpoint-again");
    save_checkpoint(&again, &back, "abc").unwrap();
    for name in ["prototypes.gt", "meta.json", "params/head.weight.gt"] {
        assert_eq!(std::fs::read(dir.join(name)).unwrap(), std::fs::read(again.join(name)).unwrap(), "{name}");
    }
}
