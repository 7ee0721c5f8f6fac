use std::collections::BTreeMap;

use proptest::prelude::*;
use sfg_swinsr::config::KvMap;
use sfg_swinsr::degrade::{synthetic_pairs, DegradationConfig};
use sfg_swinsr::io::*;
use sfg_swinsr::model::{build_model, FfnKind, ModelConfig};
use sfg_swinsr::numerics::Tensor;
use sfg_swinsr::trainer::{TrainConfig, Trainer};

fn dims() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..5, 0..5)
}

fn tensor_f64() -> impl Strategy<Value = Tensor<f64>> {
    dims().prop_flat_map(|d| {
        let n: usize = d.iter().product();
        prop::collection::vec(any::<u64>().prop_map(f64::from_bits), n).prop_map(move |v| Tensor::from_vec(&d, v))
    })
}

fn tensor_f32() -> impl Strategy<Value = Tensor<f32>> {
    dims().prop_flat_map(|d| {
        let n: usize = d.iter().product();
        prop::collection::vec(any::<u32>().prop_map(f32::from_bits), n).prop_map(move |v| Tensor::from_vec(&d, v))
    })
}

fn bits64(t: &Tensor<f64>) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn header() -> impl Strategy<Value = KvMap> {
    prop::collection::btree_map("[a-z][a-z0-9_.]{0,12}", "[A-Za-z0-9_.,+-]([A-Za-z0-9_.,+ -]{0,16}[A-Za-z0-9_.,+-])?", 0..6)
        .prop_map(|m| {
            let mut kv = KvMap::new();
            for (k, v) in m {
                kv.set(&k, v);
            }
            kv
        })
}

fn checkpoint() -> impl Strategy<Value = Checkpoint<f64>> {
    (header(), prop::collection::btree_map("[a-z0-9_.]{1,24}", tensor_f64(), 0..6))
        .prop_map(|(header, entries)| Checkpoint { header, entries })
}

fn ppm() -> impl Strategy<Value = (usize, usize, Vec<u8>)> {
    (1usize..9, 1usize..9).prop_flat_map(|(h, w)| (Just(h), Just(w), prop::collection::vec(any::<u8>(), 3 * h * w)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn tensor_f64_round_trip(t in tensor_f64()) {
        let bytes = encode_tensor(&t).unwrap();
        let back = decode_tensor::<f64>(&bytes).unwrap();
        prop_assert_eq!(back.dims(), t.dims());
        prop_assert_eq!(bits64(&back), bits64(&t));
        prop_assert_eq!(encode_tensor(&back).unwrap(), bytes);
    }

    #[test]
    fn tensor_f32_round_trip(t in tensor_f32()) {
        let bytes = encode_tensor(&t).unwrap();
        let back = decode_tensor::<f32>(&bytes).unwrap();
        prop_assert_eq!(back.dims(), t.dims());
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back), bits(&t));
        prop_assert!(decode_tensor::<f64>(&bytes).is_err());
    }

    #[test]
    fn checkpoint_round_trip(ck in checkpoint()) {
        let bytes = ck.encode().unwrap();
        let back = Checkpoint::<f64>::decode(&bytes).unwrap();
        prop_assert_eq!(&back.header, &ck.header);
        prop_assert_eq!(back.entries.keys().collect::<Vec<_>>(), ck.entries.keys().collect::<Vec<_>>());
        for (k, t) in &ck.entries {
            prop_assert_eq!(bits64(&back.entries[k]), bits64(t));
        }
        prop_assert_eq!(back.encode().unwrap(), bytes);
    }

    #[test]
    fn truncated_checkpoint_rejected(ck in checkpoint(), cut in any::<prop::sample::Index>()) {
        let bytes = ck.encode().unwrap();
        let n = cut.index(bytes.len());
        prop_assert!(Checkpoint::<f64>::decode(&bytes[..n]).is_err());
    }

    #[test]
    fn ppm_round_trip((h, w, px) in ppm()) {
        let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
        bytes.extend_from_slice(&px);
        let img = decode_ppm::<f64>(&bytes).unwrap();
        prop_assert_eq!(img.dims(), &[3, h, w]);
        prop_assert_eq!(encode_ppm(&img).unwrap(), bytes.clone());
        let img32 = decode_ppm::<f32>(&bytes).unwrap();
        prop_assert_eq!(encode_ppm(&img32).unwrap(), bytes);
    }
}

#[test]
fn model_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.sfgc");
    let model = build_model::<f32>(&ModelConfig::tiny(FfnKind::Sfg)).unwrap();
    save_model(&model, &path).unwrap();
    let back = load_model::<f32>(&path).unwrap();
    assert_eq!(back.config, model.config);
    let x = synthetic_pairs::<f32>(1, 3, 8, &DegradationConfig::default()).unwrap().remove(0).lr;
    let x = x.reshape(&[1, 3, 8, 8]).unwrap();
    assert_eq!(back.infer(&x).unwrap(), model.infer(&x).unwrap());
}

#[test]
fn model_checkpoint_rejects_missing_and_unknown_names() {
    let model = build_model::<f64>(&ModelConfig::tiny(FfnKind::Baseline)).unwrap();
    let mut ck = model_checkpoint(&model);
    let first = ck.entries.keys().next().unwrap().clone();
    let t = ck.entries.remove(&first).unwrap();
    ck.entries.insert("bogus.weight".into(), t);
    let err = model_from_checkpoint(&ck).unwrap_err().to_string();
    assert!(err.contains(&first) && err.contains("bogus.weight"), "{err}");
}

#[test]
fn resume_from_file_reproduces_history() {
    let data = synthetic_pairs::<f32>(4, 3, 8, &DegradationConfig::default()).unwrap();
    let cfg = TrainConfig { batch_size: 2, total_steps: 6, lr0: 1e-3, lr_min: 1e-4, ..Default::default() };
    let fresh = || Trainer::new(build_model::<f32>(&ModelConfig::tiny(FfnKind::Sfg)).unwrap(), cfg.clone()).unwrap();

    let mut full = fresh();
    let reference = full.run(&data, &mut |_, _| Ok(())).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.sfgc");
    let mut first = fresh();
    let mut history = Vec::new();
    for _ in 0..3 {
        history.push(first.step_once(&data).unwrap());
    }
    trainer_checkpoint(&first).save(&path).unwrap();
    drop(first);

    let mut resumed = trainer_from_checkpoint(&load_checkpoint_as::<f32>(&path).unwrap()).unwrap();
    assert_eq!(resumed.step, 3);
    history.extend(resumed.run(&data, &mut |_, _| Ok(())).unwrap());
    assert_eq!(history, reference);
    let entries = |t: &Trainer<f32>| trainer_checkpoint(t).entries;
    let (a, b): (BTreeMap<_, _>, BTreeMap<_, _>) = (entries(&resumed), entries(&full));
    assert_eq!(a, b);
}
