use dpgan::scene_data::{
    class_frequencies, connected_components, generate_scenes, load_dataset, one_hot, save_dataset, write_label_png,
    DatasetMeta, LabelMap, SceneSpec, SizeBucket,
};
use dpgan::Error;
use proptest::prelude::*;

fn desk_spec(seed: u64) -> SceneSpec {
    SceneSpec::new(seed, DatasetMeta::desk(64, 8).unwrap())
}

#[test]
fn save_load_round_trip() {
    let spec = desk_spec(11);
    let scenes = generate_scenes(&spec, 0, 10).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), &spec.meta, &scenes).unwrap();

    let reader = load_dataset(dir.path()).unwrap();
    assert_eq!(reader.meta(), &spec.meta);
    assert_eq!(reader.meta().num_classes, 8);
    assert_eq!(reader.len(), 10);
    for (i, loaded) in reader.iter().enumerate() {
        let (label, image) = loaded.unwrap();
        assert_eq!(label, scenes[i].0);
        assert_eq!(image, scenes[i].1.quantized());
    }
}

#[test]
fn label_value_equal_to_class_count_is_rejected() {
    let spec = desk_spec(1);
    let scenes = generate_scenes(&spec, 0, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), &spec.meta, &scenes).unwrap();

    let mut bad = scenes[1].0.clone();
    bad.set(5, 9, 8);
    let path = dir.path().join("labels").join("000001.png");
    write_label_png(&path, &bad).unwrap();

    let reader = load_dataset(dir.path()).unwrap();
    assert!(reader.get(0).is_ok());
    let msg = reader.get(1).unwrap_err().to_string();
    assert!(msg.contains("000001.png"), "{msg}");
    assert!(msg.contains("label value 8"), "{msg}");
}

#[test]
fn missing_meta_and_unpaired_files_are_rejected() {
    let spec = desk_spec(2);
    let scenes = generate_scenes(&spec, 0, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), &spec.meta, &scenes).unwrap();

    std::fs::remove_file(dir.path().join("images").join("000000.png")).unwrap();
    let err = load_dataset(dir.path()).unwrap_err();
    assert!(matches!(err, Error::Dataset { .. }), "{err}");

    std::fs::remove_file(dir.path().join("meta.txt")).unwrap();
    assert!(matches!(load_dataset(dir.path()).unwrap_err(), Error::Io { .. }));
}

#[test]
fn hundred_scenes_contain_small_and_large_objects() {
    let spec = desk_spec(0);
    let scenes = generate_scenes(&spec, 0, 100).unwrap();
    let mut small = 0;
    let mut large = 0;
    for (label, _) in &scenes {
        assert!(label.data().contains(&0));
        for comp in connected_components(label).list.iter().filter(|c| c.class != 0) {
            match spec.meta.size_bucket(comp.pixels) {
                SizeBucket::Small => small += 1,
                SizeBucket::Large => large += 1,
                SizeBucket::Medium => {}
            }
        }
    }
    assert!(small > 0 && large > 0, "small {small}, large {large}");
}

#[test]
fn every_object_class_appears() {
    let spec = desk_spec(3);
    let scenes = generate_scenes(&spec, 0, 100).unwrap();
    let labels: Vec<_> = scenes.iter().map(|s| &s.0).collect();
    let w = class_frequencies(&labels, 8);
    assert!(w.present.iter().all(|&p| p), "{:?}", w.present);
}

fn label_strategy() -> impl Strategy<Value = LabelMap> {
    (1usize..6, 1usize..6, 2usize..6).prop_flat_map(|(h, w, n)| {
        proptest::collection::vec(0..n as u8, h * w).prop_map(move |d| LabelMap::new(h, w, d).unwrap())
    })
}

proptest! {
    #[test]
    fn one_hot_is_a_partition(label in label_strategy()) {
        let oh = one_hot(&label, 6).unwrap();
        let hw = label.height() * label.width();
        for p in 0..hw {
            let s: f32 = (0..6).map(|c| oh.data[c * hw + p]).sum();
            prop_assert_eq!(s, 1.0);
            prop_assert_eq!(oh.data[label.data()[p] as usize * hw + p], 1.0);
        }
    }

    #[test]
    fn single_map_weight_identity(label in label_strategy()) {
        let w = class_frequencies(&[&label], 6);
        let counts = label.class_counts(6);
        let hw = (label.height() * label.width()) as f64;
        for c in 0..6 {
            prop_assert_eq!(w.present[c], counts[c] > 0);
            prop_assert_eq!(w.alpha[c] > 0.0, w.present[c]);
            if w.present[c] {
                prop_assert!((w.alpha[c] * counts[c] as f64 - hw).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn components_partition_the_map(label in label_strategy()) {
        let cc = connected_components(&label);
        let total: usize = cc.list.iter().map(|c| c.pixels).sum();
        prop_assert_eq!(total, label.height() * label.width());
        for (p, &id) in cc.ids.iter().enumerate() {
            prop_assert_eq!(cc.list[id as usize].class, label.data()[p]);
        }
    }
}
