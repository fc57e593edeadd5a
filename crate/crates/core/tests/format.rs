mod common;

use layersel::io::{
    load_manifest, read_feature_stack, split_dataset, write_feature_stack, write_manifest, DatasetManifest,
    FeatureStack, SampleRecord, Split, SplitRatios,
};
use layersel::Error;
use proptest::prelude::*;

fn stack_strategy() -> impl Strategy<Value = FeatureStack> {
    (0usize..6, 1usize..4, 1usize..7).prop_flat_map(|(n, l, d)| {
        (
            proptest::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), n * l * d),
            proptest::collection::hash_set("[a-z0-9_\\-é]{0,12}", n),
        )
            .prop_map(move |(data, ids)| {
                let mut ids: Vec<String> = ids.into_iter().collect();
                ids.sort();
                FeatureStack::new(l, d, data, ids).unwrap()
            })
    })
}

proptest! {
    #[test]
    fn stack_bytes_round_trip(stack in stack_strategy()) {
        let bytes = stack.to_bytes().unwrap();
        let back = FeatureStack::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        let same_bits = back.data().iter().zip(stack.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        prop_assert!(same_bits);
        prop_assert_eq!(back.sample_ids(), stack.sample_ids());
    }

    #[test]
    fn every_strict_prefix_is_rejected(stack in stack_strategy(), cut in 0.0f64..1.0) {
        let bytes = stack.to_bytes().unwrap();
        let at = ((bytes.len() as f64) * cut) as usize;
        prop_assume!(at < bytes.len());
        let err = FeatureStack::from_bytes(&bytes[..at]).unwrap_err();
        prop_assert!(matches!(err, Error::Truncated(_) | Error::SizeMismatch(_)), "{err:?}");
    }

    #[test]
    fn planting_a_non_finite_value_is_rejected(stack in stack_strategy(), pick in any::<prop::sample::Index>(), which in 0usize..3) {
        prop_assume!(!stack.data().is_empty());
        let mut bytes = stack.to_bytes().unwrap();
        let n = stack.data().len();
        let at = bytes.len() - 4 * (n - pick.index(n));
        let bad = [f32::NAN, f32::INFINITY, f32::NEG_INFINITY][which];
        bytes[at..at + 4].copy_from_slice(&bad.to_le_bytes());
        prop_assert!(matches!(FeatureStack::from_bytes(&bytes), Err(Error::NonFinite(_))));
    }
}

#[test]
fn file_round_trip_and_error_classes() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = common::rng(9);
    let stack = common::random_stack(&mut rng, 5, 3, 4);
    let path = dir.path().join("s.lfs");
    write_feature_stack(&stack, &path).unwrap();
    assert_eq!(read_feature_stack(&path).unwrap(), stack);

    let bytes = std::fs::read(&path).unwrap();
    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(b"LFS2");
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(read_feature_stack(&path), Err(Error::BadMagic { .. })));
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(read_feature_stack(&path), Err(Error::Truncated(_))));
    assert!(matches!(read_feature_stack(dir.path().join("missing.lfs")), Err(Error::Io { .. })));
}

fn record(id: &str, src: &str, editor: &str, scores: Option<[f64; 3]>) -> SampleRecord {
    let edited = !editor.is_empty();
    SampleRecord {
        sample_id: id.into(),
        src_id: src.into(),
        edit_id: if edited { id.into() } else { String::new() },
        prompt: "raise the arm".into(),
        y_auth: u8::from(edited),
        s_q: scores.map(|s| s[0]),
        s_e: scores.map(|s| s[1]),
        s_p: scores.map(|s| s[2]),
        editor: editor.into(),
        split: None,
    }
}

fn toy_manifest(groups: usize) -> DatasetManifest {
    let mut recs = Vec::new();
    for i in 0..groups {
        let src = format!("src-{i:03}");
        recs.push(record(&src, &src, "", None));
        let editor = if i % 2 == 0 { "alpha" } else { "beta" };
        recs.push(record(&format!("ed-{i:03}"), &src, editor, Some([1.0 + (i % 5) as f64, 2.5, 4.0])));
    }
    DatasetManifest::new(recs).unwrap()
}

#[test]
fn manifest_file_round_trip_preserves_records_and_splits() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.jsonl");
    let m = split_dataset(&toy_manifest(60), SplitRatios::default(), 4).unwrap();
    write_manifest(&m, &path).unwrap();
    let back = load_manifest(&path).unwrap();
    assert_eq!(back.records, m.records);
    assert_eq!(back.editors, ["alpha", "beta"]);
    assert!(back.is_split());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn manifest_scores_round_trip_bit_exact(scores in proptest::array::uniform3(1.0f64..5.0)) {
        let m = DatasetManifest::new(vec![
            record("s", "s", "", None),
            record("e", "s", "alpha", Some(scores)),
        ])
        .unwrap();
        let back = DatasetManifest::parse_jsonl(&m.to_jsonl()).unwrap();
        let got = back.records[1].scores().unwrap();
        prop_assert!(got.iter().zip(&scores).all(|(a, b)| a.to_bits() == b.to_bits()), "{:?} vs {:?}", got, scores);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_keeps_groups_together_and_is_deterministic(groups in 9usize..80, seed in any::<u64>()) {
        let m = toy_manifest(groups);
        let a = split_dataset(&m, SplitRatios::default(), seed).unwrap();
        let b = split_dataset(&m, SplitRatios::default(), seed).unwrap();
        prop_assert_eq!(&a.records, &b.records);
        for r in a.records.iter().filter(|r| r.is_edited()) {
            let src = a.get(&r.src_id).unwrap();
            prop_assert_eq!(src.split, r.split);
        }
        for s in Split::ALL {
            prop_assert!(a.records.iter().any(|r| r.split == Some(s)));
        }
    }
}

#[test]
fn manifest_errors_carry_line_numbers() {
    let text = "{\"schema_version\":1}\n{\"sample_id\":\"a\",\"src_id\":\"a\",\"edit_id\":\"\",\"prompt\":\"p\",\"y_auth\":0,\"editor\":\"\"}\n{\"sample_id\":\"b\"}\n";
    match DatasetManifest::parse_jsonl(text) {
        Err(Error::Manifest { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected a manifest error, got {other:?}"),
    }
}
