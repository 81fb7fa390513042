use std::collections::HashMap;

use rdn_core::data::{
    encode_scene, gen_scene, generate_splits, make_record, read_dataset, render_caption,
    write_dataset, GeneratorConfig, ToyObject,
};
use rdn_core::Error;

/// Reads each attribute back as the argmax of its block.
fn decode_region(v: &[f64], c: &GeneratorConfig) -> ToyObject {
    let (nc, nk, ns) = (c.categories.len(), c.colors.len(), c.sizes.len());
    let argmax = |s: &[f64]| {
        s.iter()
            .enumerate()
            .fold(0, |best, (i, &x)| if x > s[best] { i } else { best })
    };
    ToyObject {
        category: c.categories[argmax(&v[..nc])].clone(),
        color: c.colors[argmax(&v[nc..nc + nk])].clone(),
        size: c.sizes[argmax(&v[nc + nk..nc + nk + ns])].clone(),
    }
}

#[test]
fn noiseless_features_decode_back_to_attributes() {
    let c = GeneratorConfig {
        noise_sigma: 0.0,
        ..Default::default()
    };
    for seed in 0..300 {
        let scene = gen_scene(seed, &c).unwrap();
        let regions = encode_scene(&scene, &c, seed).unwrap();
        assert_eq!(regions.len(), scene.objects.len());
        for (r, obj) in regions.iter().zip(&scene.objects) {
            assert!(r.iter().all(|&x| x == 0.0 || x == 1.0));
            assert!(r[c.encoding_width()..].iter().all(|&x| x == 0.0));
            assert_eq!(&decode_region(r, &c), obj);
        }
    }
}

#[test]
fn category_histogram_is_uniform() {
    let c = GeneratorConfig::default();
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut total = 0usize;
    for seed in 0..10_000 {
        for o in gen_scene(seed, &c).unwrap().objects {
            *counts.entry(o.category).or_default() += 1;
            total += 1;
        }
    }
    let expected = total as f64 / c.categories.len() as f64;
    assert_eq!(counts.len(), c.categories.len());
    for (cat, n) in counts {
        let rel = (n as f64 - expected).abs() / expected;
        assert!(rel <= 0.05, "{cat}: {n} vs {expected}");
    }
}

#[test]
fn corpus_carries_the_long_range_hook() {
    let splits = generate_splits(&GeneratorConfig::default()).unwrap();
    for rec in splits.train.iter().chain(&splits.test) {
        let w = rec.words();
        assert_eq!(w.last(), Some(&w[2]));
        // the trailing clause repeats cat0 seven tokens after its first slot
        assert_eq!(w[10], w[3]);
        assert_eq!(rec.caption.last().map(String::as_str), Some("<eos>"));
        assert_eq!(w, render_caption(&rec.scene).as_slice());
    }
}

#[test]
fn dataset_file_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.jsonl");
    let records: Vec<_> = (0..25)
        .map(|i| make_record(i, &GeneratorConfig::default()).unwrap())
        .collect();
    write_dataset(&records, &path).unwrap();
    let back = read_dataset(&path).unwrap();
    assert_eq!(back, records);
    for (a, b) in back.iter().zip(&records) {
        for (ra, rb) in a.regions.iter().zip(&b.regions) {
            for (x, y) in ra.iter().zip(rb) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}

#[test]
fn empty_and_truncated_files() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    assert!(read_dataset(&empty).unwrap().is_empty());

    let rec = make_record(0, &GeneratorConfig::default()).unwrap();
    let line = serde_json::to_string(&rec).unwrap();
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, format!("{line}\n{line}\n{}", &line[..40])).unwrap();
    assert!(matches!(
        read_dataset(&bad),
        Err(Error::Parse { line: 3, .. })
    ));

    assert!(matches!(
        read_dataset(dir.path().join("missing.jsonl")),
        Err(Error::Io { .. })
    ));
}

#[test]
fn generation_is_reproducible() {
    let c = GeneratorConfig {
        train_count: 30,
        val_count: 5,
        test_count: 5,
        seed: 77,
        ..Default::default()
    };
    assert_eq!(generate_splits(&c).unwrap(), generate_splits(&c).unwrap());
}
