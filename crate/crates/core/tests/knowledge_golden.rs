use partsight_core::knowledge::{build_index, fnv1a64, load_knowledge_base, EmbedderProvider, HashingEmbedder};
use partsight_core::Exec;
use std::path::Path;

fn expect_buckets(text: &str, buckets: &[(usize, f64)], norm: f64) {
    let v = HashingEmbedder::new(64).unwrap().embed(text).unwrap();
    let mut want = vec![0.0f64; 64];
    for &(b, c) in buckets {
        want[b] = c / norm;
    }
    for (i, (got, w)) in v.iter().zip(&want).enumerate() {
        assert!((*got as f64 - w).abs() < 1e-7, "{text}: bucket {i} is {got}, want {w}");
    }
}

#[test]
fn fnv1a_reference_values() {
    assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
    assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
    assert_eq!(fnv1a64(b"foobar"), 0x8594_4171_f739_67e8);
}

#[test]
fn gear_hashes_to_four_buckets() {
    expect_buckets("gear", &[(14, 1.0), (19, 1.0), (40, 1.0), (55, 1.0)], 2.0);
    expect_buckets("  GEAR ", &[(14, 1.0), (19, 1.0), (40, 1.0), (55, 1.0)], 2.0);
}

#[test]
fn gear_cover_hashes_to_ten_buckets() {
    let b: Vec<(usize, f64)> = [1, 2, 3, 4, 14, 19, 34, 39, 40, 55].iter().map(|&i| (i, 1.0)).collect();
    expect_buckets("Gear Cover", &b, 10f64.sqrt());
}

#[test]
fn empty_text_is_rejected() {
    assert!(HashingEmbedder::default().embed("   ").is_err());
    assert!(HashingEmbedder::new(0).is_err());
}

#[test]
fn exact_label_is_its_own_nearest_entry() {
    let kb = load_knowledge_base(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/golden_kb.json")).unwrap();
    let e = HashingEmbedder::default();
    let index = build_index(&kb, &e, Exec::Parallel).unwrap();
    for entry in &kb {
        let hits = index.query(&e, &entry.label, 2, Exec::Sequential).unwrap();
        assert_eq!(hits[0].part_id, entry.part_id);
        assert!(hits[0].distance.abs() < 1e-9);
        assert!(hits[1].distance > hits[0].distance);
    }
}
