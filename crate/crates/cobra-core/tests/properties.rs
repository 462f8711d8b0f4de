//! Property tests over the serialization boundary and the pure text layer.

use proptest::prelude::*;

use cobra_core::container::{Container, Entry};
use cobra_core::linalg::softplus;
use cobra_core::prompt::{detokenize, tokenize};
use cobra_core::ssm::rms_norm;

proptest! {
    #[test]
    fn container_roundtrip_preserves_entries(
        entries in proptest::collection::btree_map(
            "[a-z][a-z0-9_.]{0,24}",
            proptest::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..64),
            1..8,
        )
    ) {
        let mut c = Container::new();
        for (name, data) in &entries {
            c.insert(name.clone(), Entry::vector(data.clone()));
        }
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        prop_assert_eq!(back.len(), entries.len());
        for (name, data) in &entries {
            let e = back.get(name).unwrap();
            prop_assert_eq!(&e.data, data);
        }
    }

    #[test]
    fn truncated_containers_never_panic(cut in 0usize..200) {
        let mut c = Container::new();
        c.insert("w", Entry::vector(vec![1.0, 2.0, 3.0, 4.0]));
        let bytes = c.to_bytes();
        let cut = cut.min(bytes.len().saturating_sub(1));
        // Every proper prefix parses as an error or as an empty container
        // (the 8-byte header alone is a valid empty file); never a panic.
        match Container::from_bytes(&bytes[..cut]) {
            Ok(parsed) => prop_assert!(cut == 8 && parsed.is_empty()),
            Err(_) => prop_assert!(cut != 8),
        }
    }

    #[test]
    fn tokenizer_roundtrips_arbitrary_utf8(s in ".{0,64}") {
        prop_assert_eq!(detokenize(&tokenize(&s)), s);
    }

    #[test]
    fn tokenizer_roundtrips_marker_soup(
        parts in proptest::collection::vec(
            prop_oneof![
                Just("<|user|>".to_string()),
                Just("<|assistant|>".to_string()),
                Just("<|endoftext|>".to_string()),
                Just("<|".to_string()),
                Just("|>".to_string()),
                "[ -~]{0,6}".prop_map(|s| s),
            ],
            0..12,
        )
    ) {
        let s: String = parts.concat();
        prop_assert_eq!(detokenize(&tokenize(&s)), s);
    }

    #[test]
    fn softplus_is_strictly_positive(x in -1e6f64..1e6) {
        prop_assert!(softplus(x) > 0.0);
    }

    #[test]
    fn rms_norm_is_scale_invariant(
        x in proptest::collection::vec(-100.0f64..100.0, 1..16),
        c in 0.01f64..1e4,
    ) {
        prop_assume!(x.iter().any(|v| v.abs() > 1e-6));
        let gain = vec![1.0; x.len()];
        let base = rms_norm(&x, &gain, 0.0).unwrap();
        let scaled_in: Vec<f64> = x.iter().map(|v| v * c).collect();
        let scaled = rms_norm(&scaled_in, &gain, 0.0).unwrap();
        for (a, b) in base.iter().zip(&scaled) {
            prop_assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }
}
