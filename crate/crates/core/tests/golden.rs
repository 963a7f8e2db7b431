use semjitter::seed::{derive_seed, fnv1a64, splitmix64};

#[test]
fn derive_seed_is_pinned() {
    assert_eq!(derive_seed(42, "prior"), 0x5a02_50f0_7fc1_c572);
    assert_eq!(derive_seed(0, "seed=42"), 0x11c3_13a0_c510_36e2);
    assert_eq!(derive_seed(derive_seed(0, "seed=42"), "prior"), 0x8acb_c35d_784c_a2ba);
    assert_eq!(derive_seed(0, "a"), 0x5f29_c2aa_dd9b_8527);
    assert_eq!(derive_seed(0, "b"), 0x56f6_a47e_3092_3664);
}

#[test]
fn derive_seed_composes_hash_and_mixer() {
    for (master, label) in [(0u64, ""), (7, "identity"), (u64::MAX, "verify")] {
        assert_eq!(
            derive_seed(master, label),
            splitmix64(fnv1a64(label.as_bytes()) ^ master)
        );
    }
}
