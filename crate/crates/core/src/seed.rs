//! Seed derivation.

/// SplitMix64 finalizer. A bijection on `u64`.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for a labelled sub-task.
pub fn child_seed(parent: u64, label: u64) -> u64 {
    mix64(mix64(parent) ^ label)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distinct_labels_give_distinct_children() {
        let mut seen = std::collections::HashSet::new();
        for l in 0..10_000 {
            assert!(seen.insert(child_seed(7, l)));
        }
    }
}
