//! Fusion of per-frame Gaussian groups: plain multiset union by
//! concatenation. No deduplication, reweighting or variance filtering.

use super::GaussianSet;
use crate::error::{Error, Result};
use crate::real::Real;

/// Concatenate Gaussian groups into one set. `|result| = Σ|groupᵢ|`; no
/// attribute is modified. Errors on an empty input list.
pub fn fuse<T: Real>(groups: &[&GaussianSet<T>]) -> Result<GaussianSet<T>> {
    if groups.is_empty() {
        return Err(Error::contract("fuse", "empty group list"));
    }
    let total: usize = groups.iter().map(|g| g.len()).sum();
    let mut out = GaussianSet {
        anchors: Vec::with_capacity(total),
        offsets: Vec::with_capacity(total),
        colors: Vec::with_capacity(total),
        opacities: Vec::with_capacity(total),
        scales: Vec::with_capacity(total),
        rotations: Vec::with_capacity(total),
    };
    for g in groups {
        out.anchors.extend_from_slice(&g.anchors);
        out.offsets.extend_from_slice(&g.offsets);
        out.colors.extend_from_slice(&g.colors);
        out.opacities.extend_from_slice(&g.opacities);
        out.scales.extend_from_slice(&g.scales);
        out.rotations.extend_from_slice(&g.rotations);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::avatar::math::quat_identity;

    fn group(n: usize, tint: f64) -> GaussianSet<f64> {
        GaussianSet {
            anchors: (0..n).map(|i| [i as f64, tint, 0.0]).collect(),
            offsets: vec![[0.0; 3]; n],
            colors: vec![[tint, tint, tint]; n],
            opacities: vec![0.5; n],
            scales: vec![[0.01; 3]; n],
            rotations: vec![quat_identity(); n],
        }
    }

    #[test]
    fn fuse_single_group_is_identity() {
        let g = group(5, 0.3);
        let f = fuse(&[&g]).unwrap();
        assert_eq!(f, g);
    }

    #[test]
    fn fuse_concatenates_cardinalities() {
        let a = group(3, 0.1);
        let b = group(4, 0.9);
        let f = fuse(&[&a, &b]).unwrap();
        assert_eq!(f.len(), 7);
        assert_eq!(f.colors[0], a.colors[0]);
        assert_eq!(f.colors[3], b.colors[0]);
    }

    #[test]
    fn fuse_empty_list_errors() {
        let e = fuse::<f64>(&[]).unwrap_err();
        assert!(e.to_string().contains("fuse"));
    }

    #[test]
    fn fuse_is_associative_and_commutative_as_multiset() {
        use proptest::prelude::*;
        let mut runner = proptest::test_runner::TestRunner::default();
        runner
            .run(&(1usize..5, 1usize..5, 1usize..5), |(na, nb, nc)| {
                let (a, b, c) = (group(na, 0.2), group(nb, 0.5), group(nc, 0.8));
                let left = fuse(&[&fuse(&[&a, &b]).unwrap(), &c]).unwrap();
                let right = fuse(&[&a, &fuse(&[&b, &c]).unwrap()]).unwrap();
                prop_assert_eq!(&left, &right);
                // commutativity up to point order: sort keys and compare
                let mut k1: Vec<_> = fuse(&[&a, &b]).unwrap().anchors;
                let mut k2: Vec<_> = fuse(&[&b, &a]).unwrap().anchors;
                let key = |p: &[f64; 3]| (p[0] * 1e6 + p[1] * 1e3) as i64;
                k1.sort_by_key(key);
                k2.sort_by_key(key);
                prop_assert_eq!(k1, k2);
                Ok(())
            })
            .unwrap();
    }
}
