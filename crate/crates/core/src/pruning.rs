//! Per-layer magnitude pruning of multiplicative weights.
//!
//! Each prune removes `ceil(lambda * n_active)` of a layer's currently active
//! weights, smallest magnitude first, ties broken by ascending flat index.
//! Biases are never touched.

use std::cmp::Ordering;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::network::Model;
use crate::tensor::{Scalar, Tensor};

/// Which entries of a weight tensor are still trainable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneMask(Vec<bool>);

impl PruneMask {
    pub fn all_active(len: usize) -> Self {
        PruneMask(vec![true; len])
    }

    pub fn from_vec(bits: Vec<bool>) -> Self {
        PruneMask(bits)
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_active(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn active_count(&self) -> usize {
        self.0.iter().filter(|b| **b).count()
    }

    /// LSB-first packing, eight entries per byte.
    pub fn to_packed_bits(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.0.len().div_ceil(8)];
        for (i, _) in self.0.iter().enumerate().filter(|(_, b)| **b) {
            out[i / 8] |= 1 << (i % 8);
        }
        out
    }

    pub fn from_packed_bits(bytes: &[u8], len: usize) -> Self {
        PruneMask((0..len).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect())
    }
}

/// Number of entries a prune at rate `lambda` removes from `n_active`.
///
/// `ceil(lambda * n)`, with a small tolerance so that products which are
/// integral up to round-off (e.g. `0.6 * 5`) do not round up.
pub fn prune_count(n_active: usize, lambda: f64) -> usize {
    let lambda = lambda.clamp(0.0, 1.0);
    let raw = lambda * n_active as f64;
    ((raw - 1e-9).ceil().max(0.0) as usize).min(n_active)
}

/// The value of ascending rank `ceil(lambda * n)` (1-indexed) among `values`.
///
/// At least `lambda * n` of the values are `<=` the result. `Ok(None)` is the
/// prune-nothing threshold returned for a rank of zero (`lambda = 0`).
pub fn lambda_quantile(values: &[f32], lambda: f64) -> Result<Option<f32>> {
    if values.is_empty() {
        return Err(Error::validation("lambda_quantile of an empty multiset"));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::validation(format!("lambda {lambda} outside [0, 1]")));
    }
    let rank = prune_count(values.len(), lambda);
    if rank == 0 {
        return Ok(None);
    }
    let mut v = values.to_vec();
    let (_, q, _) = v.select_nth_unstable_by(rank - 1, |a, b| a.total_cmp(b));
    Ok(Some(*q))
}

fn by_magnitude_then_index<S: Scalar>(a: &(S, usize), b: &(S, usize)) -> Ordering {
    a.0.partial_cmp(&b.0)
        .unwrap_or(Ordering::Equal)
        .then(a.1.cmp(&b.1))
}

/// Prunes `ceil(lambda * n_active)` of the active entries of one layer.
///
/// Returns the number of entries pruned.
pub fn prune_layer<S: Scalar>(weights: &mut Tensor<S>, mask: &mut PruneMask, lambda: f64) -> usize {
    assert_eq!(weights.len(), mask.len(), "mask not congruent to weights");
    let mut active: Vec<(S, usize)> = mask
        .0
        .iter()
        .enumerate()
        .filter(|(_, keep)| **keep)
        .map(|(i, _)| (weights.data()[i].abs(), i))
        .collect();
    let k = prune_count(active.len(), lambda);
    if k == 0 {
        return 0;
    }
    if k < active.len() {
        active.select_nth_unstable_by(k - 1, by_magnitude_then_index);
    }
    let data = weights.data_mut();
    for &(_, i) in &active[..k] {
        mask.0[i] = false;
        data[i] = S::zero();
    }
    k
}

/// Applies [`prune_layer`] to every parameterized layer. Returns the count pruned per layer.
pub fn prune_model<S: Scalar>(model: &mut Model<S>, lambda: f64) -> Vec<usize> {
    model
        .params_mut()
        .map(|p| prune_layer(&mut p.weights, &mut p.mask, lambda))
        .collect()
}

/// Re-activates `floor(fraction * n_masked)` randomly chosen masked entries per layer.
///
/// Restored weights restart at 0.0. Returns the number restored per layer.
pub fn restore_random<S: Scalar>(model: &mut Model<S>, fraction: f64, seed: u64) -> Vec<usize> {
    let fraction = fraction.clamp(0.0, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    model
        .params_mut()
        .map(|p| {
            let masked: Vec<usize> = (0..p.mask.len()).filter(|&i| !p.mask.0[i]).collect();
            let k = (fraction * masked.len() as f64).floor() as usize;
            for pick in rand::seq::index::sample(&mut rng, masked.len(), k) {
                let i = masked[pick];
                p.mask.0[i] = true;
                p.weights.data_mut()[i] = S::zero();
            }
            k
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_model, Architecture};
    use proptest::prelude::*;

    fn weights(v: &[f32]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    /// Sort-based reference: drop the first ceil(lambda * n_active) of sorted (|w|, index).
    fn oracle(w: &[f32], mask: &[bool], lambda: f64) -> Vec<bool> {
        let mut active: Vec<(f32, usize)> = (0..w.len()).filter(|&i| mask[i]).map(|i| (w[i].abs(), i)).collect();
        active.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let k = prune_count(active.len(), lambda);
        let mut out = mask.to_vec();
        for &(_, i) in &active[..k] {
            out[i] = false;
        }
        out
    }

    #[test]
    fn quantile_examples() {
        assert_eq!(lambda_quantile(&[0.1, 0.2, 0.5, 0.9], 0.5).unwrap(), Some(0.2));
        assert_eq!(lambda_quantile(&[0.1, 0.2, 0.5, 0.9], 0.0).unwrap(), None);
        assert_eq!(lambda_quantile(&[0.3; 4], 0.5).unwrap(), Some(0.3));
        assert!(matches!(lambda_quantile(&[], 0.5), Err(Error::Validation(_))));
    }

    #[test]
    fn tie_break_prunes_exactly_half() {
        let mut w = weights(&[0.3; 4]);
        let mut mask = PruneMask::all_active(4);
        assert_eq!(prune_layer(&mut w, &mut mask, 0.5), 2);
        assert_eq!(mask.as_slice(), &[false, false, true, true]);
    }

    #[test]
    fn prune_layer_examples() {
        let mut w = weights(&[0.1, -0.5, 0.2, 0.9]);
        let mut mask = PruneMask::all_active(4);
        prune_layer(&mut w, &mut mask, 0.5);
        assert_eq!(w.data(), &[0.0, -0.5, 0.0, 0.9]);
        assert_eq!(mask.as_slice(), &[false, true, false, true]);

        prune_layer(&mut w, &mut mask, 0.5);
        assert_eq!(w.data(), &[0.0, 0.0, 0.0, 0.9]);
        assert_eq!(mask.active_count(), 1);

        assert_eq!(prune_count(100_352, 0.4), 40_141);
        assert_eq!(prune_count(5, 0.6), 3);
        assert_eq!(prune_count(1_280, 0.4), 512);
    }

    #[test]
    fn empty_active_set_is_noop() {
        let mut w = weights(&[0.0, 0.0]);
        let mut mask = PruneMask::from_vec(vec![false, false]);
        assert_eq!(prune_layer(&mut w, &mut mask, 0.7), 0);
    }

    #[test]
    fn prune_model_examples() {
        let fresh = build_model(&Architecture::mnist_mlp(), 0).unwrap();

        let mut m = fresh.clone();
        prune_model(&mut m, 0.0);
        assert_eq!(m.count_active(), fresh.count_active());

        let mut m = fresh.clone();
        prune_model(&mut m, 0.4);
        assert_eq!(m.count_active().multiplicative_nonzero, 60_979);

        let mut m = fresh.clone();
        prune_model(&mut m, 0.5);
        assert_eq!(
            m.count_active().multiplicative_nonzero,
            101_632 - 50_176 - 640
        );

        let mut m = fresh.clone();
        prune_model(&mut m, 1.0);
        let c = m.count_active();
        assert_eq!(c.multiplicative_nonzero, 0);
        assert_eq!(c.bias_total, 138);
        let biases: Vec<_> = m.params().map(|p| p.bias.clone()).collect();
        let before: Vec<_> = fresh.params().map(|p| p.bias.clone()).collect();
        assert_eq!(biases, before);
    }

    #[test]
    fn restore_examples() {
        let mut m = build_model(&Architecture::tabular(6, 2), 3).unwrap();
        prune_model(&mut m, 0.5);
        let pruned = m.clone();

        let mut a = pruned.clone();
        assert_eq!(restore_random(&mut a, 0.0, 1), vec![0, 0]);
        assert_eq!(a, pruned);

        let mut a = pruned.clone();
        restore_random(&mut a, 1.0, 1);
        assert!(a.params().all(|p| p.mask.active_count() == p.mask.len()));
        // Restored entries restart at zero, so the function is unchanged.
        let x = Tensor::full(&[1, 6], 1.0f32);
        assert_eq!(a.predict(&x).unwrap(), pruned.predict(&x).unwrap());

        let (mut a, mut b) = (pruned.clone(), pruned.clone());
        restore_random(&mut a, 0.3, 9);
        restore_random(&mut b, 0.3, 9);
        assert_eq!(a, b);
        let masked: usize = pruned.params().map(|p| p.mask.len() - p.mask.active_count()).sum();
        let after: usize = a.params().map(|p| p.mask.len() - p.mask.active_count()).sum();
        assert!(after < masked);
    }

    #[test]
    fn packed_bits_round_trip() {
        let mask = PruneMask::from_vec(vec![true, false, true, true, false, false, false, true, true]);
        assert_eq!(mask.to_packed_bits(), vec![0b1000_1101, 0b1]);
        assert_eq!(PruneMask::from_packed_bits(&mask.to_packed_bits(), 9), mask);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn prune_layer_matches_sort_oracle(
            w in prop::collection::vec(prop_oneof![Just(0.0f32), Just(0.5f32), -2.0f32..2.0], 1..600),
            mask_bits in prop::collection::vec(prop::bool::weighted(0.8), 600),
            lambda in 0.0f64..=1.0,
        ) {
            let mask_init: Vec<bool> = mask_bits[..w.len()].to_vec();
            let w: Vec<f32> = w.iter().zip(&mask_init).map(|(&v, &k)| if k { v } else { 0.0 }).collect();
            let want = oracle(&w, &mask_init, lambda);
            let mut t = weights(&w);
            let mut mask = PruneMask::from_vec(mask_init.clone());
            let before = mask.active_count();
            let k = prune_layer(&mut t, &mut mask, lambda);
            prop_assert_eq!(mask.as_slice(), &want[..]);
            prop_assert_eq!(before - mask.active_count(), k);
            prop_assert!(mask.active_count() as f64 <= (1.0 - lambda) * before as f64 + 1e-9);
            for (i, &keep) in mask.as_slice().iter().enumerate() {
                if !keep { prop_assert_eq!(t.data()[i], 0.0); }
            }
        }

        #[test]
        fn quantile_rank_property(
            v in prop::collection::vec(0.0f32..10.0, 1..200),
            lambda in 0.0f64..=1.0,
        ) {
            match lambda_quantile(&v, lambda).unwrap() {
                None => prop_assert_eq!(prune_count(v.len(), lambda), 0),
                Some(q) => {
                    let below = v.iter().filter(|&&x| x <= q).count();
                    prop_assert!(below as f64 >= lambda * v.len() as f64 - 1e-9);
                    let strictly = v.iter().filter(|&&x| x < q).count();
                    prop_assert!(strictly < prune_count(v.len(), lambda));
                }
            }
        }
    }
}
