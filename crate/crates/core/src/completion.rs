//! Proportional re-targeting of a budget allocation.
//!
//! With `A = sum(k)` and `T = target * L`, every layer becomes
//! `ceil(k_i + k_i / A * (T - A))`, i.e. `ceil(k_i * T / A)`. The ceiling
//! means the result can overshoot `T` by less than one token per layer.
//! The same rule shrinks allocations whose total is above `T`.

use crate::budget::LayerBudgets;
use crate::error::{Error, Result};

pub fn complete(budgets: &LayerBudgets, target_average: u32) -> Result<LayerBudgets> {
    if target_average == 0 {
        return Err(Error::invalid("target average budget must be at least 1"));
    }
    let achieved = budgets.total();
    if achieved == 0 {
        return Err(Error::invalid("cannot redistribute onto an all-zero allocation"));
    }
    let target_total = u64::from(target_average) * budgets.layer_count() as u64;
    // Integer ceiling of k * T / A, no floating-point rounding at the boundary.
    let completed = budgets
        .as_slice()
        .iter()
        .map(|&k| {
            let scaled = (u128::from(k) * u128::from(target_total)).div_ceil(u128::from(achieved));
            u32::try_from(scaled).map_err(|_| Error::invalid(format!("completed budget {scaled} overflows u32")))
        })
        .collect::<Result<Vec<u32>>>()?;
    Ok(LayerBudgets::new(completed)?.with_policy(budgets.policy().copied()))
}

/// True when completing to `target_average` shrinks the allocation.
pub fn is_down_scaling(budgets: &LayerBudgets, target_average: u32) -> bool {
    budgets.total() > u64::from(target_average) * budgets.layer_count() as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lb(v: &[u32]) -> LayerBudgets {
        LayerBudgets::new(v.to_vec()).unwrap()
    }

    // Direct floating evaluation of ceil(k + k/A * delta), used only where
    // the values are exactly representable.
    fn formula(k: &[u32], target: u32) -> Vec<u32> {
        let a: f64 = k.iter().map(|&x| f64::from(x)).sum();
        let t = f64::from(target) * k.len() as f64;
        let delta = t - a;
        k.iter()
            .map(|&x| (f64::from(x) + f64::from(x) / a * delta).ceil() as u32)
            .collect()
    }

    #[test]
    fn identity_on_target() {
        let b = LayerBudgets::uniform(32, 128).unwrap();
        assert_eq!(complete(&b, 128).unwrap(), b);
    }

    #[test]
    fn scales_up_proportionally() {
        assert_eq!(formula(&[64, 192], 192), vec![96, 288]);
        assert_eq!(complete(&lb(&[64, 192]), 192).unwrap().as_slice(), &[96, 288]);
    }

    #[test]
    fn ceiling_overshoots() {
        assert_eq!(formula(&[1, 2], 2), vec![2, 3]);
        let out = complete(&lb(&[1, 2]), 2).unwrap();
        assert_eq!(out.as_slice(), &[2, 3]);
        assert_eq!(out.total(), 5);
    }

    #[test]
    fn all_zero_is_rejected() {
        assert!(complete(&lb(&[0, 0, 0]), 4).is_err());
        assert!(complete(&lb(&[1, 0, 0]), 0).is_err());
    }

    #[test]
    fn down_scaling_is_flagged() {
        assert!(is_down_scaling(&lb(&[200, 100]), 128));
        assert!(!is_down_scaling(&lb(&[128, 128]), 128));
        assert!(!is_down_scaling(&lb(&[64, 64]), 128));
        let out = complete(&lb(&[200, 100]), 100).unwrap();
        assert_eq!(out.as_slice(), &[134, 67]);
    }

    #[test]
    fn second_shrink_can_move_a_dominant_layer() {
        // Overshoot from the first pass is shaved off the dominant layer by the second.
        let first = complete(&lb(&[1, 1, 1, 997]), 251).unwrap();
        assert_eq!(first.as_slice(), &[2, 2, 2, 1001]);
        let second = complete(&first, 251).unwrap();
        assert_eq!(second.as_slice(), &[2, 2, 2, 999]);
    }

    #[test]
    fn keeps_policy_metadata() {
        use crate::budget::PositionPolicy;
        let p = Some(PositionPolicy::FixedPosition { sink_tokens: 4 });
        let b = lb(&[10, 20]).with_policy(p);
        assert_eq!(complete(&b, 30).unwrap().policy().copied(), p);
    }

    proptest! {
        #[test]
        fn sum_order_and_zero_invariants(
            k in proptest::collection::vec(0u32..=4096, 1..=64),
            target in 1u32..=4096,
        ) {
            prop_assume!(k.iter().any(|&x| x > 0));
            let b = lb(&k);
            let out = complete(&b, target).unwrap();
            let t = u64::from(target) * k.len() as u64;
            prop_assert!(t <= out.total() && out.total() <= t + k.len() as u64);
            for i in 0..k.len() {
                if k[i] == 0 {
                    prop_assert_eq!(out.as_slice()[i], 0);
                }
                for j in 0..k.len() {
                    if k[i] <= k[j] {
                        prop_assert!(out.as_slice()[i] <= out.as_slice()[j]);
                    }
                }
            }
        }

        #[test]
        fn second_pass_never_grows(
            k in proptest::collection::vec(0u32..=4096, 1..=64),
            target in 1u32..=4096,
        ) {
            prop_assume!(k.iter().any(|&x| x > 0));
            let once = complete(&lb(&k), target).unwrap();
            let twice = complete(&once, target).unwrap();
            let t = u64::from(target) * k.len() as u64;
            prop_assert!(t <= twice.total() && twice.total() <= once.total());
            for (a, b) in once.as_slice().iter().zip(twice.as_slice()) {
                prop_assert!(b <= a);
            }
        }
    }
}
