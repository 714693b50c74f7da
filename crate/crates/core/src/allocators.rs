//! Heuristic baseline allocations: identical budgets, a linear pyramid and
//! a fixed-position (sink + recency) layout.

use crate::budget::{LayerBudgets, PositionPolicy};
use crate::error::{Error, Result};

fn check(layer_count: usize, target_average: u32) -> Result<()> {
    if layer_count == 0 || target_average == 0 {
        return Err(Error::invalid("layer count and target budget must be at least 1"));
    }
    Ok(())
}

pub fn uniform_allocation(layer_count: usize, target_average: u32) -> Result<LayerBudgets> {
    check(layer_count, target_average)?;
    LayerBudgets::uniform(layer_count, target_average)
}

/// Linearly decreasing budgets from `k_max` at the bottom layer to
/// `taper_ratio * k_max` at the top, scaled so the mean is the target.
///
/// Rounding residue goes to the bottom layer. A negative residue is taken
/// one token at a time from the end of the leading plateau, which is the
/// bottom layer unless that would break the ordering.
pub fn pyramidal_allocation(layer_count: usize, target_average: u32, taper_ratio: f64) -> Result<LayerBudgets> {
    check(layer_count, target_average)?;
    if !(taper_ratio > 0.0 && taper_ratio <= 1.0) {
        return Err(Error::invalid(format!(
            "taper ratio must lie in (0, 1], got {taper_ratio}"
        )));
    }
    if layer_count == 1 {
        return LayerBudgets::uniform(1, target_average);
    }
    let c = f64::from(target_average);
    let k_max = 2.0 * c / (1.0 + taper_ratio);
    let last = (layer_count - 1) as f64;
    let mut budgets: Vec<i64> = (0..layer_count)
        .map(|i| (k_max * (1.0 - (1.0 - taper_ratio) * i as f64 / last)).round() as i64)
        .collect();

    let target_total = i64::from(target_average) * layer_count as i64;
    let residue = target_total - budgets.iter().sum::<i64>();
    if residue >= 0 {
        budgets[0] += residue;
    } else {
        for _ in 0..-residue {
            // Last layer of the leading plateau: the bottom layer unless it ties its neighbours.
            let top = budgets[0];
            let i = budgets.iter().take_while(|&&k| k == top).count() - 1;
            budgets[i] -= 1;
        }
    }
    let budgets = budgets
        .into_iter()
        .map(|k| u32::try_from(k.max(0)).expect("pyramid budgets fit in u32"))
        .collect();
    LayerBudgets::new(budgets)
}

/// Identical budgets tagged with a sink-plus-recency position policy.
pub fn fixed_position_allocation(layer_count: usize, target_average: u32, sink_tokens: u32) -> Result<LayerBudgets> {
    check(layer_count, target_average)?;
    if sink_tokens >= target_average {
        return Err(Error::invalid(format!(
            "sink_tokens ({sink_tokens}) must be smaller than the budget ({target_average})"
        )));
    }
    Ok(LayerBudgets::uniform(layer_count, target_average)?
        .with_policy(Some(PositionPolicy::FixedPosition { sink_tokens })))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform() {
        let b = uniform_allocation(32, 128).unwrap();
        assert_eq!(b.as_slice(), &[128; 32]);
        assert_eq!(uniform_allocation(1, 7).unwrap().as_slice(), &[7]);
        assert_eq!(b.mean(), 128.0);
    }

    #[test]
    fn pyramid_without_taper_is_uniform() {
        assert_eq!(
            pyramidal_allocation(32, 128, 1.0).unwrap(),
            uniform_allocation(32, 128).unwrap()
        );
    }

    #[test]
    fn two_layer_pyramid() {
        // 1.5 * k_max = 200 -> k_max = 133.3, k_min = 66.7.
        assert_eq!(pyramidal_allocation(2, 100, 0.5).unwrap().as_slice(), &[133, 67]);
    }

    #[test]
    fn default_pyramid_shape() {
        let b = pyramidal_allocation(32, 128, 0.2).unwrap();
        let k = b.as_slice();
        assert!(k.windows(2).all(|w| w[0] >= w[1]));
        assert!((b.mean() - 128.0).abs() <= 1.0);
        // k_max = 256 / 1.2, k_min = 0.2 * k_max.
        assert!((f64::from(k[0]) - 213.3).abs() <= 2.0);
        assert!((f64::from(k[31]) - 42.7).abs() <= 1.0);
    }

    #[test]
    fn bad_taper_is_rejected() {
        assert!(pyramidal_allocation(4, 10, 0.0).is_err());
        assert!(pyramidal_allocation(4, 10, 1.2).is_err());
    }

    #[test]
    fn fixed_position() {
        let b = fixed_position_allocation(32, 128, 4).unwrap();
        assert_eq!(b.as_slice(), &[128; 32]);
        let policy = b.policy().unwrap();
        assert_eq!(policy, &PositionPolicy::FixedPosition { sink_tokens: 4 });
        assert_eq!(policy.recent_tokens(128), 124);
        let pure_recency = fixed_position_allocation(4, 16, 0).unwrap();
        assert_eq!(pure_recency.policy().unwrap().recent_tokens(16), 16);
        assert!(fixed_position_allocation(4, 16, 16).is_err());
    }

    proptest! {
        #[test]
        fn allocators_hit_the_target(layers in 1usize..80, target in 1u32..3000, taper in 0.01f64..=1.0) {
            let p = pyramidal_allocation(layers, target, taper).unwrap();
            prop_assert_eq!(p.layer_count(), layers);
            prop_assert!((p.mean() - f64::from(target)).abs() <= 1.0);
            prop_assert!(p.as_slice().windows(2).all(|w| w[0] >= w[1]));
            prop_assert!((uniform_allocation(layers, target).unwrap().mean() - f64::from(target)).abs() <= 1.0);
            if target > 1 {
                let f = fixed_position_allocation(layers, target, target / 2).unwrap();
                prop_assert!((f.mean() - f64::from(target)).abs() <= 1.0);
            }
        }
    }
}
