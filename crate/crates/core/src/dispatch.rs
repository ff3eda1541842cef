//! Auction-based dispatch of the aggregate action. Each device posts a
//! step-shaped bid: it consumes its rated power whenever the cleared
//! priority is positive and at most its corner priority (one minus its state
//! of charge). Clearing picks the priority whose aggregate consumption best
//! matches the requested cluster power.

use crate::aggregation::soc;
use crate::sim::TclParameters;

/// Priority above which every bid is refused; clearing returns this when the
/// target is best served by switching everything off.
pub const ALL_OFF_PRIORITY: f64 = 1.0 + 1e-9;

/// One device's step bid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bid {
    /// Urgency threshold in [0, 1]; higher means more urgent.
    pub corner_priority: f64,
    /// Rated power, kW.
    pub power_kw: f64,
}

/// Urgency of a device: empty devices bid most urgently.
pub fn corner_priority(soc: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&soc));
    1.0 - soc
}

/// Builds the bid set for a cluster snapshot.
pub fn bids_from_cluster(t_airs: &[f64], params: &[TclParameters]) -> Vec<Bid> {
    debug_assert_eq!(t_airs.len(), params.len());
    t_airs
        .iter()
        .zip(params)
        .map(|(&t, p)| Bid {
            corner_priority: corner_priority(soc(t, p)),
            power_kw: p.power_kw,
        })
        .collect()
}

/// Total power consumed at priority `p_r`: the sum over bids accepting it
/// (`0 < p_r <= corner_priority`). `p_r = 0` is evaluated as the limit from
/// above, admitting every bid with positive corner priority.
pub fn aggregate_bid(bids: &[Bid], p_r: f64) -> f64 {
    debug_assert!(p_r >= 0.0);
    bids.iter()
        .filter(|b| {
            if p_r > 0.0 {
                p_r <= b.corner_priority
            } else {
                b.corner_priority > 0.0
            }
        })
        .map(|b| b.power_kw)
        .sum()
}

/// Clears the market: returns the priority minimizing the mismatch between
/// the aggregate bid and the requested power. The aggregate bid is piecewise
/// constant, so scanning the corner priorities plus the all-off point is
/// exact. Ties go to the larger priority (serving fewer, more urgent
/// devices); zero priorities are excluded by the strict inequality of the
/// bid function.
pub fn clear(bids: &[Bid], u_target_kw: f64) -> f64 {
    debug_assert!(u_target_kw >= 0.0);
    let mut candidates: Vec<f64> = bids
        .iter()
        .map(|b| b.corner_priority)
        .filter(|&p| p > 0.0)
        .collect();
    candidates.push(ALL_OFF_PRIORITY);
    candidates.sort_by(|a, b| b.partial_cmp(a).unwrap());

    let mut best = ALL_OFF_PRIORITY;
    let mut best_mismatch = f64::INFINITY;
    for p in candidates {
        let mismatch = (aggregate_bid(bids, p) - u_target_kw).abs();
        if mismatch < best_mismatch {
            best_mismatch = mismatch;
            best = p;
        }
    }
    best
}

/// Per-device switch decisions at the cleared priority.
pub fn dispatch(bids: &[Bid], p_r_star: f64) -> Vec<bool> {
    bids.iter()
        .map(|b| p_r_star > 0.0 && p_r_star <= b.corner_priority)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn three_bids() -> Vec<Bid> {
        [0.8, 0.5, 0.1]
            .iter()
            .map(|&p| Bid {
                corner_priority: p,
                power_kw: 0.5,
            })
            .collect()
    }

    #[test]
    fn corner_priority_values() {
        assert_eq!(corner_priority(0.0), 1.0);
        assert_eq!(corner_priority(1.0), 0.0);
        assert_relative_eq!(corner_priority(0.3), 0.7);
    }

    #[test]
    fn aggregate_bid_step_values() {
        let bids = three_bids();
        assert_relative_eq!(aggregate_bid(&bids, 0.6), 0.5);
        assert_eq!(aggregate_bid(&bids, 1.2), 0.0);
        // Limit from above at zero: everyone with positive priority consumes.
        assert_relative_eq!(aggregate_bid(&bids, 0.0), 1.5);
        assert_relative_eq!(aggregate_bid(&bids, 0.05), 1.5);
        assert_relative_eq!(aggregate_bid(&bids, 0.5), 1.0);
    }

    #[test]
    fn aggregate_bid_excludes_full_devices_at_zero() {
        let bids = vec![Bid {
            corner_priority: 0.0,
            power_kw: 0.5,
        }];
        assert_eq!(aggregate_bid(&bids, 0.0), 0.0);
    }

    #[test]
    fn clear_matches_hand_examples() {
        let bids = three_bids();
        let p = clear(&bids, 0.5);
        assert_relative_eq!(p, 0.8);
        assert_relative_eq!(aggregate_bid(&bids, p), 0.5);

        let p = clear(&bids, 0.0);
        assert_eq!(p, ALL_OFF_PRIORITY);
        assert_eq!(aggregate_bid(&bids, p), 0.0);

        // Target above the total rating: everybody on.
        let p = clear(&bids, 10.0);
        assert_relative_eq!(p, 0.1);
        assert_relative_eq!(aggregate_bid(&bids, p), 1.5);
    }

    #[test]
    fn dispatch_follows_cleared_priority() {
        let bids = three_bids();
        assert_eq!(dispatch(&bids, 0.8), vec![true, false, false]);
        assert_eq!(dispatch(&bids, ALL_OFF_PRIORITY), vec![false, false, false]);
        // Dispatched power equals the aggregate bid at the cleared priority.
        for target in [0.0, 0.3, 0.5, 0.8, 1.1, 1.5, 2.0] {
            let p = clear(&bids, target);
            let u = dispatch(&bids, p);
            let dispatched: f64 = u
                .iter()
                .zip(&bids)
                .filter(|(&on, _)| on)
                .map(|(_, b)| b.power_kw)
                .sum();
            assert_relative_eq!(dispatched, aggregate_bid(&bids, p));
        }
    }

    proptest! {
        #[test]
        fn aggregate_bid_is_non_increasing(
            priorities in proptest::collection::vec(0.0f64..=1.0, 1..50),
            p1 in 0.0f64..1.2,
            p2 in 0.0f64..1.2,
        ) {
            let bids: Vec<Bid> = priorities
                .iter()
                .map(|&p| Bid { corner_priority: p, power_kw: 0.5 })
                .collect();
            let (lo, hi) = if p1 <= p2 { (p1, p2) } else { (p2, p1) };
            prop_assert!(aggregate_bid(&bids, lo) >= aggregate_bid(&bids, hi));
        }

        #[test]
        fn clear_is_optimal_over_candidates(
            priorities in proptest::collection::vec(0.0f64..=1.0, 1..50),
            target in 0.0f64..30.0,
        ) {
            let bids: Vec<Bid> = priorities
                .iter()
                .map(|&p| Bid { corner_priority: p, power_kw: 0.5 })
                .collect();
            let p_star = clear(&bids, target);
            let best = (aggregate_bid(&bids, p_star) - target).abs();
            for p in priorities.iter().copied().filter(|&p| p > 0.0).chain([ALL_OFF_PRIORITY]) {
                let mismatch = (aggregate_bid(&bids, p) - target).abs();
                prop_assert!(best <= mismatch + 1e-12);
            }
        }

        #[test]
        fn dispatch_is_sorted_by_urgency(
            priorities in proptest::collection::vec(0.0f64..=1.0, 2..50),
            target in 0.0f64..30.0,
        ) {
            let bids: Vec<Bid> = priorities
                .iter()
                .map(|&p| Bid { corner_priority: p, power_kw: 0.5 })
                .collect();
            let u = dispatch(&bids, clear(&bids, target));
            for i in 0..bids.len() {
                for j in 0..bids.len() {
                    if u[i] && bids[j].corner_priority > bids[i].corner_priority {
                        prop_assert!(u[j], "less urgent device on while more urgent off");
                    }
                }
            }
            let total: f64 = u.iter().zip(&bids).filter(|(&on, _)| on).map(|(_, b)| b.power_kw).sum();
            prop_assert!((0.0..=priorities.len() as f64 * 0.5 + 1e-12).contains(&total));
        }
    }
}
