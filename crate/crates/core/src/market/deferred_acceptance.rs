use std::collections::BinaryHeap;

use super::cutoff::compute_cutoffs;
use super::{CollegeOrder, LatentUtilities, Market, Matching, StudentPreferences};
use crate::error::{Error, Result};

/// Student-proposing deferred acceptance.
///
/// Colleges rank students by utility when selecting and by the market lottery
/// otherwise. The returned matching is stable and carries its cutoffs.
pub fn deferred_acceptance(market: &Market, utilities: &LatentUtilities) -> Result<Matching> {
    utilities.check_against(market)?;
    if !utilities.all_finite() {
        return Err(Error::InvalidInput("utilities must be finite".into()));
    }
    let order = CollegeOrder::from_scores(market, utilities);
    deferred_acceptance_with_order(market, utilities, &order)
}

/// Deferred acceptance against an explicit college ranking, e.g. one produced
/// by an admission priority policy.
pub fn deferred_acceptance_with_order(
    market: &Market,
    utilities: &LatentUtilities,
    order: &CollegeOrder,
) -> Result<Matching> {
    utilities.check_against(market)?;
    let prefs = StudentPreferences::from_utilities(market, utilities);
    let assignment = propose(market, &prefs, order);
    let cutoffs = compute_cutoffs(market, utilities, &assignment)?;
    Ok(Matching {
        assignment,
        cutoffs,
        non_generic: prefs.has_ties() || order.has_ties(),
    })
}

fn propose(market: &Market, prefs: &StudentPreferences, order: &CollegeOrder) -> Vec<usize> {
    let n = market.n_students();
    let n_c = market.n_colleges();
    let mut next = vec![0usize; n];
    // max-heap on rank: the top is the worst student currently held
    let mut held: Vec<BinaryHeap<(u32, usize)>> = (0..=n_c)
        .map(|c| BinaryHeap::with_capacity(if c == 0 { 0 } else { market.capacity(c) + 1 }))
        .collect();
    let mut free: Vec<usize> = (0..n).rev().collect();

    while let Some(i) = free.pop() {
        let list = prefs.list(i);
        if next[i] >= list.len() {
            continue;
        }
        let c = list[next[i]];
        next[i] += 1;
        let heap = &mut held[c];
        heap.push((order.rank(c, i), i));
        if heap.len() > market.capacity(c) {
            let (_, rejected) = heap.pop().expect("heap is non-empty");
            free.push(rejected);
        }
    }

    let mut assignment = vec![0usize; n];
    for (c, heap) in held.iter().enumerate().skip(1) {
        for &(_, i) in heap.iter() {
            assignment[i] = c;
        }
    }
    assignment
}
