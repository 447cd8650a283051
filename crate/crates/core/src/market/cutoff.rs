use std::fmt;

use serde::{Deserialize, Serialize};

use super::{assignment_counts, check_assignment, LatentUtilities, Market, Matching};
use crate::error::{Error, Result};

/// Admission cutoff of one college.
///
/// `NegInf` marks a college whose capacity does not bind. `PosInf` admits
/// nobody; it only arises from user-supplied cutoff vectors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Cutoff {
    NegInf,
    Finite(f64),
    PosInf,
}

impl Cutoff {
    /// Weak inequality: a score equal to the cutoff is admitted.
    #[inline]
    pub fn admits(self, score: f64) -> bool {
        match self {
            Cutoff::NegInf => true,
            Cutoff::Finite(d) => score >= d,
            Cutoff::PosInf => false,
        }
    }

    pub fn is_finite(self) -> bool {
        matches!(self, Cutoff::Finite(_))
    }

    pub fn value(self) -> f64 {
        match self {
            Cutoff::NegInf => f64::NEG_INFINITY,
            Cutoff::Finite(d) => d,
            Cutoff::PosInf => f64::INFINITY,
        }
    }

    pub fn parse(s: &str) -> Option<Cutoff> {
        match s.trim() {
            "-inf" => Some(Cutoff::NegInf),
            "inf" | "+inf" => Some(Cutoff::PosInf),
            t => t.parse::<f64>().ok().filter(|x| x.is_finite()).map(Cutoff::Finite),
        }
    }
}

impl fmt::Display for Cutoff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cutoff::NegInf => f.write_str("-inf"),
            Cutoff::PosInf => f.write_str("inf"),
            Cutoff::Finite(d) => write!(f, "{d:.16e}"),
        }
    }
}

/// Admission cutoffs: the lowest priority score among a full college's members,
/// `NegInf` when the college has free seats.
///
/// Non-selecting colleges only get a finite cutoff when full and some
/// admissible outsider strictly prefers them to its own match.
pub fn compute_cutoffs(market: &Market, utilities: &LatentUtilities, assignment: &[usize]) -> Result<Vec<Cutoff>> {
    check_assignment(market, assignment)?;
    let n_c = market.n_colleges();
    let counts = assignment_counts(assignment, n_c);
    let mut cutoffs = Vec::with_capacity(n_c);
    for c in 1..=n_c {
        if counts[c] > market.capacity(c) {
            return Err(Error::InvalidInput(format!(
                "college {c} holds {} students over capacity {}",
                counts[c],
                market.capacity(c)
            )));
        }
        if counts[c] < market.capacity(c) {
            cutoffs.push(Cutoff::NegInf);
            continue;
        }
        if !market.college(c).school_type.is_selecting() {
            let over_demanded = (0..market.n_students()).any(|i| {
                assignment[i] != c && market.admissible(i, c) && utilities.u(i, c) > utilities.u(i, assignment[i])
            });
            if !over_demanded {
                cutoffs.push(Cutoff::NegInf);
                continue;
            }
        }
        let min = assignment
            .iter()
            .enumerate()
            .filter(|(_, &a)| a == c)
            .map(|(i, _)| utilities.priority_score(market, c, i))
            .fold(f64::INFINITY, f64::min);
        cutoffs.push(Cutoff::Finite(min));
    }
    Ok(cutoffs)
}

/// Colleges (plus the outside option `0`) whose cutoff student `i` clears.
pub fn feasible_set(market: &Market, i: usize, cutoffs: &[Cutoff], utilities: &LatentUtilities) -> Vec<usize> {
    std::iter::once(0)
        .chain((1..=market.n_colleges()).filter(|&c| {
            market.admissible(i, c) && cutoffs[c - 1].admits(utilities.priority_score(market, c, i))
        }))
        .collect()
}

/// Result of assigning every student its favourite feasible college.
#[derive(Clone, Debug, PartialEq)]
pub struct CutoffMatching {
    pub matching: Matching,
    /// Every college within capacity and every finite-cutoff college full.
    pub clears: bool,
    pub over_demanded: Vec<usize>,
    pub unfilled: Vec<usize>,
}

/// Demand at a candidate cutoff vector.
///
/// Each student takes the best college in its feasible set, or the outside
/// option when nothing beats it strictly. Over-demand is reported through
/// [`CutoffMatching::clears`] rather than as an error.
pub fn stable_from_cutoffs(market: &Market, utilities: &LatentUtilities, cutoffs: &[Cutoff]) -> Result<CutoffMatching> {
    utilities.check_against(market)?;
    if cutoffs.len() != market.n_colleges() {
        return Err(Error::InvalidInput(format!(
            "{} cutoffs for {} colleges",
            cutoffs.len(),
            market.n_colleges()
        )));
    }
    let mut non_generic = false;
    let assignment: Vec<usize> = (0..market.n_students())
        .map(|i| {
            let mut best = 0;
            let mut best_u = utilities.u(i, 0);
            for c in feasible_set(market, i, cutoffs, utilities).into_iter().skip(1) {
                let u = utilities.u(i, c);
                non_generic |= u == best_u;
                if u > best_u {
                    best = c;
                    best_u = u;
                }
            }
            best
        })
        .collect();
    let counts = assignment_counts(&assignment, market.n_colleges());
    let mut over_demanded = Vec::new();
    let mut unfilled = Vec::new();
    for c in 1..=market.n_colleges() {
        if counts[c] > market.capacity(c) {
            over_demanded.push(c);
        } else if cutoffs[c - 1].is_finite() && counts[c] < market.capacity(c) {
            unfilled.push(c);
        }
    }
    Ok(CutoffMatching {
        clears: over_demanded.is_empty() && unfilled.is_empty(),
        matching: Matching {
            assignment,
            cutoffs: cutoffs.to_vec(),
            non_generic,
        },
        over_demanded,
        unfilled,
    })
}

#[cfg(test)]
mod tests {
    use super::super::test_support::*;
    use super::super::{audit_stability, deferred_acceptance, Gender};
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    #[test]
    fn cutoff_is_minimum_of_full_college() {
        let market = plain_market(4, &[3]);
        let u = LatentUtilities::from_parts(4, 1, [0.0, 1.0].repeat(4), vec![2.0, 0.5, 1.1, -3.0]).unwrap();
        let c = compute_cutoffs(&market, &u, &[1, 1, 1, 0]).unwrap();
        assert_eq!(c, vec![Cutoff::Finite(0.5)]);
    }

    #[test]
    fn cutoff_is_neg_inf_below_capacity() {
        let market = plain_market(4, &[3]);
        let u = LatentUtilities::from_parts(4, 1, [0.0, 1.0].repeat(4), vec![2.0, 0.5, 1.1, -3.0]).unwrap();
        assert_eq!(compute_cutoffs(&market, &u, &[1, 1, 0, 0]).unwrap(), vec![Cutoff::NegInf]);
        assert_eq!(compute_cutoffs(&market, &u, &[0, 0, 0, 0]).unwrap(), vec![Cutoff::NegInf]);
    }

    #[test]
    fn over_capacity_assignment_is_rejected() {
        let market = plain_market(3, &[1]);
        let u = LatentUtilities::zeros(3, 1);
        assert!(compute_cutoffs(&market, &u, &[1, 1, 0]).is_err());
    }

    #[test]
    fn feasible_set_edge_cases() {
        let mut market = plain_market(2, &[1, 1]);
        let u = LatentUtilities::from_parts(2, 2, vec![0.0; 6], vec![0.3, 0.0, 1.0, 0.0]).unwrap();
        let all_open = [Cutoff::NegInf, Cutoff::NegInf];
        assert_eq!(feasible_set(&market, 0, &all_open, &u), vec![0, 1, 2]);
        // weak inequality
        let exact = [Cutoff::Finite(0.3), Cutoff::Finite(1.5)];
        assert_eq!(feasible_set(&market, 0, &exact, &u), vec![0, 1]);
        // gender restriction overrides any utility
        market.colleges[0].gender_restriction = Some(Gender::Female);
        market.students[0].gender = Some(Gender::Male);
        assert_eq!(feasible_set(&market, 0, &all_open, &u), vec![0, 2]);
    }

    #[test]
    fn open_cutoffs_with_two_applicants_do_not_clear() {
        let market = plain_market(2, &[1]);
        let u = LatentUtilities::from_parts(2, 1, vec![0.0, 1.0, 0.0, 2.0], vec![0.0, 0.0]).unwrap();
        let r = stable_from_cutoffs(&market, &u, &[Cutoff::NegInf]).unwrap();
        assert!(!r.clears);
        assert_eq!(r.over_demanded, vec![1]);
    }

    #[test]
    fn closed_cutoffs_send_everyone_outside() {
        let market = plain_market(3, &[1, 2]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let u = random_utilities(3, 2, &mut rng);
        let r = stable_from_cutoffs(&market, &u, &[Cutoff::PosInf, Cutoff::PosInf]).unwrap();
        assert_eq!(r.matching.assignment, vec![0, 0, 0]);
        assert!(r.clears);
    }

    #[test]
    fn cutoff_display_round_trips() {
        for c in [Cutoff::NegInf, Cutoff::PosInf, Cutoff::Finite(-0.123_456_789_012_345_68), Cutoff::Finite(3e-300)] {
            assert_eq!(Cutoff::parse(&c.to_string()), Some(c));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn cutoffs_reproduce_da(seed in any::<u64>(), n in 2usize..50, caps in proptest::collection::vec(1usize..10, 1..5)) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let market = plain_market(n, &caps);
            let u = random_utilities(n, caps.len(), &mut rng);
            let m = deferred_acceptance(&market, &u).unwrap();
            let r = stable_from_cutoffs(&market, &u, &m.cutoffs).unwrap();
            prop_assert!(r.clears);
            prop_assert_eq!(&r.matching.assignment, &m.assignment);
            prop_assert!(audit_stability(&market, &u, &r.matching).unwrap().is_stable());
        }

        #[test]
        fn raising_v_expands_feasible_set(seed in any::<u64>(), bump in 0.0f64..3.0) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let market = plain_market(20, &[3, 4, 2]);
            let mut u = random_utilities(20, 3, &mut rng);
            let m = deferred_acceptance(&market, &u).unwrap();
            let before = feasible_set(&market, 0, &m.cutoffs, &u);
            for c in 1..=3 {
                let v = u.v(c, 0);
                u.set_v(c, 0, v + bump);
            }
            let after = feasible_set(&market, 0, &m.cutoffs, &u);
            prop_assert!(before.iter().all(|c| after.contains(c)));
        }
    }
}
