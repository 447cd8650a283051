use super::{assignment_counts, check_assignment, CollegeOrder, LatentUtilities, Market, Matching};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub enum BlockingWitness {
    /// The college has a free seat.
    ExcessCapacity,
    /// The college prefers the blocking student to this member.
    Displaces(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockingPair {
    pub student: usize,
    pub college: usize,
    pub witness: BlockingWitness,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AuditReport {
    pub blocking_pairs: Vec<BlockingPair>,
    /// Matched students who do not strictly prefer their match to the outside option.
    pub ir_violations: Vec<usize>,
    /// Colleges holding more students than seats, or students at a college
    /// their gender excludes them from.
    pub infeasible: Vec<(usize, usize)>,
    /// An exact tie was met while ranking.
    pub non_generic: bool,
}

impl AuditReport {
    pub fn is_stable(&self) -> bool {
        self.blocking_pairs.is_empty() && self.ir_violations.is_empty() && self.infeasible.is_empty()
    }
}

/// Exhaustive stability check of `matching` under `utilities`.
pub fn audit_stability(market: &Market, utilities: &LatentUtilities, matching: &Matching) -> Result<AuditReport> {
    utilities.check_against(market)?;
    let order = CollegeOrder::from_scores(market, utilities);
    let mut report = audit_with_order(market, utilities, &order, &matching.assignment)?;
    report.non_generic |= matching.non_generic;
    Ok(report)
}

/// Stability check against an explicit college ranking.
pub fn audit_with_order(
    market: &Market,
    utilities: &LatentUtilities,
    order: &CollegeOrder,
    assignment: &[usize],
) -> Result<AuditReport> {
    check_assignment(market, assignment)?;
    let n_c = market.n_colleges();
    let counts = assignment_counts(assignment, n_c);
    let mut report = AuditReport {
        non_generic: order.has_ties(),
        ..AuditReport::default()
    };

    for c in 1..=n_c {
        if counts[c] > market.capacity(c) {
            report.infeasible.push((usize::MAX, c));
        }
    }

    // worst-ranked member of each college
    let mut worst: Vec<Option<usize>> = vec![None; n_c + 1];
    for (i, &a) in assignment.iter().enumerate() {
        if a == 0 {
            continue;
        }
        if !market.admissible(i, a) {
            report.infeasible.push((i, a));
        }
        match worst[a] {
            Some(j) if order.prefers(a, i, j) => {}
            _ => worst[a] = Some(i),
        }
    }

    for (i, &a) in assignment.iter().enumerate() {
        let own = utilities.u(i, a);
        if a != 0 && own <= utilities.u(i, 0) {
            report.ir_violations.push(i);
        }
        for c in 1..=n_c {
            if c == a || !market.admissible(i, c) || utilities.u(i, c) <= own {
                continue;
            }
            let witness = if counts[c] < market.capacity(c) {
                Some(BlockingWitness::ExcessCapacity)
            } else {
                worst[c]
                    .filter(|&j| order.prefers(c, i, j))
                    .map(BlockingWitness::Displaces)
            };
            if let Some(witness) = witness {
                report.blocking_pairs.push(BlockingPair {
                    student: i,
                    college: c,
                    witness,
                });
            }
        }
    }
    Ok(report)
}
