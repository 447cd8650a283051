use super::{LatentUtilities, Market};

/// Strict ranking of all students by every college.
///
/// Built from priority scores, optionally preceded by a priority tier so that
/// lexicographic admission policies reorder students without rewriting any
/// utility. Exact ties are broken by lower student position and recorded.
#[derive(Clone, Debug)]
pub struct CollegeOrder {
    n_students: usize,
    /// `rank[(c - 1) * n + i]`, lower is better.
    rank: Vec<u32>,
    ties: bool,
}

impl CollegeOrder {
    pub fn from_scores(market: &Market, utilities: &LatentUtilities) -> Self {
        Self::build(market, utilities, |_, _| false)
    }

    /// `prioritized(c, i)` lifts student `i` above every non-prioritized
    /// student at college `c`; the original order applies within each tier.
    pub fn with_priority<F>(market: &Market, utilities: &LatentUtilities, prioritized: F) -> Self
    where
        F: Fn(usize, usize) -> bool,
    {
        Self::build(market, utilities, prioritized)
    }

    fn build<F>(market: &Market, utilities: &LatentUtilities, prioritized: F) -> Self
    where
        F: Fn(usize, usize) -> bool,
    {
        let n = market.n_students();
        let n_c = market.n_colleges();
        let mut rank = vec![0u32; n * n_c];
        let mut ties = false;
        let mut idx: Vec<usize> = (0..n).collect();
        let mut keys: Vec<(bool, f64)> = vec![(false, 0.0); n];
        for c in 1..=n_c {
            for i in 0..n {
                keys[i] = (prioritized(c, i), utilities.priority_score(market, c, i));
            }
            idx.sort_by(|&a, &b| {
                let (ta, sa) = keys[a];
                let (tb, sb) = keys[b];
                tb.cmp(&ta)
                    .then_with(|| sb.total_cmp(&sa))
                    .then_with(|| a.cmp(&b))
            });
            for (r, &i) in idx.iter().enumerate() {
                rank[(c - 1) * n + i] = r as u32;
            }
            ties |= idx.windows(2).any(|w| keys[w[0]] == keys[w[1]]);
        }
        CollegeOrder {
            n_students: n,
            rank,
            ties,
        }
    }

    #[inline]
    pub fn rank(&self, c: usize, i: usize) -> u32 {
        self.rank[(c - 1) * self.n_students + i]
    }

    /// College `c` strictly prefers student `a` to student `b`.
    #[inline]
    pub fn prefers(&self, c: usize, a: usize, b: usize) -> bool {
        self.rank(c, a) < self.rank(c, b)
    }

    pub fn has_ties(&self) -> bool {
        self.ties
    }
}

/// Each student's acceptable colleges, best first.
///
/// A college is acceptable when admissible and strictly preferred to the
/// outside option. Ties between colleges go to the lower college number.
#[derive(Clone, Debug)]
pub struct StudentPreferences {
    lists: Vec<Vec<usize>>,
    ties: bool,
}

impl StudentPreferences {
    pub fn from_utilities(market: &Market, utilities: &LatentUtilities) -> Self {
        let n_c = market.n_colleges();
        let mut ties = false;
        let lists = (0..market.n_students())
            .map(|i| {
                let outside = utilities.u(i, 0);
                let mut list: Vec<usize> = (1..=n_c)
                    .filter(|&c| market.admissible(i, c))
                    .filter(|&c| {
                        let u = utilities.u(i, c);
                        ties |= u == outside;
                        u > outside
                    })
                    .collect();
                list.sort_by(|&a, &b| utilities.u(i, b).total_cmp(&utilities.u(i, a)).then(a.cmp(&b)));
                ties |= list.windows(2).any(|w| utilities.u(i, w[0]) == utilities.u(i, w[1]));
                list
            })
            .collect();
        StudentPreferences { lists, ties }
    }

    pub fn list(&self, i: usize) -> &[usize] {
        &self.lists[i]
    }

    pub fn has_ties(&self) -> bool {
        self.ties
    }
}
