//! Markets, matchings, and stability.
//!
//! Colleges are numbered `1..=C` everywhere in this crate and `0` is the
//! outside option, so a student's assignment is a single `usize` in
//! `0..=C`. External college ids live on [`CollegeRecord::id`] and are only
//! consulted at the I/O boundary.

mod audit;
mod cutoff;
mod deferred_acceptance;
mod order;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use audit::{audit_stability, audit_with_order, AuditReport, BlockingPair, BlockingWitness};
pub use cutoff::{compute_cutoffs, feasible_set, stable_from_cutoffs, Cutoff, CutoffMatching};
pub use deferred_acceptance::{deferred_acceptance, deferred_acceptance_with_order};
pub use order::{CollegeOrder, StudentPreferences};

/// Reserved assignment value for the outside option.
pub const OUTSIDE_OPTION: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Female,
    Male,
}

impl Gender {
    pub fn as_str(self) -> &'static str {
        match self {
            Gender::Female => "female",
            Gender::Male => "male",
        }
    }

    pub fn parse(s: &str) -> Option<Gender> {
        match s.trim().to_ascii_lowercase().as_str() {
            "f" | "female" => Some(Gender::Female),
            "m" | "male" => Some(Gender::Male),
            _ => None,
        }
    }
}

/// School type taxonomy. Non-selecting schools admit anyone up to capacity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchoolType {
    NonSelecting,
    SelectingA,
    SelectingB,
}

impl SchoolType {
    pub const ALL: [SchoolType; 3] = [
        SchoolType::NonSelecting,
        SchoolType::SelectingA,
        SchoolType::SelectingB,
    ];

    pub fn is_selecting(self) -> bool {
        !matches!(self, SchoolType::NonSelecting)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SchoolType::NonSelecting => "non-selecting",
            SchoolType::SelectingA => "selecting-a",
            SchoolType::SelectingB => "selecting-b",
        }
    }

    pub fn parse(s: &str) -> Option<SchoolType> {
        match s.trim().to_ascii_lowercase().as_str() {
            "non-selecting" | "public" => Some(SchoolType::NonSelecting),
            "selecting-a" | "a" => Some(SchoolType::SelectingA),
            "selecting-b" | "b" => Some(SchoolType::SelectingB),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentRecord {
    pub id: u64,
    /// Demand shifters, one per college.
    pub y: Vec<f64>,
    /// Supply shifters, one per college.
    pub w: Vec<f64>,
    /// Shared covariates, named by [`Market::z_names`].
    pub z: Vec<f64>,
    pub gender: Option<Gender>,
    pub tags: BTreeSet<String>,
}

impl StudentRecord {
    pub fn has_tag(&self, tag: &str) -> bool {
        self.tags.contains(tag)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollegeRecord {
    pub id: u64,
    pub capacity: usize,
    pub school_type: SchoolType,
    /// College-level attributes, named by [`Market::attribute_names`].
    pub attributes: Vec<f64>,
    /// When set, only students of this gender may attend.
    pub gender_restriction: Option<Gender>,
}

/// Tag marking students who live outside the market but enrolled in it.
pub const OUT_OF_MARKET_TAG: &str = "out_of_market";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Market {
    pub students: Vec<StudentRecord>,
    pub colleges: Vec<CollegeRecord>,
    pub z_names: Vec<String>,
    pub attribute_names: Vec<String>,
    /// Lottery numbers used by non-selecting colleges to ration seats.
    pub lottery: Vec<f64>,
}

impl Market {
    /// Builds a market and checks dimensions. A zero lottery is used when none
    /// is supplied; ties are then broken by student position.
    pub fn new(
        students: Vec<StudentRecord>,
        colleges: Vec<CollegeRecord>,
        z_names: Vec<String>,
        attribute_names: Vec<String>,
        lottery: Option<Vec<f64>>,
    ) -> Result<Market> {
        let lottery = lottery.unwrap_or_else(|| vec![0.0; students.len()]);
        let market = Market {
            students,
            colleges,
            z_names,
            attribute_names,
            lottery,
        };
        market.validate()?;
        Ok(market)
    }

    pub fn n_students(&self) -> usize {
        self.students.len()
    }

    pub fn n_colleges(&self) -> usize {
        self.colleges.len()
    }

    pub fn d_z(&self) -> usize {
        self.z_names.len()
    }

    /// College record for college number `c` in `1..=C`.
    pub fn college(&self, c: usize) -> &CollegeRecord {
        &self.colleges[c - 1]
    }

    pub fn capacity(&self, c: usize) -> usize {
        self.colleges[c - 1].capacity
    }

    pub fn total_capacity(&self) -> usize {
        self.colleges.iter().map(|c| c.capacity).sum()
    }

    pub fn has_excess_demand(&self) -> bool {
        self.total_capacity() < self.n_students()
    }

    /// Whether student `i` may attend college `c` given gender restrictions.
    pub fn admissible(&self, i: usize, c: usize) -> bool {
        match self.colleges[c - 1].gender_restriction {
            None => true,
            Some(g) => self.students[i].gender == Some(g),
        }
    }

    pub fn z_index(&self, name: &str) -> Option<usize> {
        self.z_names.iter().position(|n| n == name)
    }

    pub fn attribute_index(&self, name: &str) -> Option<usize> {
        self.attribute_names.iter().position(|n| n == name)
    }

    /// Flat covariate vector `(y_1..y_C, w_1..w_C, z_1..z_dz)` of student `i`.
    pub fn covariate_row(&self, i: usize) -> Vec<f64> {
        let s = &self.students[i];
        let mut row = Vec::with_capacity(2 * self.n_colleges() + self.d_z());
        row.extend_from_slice(&s.y);
        row.extend_from_slice(&s.w);
        row.extend_from_slice(&s.z);
        row
    }

    pub fn validate(&self) -> Result<()> {
        let n_c = self.n_colleges();
        if n_c == 0 {
            return Err(Error::InvalidInput("market has no colleges".into()));
        }
        if self.lottery.len() != self.students.len() {
            return Err(Error::InvalidInput(format!(
                "lottery has {} entries for {} students",
                self.lottery.len(),
                self.students.len()
            )));
        }
        for (k, col) in self.colleges.iter().enumerate() {
            if col.capacity == 0 {
                return Err(Error::InvalidInput(format!("college {} has zero capacity", k + 1)));
            }
            if col.attributes.len() != self.attribute_names.len() {
                return Err(Error::InvalidInput(format!(
                    "college {} has {} attributes, header declares {}",
                    k + 1,
                    col.attributes.len(),
                    self.attribute_names.len()
                )));
            }
        }
        for (i, s) in self.students.iter().enumerate() {
            if s.y.len() != n_c || s.w.len() != n_c || s.z.len() != self.d_z() {
                return Err(Error::InvalidInput(format!(
                    "student {} covariate dimensions ({}, {}, {}) do not match ({n_c}, {n_c}, {})",
                    i,
                    s.y.len(),
                    s.w.len(),
                    s.z.len(),
                    self.d_z()
                )));
            }
            if s.y.iter().chain(&s.w).chain(&s.z).any(|x| !x.is_finite()) {
                return Err(Error::InvalidInput(format!("student {i} has a non-finite covariate")));
            }
        }
        Ok(())
    }
}

/// Latent utilities of both sides.
///
/// `u(i, c)` for `c in 0..=C` includes the outside option column; `v(c, i)`
/// for `c in 1..=C` is college `c`'s valuation of student `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentUtilities {
    n_students: usize,
    n_colleges: usize,
    student_u: Vec<f64>,
    college_v: Vec<f64>,
}

impl LatentUtilities {
    pub fn zeros(n_students: usize, n_colleges: usize) -> Self {
        LatentUtilities {
            n_students,
            n_colleges,
            student_u: vec![0.0; n_students * (n_colleges + 1)],
            college_v: vec![0.0; n_colleges * n_students],
        }
    }

    /// `student_u` is row-major `n × (C+1)`, `college_v` row-major `C × n`.
    pub fn from_parts(
        n_students: usize,
        n_colleges: usize,
        student_u: Vec<f64>,
        college_v: Vec<f64>,
    ) -> Result<Self> {
        if student_u.len() != n_students * (n_colleges + 1) || college_v.len() != n_colleges * n_students {
            return Err(Error::InvalidInput("latent utility matrices have wrong size".into()));
        }
        Ok(LatentUtilities {
            n_students,
            n_colleges,
            student_u,
            college_v,
        })
    }

    pub fn n_students(&self) -> usize {
        self.n_students
    }

    pub fn n_colleges(&self) -> usize {
        self.n_colleges
    }

    #[inline]
    pub fn u(&self, i: usize, c: usize) -> f64 {
        self.student_u[i * (self.n_colleges + 1) + c]
    }

    #[inline]
    pub fn set_u(&mut self, i: usize, c: usize, value: f64) {
        self.student_u[i * (self.n_colleges + 1) + c] = value;
    }

    #[inline]
    pub fn v(&self, c: usize, i: usize) -> f64 {
        self.college_v[(c - 1) * self.n_students + i]
    }

    #[inline]
    pub fn set_v(&mut self, c: usize, i: usize, value: f64) {
        self.college_v[(c - 1) * self.n_students + i] = value;
    }

    pub fn student_row(&self, i: usize) -> &[f64] {
        let w = self.n_colleges + 1;
        &self.student_u[i * w..(i + 1) * w]
    }

    pub fn college_row(&self, c: usize) -> &[f64] {
        &self.college_v[(c - 1) * self.n_students..c * self.n_students]
    }

    pub fn student_u(&self) -> &[f64] {
        &self.student_u
    }

    pub fn college_v(&self) -> &[f64] {
        &self.college_v
    }

    pub fn all_finite(&self) -> bool {
        self.student_u.iter().chain(&self.college_v).all(|x| x.is_finite())
    }

    pub(crate) fn check_against(&self, market: &Market) -> Result<()> {
        if self.n_students != market.n_students() || self.n_colleges != market.n_colleges() {
            return Err(Error::InvalidInput(format!(
                "utilities are {}×{} but market has {} students and {} colleges",
                self.n_students,
                self.n_colleges,
                market.n_students(),
                market.n_colleges()
            )));
        }
        if let Some(pos) = self.student_u.iter().chain(&self.college_v).position(|x| x.is_nan()) {
            return Err(Error::InvalidInput(format!("NaN utility at flat position {pos}")));
        }
        Ok(())
    }

    /// Score college `c` uses to rank student `i`: its utility when selecting,
    /// the market lottery otherwise.
    #[inline]
    pub fn priority_score(&self, market: &Market, c: usize, i: usize) -> f64 {
        if market.colleges[c - 1].school_type.is_selecting() {
            self.v(c, i)
        } else {
            market.lottery[i]
        }
    }
}

/// A matching with its cutoff vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matching {
    /// `assignment[i]` is in `0..=C`, `0` meaning unmatched.
    pub assignment: Vec<usize>,
    /// `cutoffs[c - 1]` is college `c`'s cutoff.
    pub cutoffs: Vec<Cutoff>,
    /// Set when an exact tie had to be broken by agent order.
    pub non_generic: bool,
}

impl Matching {
    pub fn counts(&self, n_colleges: usize) -> Vec<usize> {
        assignment_counts(&self.assignment, n_colleges)
    }

    /// Students matched to college `c`.
    pub fn members(&self, c: usize) -> impl Iterator<Item = usize> + '_ {
        self.assignment
            .iter()
            .enumerate()
            .filter(move |(_, &a)| a == c)
            .map(|(i, _)| i)
    }

    /// Per-college binding status: matched count equals capacity.
    pub fn binding(&self, market: &Market) -> Vec<bool> {
        let counts = self.counts(market.n_colleges());
        (1..=market.n_colleges())
            .map(|c| counts[c] == market.capacity(c))
            .collect()
    }
}

/// `counts[c]` for `c in 0..=C`.
pub fn assignment_counts(assignment: &[usize], n_colleges: usize) -> Vec<usize> {
    let mut counts = vec![0; n_colleges + 1];
    for &a in assignment {
        counts[a] += 1;
    }
    counts
}

pub(crate) fn check_assignment(market: &Market, assignment: &[usize]) -> Result<()> {
    if assignment.len() != market.n_students() {
        return Err(Error::InvalidInput(format!(
            "assignment has {} entries for {} students",
            assignment.len(),
            market.n_students()
        )));
    }
    if let Some(i) = assignment.iter().position(|&a| a > market.n_colleges()) {
        return Err(Error::InvalidInput(format!(
            "student {i} assigned to unknown college {}",
            assignment[i]
        )));
    }
    Ok(())
}
