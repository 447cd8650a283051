use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{Gender, LatentUtilities, Market, SchoolType};

/// Set of colleges a term or scale applies to.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Scope {
    All,
    Type(SchoolType),
    /// College number `1..=C`.
    College(usize),
}

impl Scope {
    pub fn applies(&self, market: &Market, c: usize) -> bool {
        match self {
            Scope::All => true,
            Scope::Type(t) => market.college(c).school_type == *t,
            Scope::College(k) => *k == c,
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scope::All => f.write_str("all"),
            Scope::Type(t) => write!(f, "type:{}", t.as_str()),
            Scope::College(c) => write!(f, "college:{c}"),
        }
    }
}

impl TryFrom<String> for Scope {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        let s = s.trim();
        if s == "all" {
            return Ok(Scope::All);
        }
        if let Some(t) = s.strip_prefix("type:") {
            return SchoolType::parse(t).map(Scope::Type).ok_or(format!("unknown school type `{t}`"));
        }
        if let Some(c) = s.strip_prefix("college:") {
            return match c.parse::<usize>() {
                Ok(k) if k > 0 => Ok(Scope::College(k)),
                _ => Err(format!("bad college number `{c}`")),
            };
        }
        Err(format!("unknown scope `{s}`"))
    }
}

impl From<Scope> for String {
    fn from(s: Scope) -> String {
        s.to_string()
    }
}

/// One linear term `coefficient × variable [× interaction]`.
///
/// Variables are `y` and `w` (the college-specific shifters), any name in
/// [`Market::z_names`], any college attribute in
/// [`Market::attribute_names`], `one`, `female`, `male`, or `tag:<name>`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Term {
    pub variable: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interaction: Option<String>,
    pub coefficient: String,
    #[serde(default = "scope_all")]
    pub scope: Scope,
}

fn scope_all() -> Scope {
    Scope::All
}

impl Term {
    pub fn new(variable: &str, coefficient: &str, scope: Scope) -> Term {
        Term {
            variable: variable.into(),
            interaction: None,
            coefficient: coefficient.into(),
            scope,
        }
    }

    pub fn interacted(variable: &str, interaction: &str, coefficient: &str, scope: Scope) -> Term {
        Term {
            interaction: Some(interaction.into()),
            ..Term::new(variable, coefficient, scope)
        }
    }
}

/// A free standard deviation for student shocks at the colleges in scope.
/// Colleges outside every scale keep unit variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleTerm {
    pub name: String,
    pub scope: Scope,
}

/// Declarative description of student utilities and college valuations.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmpiricalSpec {
    #[serde(default)]
    pub student: Vec<Term>,
    #[serde(default)]
    pub college: Vec<Term>,
    #[serde(default)]
    pub scales: Vec<ScaleTerm>,
}

impl EmpiricalSpec {
    /// `u_ic = β^d_c y_ic + β^s_c s_i + β^z_c z_i + ε_ic` and
    /// `v_ci = γ^w_c w_ic + γ^m_c m_i + γ^z_c z_i + η_ci`, with a free
    /// shock scale at the last college. Requires `z = (s, z, m)`.
    pub fn benchmark(n_colleges: usize) -> EmpiricalSpec {
        let per_college = |var: &str, prefix: &str| {
            (1..=n_colleges)
                .map(|c| Term::new(var, &format!("{prefix}_{c}"), Scope::College(c)))
                .collect::<Vec<_>>()
        };
        EmpiricalSpec {
            student: [per_college("y", "beta_d"), per_college("s", "beta_s"), per_college("z", "beta_z")].concat(),
            college: [
                per_college("w", "gamma_w"),
                per_college("m", "gamma_m"),
                per_college("z", "gamma_z"),
            ]
            .concat(),
            scales: vec![ScaleTerm {
                name: "sigma_eps".into(),
                scope: Scope::College(n_colleges),
            }],
        }
    }

    pub fn n_student_coefficients(&self) -> usize {
        self.student.len()
    }

    pub fn n_coefficients(&self) -> usize {
        self.student.len() + self.college.len()
    }

    /// Coefficient names (student then college) followed by scale names.
    pub fn parameter_names(&self) -> Vec<String> {
        self.student
            .iter()
            .chain(&self.college)
            .map(|t| t.coefficient.clone())
            .chain(self.scales.iter().map(|s| s.name.clone()))
            .collect()
    }

    pub fn n_parameters(&self) -> usize {
        self.n_coefficients() + self.scales.len()
    }

    /// Resolves every variable against the market.
    pub fn compile(&self, market: &Market) -> Result<CompiledSpec> {
        let mut seen = BTreeSet::new();
        for name in self.parameter_names() {
            if !seen.insert(name.clone()) {
                return Err(Error::schema("spec", format!("parameter `{name}` declared twice")));
            }
        }
        let resolve_terms = |terms: &[Term], side: &str| -> Result<Vec<ResolvedTerm>> {
            terms
                .iter()
                .enumerate()
                .map(|(k, t)| {
                    let loc = format!("{side} term {} ({})", k + 1, t.coefficient);
                    check_scope(&t.scope, market, &loc)?;
                    Ok(ResolvedTerm {
                        base: Var::resolve(&t.variable, market).map_err(|m| Error::schema(&loc, m))?,
                        interaction: t
                            .interaction
                            .as_deref()
                            .map(|v| Var::resolve(v, market).map_err(|m| Error::schema(&loc, m)))
                            .transpose()?,
                        scope: t.scope.clone(),
                    })
                })
                .collect()
        };
        let student = resolve_terms(&self.student, "student")?;
        let college = resolve_terms(&self.college, "college")?;
        let mut scale_of = vec![None; market.n_colleges()];
        for (g, s) in self.scales.iter().enumerate() {
            check_scope(&s.scope, market, &format!("scale {}", s.name))?;
            for (c, slot) in scale_of.iter_mut().enumerate() {
                if s.scope.applies(market, c + 1) {
                    if slot.is_some() {
                        return Err(Error::schema(
                            format!("scale {}", s.name),
                            format!("college {} already has a scale", c + 1),
                        ));
                    }
                    *slot = Some(g);
                }
            }
        }
        Ok(CompiledSpec {
            student,
            college,
            scale_of,
            n_scales: self.scales.len(),
        })
    }
}

fn check_scope(scope: &Scope, market: &Market, loc: &str) -> Result<()> {
    match scope {
        Scope::College(c) if *c > market.n_colleges() => {
            Err(Error::schema(loc, format!("college {c} does not exist")))
        }
        _ => Ok(()),
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Var {
    Y,
    W,
    Z(usize),
    Attribute(usize),
    One,
    Gender(Gender),
    Tag(String),
}

impl Var {
    fn resolve(name: &str, market: &Market) -> std::result::Result<Var, String> {
        Ok(match name {
            "y" => Var::Y,
            "w" => Var::W,
            "one" => Var::One,
            "female" => Var::Gender(Gender::Female),
            "male" => Var::Gender(Gender::Male),
            _ => {
                if let Some(tag) = name.strip_prefix("tag:") {
                    Var::Tag(tag.to_string())
                } else if let Some(k) = market.z_index(name) {
                    Var::Z(k)
                } else if let Some(a) = market.attribute_index(name) {
                    Var::Attribute(a)
                } else {
                    return Err(format!("unknown variable `{name}`"));
                }
            }
        })
    }

    #[inline]
    fn value(&self, market: &Market, i: usize, c: usize) -> f64 {
        let s = &market.students[i];
        match self {
            Var::Y => s.y[c - 1],
            Var::W => s.w[c - 1],
            Var::Z(k) => s.z[*k],
            Var::Attribute(a) => market.college(c).attributes[*a],
            Var::One => 1.0,
            Var::Gender(g) => f64::from(u8::from(s.gender == Some(*g))),
            Var::Tag(t) => f64::from(u8::from(s.has_tag(t))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ResolvedTerm {
    base: Var,
    interaction: Option<Var>,
    scope: Scope,
}

impl ResolvedTerm {
    fn value(&self, market: &Market, i: usize, c: usize) -> f64 {
        let v = self.base.value(market, i, c);
        match &self.interaction {
            Some(x) => v * x.value(market, i, c),
            None => v,
        }
    }
}

/// An [`EmpiricalSpec`] bound to one market.
#[derive(Clone, Debug, PartialEq)]
pub struct CompiledSpec {
    student: Vec<ResolvedTerm>,
    college: Vec<ResolvedTerm>,
    scale_of: Vec<Option<usize>>,
    n_scales: usize,
}

/// Sparse design rows for one side, one row per `(i, c)` pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Design {
    pub n_students: usize,
    pub n_colleges: usize,
    pub n_coefficients: usize,
    /// Row `i * C + (c - 1)` spans `entries[offsets[r]..offsets[r + 1]]`.
    offsets: Vec<usize>,
    entries: Vec<(u32, f64)>,
}

impl Design {
    #[inline]
    pub fn row(&self, i: usize, c: usize) -> &[(u32, f64)] {
        let r = i * self.n_colleges + c - 1;
        &self.entries[self.offsets[r]..self.offsets[r + 1]]
    }

    /// `x_ic' θ` for a coefficient block `θ`.
    #[inline]
    pub fn index(&self, i: usize, c: usize, theta: &[f64]) -> f64 {
        self.row(i, c).iter().map(|&(k, x)| x * theta[k as usize]).sum()
    }
}

impl CompiledSpec {
    pub fn n_student_coefficients(&self) -> usize {
        self.student.len()
    }

    pub fn n_college_coefficients(&self) -> usize {
        self.college.len()
    }

    pub fn n_scales(&self) -> usize {
        self.n_scales
    }

    /// Scale group of college `c`, if its student shocks have a free scale.
    pub fn scale_of(&self, c: usize) -> Option<usize> {
        self.scale_of[c - 1]
    }

    /// Student-side design. Terms only fill rows of colleges in scope.
    pub fn student_design(&self, market: &Market) -> Design {
        build_design(market, &self.student, |_| true)
    }

    /// College-side design. Non-selecting colleges get empty rows.
    pub fn college_design(&self, market: &Market) -> Design {
        build_design(market, &self.college, |c| market.college(c).school_type.is_selecting())
    }

    /// Shock standard deviation of student utilities at college `c`.
    pub fn shock_sd(&self, c: usize, scales: &[f64]) -> f64 {
        self.scale_of(c).map_or(1.0, |g| scales[g])
    }
}

fn build_design(market: &Market, terms: &[ResolvedTerm], enabled: impl Fn(usize) -> bool) -> Design {
    let n = market.n_students();
    let n_c = market.n_colleges();
    let mut offsets = Vec::with_capacity(n * n_c + 1);
    let mut entries = Vec::new();
    offsets.push(0);
    for i in 0..n {
        for c in 1..=n_c {
            if enabled(c) {
                for (k, t) in terms.iter().enumerate() {
                    if t.scope.applies(market, c) {
                        entries.push((k as u32, t.value(market, i, c)));
                    }
                }
            }
            offsets.push(entries.len());
        }
    }
    Design {
        n_students: n,
        n_colleges: n_c,
        n_coefficients: terms.len(),
        offsets,
        entries,
    }
}

/// Evaluates the linear indices and adds `shocks`, which must already carry
/// their scale. Non-selecting colleges value every student at zero.
pub fn build_utilities(
    spec: &EmpiricalSpec,
    market: &Market,
    coefficients: &[f64],
    shocks: &LatentUtilities,
) -> Result<LatentUtilities> {
    if coefficients.len() != spec.n_coefficients() {
        return Err(Error::InvalidInput(format!(
            "spec has {} coefficients, got {}",
            spec.n_coefficients(),
            coefficients.len()
        )));
    }
    shocks.check_against(market)?;
    let compiled = spec.compile(market)?;
    let (beta, gamma) = coefficients.split_at(spec.n_student_coefficients());
    let sd = compiled.student_design(market);
    let cd = compiled.college_design(market);
    let mut out = shocks.clone();
    for i in 0..market.n_students() {
        for c in 1..=market.n_colleges() {
            out.set_u(i, c, sd.index(i, c, beta) + shocks.u(i, c));
            let v = if market.college(c).school_type.is_selecting() {
                cd.index(i, c, gamma) + shocks.v(c, i)
            } else {
                0.0
            };
            out.set_v(c, i, v);
        }
    }
    Ok(out)
}
