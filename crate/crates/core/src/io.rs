//! CSV market tables, schema sidecars, run configuration and result writers.
//!
//! Reals are written with 17 significant digits so every value survives a
//! save/load cycle bit for bit.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bayes::{GibbsConfig, PosteriorChain};
use crate::counterfactual::{CounterfactualConfig, PriorityPolicy};
use crate::dgp::{DgpConfig, EmpiricalSpec};
use crate::error::{Error, Result};
use crate::market::{
    assignment_counts, CollegeRecord, Cutoff, Gender, LatentUtilities, Market, SchoolType, StudentRecord,
};
use crate::modelfit::FitConfig;
use crate::montecarlo::McConfig;
use crate::semiparam::KernelConfig;

pub const STUDENTS_FILE: &str = "students.csv";
pub const SCHOOLS_FILE: &str = "schools.csv";
pub const SCHEMA_FILE: &str = "schema.toml";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";

/// Formats a real with 17 significant digits.
pub fn fmt_real(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else if x.is_nan() {
        "nan".into()
    } else if x > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

/// Column roles of the student table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentColumns {
    pub id: String,
    /// Shared covariates, in order.
    pub z: Vec<String>,
    /// `{y_prefix}{c}` holds the demand shifter for college `c`.
    pub y_prefix: String,
    pub w_prefix: String,
    pub matched_school: String,
    pub gender: String,
    /// Semicolon-separated tags.
    pub tags: String,
    pub lottery: String,
}

impl Default for StudentColumns {
    fn default() -> Self {
        StudentColumns {
            id: "id".into(),
            z: vec![],
            y_prefix: "y_".into(),
            w_prefix: "w_".into(),
            matched_school: "matched_school_id".into(),
            gender: "gender".into(),
            tags: "tags".into(),
            lottery: "lottery".into(),
        }
    }
}

/// Column roles of the school table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchoolColumns {
    pub id: String,
    pub school_type: String,
    pub capacity: String,
    pub attributes: Vec<String>,
    pub gender_restriction: String,
}

impl Default for SchoolColumns {
    fn default() -> Self {
        SchoolColumns {
            id: "id".into(),
            school_type: "type".into(),
            capacity: "capacity".into(),
            attributes: vec![],
            gender_restriction: "gender_restriction".into(),
        }
    }
}

/// Schema sidecar. Gender, tag and lottery columns are optional in the
/// files; every other named column is required.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSchema {
    pub students: StudentColumns,
    pub schools: SchoolColumns,
}

impl DataSchema {
    pub fn for_market(market: &Market) -> Self {
        DataSchema {
            students: StudentColumns {
                z: market.z_names.clone(),
                ..StudentColumns::default()
            },
            schools: SchoolColumns {
                attributes: market.attribute_names.clone(),
                ..SchoolColumns::default()
            },
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::schema(path.display().to_string(), e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }
}

/// A market read from disk together with its observed matching.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedMarket {
    pub market: Market,
    /// 0 is the outside option, otherwise the 1-based college position.
    pub observed: Vec<usize>,
    pub binding: Vec<bool>,
    pub excess_demand: bool,
}

struct Table {
    file: String,
    headers: Vec<String>,
    rows: Vec<csv::StringRecord>,
    index: HashMap<String, usize>,
}

impl Table {
    fn read(path: &Path) -> Result<Table> {
        let file = path.display().to_string();
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
        let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let mut index = HashMap::new();
        for (k, h) in headers.iter().enumerate() {
            if index.insert(h.clone(), k).is_some() {
                return Err(Error::schema(format!("{file} header"), format!("duplicate column `{h}`")));
            }
        }
        let rows = rdr.records().collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Table {
            file,
            headers,
            rows,
            index,
        })
    }

    fn column(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::schema(format!("{} header", self.file), format!("missing column `{name}`")))
    }

    fn optional(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Data rows are numbered from 1, the header being row 0.
    fn err(&self, row: usize, col: usize, message: impl Into<String>) -> Error {
        Error::schema(
            format!("{} row {} column `{}`", self.file, row + 1, self.headers[col]),
            message,
        )
    }

    fn cell(&self, row: usize, col: usize) -> &str {
        self.rows[row].get(col).unwrap_or("")
    }

    fn parse<T: std::str::FromStr>(&self, row: usize, col: usize, what: &str) -> Result<T> {
        let s = self.cell(row, col);
        s.parse()
            .map_err(|_| self.err(row, col, format!("cannot parse `{s}` as {what}")))
    }

    fn real(&self, row: usize, col: usize) -> Result<f64> {
        let x: f64 = self.parse(row, col, "a real number")?;
        if !x.is_finite() {
            return Err(self.err(row, col, "value must be finite"));
        }
        Ok(x)
    }

    fn gender(&self, row: usize, col: Option<usize>) -> Result<Option<Gender>> {
        let Some(col) = col else { return Ok(None) };
        match self.cell(row, col) {
            "" => Ok(None),
            s => Gender::parse(s)
                .map(Some)
                .ok_or_else(|| self.err(row, col, format!("unknown gender `{s}`"))),
        }
    }
}

fn load_schools(path: &Path, cols: &SchoolColumns) -> Result<(Vec<CollegeRecord>, Vec<String>)> {
    let t = Table::read(path)?;
    let id = t.column(&cols.id)?;
    let kind = t.column(&cols.school_type)?;
    let capacity = t.column(&cols.capacity)?;
    let attrs = cols
        .attributes
        .iter()
        .map(|a| t.column(a))
        .collect::<Result<Vec<_>>>()?;
    let restriction = t.optional(&cols.gender_restriction);
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(t.rows.len());
    for r in 0..t.rows.len() {
        let sid: u64 = t.parse(r, id, "an unsigned integer id")?;
        if sid == 0 {
            return Err(t.err(r, id, "school id 0 is reserved for the outside option"));
        }
        if !seen.insert(sid) {
            return Err(t.err(r, id, format!("duplicate school id {sid}")));
        }
        let s = t.cell(r, kind);
        let school_type = SchoolType::parse(s).ok_or_else(|| t.err(r, kind, format!("unknown school type `{s}`")))?;
        let cap: usize = t.parse(r, capacity, "a non-negative capacity")?;
        if cap == 0 {
            return Err(t.err(r, capacity, "capacity must be positive"));
        }
        out.push(CollegeRecord {
            id: sid,
            capacity: cap,
            school_type,
            attributes: attrs.iter().map(|&a| t.real(r, a)).collect::<Result<_>>()?,
            gender_restriction: t.gender(r, restriction)?,
        });
    }
    if out.is_empty() {
        return Err(Error::schema(t.file, "no schools"));
    }
    Ok((out, cols.attributes.clone()))
}

/// Reads the student and school tables and validates the observed matching.
pub fn load_market(students: &Path, schools: &Path, schema: &DataSchema) -> Result<LoadedMarket> {
    let (colleges, attribute_names) = load_schools(schools, &schema.schools)?;
    let n_c = colleges.len();
    let position: HashMap<u64, usize> = colleges.iter().enumerate().map(|(k, c)| (c.id, k + 1)).collect();

    let cols = &schema.students;
    let t = Table::read(students)?;
    let id = t.column(&cols.id)?;
    let ys = (1..=n_c)
        .map(|c| t.column(&format!("{}{c}", cols.y_prefix)))
        .collect::<Result<Vec<_>>>()?;
    let ws = (1..=n_c)
        .map(|c| t.column(&format!("{}{c}", cols.w_prefix)))
        .collect::<Result<Vec<_>>>()?;
    let zs = cols.z.iter().map(|z| t.column(z)).collect::<Result<Vec<_>>>()?;
    let matched = t.column(&cols.matched_school)?;
    let gender = t.optional(&cols.gender);
    let tags = t.optional(&cols.tags);
    let lottery_col = t.optional(&cols.lottery);

    let mut seen = BTreeSet::new();
    let mut records = Vec::with_capacity(t.rows.len());
    let mut observed = Vec::with_capacity(t.rows.len());
    let mut lottery = Vec::with_capacity(t.rows.len());
    for r in 0..t.rows.len() {
        let sid: u64 = t.parse(r, id, "an unsigned integer id")?;
        if !seen.insert(sid) {
            return Err(t.err(r, id, format!("duplicate student id {sid}")));
        }
        let m: u64 = t.parse(r, matched, "a school id")?;
        let a = if m == 0 {
            0
        } else {
            *position
                .get(&m)
                .ok_or_else(|| t.err(r, matched, format!("unknown school id {m}")))?
        };
        observed.push(a);
        if let Some(col) = lottery_col {
            lottery.push(t.real(r, col)?);
        }
        records.push(StudentRecord {
            id: sid,
            y: ys.iter().map(|&c| t.real(r, c)).collect::<Result<_>>()?,
            w: ws.iter().map(|&c| t.real(r, c)).collect::<Result<_>>()?,
            z: zs.iter().map(|&c| t.real(r, c)).collect::<Result<_>>()?,
            gender: t.gender(r, gender)?,
            tags: tags.map_or_else(BTreeSet::new, |c| {
                t.cell(r, c)
                    .split(';')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::to_string)
                    .collect()
            }),
        });
    }
    let market = Market::new(
        records,
        colleges,
        cols.z.clone(),
        attribute_names,
        lottery_col.map(|_| lottery),
    )?;
    let counts = assignment_counts(&observed, n_c);
    for c in 1..=n_c {
        if counts[c] > market.capacity(c) {
            return Err(Error::Data(format!(
                "school {} has {} matched students for {} seats",
                market.college(c).id,
                counts[c],
                market.capacity(c)
            )));
        }
    }
    if let Some(i) = (0..market.n_students()).find(|&i| observed[i] != 0 && !market.admissible(i, observed[i])) {
        return Err(Error::Data(format!(
            "student {} is matched to school {}, which does not admit them",
            market.students[i].id,
            market.college(observed[i]).id
        )));
    }
    let binding = (1..=n_c).map(|c| counts[c] == market.capacity(c)).collect();
    let excess_demand = market.has_excess_demand();
    Ok(LoadedMarket {
        market,
        observed,
        binding,
        excess_demand,
    })
}

/// Loads `students.csv`, `schools.csv` and `schema.toml` from a directory.
pub fn load_market_dir(dir: &Path) -> Result<LoadedMarket> {
    let schema = DataSchema::load(&dir.join(SCHEMA_FILE))?;
    load_market(&dir.join(STUDENTS_FILE), &dir.join(SCHOOLS_FILE), &schema)
}

/// Writes both tables with the default column names of
/// [`DataSchema::for_market`]. `observed` uses college positions.
pub fn save_market(students: &Path, schools: &Path, market: &Market, observed: &[usize]) -> Result<()> {
    crate::market::check_assignment(market, observed)?;
    let schema = DataSchema::for_market(market);
    let n_c = market.n_colleges();

    let mut w = csv::Writer::from_path(schools)?;
    let sc = &schema.schools;
    let mut header = vec![sc.id.clone(), sc.school_type.clone(), sc.capacity.clone()];
    header.extend(sc.attributes.iter().cloned());
    header.push(sc.gender_restriction.clone());
    w.write_record(&header)?;
    for c in &market.colleges {
        let mut row = vec![c.id.to_string(), c.school_type.as_str().into(), c.capacity.to_string()];
        row.extend(c.attributes.iter().map(|&x| fmt_real(x)));
        row.push(c.gender_restriction.map_or(String::new(), |g| g.as_str().into()));
        w.write_record(&row)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(students)?;
    let st = &schema.students;
    let mut header = vec![st.id.clone()];
    header.extend(st.z.iter().cloned());
    header.extend((1..=n_c).map(|c| format!("{}{c}", st.y_prefix)));
    header.extend((1..=n_c).map(|c| format!("{}{c}", st.w_prefix)));
    header.extend([
        st.matched_school.clone(),
        st.gender.clone(),
        st.tags.clone(),
        st.lottery.clone(),
    ]);
    w.write_record(&header)?;
    for (i, s) in market.students.iter().enumerate() {
        let mut row = vec![s.id.to_string()];
        row.extend(s.z.iter().chain(&s.y).chain(&s.w).map(|&x| fmt_real(x)));
        let a = observed[i];
        row.push(if a == 0 { "0".into() } else { market.college(a).id.to_string() });
        row.push(s.gender.map_or(String::new(), |g| g.as_str().into()));
        row.push(s.tags.iter().cloned().collect::<Vec<_>>().join(";"));
        row.push(fmt_real(market.lottery[i]));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the tables and schema sidecar into `dir`.
pub fn save_market_dir(dir: &Path, market: &Market, observed: &[usize]) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_market(&dir.join(STUDENTS_FILE), &dir.join(SCHOOLS_FILE), market, observed)?;
    DataSchema::for_market(market).save(&dir.join(SCHEMA_FILE))
}

/// Header plus rows of already formatted cells.
pub fn write_table(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

/// One row per school: id, seats, enrollment, binding flag and cutoff.
pub fn write_cutoffs(path: &Path, market: &Market, assignment: &[usize], cutoffs: &[Cutoff]) -> Result<()> {
    let counts = assignment_counts(assignment, market.n_colleges());
    let rows = (1..=market.n_colleges())
        .map(|c| {
            vec![
                market.college(c).id.to_string(),
                market.capacity(c).to_string(),
                counts[c].to_string(),
                (counts[c] == market.capacity(c)).to_string(),
                match cutoffs[c - 1] {
                    Cutoff::Finite(x) => fmt_real(x),
                    other => other.to_string(),
                },
            ]
        })
        .collect::<Vec<_>>();
    let header = ["school_id", "capacity", "enrolled", "binding", "cutoff"].map(String::from);
    write_table(path, &header, &rows)
}

/// `parameter,value` rows.
pub fn write_parameters(path: &Path, names: &[String], values: &[f64]) -> Result<()> {
    let rows: Vec<Vec<String>> = names.iter().zip(values).map(|(n, &v)| vec![n.clone(), fmt_real(v)]).collect();
    write_table(path, &["parameter".into(), "value".into()], &rows)
}

/// One column per parameter, one row per kept draw.
pub fn write_chain(path: &Path, chain: &PosteriorChain) -> Result<()> {
    let rows: Vec<Vec<String>> = (0..chain.n_draws())
        .map(|k| chain.draw(k).iter().map(|&x| fmt_real(x)).collect())
        .collect();
    write_table(path, &chain.parameter_names, &rows)
}

/// Parameter names and row-major draws from a file written by [`write_chain`].
pub fn read_chain(path: &Path) -> Result<(Vec<String>, Vec<f64>)> {
    let t = Table::read(path)?;
    let mut draws = Vec::with_capacity(t.rows.len() * t.headers.len());
    for r in 0..t.rows.len() {
        for c in 0..t.headers.len() {
            draws.push(t.parse(r, c, "a real number")?);
        }
    }
    Ok((t.headers, draws))
}

/// Latent utilities, one row per student: `u_0..u_C` then `v_1..v_C`.
pub fn write_utilities(path: &Path, market: &Market, utilities: &LatentUtilities) -> Result<()> {
    utilities.check_against(market)?;
    let n_c = market.n_colleges();
    let mut header = vec!["id".to_string()];
    header.extend((0..=n_c).map(|c| format!("u_{c}")));
    header.extend((1..=n_c).map(|c| format!("v_{c}")));
    let rows: Vec<Vec<String>> = (0..market.n_students())
        .map(|i| {
            let mut row = vec![market.students[i].id.to_string()];
            row.extend((0..=n_c).map(|c| fmt_real(utilities.u(i, c))));
            row.extend((1..=n_c).map(|c| fmt_real(utilities.v(c, i))));
            row
        })
        .collect();
    write_table(path, &header, &rows)
}

/// Reads a file written by [`write_utilities`]; rows must follow the
/// market's student order.
pub fn read_utilities(path: &Path, market: &Market) -> Result<LatentUtilities> {
    let t = Table::read(path)?;
    let n = market.n_students();
    let n_c = market.n_colleges();
    if t.rows.len() != n {
        return Err(Error::schema(&t.file, format!("{} rows for {n} students", t.rows.len())));
    }
    let id = t.column("id")?;
    let us = (0..=n_c).map(|c| t.column(&format!("u_{c}"))).collect::<Result<Vec<_>>>()?;
    let vs = (1..=n_c).map(|c| t.column(&format!("v_{c}"))).collect::<Result<Vec<_>>>()?;
    let mut u = Vec::with_capacity(n * (n_c + 1));
    let mut v = vec![0.0; n * n_c];
    for r in 0..n {
        let sid: u64 = t.parse(r, id, "an unsigned integer id")?;
        if sid != market.students[r].id {
            return Err(t.err(r, id, format!("expected student {}", market.students[r].id)));
        }
        for &c in &us {
            u.push(t.real(r, c)?);
        }
        for (k, &c) in vs.iter().enumerate() {
            v[k * n + r] = t.real(r, c)?;
        }
    }
    LatentUtilities::from_parts(n, n_c, u, v)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    /// Student tag that earns priority.
    pub flag: String,
    /// School types applying the priority.
    pub scope: Vec<SchoolType>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            flag: "low_income".into(),
            scope: SchoolType::ALL.to_vec(),
        }
    }
}

impl PolicyConfig {
    pub fn policy(&self) -> PriorityPolicy {
        PriorityPolicy::new(&self.flag, self.scope.iter().copied())
    }
}

/// Every configurable setting of a run. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Overrides the seeds of every section when set.
    pub seed: Option<u64>,
    pub output_dir: PathBuf,
    pub verbosity: u8,
    pub dgp: DgpConfig,
    /// Utility specification; the benchmark specification when absent.
    pub spec: Option<EmpiricalSpec>,
    pub kernel: KernelConfig,
    pub gibbs: GibbsConfig,
    pub counterfactual: CounterfactualConfig,
    pub policy: PolicyConfig,
    pub fit: FitConfig,
    pub mc: McConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            output_dir: PathBuf::from("out"),
            verbosity: 1,
            dgp: DgpConfig::default(),
            spec: None,
            kernel: KernelConfig::default(),
            gibbs: GibbsConfig::default(),
            counterfactual: CounterfactualConfig::default(),
            policy: PolicyConfig::default(),
            fit: FitConfig::default(),
            mc: McConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Pushes the global seed into every section and fills in the model specification.
    pub fn resolved(mut self) -> Self {
        if let Some(seed) = self.seed {
            self.dgp.seed = seed;
            self.gibbs.seed = seed;
            self.counterfactual.seed = seed;
            self.fit.seed = seed;
            self.mc.seed = seed;
        }
        if self.spec.is_none() {
            self.spec = Some(EmpiricalSpec::benchmark(self.dgp.n_colleges()));
        }
        self
    }

    pub fn spec(&self) -> EmpiricalSpec {
        self.spec
            .clone()
            .unwrap_or_else(|| EmpiricalSpec::benchmark(self.dgp.n_colleges()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Writes the snapshot that reproduces this run.
    pub fn write_snapshot(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        fs::write(&path, self.to_toml()?)?;
        Ok(path)
    }
}

/// Worker-thread override read by the command-line tool.
pub const THREADS_ENV: &str = "MATCHEST_THREADS";

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::simulate_market;

    fn small_sim() -> crate::dgp::Simulation {
        let cfg = DgpConfig {
            n_students: 60,
            capacities: vec![15, 14, 15],
            ..DgpConfig::benchmark()
        };
        simulate_market(&cfg.with_seed(9)).unwrap()
    }

    #[test]
    fn reals_use_seventeen_digits() {
        assert_eq!(fmt_real(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_real(f64::NEG_INFINITY), "-inf");
        let x = std::f64::consts::PI * 1e-7;
        assert_eq!(fmt_real(x).parse::<f64>().unwrap().to_bits(), x.to_bits());
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut sim = small_sim();
        sim.market.students[0].tags.insert("low_income".into());
        sim.market.students[1].gender = Some(Gender::Female);
        sim.market.colleges[1].school_type = SchoolType::NonSelecting;
        save_market_dir(dir.path(), &sim.market, &sim.matching.assignment).unwrap();
        let loaded = load_market_dir(dir.path()).unwrap();
        assert_eq!(loaded.market, sim.market);
        assert_eq!(loaded.observed, sim.matching.assignment);
        let first = fs::read(dir.path().join(STUDENTS_FILE)).unwrap();
        let again = tempfile::tempdir().unwrap();
        save_market_dir(again.path(), &loaded.market, &loaded.observed).unwrap();
        assert_eq!(first, fs::read(again.path().join(STUDENTS_FILE)).unwrap());
        assert_eq!(
            fs::read(dir.path().join(SCHOOLS_FILE)).unwrap(),
            fs::read(again.path().join(SCHOOLS_FILE)).unwrap()
        );
    }

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn minimal_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let schools = write(dir.path(), "s.csv", "id,type,capacity\n7,selecting-a,1\n");
        let students = write(dir.path(), "t.csv", "id,y_1,w_1,matched_school_id\n1,0.5,1,7\n2,0.25,2,0\n");
        let loaded = load_market(&students, &schools, &DataSchema::default()).unwrap();
        assert!(loaded.excess_demand);
        assert_eq!(loaded.observed, vec![1, 0]);
        assert_eq!(loaded.binding, vec![true]);
        assert_eq!(loaded.market.lottery, vec![0.0, 0.0]);
    }

    #[test]
    fn unknown_school_names_the_row() {
        let dir = tempfile::tempdir().unwrap();
        let schools = write(dir.path(), "s.csv", "id,type,capacity\n7,selecting-a,1\n");
        let students = write(dir.path(), "t.csv", "id,y_1,w_1,matched_school_id\n1,0.5,1,0\n2,0.25,2,8\n");
        let err = load_market(&students, &schools, &DataSchema::default()).unwrap_err();
        match err {
            Error::Schema { location, .. } => {
                assert!(location.contains("row 2"), "{location}");
                assert!(location.contains("matched_school_id"), "{location}");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn schema_errors_point_at_cells() {
        let dir = tempfile::tempdir().unwrap();
        let schools = write(dir.path(), "s.csv", "id,type,capacity\n7,selecting-a,1\n");
        let students = write(dir.path(), "t.csv", "id,y_1,w_1,matched_school_id\n1,abc,1,0\n");
        let err = load_market(&students, &schools, &DataSchema::default()).unwrap_err();
        assert!(err.to_string().contains("row 1 column `y_1`"), "{err}");
        let students = write(dir.path(), "t.csv", "id,y_1,matched_school_id\n1,0,0\n");
        let err = load_market(&students, &schools, &DataSchema::default()).unwrap_err();
        assert!(err.to_string().contains("missing column `w_1`"), "{err}");
        let schools = write(dir.path(), "s.csv", "id,type,capacity\n7,private,1\n");
        let err = load_market(&students, &schools, &DataSchema::default()).unwrap_err();
        assert!(err.to_string().contains("unknown school type"), "{err}");
    }

    #[test]
    fn over_capacity_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let schools = write(dir.path(), "s.csv", "id,type,capacity\n7,selecting-a,1\n");
        let students = write(dir.path(), "t.csv", "id,y_1,w_1,matched_school_id\n1,0,0,7\n2,0,0,7\n3,0,0,0\n");
        assert!(matches!(
            load_market(&students, &schools, &DataSchema::default()),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn utilities_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let sim = small_sim();
        let p = dir.path().join("u.csv");
        write_utilities(&p, &sim.market, &sim.utilities).unwrap();
        assert_eq!(read_utilities(&p, &sim.market).unwrap(), sim.utilities);
    }

    #[test]
    fn chain_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let chain = PosteriorChain {
            parameter_names: vec!["a".into(), "b".into()],
            draws: vec![0.1, -2.0 / 3.0, 1e-300, 7.0],
            chain: 0,
            seed: 0,
            iterations: 2,
            burn_in: 0,
            thin: 1,
            audited_sweeps: 0,
            unstable_sweeps: 0,
        };
        let p = dir.path().join("chain.csv");
        write_chain(&p, &chain).unwrap();
        let (names, draws) = read_chain(&p).unwrap();
        assert_eq!(names, chain.parameter_names);
        assert_eq!(draws, chain.draws);
    }

    #[test]
    fn run_config_rejects_unknown_keys_and_resolves_seed() {
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        assert!(RunConfig::from_toml("[gibbs]\niterationz = 5").is_err());
        let cfg = RunConfig::from_toml("seed = 7\n[gibbs]\niterations = 500\nburn_in = 100\n[dgp]\nn_students = 100\ncapacities = [20, 20, 20]")
            .unwrap()
            .resolved();
        assert_eq!(cfg.gibbs.seed, 7);
        assert_eq!(cfg.dgp.seed, 7);
        assert_eq!(cfg.dgp.beta_d, vec![-1.0; 3]);
        let dir = tempfile::tempdir().unwrap();
        let p = cfg.write_snapshot(dir.path()).unwrap();
        assert_eq!(RunConfig::load(&p).unwrap(), cfg);
    }
}
