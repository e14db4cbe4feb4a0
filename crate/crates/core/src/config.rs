//! Run configuration: nested TOML tables, schema-versioned, unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cell::CellOptions;
use crate::coeff::{families, CoefficientSpec};
use crate::error::{Error, Result};
use crate::experiments::{ExperimentConfig, ExperimentKind};
use crate::pde::{self, SolveOptions};
use crate::quasicell::{self, CutProjectSpec, QuasiOptions};
use crate::scales;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub coefficient: CoefficientSection,
    #[serde(default)]
    pub scales: ScalesSection,
    #[serde(default)]
    pub cell: CellSection,
    #[serde(default)]
    pub quasi: QuasiSection,
    #[serde(default)]
    pub pde: PdeSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<ExperimentConfig>,
    #[serde(default)]
    pub output: OutputSection,
}

/// At most one of `family`, `spec` and `file`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<CoefficientSpec<f64>>,
    /// JSON or TOML file holding a spec.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    /// Slow point for pointwise operations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalesSection {
    /// Expressions in `k`, one per scale.
    #[serde(default)]
    pub entries: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_grid: Option<Vec<f64>>,
    #[serde(default = "d_tail")]
    pub tail_window: usize,
    #[serde(default = "d_scale_tol")]
    pub tol: f64,
}

fn d_tail() -> usize {
    scales::DEFAULT_TAIL_WINDOW
}
fn d_scale_tol() -> f64 {
    scales::DEFAULT_TOL
}

impl Default for ScalesSection {
    fn default() -> Self {
        ScalesSection {
            entries: Vec::new(),
            csv: None,
            k_grid: None,
            tail_window: d_tail(),
            tol: d_scale_tol(),
        }
    }
}

pub type CellSection = CellOptions;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuasiSection {
    /// `golden` or `periodic:<coefficient family>`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<CutProjectSpec<f64>>,
    #[serde(default)]
    pub options: QuasiOptions,
    #[serde(default = "d_rho")]
    pub rho_schedule: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<Vec<f64>>,
}

fn d_rho() -> Vec<f64> {
    quasicell::DEFAULT_RHO_SCHEDULE.to_vec()
}

impl Default for QuasiSection {
    fn default() -> Self {
        QuasiSection {
            family: None,
            spec: None,
            options: QuasiOptions::default(),
            rho_schedule: d_rho(),
            x: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdeSection {
    #[serde(default = "d_intervals")]
    pub intervals: usize,
    /// Scales of the fine problem.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<Vec<f64>>,
    #[serde(default = "d_source")]
    pub source: f64,
    #[serde(default)]
    pub boundary: f64,
    #[serde(default = "d_pde_tol")]
    pub tol: f64,
    #[serde(default = "d_pde_iter")]
    pub max_iter: usize,
    #[serde(default = "d_ppp")]
    pub points_per_period: usize,
    #[serde(default)]
    pub allow_underresolved: bool,
}

fn d_intervals() -> usize {
    128
}
fn d_source() -> f64 {
    1.0
}
fn d_pde_tol() -> f64 {
    1e-10
}
fn d_pde_iter() -> usize {
    20000
}
fn d_ppp() -> usize {
    pde::DEFAULT_POINTS_PER_PERIOD
}

impl Default for PdeSection {
    fn default() -> Self {
        PdeSection {
            intervals: d_intervals(),
            eps: None,
            source: d_source(),
            boundary: 0.0,
            tol: d_pde_tol(),
            max_iter: d_pde_iter(),
            points_per_period: d_ppp(),
            allow_underresolved: false,
        }
    }
}

impl PdeSection {
    pub fn solve_options(&self) -> SolveOptions<f64> {
        SolveOptions {
            tol: self.tol,
            max_iter: self.max_iter,
            points_per_period: self.points_per_period,
            allow_underresolved: self.allow_underresolved,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    /// Parent of the per-run directories.
    #[serde(default = "d_out")]
    pub dir: PathBuf,
    /// Fixed run directory name instead of a timestamp.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

fn d_out() -> PathBuf {
    PathBuf::from("runs")
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: d_out(), name: None }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            coefficient: CoefficientSection::default(),
            scales: ScalesSection::default(),
            cell: CellOptions::default(),
            quasi: QuasiSection::default(),
            pde: PdeSection::default(),
            experiment: None,
            output: OutputSection::default(),
        }
    }
}

/// Parses a command-line value as a TOML value; bare words become strings and
/// comma lists become arrays.
pub fn parse_value(raw: &str) -> toml::Value {
    let attempt = |s: &str| -> Option<toml::Value> {
        let t: toml::Table = toml::from_str(&format!("v = {s}")).ok()?;
        t.get("v").cloned()
    };
    if let Some(v) = attempt(raw) {
        return v;
    }
    if raw.contains(',') {
        if let Some(v) = attempt(&format!("[{raw}]")) {
            return v;
        }
        let items = raw.split(',').map(|s| toml::Value::String(s.trim().to_string()));
        return toml::Value::Array(items.collect());
    }
    toml::Value::String(raw.to_string())
}

/// Sets `section.key[.key…] = value`, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, dotted: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = dotted.split('.').collect();
    if parts.len() < 2 || parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(dotted, "overrides take the form --section.key value"));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(dotted, format!("`{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw));
    Ok(())
}

fn dotted_path(err: &toml::de::Error, text: &str) -> String {
    // toml reports spans rather than key paths; recover the enclosing table header
    let Some(span) = err.span() else {
        return "config".into();
    };
    let head = &text[..span.start.min(text.len())];
    let section = head
        .lines()
        .rev()
        .find_map(|l| l.trim().strip_prefix('[').and_then(|l| l.strip_suffix(']')))
        .unwrap_or("config");
    let key = text[span.clone()].split('=').next().unwrap_or("").trim();
    if key.is_empty() || key.starts_with('[') {
        section.to_string()
    } else {
        format!("{section}.{key}")
    }
}

impl RunConfig {
    /// Parses `text`, applies overrides and, for experiment subcommands, fills
    /// the experiment section from the preset of `kind`.
    pub fn load(text: &str, overrides: &[(String, String)], kind: Option<ExperimentKind>) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::config(dotted_path(&e, text), e.message()))?;
        if !table.contains_key("schema_version") {
            table.insert("schema_version".into(), toml::Value::Integer(SCHEMA_VERSION as i64));
        }
        for (k, v) in overrides {
            apply_override(&mut table, k, v)?;
        }
        if let Some(kind) = kind {
            let user = match table.remove("experiment") {
                Some(toml::Value::Table(t)) => t,
                Some(_) => return Err(Error::config("experiment", "must be a table")),
                None => toml::Table::new(),
            };
            if let Some(k) = user.get("kind") {
                if k.as_str() != Some(kind.name()) {
                    return Err(Error::config(
                        "experiment.kind",
                        format!("config is for {k}, subcommand is {}", kind.name()),
                    ));
                }
            }
            let mut merged = toml::Table::try_from(ExperimentConfig::preset(kind))
                .map_err(|e| Error::config("experiment", e.to_string()))?;
            merged.extend(user);
            table.insert("experiment".into(), toml::Value::Table(merged));
        }
        let rendered = toml::to_string(&table).map_err(|e| Error::config("config", e.to_string()))?;
        let cfg: RunConfig =
            toml::from_str(&rendered).map_err(|e| Error::config(dotted_path(&e, &rendered), e.message()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path, overrides: &[(String, String)], kind: Option<ExperimentKind>) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("--config", format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::load(&text, overrides, kind)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("config", e.to_string()))
    }

    fn check(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, found {}", self.schema_version),
            ));
        }
        let c = &self.coefficient;
        let given = [c.family.is_some(), c.spec.is_some(), c.file.is_some()].iter().filter(|b| **b).count();
        if given > 1 {
            return Err(Error::config("coefficient", "give at most one of family, spec, file"));
        }
        if let Some(f) = &c.family {
            if families::by_name::<f64>(f).is_none() {
                return Err(Error::config(
                    "coefficient.family",
                    format!("unknown family `{f}`; known: {}", families::NAMES.join(", ")),
                ));
            }
        }
        if !self.scales.entries.is_empty() && self.scales.csv.is_some() {
            return Err(Error::config("scales", "give either entries or csv"));
        }
        if self.scales.tail_window < 3 {
            return Err(Error::config("scales.tail_window", "must be at least 3"));
        }
        if self.cell.resolution < 4 {
            return Err(Error::config("cell.resolution", "must be at least 4"));
        }
        if self.pde.intervals < 2 {
            return Err(Error::config("pde.intervals", "must be at least 2"));
        }
        if self.quasi.family.is_some() && self.quasi.spec.is_some() {
            return Err(Error::config("quasi", "give either family or spec"));
        }
        if let Some(e) = &self.experiment {
            e.validate()?;
        }
        Ok(())
    }

    /// Makes input file references absolute against `base` and checks they
    /// exist. The output directory stays relative to the working directory.
    pub fn resolve_paths(&mut self, base: &Path) -> Result<()> {
        let fix = |p: &mut PathBuf, key: &str| -> Result<()> {
            if p.is_relative() {
                *p = base.join(&*p);
            }
            if !p.is_file() {
                return Err(Error::config(key, format!("{} does not exist", p.display())));
            }
            Ok(())
        };
        if let Some(p) = self.coefficient.file.as_mut() {
            fix(p, "coefficient.file")?;
        }
        if let Some(p) = self.scales.csv.as_mut() {
            fix(p, "scales.csv")?;
        }
        Ok(())
    }

    /// The configured coefficient, or `default_family`.
    pub fn coefficient_spec(&self, default_family: &str) -> Result<CoefficientSpec<f64>> {
        let c = &self.coefficient;
        let spec = if let Some(s) = &c.spec {
            s.clone()
        } else if let Some(p) = &c.file {
            let text = std::fs::read_to_string(p)?;
            if p.extension().is_some_and(|e| e == "toml") {
                toml::from_str(&text).map_err(|e| Error::config("coefficient.file", e.message()))?
            } else {
                serde_json::from_str(&text).map_err(|e| Error::config("coefficient.file", e.to_string()))?
            }
        } else {
            let name = c.family.as_deref().unwrap_or(default_family);
            families::by_name(name)
                .ok_or_else(|| Error::config("coefficient.family", format!("unknown family `{name}`")))?
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn quasi_spec(&self) -> Result<CutProjectSpec<f64>> {
        let spec = match (&self.quasi.spec, self.quasi.family.as_deref()) {
            (Some(s), _) => s.clone(),
            (None, None | Some("golden")) => CutProjectSpec::golden_1d(),
            (None, Some(f)) => match f.strip_prefix("periodic:") {
                Some(name) => CutProjectSpec::from_periodic(&self.coefficient_for(name)?)?,
                None => {
                    return Err(Error::config(
                        "quasi.family",
                        format!("unknown family `{f}`; use golden or periodic:<name>"),
                    ))
                }
            },
        };
        spec.validate()?;
        Ok(spec)
    }

    fn coefficient_for(&self, name: &str) -> Result<CoefficientSpec<f64>> {
        families::by_name(name).ok_or_else(|| Error::config("quasi.family", format!("unknown family `{name}`")))
    }

    pub fn scale_sequence(&self) -> Result<scales::ScaleSequence> {
        if let Some(p) = &self.scales.csv {
            let f = std::fs::File::open(p)?;
            return scales::ScaleSequence::from_csv(f);
        }
        if self.scales.entries.is_empty() {
            return Err(Error::config("scales.entries", "no scale expressions given"));
        }
        let grid = self.scales.k_grid.clone().unwrap_or_else(scales::default_k_grid);
        scales::ScaleSequence::from_symbolic(&self.scales.entries, &grid)
    }

    pub fn cell_options(&self) -> CellOptions {
        self.cell
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
schema_version = 1

[coefficient]
family = "checkerboard"
lambda = [1.0, 2.5]

[scales]
entries = ["1/k", "1/(2*k+1)"]

[cell]
resolution = 32

[pde]
intervals = 64
eps = [0.25, 0.1]

[output]
dir = "out"
"#;

    #[test]
    fn roundtrip_is_identical() {
        let a = RunConfig::load(SAMPLE, &[], None).unwrap();
        let text = a.to_toml().unwrap();
        let b = RunConfig::load(&text, &[], None).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.to_toml().unwrap(), text);
    }

    #[test]
    fn experiment_roundtrip_with_preset() {
        let a = RunConfig::load(SAMPLE, &[], Some(ExperimentKind::Convergence)).unwrap();
        let b = RunConfig::load(&a.to_toml().unwrap(), &[], Some(ExperimentKind::Convergence)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.experiment.unwrap().eps_grid.len(), 8);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::load("[cell]\nresolutoin = 3\n", &[], None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("cell"), "{msg}");
        assert!(msg.contains("resolutoin"), "{msg}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn schema_version_checked() {
        let err = RunConfig::load("schema_version = 7\n", &[], None).unwrap_err();
        assert!(err.to_string().contains("schema_version"));
    }

    #[test]
    fn overrides_apply_one_to_one() {
        let ov = vec![
            ("cell.resolution".to_string(), "16".to_string()),
            ("coefficient.lambda".to_string(), "1,2.5".to_string()),
            ("coefficient.family".to_string(), "laminate".to_string()),
        ];
        let c = RunConfig::load(SAMPLE, &ov, None).unwrap();
        assert_eq!(c.cell.resolution, 16);
        assert_eq!(c.coefficient.lambda, Some(vec![1.0, 2.5]));
        assert_eq!(c.coefficient.family.as_deref(), Some("laminate"));
        let err = RunConfig::load(SAMPLE, &[("cell.bogus".into(), "1".into())], None).unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }

    #[test]
    fn experiment_kind_mismatch() {
        let err = RunConfig::load("[experiment]\nkind = \"holder\"\n", &[], Some(ExperimentKind::Lipschitz)).unwrap_err();
        assert!(err.to_string().contains("experiment.kind"));
    }

    #[test]
    fn parse_value_forms() {
        assert_eq!(parse_value("3"), toml::Value::Integer(3));
        assert_eq!(parse_value("golden"), toml::Value::String("golden".into()));
        assert_eq!(
            parse_value("1,2.5"),
            toml::Value::Array(vec![toml::Value::Integer(1), toml::Value::Float(2.5)])
        );
    }

    #[test]
    fn missing_file_fails_before_solving() {
        let mut c = RunConfig::load("[scales]\ncsv = \"nope.csv\"\n", &[], None).unwrap();
        let err = c.resolve_paths(Path::new("/nonexistent-dir")).unwrap_err();
        assert!(err.to_string().contains("scales.csv"));
    }

    #[test]
    fn families_resolve() {
        let c = RunConfig::default();
        assert_eq!(c.coefficient_spec("laminate").unwrap().dimension, 2);
        assert_eq!(c.quasi_spec().unwrap().torus_dims, vec![2]);
        let err = RunConfig::load("[coefficient]\nfamily = \"nope\"\n", &[], None).unwrap_err();
        assert!(err.to_string().contains("coefficient.family"));
    }
}
