//! Scale-sequence analysis: limit classification, separation tests and the
//! block rewriting that reduces comparable scales to separated quasi-periodic form.
//!
//! Limits are estimated from the last `tail_window` entries of a sequence
//! indexed by `k → ∞`. A tail whose relative spread is at most `tol` has a
//! finite limit (the tail mean); otherwise the least-squares slope of
//! `ln v` against `ln k` decides between `→ 0`, `→ ∞` and inconclusive.

use std::collections::BTreeMap;
use std::io::Read;

use evalexpr::{ContextWithMutableVariables, DefaultNumericTypes, HashMapContext, Node, Value};
use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TAIL_WINDOW: usize = 8;
pub const DEFAULT_TOL: f64 = 1e-3;
/// Tail slope (in `ln v` per `ln k`) separating trends from noise.
pub const SLOPE_THRESHOLD: f64 = 0.01;
/// Remainders below this are treated as exactly zero.
pub const COLLAPSE_TOL: f64 = 1e-12;
pub const MAX_DENOMINATOR: i64 = 64;
pub const RATIONAL_TOL: f64 = 1e-9;

/// Scale tuples `(ε₁, …, εₙ)` indexed by `k`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScaleSequence {
    pub k: Vec<f64>,
    /// `entries[row][i]`
    pub entries: Vec<Vec<f64>>,
}

/// `k = 2^j` for `j = 1..=24`.
pub fn default_k_grid() -> Vec<f64> {
    (1..=24).map(|j| 2f64.powi(j)).collect()
}

impl ScaleSequence {
    pub fn new(k: Vec<f64>, entries: Vec<Vec<f64>>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InsufficientData("scale sequence (no rows)".into()));
        }
        if k.len() != entries.len() {
            return Err(Error::precondition("scales.k", "one index value per row"));
        }
        let n = entries[0].len();
        for (row, e) in entries.iter().enumerate() {
            if e.len() != n {
                return Err(Error::precondition(
                    format!("scales row {row}"),
                    format!("expected {n} scales, found {}", e.len()),
                ));
            }
            for (i, v) in e.iter().enumerate() {
                if !(v.is_finite() && *v > 0.0) {
                    return Err(Error::precondition(
                        format!("scales row {row}, eps[{i}]"),
                        "scales must be positive and finite",
                    ));
                }
            }
            for i in 0..n.saturating_sub(1) {
                if e[i] < e[i + 1] {
                    return Err(Error::Ordering { row, index: i });
                }
            }
        }
        Ok(ScaleSequence { k, entries })
    }

    /// Rows indexed `k = 1, 2, …`.
    pub fn from_entries(entries: Vec<Vec<f64>>) -> Result<Self> {
        let k = (1..=entries.len()).map(|i| i as f64).collect();
        Self::new(k, entries)
    }

    /// Evaluates one expression in `k` per scale on `k_grid`.
    ///
    /// Expressions use floating point arithmetic with the constants `pi`, `e`
    /// and `phi` and the functions of `evalexpr`'s `math::` namespace.
    /// Integer literals divide as integers, so write `0.5` rather than `1/2`.
    pub fn from_symbolic(exprs: &[String], k_grid: &[f64]) -> Result<Self> {
        let trees: Vec<Node<DefaultNumericTypes>> = exprs
            .iter()
            .enumerate()
            .map(|(i, e)| {
                evalexpr::build_operator_tree(e)
                    .map_err(|err| Error::config(format!("scales.family[{i}]"), err.to_string()))
            })
            .collect::<Result<_>>()?;
        let mut ctx = HashMapContext::<DefaultNumericTypes>::new();
        let phi = (1.0 + 5f64.sqrt()) / 2.0;
        for (name, v) in [("pi", std::f64::consts::PI), ("e", std::f64::consts::E), ("phi", phi)] {
            ctx.set_value(name.into(), Value::from_float(v))
                .map_err(|err| Error::config("scales.family", err.to_string()))?;
        }
        let mut entries = Vec::with_capacity(k_grid.len());
        for &k in k_grid {
            ctx.set_value("k".into(), Value::from_float(k))
                .map_err(|err| Error::config("scales.family", err.to_string()))?;
            let row = trees
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    t.eval_number_with_context(&ctx)
                        .map_err(|err| Error::config(format!("scales.family[{i}]"), err.to_string()))
                })
                .collect::<Result<Vec<f64>>>()?;
            entries.push(row);
        }
        Self::new(k_grid.to_vec(), entries)
    }

    /// One tuple per row; a header whose first column is `k` supplies the index.
    pub fn from_csv(reader: impl Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(reader);
        let mut rows: Vec<Vec<String>> = Vec::new();
        for rec in rdr.records() {
            rows.push(rec?.iter().map(str::to_string).collect());
        }
        let has_header = rows.first().is_some_and(|r| r.iter().any(|c| c.parse::<f64>().is_err()));
        let with_k = has_header && rows[0].first().is_some_and(|c| c.eq_ignore_ascii_case("k"));
        if has_header {
            rows.remove(0);
        }
        let parse = |row: usize, c: &str| {
            c.parse::<f64>()
                .map_err(|_| Error::config(format!("scales csv row {row}"), format!("`{c}` is not a number")))
        };
        let mut k = Vec::new();
        let mut entries = Vec::new();
        for (r, row) in rows.iter().enumerate() {
            let vals = row.iter().map(|c| parse(r, c)).collect::<Result<Vec<f64>>>()?;
            if with_k {
                k.push(vals[0]);
                entries.push(vals[1..].to_vec());
            } else {
                k.push((r + 1) as f64);
                entries.push(vals);
            }
        }
        Self::new(k, entries)
    }

    pub fn num_scales(&self) -> usize {
        self.entries[0].len()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn column(&self, i: usize) -> Vec<f64> {
        self.entries.iter().map(|e| e[i]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LimitClass {
    Zero,
    Finite,
    Infinity,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LimitEstimate {
    pub class: LimitClass,
    /// Tail mean (the limit when finite).
    pub value: f64,
    pub spread: f64,
    pub slope: f64,
    #[serde(serialize_with = "ser_ratio")]
    pub rational: Option<Ratio<i64>>,
}

fn ser_ratio<S: serde::Serializer>(r: &Option<Ratio<i64>>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match r {
        Some(r) => s.serialize_some(&format!("{}/{}", r.numer(), r.denom())),
        None => s.serialize_none(),
    }
}

impl LimitEstimate {
    /// Rational value when snapped, else the tail mean.
    pub fn limit(&self) -> f64 {
        match self.rational {
            Some(r) => *r.numer() as f64 / *r.denom() as f64,
            None => self.value,
        }
    }

    pub fn is_positive_finite(&self) -> bool {
        self.class == LimitClass::Finite && self.value > 0.0
    }
}

/// Continued-fraction convergent `p/q` with `q ≤ max_q` within `tol` of `x`.
pub fn snap_rational(x: f64, max_q: i64, tol: f64) -> Option<Ratio<i64>> {
    if !x.is_finite() {
        return None;
    }
    let (mut h0, mut h1) = (0i64, 1i64);
    let (mut k0, mut k1) = (1i64, 0i64);
    let mut r = x;
    for _ in 0..64 {
        let a = r.floor();
        if a.abs() > 1e15 {
            break;
        }
        let a = a as i64;
        let h2 = a.checked_mul(h1)?.checked_add(h0)?;
        let k2 = a.checked_mul(k1)?.checked_add(k0)?;
        if k2 > max_q {
            break;
        }
        if (x - h2 as f64 / k2 as f64).abs() <= tol {
            return Some(Ratio::new(h2, k2));
        }
        (h0, h1, k0, k1) = (h1, h2, k1, k2);
        let frac = r - a as f64;
        if frac.abs() < 1e-300 {
            break;
        }
        r = 1.0 / frac;
    }
    None
}

fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
    }
    if sxx > 0.0 {
        sxy / sxx
    } else {
        0.0
    }
}

fn tail_slice(len: usize, tail: usize) -> Result<std::ops::Range<usize>> {
    if tail < 2 {
        return Err(Error::precondition("scales.tail_window", "must be at least 2"));
    }
    if tail > len {
        return Err(Error::InsufficientData(format!(
            "limits from a tail of {tail} entries (sequence has {len})"
        )));
    }
    Ok(len - tail..len)
}

/// Aitken extrapolation from the last three values; `None` when the
/// differences are at rounding level.
fn aitken(v: &[f64]) -> Option<f64> {
    let [a, b, c] = v[v.len().checked_sub(3)?..] else {
        return None;
    };
    let d1 = b - a;
    let d2 = c - b;
    let dd = d2 - d1;
    if dd.abs() <= 1e-13 * c.abs().max(1e-300) || d1 * d2 <= 0.0 {
        return None;
    }
    let x = c - d2 * d2 / dd;
    x.is_finite().then_some(x)
}

/// Classifies `lim v_k` from the tail, given `ln v_k` (which may be finite
/// when `v_k` itself under- or overflows).
fn estimate_log(k: &[f64], lnv: &[f64], tail: usize, tol: f64) -> Result<LimitEstimate> {
    let r = tail_slice(k.len(), tail)?;
    let lk: Vec<f64> = k[r.clone()].iter().map(|v| v.ln()).collect();
    let lv = &lnv[r];
    let vals: Vec<f64> = lv.iter().map(|l| l.exp()).collect();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let (lo, hi) = vals
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    let spread = if mean > 0.0 && mean.is_finite() { (hi - lo) / mean } else { f64::INFINITY };
    let s = slope(&lk, lv);
    if lv.iter().all(|l| *l == f64::NEG_INFINITY) {
        return Ok(LimitEstimate {
            class: LimitClass::Zero,
            value: 0.0,
            spread: 0.0,
            slope: f64::NEG_INFINITY,
            rational: None,
        });
    }
    let steps_ok = |dir: f64| lv.windows(2).all(|w| (w[1] - w[0]) * dir >= -1e-12 * (1.0 + w[0].abs()));
    // slowly settling tails: flat trend with shrinking steps
    let settling = s.abs() < SLOPE_THRESHOLD
        && (steps_ok(1.0) || steps_ok(-1.0))
        && vals.windows(3).all(|w| (w[2] - w[1]).abs() <= (w[1] - w[0]).abs() * (1.0 + 1e-9) + 1e-15 * w[2].abs());
    if spread <= tol || settling {
        let (value, unc) = match (aitken(&vals), aitken(&vals[..vals.len() - 1])) {
            (Some(a), Some(b)) => (a, (a - b).abs().max(RATIONAL_TOL)),
            _ => (mean, (hi - lo).max(RATIONAL_TOL)),
        };
        return Ok(LimitEstimate {
            class: LimitClass::Finite,
            value,
            spread,
            slope: s,
            rational: snap_rational(value, MAX_DENOMINATOR, unc),
        });
    }
    let class = if s <= -SLOPE_THRESHOLD && steps_ok(-1.0) {
        LimitClass::Zero
    } else if s >= SLOPE_THRESHOLD && steps_ok(1.0) {
        LimitClass::Infinity
    } else {
        LimitClass::Inconclusive
    };
    Ok(LimitEstimate {
        class,
        value: mean,
        spread,
        slope: s,
        rational: None,
    })
}

/// Classifies `lim v_k` for a positive sequence.
pub fn estimate_limit(k: &[f64], v: &[f64], tail: usize, tol: f64) -> Result<LimitEstimate> {
    let lnv: Vec<f64> = v.iter().map(|x| if *x > 0.0 { x.ln() } else { f64::NEG_INFINITY }).collect();
    estimate_log(k, &lnv, tail, tol)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScaleClassification {
    pub tail_window: usize,
    pub tol: f64,
    /// Limit of each `εᵢ`.
    pub scales: Vec<LimitEstimate>,
    /// `γ̂ᵢ = lim εᵢ₊₁/εᵢ`.
    pub ratios: Vec<LimitEstimate>,
    /// Limit of `ln(εᵢ/εᵢ₊₁) / ln(1/εᵢ)`; a positive lower bound `r` makes
    /// `N > 1/r` a witness for well-separation.
    pub log_gaps: Vec<LimitEstimate>,
    pub separated: bool,
    pub well_separated: bool,
    /// Smallest exponent found to witness well-separation.
    pub exponent: Option<u32>,
    /// First index at which well-separation fails.
    pub violating_index: Option<usize>,
}

pub fn classify(seq: &ScaleSequence, tail_window: usize, tol: f64) -> Result<ScaleClassification> {
    // re-check ordering for sequences built by hand
    let seq = ScaleSequence::new(seq.k.clone(), seq.entries.clone())?;
    let n = seq.num_scales();
    let k = &seq.k;
    let scales = (0..n)
        .map(|i| estimate_limit(k, &seq.column(i), tail_window, tol))
        .collect::<Result<Vec<_>>>()?;
    let mut ratios = Vec::new();
    let mut log_gaps = Vec::new();
    for i in 0..n.saturating_sub(1) {
        let ratio: Vec<f64> = seq.entries.iter().map(|e| e[i + 1] / e[i]).collect();
        ratios.push(estimate_limit(k, &ratio, tail_window, tol)?);
        let gap: Vec<f64> = seq
            .entries
            .iter()
            .map(|e| {
                let num = (e[i] / e[i + 1]).ln();
                let den = (1.0 / e[i]).ln();
                if den > 0.0 && num > 0.0 {
                    (num / den).ln()
                } else {
                    f64::NAN
                }
            })
            .collect();
        log_gaps.push(if gap.iter().skip(k.len() - tail_window.min(k.len())).any(|g| g.is_nan()) {
            LimitEstimate {
                class: LimitClass::Inconclusive,
                value: f64::NAN,
                spread: f64::NAN,
                slope: f64::NAN,
                rational: None,
            }
        } else {
            estimate_log(k, &gap, tail_window, tol)?
        });
    }
    let first_vanishes = scales.first().is_some_and(|s| s.class == LimitClass::Zero);
    let separated = first_vanishes && ratios.iter().all(|r| r.class == LimitClass::Zero);
    let mut exponent = None;
    let mut violating_index = None;
    if separated {
        let mut big_n = 1u32;
        for (i, g) in log_gaps.iter().enumerate() {
            let witness = match g.class {
                LimitClass::Infinity => Some(1),
                LimitClass::Finite if g.value > 0.0 => {
                    let r = g.value * (1.0 - g.spread);
                    Some((1.0 / r).floor() as u32 + 1)
                }
                _ => None,
            };
            match witness {
                Some(w) => big_n = big_n.max(w),
                None => {
                    violating_index = Some(i);
                    break;
                }
            }
        }
        if violating_index.is_none() {
            // confirm (1/εᵢ)(εᵢ₊₁/εᵢ)^N → 0 directly, in log form
            for i in 0..n - 1 {
                let lv: Vec<f64> = seq
                    .entries
                    .iter()
                    .map(|e| -(e[i].ln()) + big_n as f64 * (e[i + 1] / e[i]).ln())
                    .collect();
                if estimate_log(k, &lv, tail_window, tol)?.class != LimitClass::Zero {
                    violating_index = Some(i);
                    break;
                }
            }
        }
        if violating_index.is_none() {
            exponent = Some(big_n);
        }
    }
    Ok(ScaleClassification {
        tail_window,
        tol,
        scales,
        ratios,
        log_gaps,
        separated,
        well_separated: exponent.is_some(),
        exponent,
        violating_index,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleFate {
    /// Merged into another scale with zero remainder.
    Collapsed,
    /// Converges to a positive constant `δ`.
    Fixed,
    /// Vanishing and separated from every other vanishing scale.
    Vanishing,
    /// Grows without bound; the fast variable `x/ε̃` tends to zero.
    Slow,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanScale {
    pub id: usize,
    pub label: String,
    /// Original index, or the scale it was derived from.
    pub origin: String,
    pub values: Vec<f64>,
    pub limit: LimitEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemberRewrite {
    pub scale: usize,
    /// `Lᵢ = lim ε_a/εᵢ`.
    pub limit: f64,
    #[serde(serialize_with = "ser_ratio")]
    pub rational: Option<Ratio<i64>>,
    /// Sign of the remainder `τᵢ = ε_a/εᵢ − Lᵢ` on the tail.
    pub sign: i8,
    pub remainder_tail: Vec<f64>,
    pub new_scale: Option<usize>,
    pub fate: ScaleFate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Round {
    /// Same-scale block, largest scale first.
    pub block: Vec<usize>,
    pub anchor: usize,
    pub members: Vec<MemberRewrite>,
    /// Scales still being reduced after this round.
    pub pool: Vec<usize>,
    /// Scales settled as separated.
    pub separated: Vec<usize>,
}

/// Periodic variables attached to one vanishing scale after bundling
/// rationally related coefficients: `yᵢ ∋ Σ_K n_{iK} w_K` with `w_K = m_K · x/ε̃`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Bundle {
    pub scale: usize,
    /// Projection entries `m_K`, one per torus variable.
    pub projection: Vec<f64>,
    /// Integer multiplicities `n[i][K]` per original variable.
    pub multiplicity: Vec<Vec<i64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanStatus {
    /// Scales were already separated; nothing to rewrite.
    NoRewriteNeeded,
    Rewritten,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RearrangementPlan {
    pub status: PlanStatus,
    pub scales: Vec<PlanScale>,
    pub rounds: Vec<Round>,
    /// `substitution[i]`: original fast variable `x/εᵢ` as `Σ coeff · x/ε̃_id`.
    pub substitution: Vec<Vec<(usize, f64)>>,
    pub fates: Vec<ScaleFate>,
    pub fixed: Vec<(usize, f64)>,
    pub vanishing: Vec<usize>,
    pub slow: Vec<usize>,
    pub bundles: Vec<Bundle>,
    /// Whether the final vanishing scales are pairwise separated.
    pub final_separated: bool,
    /// Largest relative error of the substitution over all rows.
    pub identity_error: f64,
    /// Two-scale parameter `λ = lim ε₂/ε₁` when the input has two scales.
    pub lambda: Option<f64>,
    pub notes: Vec<String>,
}

impl RearrangementPlan {
    /// Number of fixed scales `m`.
    pub fn m(&self) -> usize {
        self.fixed.len()
    }

    pub fn label(&self, id: usize) -> &str {
        &self.scales[id].label
    }
}

struct Builder<'a> {
    k: &'a [f64],
    tail: usize,
    tol: f64,
    scales: Vec<PlanScale>,
    /// per original variable: atom → coefficient
    expr: Vec<BTreeMap<usize, f64>>,
}

impl Builder<'_> {
    fn push(&mut self, label: String, origin: String, values: Vec<f64>) -> Result<usize> {
        let limit = estimate_limit(self.k, &values, self.tail, self.tol)?;
        let id = self.scales.len();
        self.scales.push(PlanScale {
            id,
            label,
            origin,
            values,
            limit,
        });
        Ok(id)
    }

    fn ratio(&self, small: usize, large: usize) -> Result<LimitEstimate> {
        let v: Vec<f64> = self.scales[small]
            .values
            .iter()
            .zip(&self.scales[large].values)
            .map(|(s, l)| s / l)
            .collect();
        estimate_limit(self.k, &v, self.tail, self.tol)
    }

    fn substitute(&mut self, atom: usize, with: &[(usize, f64)]) {
        for e in &mut self.expr {
            if let Some(c) = e.remove(&atom) {
                for &(a, w) in with {
                    *e.entry(a).or_insert(0.0) += c * w;
                }
            }
        }
    }

    fn last(&self, id: usize) -> f64 {
        *self.scales[id].values.last().unwrap_or(&0.0)
    }
}

/// Runs the block rewriting until no two remaining vanishing scales are comparable.
pub fn rearrange(seq: &ScaleSequence, classification: &ScaleClassification) -> Result<RearrangementPlan> {
    let n = seq.num_scales();
    if classification.scales.len() != n {
        return Err(Error::precondition("classification", "computed for a different sequence"));
    }
    let tail = classification.tail_window;
    let tol = classification.tol;
    let mut b = Builder {
        k: &seq.k,
        tail,
        tol,
        scales: Vec::new(),
        expr: (0..n).map(|i| BTreeMap::from([(i, 1.0)])).collect(),
    };
    for i in 0..n {
        b.push(format!("eps{}", i + 1), format!("input {}", i + 1), seq.column(i))?;
    }
    let mut pool: Vec<usize> = Vec::new();
    let mut separated: Vec<usize> = Vec::new();
    let mut fixed = Vec::new();
    let mut slow = Vec::new();
    let mut fate_of: BTreeMap<usize, (ScaleFate, Option<usize>)> = BTreeMap::new();
    for i in 0..n {
        match b.scales[i].limit.class {
            LimitClass::Zero => pool.push(i),
            LimitClass::Finite => {
                fixed.push((i, b.scales[i].limit.limit()));
                fate_of.insert(i, (ScaleFate::Fixed, None));
            }
            LimitClass::Infinity => {
                slow.push(i);
                fate_of.insert(i, (ScaleFate::Slow, None));
            }
            LimitClass::Inconclusive => {
                return Err(Error::InsufficientData(format!("the limit of eps{}", i + 1)));
            }
        }
    }
    let mut rounds = Vec::new();
    let mut notes = vec!["remainders are taken as tau_i = eps_a/eps_i - L_i with L_i = lim eps_a/eps_i, \
         the choice that makes tau_i vanish; subtracting 1/L_i instead vanishes only when L_i = 1"
        .to_string()];
    loop {
        pool.sort_by(|x, y| b.last(*y).total_cmp(&b.last(*x)).then(x.cmp(y)));
        let mut blocks: Vec<Vec<usize>> = Vec::new();
        let mut cur = vec![pool[0]];
        for w in pool.windows(2) {
            let r = b.ratio(w[1], w[0])?;
            match r.class {
                LimitClass::Zero => blocks.push(std::mem::replace(&mut cur, vec![w[1]])),
                LimitClass::Finite => cur.push(w[1]),
                _ => {
                    return Err(Error::InsufficientData(format!(
                        "the ratio {}/{}",
                        b.scales[w[1]].label, b.scales[w[0]].label
                    )))
                }
            }
        }
        if pool.is_empty() {
            break;
        }
        blocks.push(cur);
        let Some(block) = blocks
            .iter()
            .filter(|bl| bl.len() >= 2)
            .max_by(|x, y| x.len().cmp(&y.len()).then(y[0].cmp(&x[0]).reverse()))
            .cloned()
        else {
            break;
        };
        if rounds.len() + 1 > n.saturating_sub(1) {
            notes.push("round limit n-1 reached with comparable scales remaining".into());
            break;
        }
        let anchor = block[0];
        let mut members = Vec::new();
        let mut new_pool: Vec<usize> = pool.iter().copied().filter(|s| !block.contains(s)).collect();
        for &i in &block[1..] {
            let est = b.ratio(anchor, i)?;
            if !est.is_positive_finite() {
                return Err(Error::InsufficientData(format!(
                    "the limit of {}/{}",
                    b.scales[anchor].label, b.scales[i].label
                )));
            }
            let l = est.limit();
            let tau: Vec<f64> = b.scales[anchor]
                .values
                .iter()
                .zip(&b.scales[i].values)
                .map(|(a, s)| a / s - l)
                .collect();
            let remainder_tail = tau[tau.len() - tail..].to_vec();
            let scale_tol = COLLAPSE_TOL * l.max(1.0);
            let (fate, new_scale, sign) = if tau.iter().all(|t| t.abs() <= scale_tol) {
                b.substitute(i, &[(anchor, l)]);
                (ScaleFate::Collapsed, None, 0i8)
            } else {
                let pos = remainder_tail.iter().all(|t| *t > 0.0);
                let neg = remainder_tail.iter().all(|t| *t < 0.0);
                if !(pos || neg) || tau.iter().any(|t| *t == 0.0) {
                    return Err(Error::InsufficientData(format!(
                        "the sign of the remainder for {}",
                        b.scales[i].label
                    )));
                }
                let sign: i8 = if pos { 1 } else { -1 };
                let values: Vec<f64> = b.scales[anchor]
                    .values
                    .iter()
                    .zip(&tau)
                    .map(|(a, t)| a / t.abs())
                    .collect();
                let label = format!("{}'", b.scales[i].label);
                let origin = format!("{} rewritten against {}", b.scales[i].label, b.scales[anchor].label);
                let id = b.push(label, origin, values)?;
                b.substitute(i, &[(anchor, l), (id, sign as f64)]);
                let fate = match b.scales[id].limit.class {
                    LimitClass::Zero => {
                        new_pool.push(id);
                        ScaleFate::Vanishing
                    }
                    LimitClass::Finite => {
                        fixed.push((id, b.scales[id].limit.limit()));
                        ScaleFate::Fixed
                    }
                    LimitClass::Infinity => {
                        slow.push(id);
                        ScaleFate::Slow
                    }
                    LimitClass::Inconclusive => {
                        return Err(Error::InsufficientData(format!("the limit of {}", b.scales[id].label)))
                    }
                };
                (fate, Some(id), sign)
            };
            fate_of.insert(i, (fate, new_scale));
            if let Some(id) = new_scale {
                if fate != ScaleFate::Vanishing {
                    fate_of.insert(id, (fate, None));
                }
            }
            members.push(MemberRewrite {
                scale: i,
                limit: l,
                rational: est.rational,
                sign,
                remainder_tail,
                new_scale,
                fate,
            });
        }
        new_pool.retain(|s| *s != anchor);
        separated.push(anchor);
        pool = new_pool;
        rounds.push(Round {
            block: block.clone(),
            anchor,
            members,
            pool: pool.clone(),
            separated: separated.clone(),
        });
        if pool.is_empty() {
            break;
        }
    }
    let mut vanishing: Vec<usize> = separated.iter().chain(&pool).copied().collect();
    vanishing.sort_by(|x, y| b.last(*y).total_cmp(&b.last(*x)).then(x.cmp(y)));
    let mut final_separated = true;
    for w in vanishing.windows(2) {
        if b.ratio(w[1], w[0])?.class != LimitClass::Zero {
            final_separated = false;
        }
    }
    let fates: Vec<ScaleFate> = (0..n)
        .map(|i| {
            let mut id = i;
            loop {
                match fate_of.get(&id) {
                    None => return ScaleFate::Vanishing,
                    Some((ScaleFate::Vanishing, Some(next))) => id = *next,
                    Some((f, _)) => return *f,
                }
            }
        })
        .collect();
    // relative error of x/εᵢ = Σ c · x/ε̃ at every row
    let mut identity_error = 0.0f64;
    for row in 0..seq.len() {
        for (i, e) in b.expr.iter().enumerate() {
            let direct = 1.0 / seq.entries[row][i];
            let rebuilt: f64 = e.iter().map(|(a, c)| c / b.scales[*a].values[row]).sum();
            identity_error = identity_error.max((rebuilt - direct).abs() / direct);
        }
    }
    let bundles = vanishing.iter().map(|&a| bundle(a, &b.expr)).collect();
    let substitution = b.expr.iter().map(|e| e.iter().map(|(a, c)| (*a, *c)).collect()).collect();
    let status = if rounds.is_empty() {
        PlanStatus::NoRewriteNeeded
    } else {
        PlanStatus::Rewritten
    };
    let lambda = if n == 2 {
        Some(classification.ratios[0].limit())
    } else {
        None
    };
    Ok(RearrangementPlan {
        status,
        scales: b.scales,
        rounds,
        substitution,
        fates,
        fixed,
        vanishing,
        slow,
        bundles,
        final_separated,
        identity_error,
        lambda,
        notes,
    })
}

fn bundle(atom: usize, expr: &[BTreeMap<usize, f64>]) -> Bundle {
    let coeffs: Vec<f64> = expr.iter().map(|e| e.get(&atom).copied().unwrap_or(0.0)).collect();
    // classes of rationally related coefficients
    let mut classes: Vec<(f64, Vec<(usize, Ratio<i64>)>)> = Vec::new();
    for (i, &c) in coeffs.iter().enumerate() {
        if c == 0.0 {
            continue;
        }
        let hit = classes.iter_mut().find_map(|(base, members)| {
            snap_rational(c / *base, MAX_DENOMINATOR, RATIONAL_TOL).map(|r| (members, r))
        });
        match hit {
            Some((members, r)) => members.push((i, r)),
            None => classes.push((c, vec![(i, Ratio::from_integer(1))])),
        }
    }
    let mut projection = Vec::with_capacity(classes.len());
    let mut multiplicity = vec![vec![0i64; classes.len()]; coeffs.len()];
    for (kk, (base, members)) in classes.iter().enumerate() {
        let q = members.iter().fold(1i64, |acc, (_, r)| num_integer_lcm(acc, *r.denom()));
        projection.push(base / q as f64);
        for (i, r) in members {
            multiplicity[*i][kk] = (*r * q).to_integer();
        }
    }
    Bundle {
        scale: atom,
        projection,
        multiplicity,
    }
}

fn num_integer_lcm(a: i64, b: i64) -> i64 {
    fn gcd(a: i64, b: i64) -> i64 {
        if b == 0 {
            a.abs()
        } else {
            gcd(b, a % b)
        }
    }
    a / gcd(a, b) * b
}

/// Two-scale rewriting `x/ε₂ = λ⁻¹ x/ε₁ ± x/ε₂′` with `λ = lim ε₂/ε₁`.
///
/// Returns a plan with [`PlanStatus::NoRewriteNeeded`] when `λ = 0`.
pub fn reduce_two_scale(seq: &ScaleSequence, tail_window: usize, tol: f64) -> Result<RearrangementPlan> {
    if seq.num_scales() != 2 {
        return Err(Error::precondition(
            "scales",
            format!("two-scale reduction needs n = 2, got {}", seq.num_scales()),
        ));
    }
    let c = classify(seq, tail_window, tol)?;
    match c.ratios[0].class {
        LimitClass::Zero | LimitClass::Finite => {}
        _ => return Err(Error::InsufficientData("the ratio eps2/eps1".into())),
    }
    rearrange(seq, &c)
}
