//! Exemplar selection for one query.
//!
//! Picks exactly `k` candidates maximizing summed similarity, subject to
//! every chosen candidate clearing its per-label confidence thresholds and the
//! union of chosen label sets covering the coverage labels. The confidence
//! constraint is a per-candidate filter, so what remains is a max-weight
//! `k`-subset with set-cover side constraints. It is solved exactly by a
//! dynamic program over coverage bitmasks, or by branch and bound when the
//! (compressed) label alphabet is too wide for the bitmask table.
//!
//! Objective values are summed in descending-similarity order, so a set's
//! value depends only on the multiset of its similarities and every solver
//! (including the brute-force oracle) computes it identically. Among optima
//! the lexicographically smallest sorted id-set wins.

mod bnb;
mod brute;
mod dp;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::confidence::{eligible, LabelConfidence, ThresholdTable};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use brute::{brute_force_select, BRUTE_FORCE_LIMIT};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMode {
    #[default]
    Full,
    NoConfidence,
    NoCoverage,
    SimilarityOnly,
    Random,
}

impl SelectionMode {
    pub const ALL: [SelectionMode; 5] = [
        SelectionMode::Full,
        SelectionMode::NoConfidence,
        SelectionMode::NoCoverage,
        SelectionMode::SimilarityOnly,
        SelectionMode::Random,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SelectionMode::Full => "full",
            SelectionMode::NoConfidence => "no-confidence",
            SelectionMode::NoCoverage => "no-coverage",
            SelectionMode::SimilarityOnly => "similarity-only",
            SelectionMode::Random => "random",
        }
    }

    fn uses_confidence(self) -> bool {
        matches!(self, SelectionMode::Full | SelectionMode::NoCoverage)
    }

    fn uses_coverage(self) -> bool {
        matches!(self, SelectionMode::Full | SelectionMode::NoConfidence)
    }
}

impl std::fmt::Display for SelectionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SelectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SelectionMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown selector mode {s:?}")))
    }
}

/// What to do when the constraints admit no `k`-subset.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Relaxation {
    /// Report infeasibility.
    Strict,
    /// Drop unsatisfiable coverage labels, lower the percentile in steps of
    /// 10, then drop confidence thresholds, recording each step.
    #[default]
    Ladder,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SolverKind {
    #[default]
    Auto,
    Dp,
    BranchAndBound,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate<T = f64> {
    pub id: String,
    pub sim: T,
    /// Predicted labels (a multiset).
    pub labels: Vec<String>,
    pub confidence: Option<LabelConfidence<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionProblem<T = f64> {
    pub query_id: String,
    pub candidates: Vec<Candidate<T>>,
    pub coverage_labels: Vec<String>,
    pub k: usize,
    pub thresholds: Option<ThresholdTable<T>>,
    pub mode: SelectionMode,
    pub relaxation: Relaxation,
    pub solver: SolverKind,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SelectionResult<T = f64> {
    pub query_id: String,
    pub mode: SelectionMode,
    /// Chosen ids, most similar first.
    pub chosen_ids: Vec<String>,
    pub objective: T,
    pub relaxations: Vec<String>,
}

/// Constraint set handed to a solver: candidates must clear `thresholds`
/// (when given) and together hold every label in `coverage`.
#[derive(Clone, Debug)]
pub(crate) struct Constraints<'a, T> {
    pub thresholds: Option<&'a ThresholdTable<T>>,
    pub coverage: Vec<String>,
}

impl<T: Scalar> Candidate<T> {
    pub(crate) fn is_eligible(&self, thresholds: Option<&ThresholdTable<T>>) -> bool {
        match thresholds {
            None => true,
            // no confidences to check against a threshold: not selectable
            Some(t) => self.confidence.as_ref().is_some_and(|c| eligible(c, t)),
        }
    }

    pub(crate) fn holds(&self, label: &str) -> bool {
        self.labels.iter().any(|l| l == label)
    }
}

impl<T: Scalar> SelectionProblem<T> {
    pub fn new(query_id: impl Into<String>, candidates: Vec<Candidate<T>>, k: usize) -> Self {
        SelectionProblem {
            query_id: query_id.into(),
            candidates,
            coverage_labels: Vec::new(),
            k,
            thresholds: None,
            mode: SelectionMode::Full,
            relaxation: Relaxation::Ladder,
            solver: SolverKind::Auto,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidProblem("k must be at least 1".into()));
        }
        if self.k > self.candidates.len() {
            return Err(Error::InvalidProblem(format!(
                "k = {} exceeds the {} candidates",
                self.k,
                self.candidates.len()
            )));
        }
        let mut ids = BTreeSet::new();
        for c in &self.candidates {
            if c.id == self.query_id {
                return Err(Error::InvalidProblem(format!(
                    "query {:?} is among its own candidates",
                    self.query_id
                )));
            }
            if !ids.insert(c.id.as_str()) {
                return Err(Error::InvalidProblem(format!("duplicate candidate {:?}", c.id)));
            }
            if !c.sim.is_finite_value() {
                return Err(Error::InvalidProblem(format!("non-finite similarity for {:?}", c.id)));
            }
        }
        Ok(())
    }

    fn result(&self, mut chosen: Vec<usize>, relaxations: Vec<String>) -> SelectionResult<T> {
        chosen.sort_by(|&a, &b| {
            let (ca, cb) = (&self.candidates[a], &self.candidates[b]);
            cb.sim
                .partial_cmp(&ca.sim)
                .unwrap_or(Ordering::Equal)
                .then_with(|| ca.id.cmp(&cb.id))
        });
        let objective = chosen.iter().fold(T::zero(), |acc, &i| acc + self.candidates[i].sim);
        SelectionResult {
            query_id: self.query_id.clone(),
            mode: self.mode,
            chosen_ids: chosen.iter().map(|&i| self.candidates[i].id.clone()).collect(),
            objective,
            relaxations,
        }
    }

    fn infeasible(&self, reason: impl Into<String>) -> Error {
        Error::Infeasible {
            query: self.query_id.clone(),
            reason: reason.into(),
        }
    }
}

/// Solves `problem` exactly. `seed` is required for [`SelectionMode::Random`].
pub fn select<T: Scalar>(problem: &SelectionProblem<T>, seed: Option<u64>) -> Result<SelectionResult<T>> {
    problem.validate()?;
    if problem.mode == SelectionMode::Random {
        let seed = seed.ok_or_else(|| Error::InvalidProblem("random mode requires a seed".into()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let picked = rand::seq::index::sample(&mut rng, problem.candidates.len(), problem.k);
        return Ok(problem.result(picked.into_vec(), Vec::new()));
    }
    solve_with(problem, |p, c| solve_exact(p, c, problem.solver))
}

fn solve_exact<T: Scalar>(
    problem: &SelectionProblem<T>,
    constraints: &Constraints<'_, T>,
    kind: SolverKind,
) -> Result<Option<Vec<usize>>> {
    let prepared = match Prepared::new(problem, constraints) {
        None => return Ok(None),
        Some(p) => p?,
    };
    let use_dp = match kind {
        SolverKind::Dp => true,
        SolverKind::BranchAndBound => false,
        SolverKind::Auto => prepared.bits <= dp::MAX_AUTO_BITS,
    };
    let solution = if use_dp {
        dp::solve(&prepared)
    } else {
        bnb::solve(&prepared)
    };
    Ok(solution.map(|pos| prepared.to_original(&pos)))
}

/// Applies the mode's constraints (and the relaxation ladder, if enabled)
/// around a strict solver returning candidate indices, or `None` when
/// infeasible.
pub(crate) fn solve_with<T, F>(problem: &SelectionProblem<T>, solve: F) -> Result<SelectionResult<T>>
where
    T: Scalar,
    F: Fn(&SelectionProblem<T>, &Constraints<'_, T>) -> Result<Option<Vec<usize>>>,
{
    let mut relaxations = Vec::new();
    let coverage: Vec<String> = if problem.mode.uses_coverage() {
        dedup(&problem.coverage_labels)
    } else {
        Vec::new()
    };
    let thresholds = if problem.mode.uses_confidence() {
        if problem.thresholds.is_none() {
            relaxations.push("confidence thresholds skipped: no prediction probabilities".to_string());
        }
        problem.thresholds.as_ref()
    } else {
        None
    };

    let first = Constraints {
        thresholds,
        coverage: coverage.clone(),
    };
    if let Some(chosen) = solve(problem, &first)? {
        return Ok(problem.result(chosen, relaxations));
    }
    if problem.relaxation == Relaxation::Strict {
        return Err(problem.infeasible("no k-subset satisfies the constraints"));
    }

    // (1) coverage only for labels some eligible candidate holds
    let step = restrict_coverage(problem, thresholds, &coverage);
    if step.dropped.is_empty() {
        log::debug!("{}: no unheld coverage labels to drop", problem.query_id);
    } else {
        relaxations.push(format!(
            "coverage dropped for labels held by no eligible candidate: {}",
            step.dropped.join(", ")
        ));
        if let Some(chosen) = solve(problem, &step.constraints)? {
            return Ok(problem.result(chosen, relaxations));
        }
    }

    // (2) fewer than k eligible: lower the percentile
    if let Some(table) = thresholds {
        let n_eligible = problem.candidates.iter().filter(|c| c.is_eligible(Some(table))).count();
        if n_eligible < problem.k {
            let mut pct = table.percentile - 10.0;
            while pct > 0.0 {
                let lowered = table.at_percentile(pct)?;
                let step = restrict_coverage(problem, Some(&lowered), &coverage);
                let mut note = format!("confidence percentile lowered to {pct}");
                if !step.dropped.is_empty() {
                    note.push_str(&format!(" (coverage dropped for {})", step.dropped.join(", ")));
                }
                if let Some(chosen) = solve(problem, &step.constraints)? {
                    relaxations.push(note);
                    return Ok(problem.result(chosen, relaxations));
                }
                pct -= 10.0;
            }
        }

        // (3) drop confidence thresholds entirely
        let step = restrict_coverage(problem, None, &coverage);
        let mut note = "confidence thresholds dropped".to_string();
        if !step.dropped.is_empty() {
            note.push_str(&format!(" (coverage dropped for {})", step.dropped.join(", ")));
        }
        if let Some(chosen) = solve(problem, &step.constraints)? {
            relaxations.push(note);
            return Ok(problem.result(chosen, relaxations));
        }
    }

    Err(problem.infeasible(format!(
        "relaxations exhausted; coverage of [{}] needs more than k = {} exemplars",
        coverage.join(", "),
        problem.k
    )))
}

struct RestrictedCoverage<'a, T> {
    constraints: Constraints<'a, T>,
    dropped: Vec<String>,
}

fn restrict_coverage<'a, T: Scalar>(
    problem: &SelectionProblem<T>,
    thresholds: Option<&'a ThresholdTable<T>>,
    coverage: &[String],
) -> RestrictedCoverage<'a, T> {
    let eligible: Vec<&Candidate<T>> = problem
        .candidates
        .iter()
        .filter(|c| c.is_eligible(thresholds))
        .collect();
    let (keep, dropped): (Vec<String>, Vec<String>) = coverage
        .iter()
        .cloned()
        .partition(|l| eligible.iter().any(|c| c.holds(l)));
    RestrictedCoverage {
        constraints: Constraints {
            thresholds,
            coverage: keep,
        },
        dropped,
    }
}

fn dedup(labels: &[String]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    labels.iter().filter(|l| seen.insert(l.as_str())).cloned().collect()
}

/// Eligible candidates in solver order with their coverage bitmasks.
pub(crate) struct Prepared<T> {
    /// Similarities in solver order: descending, ties by ascending id.
    pub sims: Vec<T>,
    pub masks: Vec<u128>,
    /// Rank of each candidate's id among all candidates.
    pub rank: Vec<u32>,
    /// Index into `problem.candidates`.
    pub orig: Vec<usize>,
    pub full: u128,
    pub bits: u32,
    pub k: usize,
}

pub(crate) const MAX_MASK_BITS: u32 = 128;

impl<T: Scalar> Prepared<T> {
    /// `None` when trivially infeasible (a coverage label nobody eligible
    /// holds, or fewer than `k` eligible candidates). Labels held by every
    /// eligible candidate are dropped and labels with identical holder sets
    /// share one bit; neither changes the feasible region.
    pub fn new(problem: &SelectionProblem<T>, constraints: &Constraints<'_, T>) -> Option<Result<Self>> {
        let mut order: Vec<usize> = (0..problem.candidates.len())
            .filter(|&i| problem.candidates[i].is_eligible(constraints.thresholds))
            .collect();
        if order.len() < problem.k {
            return None;
        }
        let mut by_id: Vec<usize> = (0..problem.candidates.len()).collect();
        by_id.sort_by(|&a, &b| problem.candidates[a].id.cmp(&problem.candidates[b].id));
        let mut rank_of = vec![0u32; problem.candidates.len()];
        for (r, &i) in by_id.iter().enumerate() {
            rank_of[i] = r as u32;
        }
        order.sort_by(|&a, &b| {
            let (ca, cb) = (&problem.candidates[a], &problem.candidates[b]);
            cb.sim
                .partial_cmp(&ca.sim)
                .unwrap_or(Ordering::Equal)
                .then_with(|| rank_of[a].cmp(&rank_of[b]))
        });

        // holder set per coverage label, keyed to merge identical ones
        let mut groups: BTreeMap<Vec<bool>, ()> = BTreeMap::new();
        for label in dedup(&constraints.coverage) {
            let holders: Vec<bool> = order.iter().map(|&i| problem.candidates[i].holds(&label)).collect();
            let count = holders.iter().filter(|&&h| h).count();
            if count == 0 {
                return None;
            }
            if count == holders.len() {
                continue;
            }
            groups.insert(holders, ());
        }
        let bits = groups.len() as u32;
        if bits > MAX_MASK_BITS {
            return Some(Err(Error::InvalidProblem(format!(
                "{bits} distinct coverage groups exceed the supported {MAX_MASK_BITS}"
            ))));
        }
        let mut masks = vec![0u128; order.len()];
        for (bit, holders) in groups.keys().enumerate() {
            for (pos, &h) in holders.iter().enumerate() {
                if h {
                    masks[pos] |= 1u128 << bit;
                }
            }
        }
        let full = if bits == 128 { u128::MAX } else { (1u128 << bits) - 1 };
        Some(Ok(Prepared {
            sims: order.iter().map(|&i| problem.candidates[i].sim).collect(),
            masks,
            rank: order.iter().map(|&i| rank_of[i]).collect(),
            orig: order,
            full,
            bits,
            k: problem.k,
        }))
    }

    pub fn len(&self) -> usize {
        self.sims.len()
    }

    /// `suffix[p]` = union of masks from position `p` on.
    pub fn suffix_unions(&self) -> Vec<u128> {
        let mut out = vec![0u128; self.len() + 1];
        for p in (0..self.len()).rev() {
            out[p] = out[p + 1] | self.masks[p];
        }
        out
    }

    /// Upper bound on completing a partial sum `value` with `slots` more
    /// candidates drawn from position `from` on. Exact in floating point
    /// because rounding is monotone and later similarities are no larger.
    pub fn bound(&self, value: T, from: usize, slots: usize) -> T {
        self.sims[from..(from + slots).min(self.len())]
            .iter()
            .fold(value, |acc, &s| acc + s)
    }

    /// Greedy feasible solution used to seed pruning.
    pub fn greedy(&self) -> Option<T> {
        let mut chosen = vec![false; self.len()];
        let mut covered = 0u128;
        let mut count = 0;
        while covered != self.full && count < self.k {
            let p = (0..self.len()).find(|&p| !chosen[p] && self.masks[p] & !covered != 0)?;
            chosen[p] = true;
            covered |= self.masks[p];
            count += 1;
        }
        if covered != self.full {
            return None;
        }
        for c in chosen.iter_mut().filter(|c| !**c) {
            if count == self.k {
                break;
            }
            *c = true;
            count += 1;
        }
        Some(
            (0..self.len())
                .filter(|&p| chosen[p])
                .fold(T::zero(), |acc, p| acc + self.sims[p]),
        )
    }

    /// Compares two solutions given as solver positions: true when `a`'s
    /// sorted id ranks are lexicographically smaller than `b`'s.
    pub fn lex_less(&self, a: &[usize], b: &[usize]) -> bool {
        let mut ra: Vec<u32> = a.iter().map(|&p| self.rank[p]).collect();
        let mut rb: Vec<u32> = b.iter().map(|&p| self.rank[p]).collect();
        ra.sort_unstable();
        rb.sort_unstable();
        ra < rb
    }

    pub fn to_original(&self, positions: &[usize]) -> Vec<usize> {
        positions.iter().map(|&p| self.orig[p]).collect()
    }
}

#[cfg(test)]
mod tests;
