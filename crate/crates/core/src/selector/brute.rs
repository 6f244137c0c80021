//! Exhaustive reference solver. Checks every `k`-subset against the
//! constraints as written, without the eligibility filter, label compression
//! or bitmasks the exact solvers rely on.

use std::cmp::Ordering;

use super::{solve_with, Constraints, SelectionMode, SelectionProblem, SelectionResult};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const BRUTE_FORCE_LIMIT: usize = 20;

fn feasible<T: Scalar>(problem: &SelectionProblem<T>, constraints: &Constraints<'_, T>, subset: &[usize]) -> bool {
    if let Some(tau) = constraints.thresholds {
        for &i in subset {
            let c = &problem.candidates[i];
            let Some(conf) = &c.confidence else {
                return false;
            };
            for l in &c.labels {
                if let Some(t) = tau.get(l) {
                    if conf.get(l) - t < T::zero() {
                        return false;
                    }
                }
            }
        }
    }
    constraints.coverage.iter().all(|l| {
        subset
            .iter()
            .map(|&i| problem.candidates[i].labels.iter().filter(|x| *x == l).count())
            .sum::<usize>()
            >= 1
    })
}

fn value<T: Scalar>(problem: &SelectionProblem<T>, subset: &[usize]) -> T {
    let mut sims: Vec<T> = subset.iter().map(|&i| problem.candidates[i].sim).collect();
    sims.sort_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
    sims.into_iter().fold(T::zero(), |acc, s| acc + s)
}

fn sorted_ids<'a, T>(problem: &'a SelectionProblem<T>, subset: &[usize]) -> Vec<&'a str> {
    let mut ids: Vec<&str> = subset.iter().map(|&i| problem.candidates[i].id.as_str()).collect();
    ids.sort_unstable();
    ids
}

fn enumerate<T: Scalar>(problem: &SelectionProblem<T>, constraints: &Constraints<'_, T>) -> Option<Vec<usize>> {
    let n = problem.candidates.len();
    let k = problem.k;
    let mut best: Option<(T, Vec<usize>)> = None;
    let mut subset: Vec<usize> = (0..k).collect();
    loop {
        if feasible(problem, constraints, &subset) {
            let v = value(problem, &subset);
            let better = match &best {
                None => true,
                Some((b, s)) => v > *b || (v == *b && sorted_ids(problem, &subset) < sorted_ids(problem, s)),
            };
            if better {
                best = Some((v, subset.clone()));
            }
        }
        // next combination in lexicographic order
        let mut i = k;
        loop {
            if i == 0 {
                return best.map(|(_, s)| s);
            }
            i -= 1;
            if subset[i] < n - k + i {
                break;
            }
        }
        subset[i] += 1;
        for j in i + 1..k {
            subset[j] = subset[j - 1] + 1;
        }
    }
}

/// Enumerates all `k`-subsets; same modes, relaxations, tie-break and error
/// taxonomy as [`super::select`]. Limited to [`BRUTE_FORCE_LIMIT`] candidates.
pub fn brute_force_select<T: Scalar>(problem: &SelectionProblem<T>) -> Result<SelectionResult<T>> {
    problem.validate()?;
    if problem.candidates.len() > BRUTE_FORCE_LIMIT {
        return Err(Error::InvalidProblem(format!(
            "brute force is limited to {BRUTE_FORCE_LIMIT} candidates, got {}",
            problem.candidates.len()
        )));
    }
    if problem.mode == SelectionMode::Random {
        return Err(Error::InvalidProblem("brute force has no random mode".into()));
    }
    solve_with(problem, |p, c| Ok(enumerate(p, c)))
}
