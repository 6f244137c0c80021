//! Exact selection by dynamic programming over (count, covered-mask) states.
//!
//! Candidates are consumed in descending-similarity order; a state holds the
//! best partial sum reaching it and a back-pointer into an arena of choices.
//! States that cannot still reach `k` picks with full coverage, or whose
//! optimistic completion falls below the best known feasible value, are
//! dropped.

use std::collections::HashMap;

use super::Prepared;
use crate::scalar::Scalar;

/// Widest compressed alphabet `SolverKind::Auto` hands to the DP.
pub(crate) const MAX_AUTO_BITS: u32 = 24;

const ROOT: u32 = u32::MAX;

struct Arena {
    nodes: Vec<(u32, u32)>,
}

impl Arena {
    fn push(&mut self, pos: usize, parent: u32) -> u32 {
        self.nodes.push((pos as u32, parent));
        (self.nodes.len() - 1) as u32
    }

    fn positions(&self, mut node: u32) -> Vec<usize> {
        let mut out = Vec::new();
        while node != ROOT {
            let (pos, parent) = self.nodes[node as usize];
            out.push(pos as usize);
            node = parent;
        }
        out
    }
}

pub(crate) fn solve<T: Scalar>(prep: &Prepared<T>) -> Option<Vec<usize>> {
    let n = prep.len();
    let k = prep.k;
    if n < k {
        return None;
    }
    let suffix = prep.suffix_unions();
    if suffix[0] != prep.full {
        return None;
    }
    let mut incumbent = prep.greedy();
    let mut arena = Arena { nodes: Vec::new() };
    let mut levels: Vec<HashMap<u128, (T, u32)>> = (0..=k).map(|_| HashMap::new()).collect();
    levels[0].insert(0, (T::zero(), ROOT));
    let mut scratch: Vec<(u128, T, u32)> = Vec::new();

    for p in 0..n {
        let remaining_after = n - p - 1;
        let lowest = k.saturating_sub(remaining_after + 1);
        for c in (lowest..k.min(p + 1)).rev() {
            scratch.clear();
            scratch.extend(levels[c].iter().map(|(&m, &(v, node))| (m, v, node)));
            for &(mask, value, node) in &scratch {
                if (mask | suffix[p]) != prep.full {
                    continue;
                }
                let nc = c + 1;
                let nm = mask | prep.masks[p];
                if (nm | suffix[p + 1]) != prep.full {
                    continue;
                }
                let nv = value + prep.sims[p];
                if let Some(best) = incumbent {
                    if prep.bound(nv, p + 1, k - nc) < best {
                        continue;
                    }
                }
                let replace = match levels[nc].get(&nm) {
                    None => true,
                    Some(&(old, old_node)) => {
                        if nv > old {
                            true
                        } else if nv < old {
                            false
                        } else {
                            let mut mine = arena.positions(node);
                            mine.push(p);
                            prep.lex_less(&mine, &arena.positions(old_node))
                        }
                    }
                };
                if replace {
                    let id = arena.push(p, node);
                    levels[nc].insert(nm, (nv, id));
                    if nc == k && nm == prep.full && incumbent.is_none_or(|b| nv > b) {
                        incumbent = Some(nv);
                    }
                }
            }
        }
    }
    levels[k].get(&prep.full).map(|&(_, node)| arena.positions(node))
}
