//! Depth-first branch and bound, for alphabets too wide for the DP table.

use super::Prepared;
use crate::scalar::Scalar;

struct Search<'a, T> {
    prep: &'a Prepared<T>,
    suffix: Vec<u128>,
    stack: Vec<usize>,
    best: Option<(T, Vec<usize>)>,
}

impl<T: Scalar> Search<'_, T> {
    fn visit(&mut self, p: usize, covered: u128, value: T) {
        let k = self.prep.k;
        let taken = self.stack.len();
        if taken == k {
            if covered == self.prep.full {
                self.offer(value);
            }
            return;
        }
        let n = self.prep.len();
        if n - p < k - taken || (covered | self.suffix[p]) != self.prep.full {
            return;
        }
        if let Some((best, _)) = &self.best {
            if self.prep.bound(value, p, k - taken) < *best {
                return;
            }
        }
        // slots left must be able to cover what is missing
        let missing = self.prep.full & !covered;
        if missing != 0 && k - taken == 1 && self.prep.masks[p..].iter().all(|m| m & missing != missing) {
            return;
        }

        self.stack.push(p);
        self.visit(p + 1, covered | self.prep.masks[p], value + self.prep.sims[p]);
        self.stack.pop();
        self.visit(p + 1, covered, value);
    }

    fn offer(&mut self, value: T) {
        let better = match &self.best {
            None => true,
            Some((b, chosen)) => value > *b || (value == *b && self.prep.lex_less(&self.stack, chosen)),
        };
        if better {
            self.best = Some((value, self.stack.clone()));
        }
    }
}

pub(crate) fn solve<T: Scalar>(prep: &Prepared<T>) -> Option<Vec<usize>> {
    let mut search = Search {
        prep,
        suffix: prep.suffix_unions(),
        stack: Vec::with_capacity(prep.k),
        best: None,
    };
    search.visit(0, 0, T::zero());
    search.best.map(|(_, chosen)| chosen)
}
