//! Proposal-to-instance assignment over a `Q x N` instance-score matrix.

use std::cmp::Ordering;
use std::collections::VecDeque;

use super::ScoreMatrix;

/// Instance chosen for one proposal (column index into the score matrix).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Assignment {
    pub instance: Option<usize>,
    /// The matched score, or 0 for unassigned proposals.
    pub score: f64,
}

impl Assignment {
    pub const NONE: Assignment = Assignment { instance: None, score: 0.0 };
}

/// Proposal preference: higher score first, then lower instance index.
pub(crate) fn proposal_prefers(scores: &ScoreMatrix, q: usize, a: usize, b: usize) -> bool {
    match scores.get(q, a).total_cmp(&scores.get(q, b)) {
        Ordering::Greater => true,
        Ordering::Less => false,
        Ordering::Equal => a < b,
    }
}

/// Instance preference: higher score first, then lower proposal index.
pub(crate) fn instance_prefers(scores: &ScoreMatrix, n: usize, a: usize, b: usize) -> bool {
    match scores.get(a, n).total_cmp(&scores.get(b, n)) {
        Ordering::Greater => true,
        Ordering::Less => false,
        Ordering::Equal => a < b,
    }
}

/// Proposal-proposing deferred acceptance. Both sides rank by the shared
/// score matrix; exactly `min(Q, N)` pairs are matched.
pub fn assign_stable(scores: &ScoreMatrix) -> Vec<Assignment> {
    let (q_count, n_count) = (scores.rows(), scores.cols());
    let prefs: Vec<Vec<usize>> = (0..q_count)
        .map(|q| {
            let mut order: Vec<usize> = (0..n_count).collect();
            order.sort_by(|&a, &b| {
                if a == b {
                    Ordering::Equal
                } else if proposal_prefers(scores, q, a, b) {
                    Ordering::Less
                } else {
                    Ordering::Greater
                }
            });
            order
        })
        .collect();

    let mut next = vec![0usize; q_count];
    let mut holder: Vec<Option<usize>> = vec![None; n_count];
    let mut free: VecDeque<usize> = (0..q_count).collect();
    while let Some(q) = free.pop_front() {
        let Some(&n) = prefs[q].get(next[q]) else {
            // exhausted its list: stays unmatched
            continue;
        };
        next[q] += 1;
        match holder[n] {
            None => holder[n] = Some(q),
            Some(cur) if instance_prefers(scores, n, q, cur) => {
                holder[n] = Some(q);
                free.push_back(cur);
            }
            Some(_) => free.push_front(q),
        }
    }

    let mut out = vec![Assignment::NONE; q_count];
    for (n, h) in holder.iter().enumerate() {
        if let Some(q) = *h {
            out[q] = Assignment { instance: Some(n), score: scores.get(q, n) };
        }
    }
    out
}

/// Per-row argmax (lowest index on ties); several proposals may share an instance.
pub fn assign_argmax(scores: &ScoreMatrix) -> Vec<Assignment> {
    (0..scores.rows())
        .map(|q| {
            let row = scores.row(q);
            let mut best = 0;
            for (n, &s) in row.iter().enumerate().skip(1) {
                if s > row[best] {
                    best = n;
                }
            }
            match row.get(best) {
                Some(&s) => Assignment { instance: Some(best), score: s },
                None => Assignment::NONE,
            }
        })
        .collect()
}
