//! Greedy and beam search over any next-token scorer.

use std::cmp::Ordering;

use crate::tokenizer::TokenId;

/// Log-probabilities of the next token given the tokens generated so far
/// (the forced language tag is the scorer's business, not part of `generated`).
pub trait StepScorer {
    fn log_probs(&self, generated: &[TokenId]) -> Vec<f64>;
}

/// Index of the maximum, lowest index on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Takes the argmax at every step until EOS or `max_new` tokens.
pub fn greedy<S: StepScorer + ?Sized>(scorer: &S, eos: TokenId, max_new: usize) -> Vec<TokenId> {
    let mut out = Vec::new();
    while out.len() < max_new {
        let lp = scorer.log_probs(&out);
        let next = argmax(&lp) as TokenId;
        if next == eos {
            break;
        }
        out.push(next);
    }
    out
}

#[derive(Debug, Clone)]
struct Hyp {
    tokens: Vec<TokenId>,
    score: f64,
}

struct Candidate {
    parent: usize,
    token: TokenId,
    step_lp: f64,
    score: f64,
}

fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    // higher total first; then higher step log-prob (so one hypothesis
    // ranks its extensions exactly as greedy would), then token id, then
    // hypothesis order
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(b.step_lp.partial_cmp(&a.step_lp).unwrap_or(Ordering::Equal))
        .then(a.token.cmp(&b.token))
        .then(a.parent.cmp(&b.parent))
}

/// Length-unnormalized beam search. Returns the best finished hypothesis
/// (EOS excluded from the tokens, included in the score) and its score.
/// Hypotheses still alive when the budget runs out count as finished.
pub fn beam<S: StepScorer + ?Sized>(
    scorer: &S,
    eos: TokenId,
    beam: usize,
    max_new: usize,
) -> (Vec<TokenId>, f64) {
    let beam = beam.max(1);
    let mut alive = vec![Hyp {
        tokens: Vec::new(),
        score: 0.0,
    }];
    let mut finished: Vec<Hyp> = Vec::new();
    for _ in 0..max_new {
        let mut cands = Vec::new();
        for (hi, h) in alive.iter().enumerate() {
            let lp = scorer.log_probs(&h.tokens);
            for (t, &l) in lp.iter().enumerate() {
                cands.push(Candidate {
                    parent: hi,
                    token: t as TokenId,
                    step_lp: l,
                    score: h.score + l,
                });
            }
        }
        cands.sort_by(rank);
        // EOS among the top `beam` finishes a hypothesis; the live beam is
        // refilled to full width from the best non-EOS candidates
        let mut next = Vec::with_capacity(beam);
        for (rank_pos, c) in cands.into_iter().enumerate() {
            if next.len() == beam {
                break;
            }
            if c.token == eos {
                if rank_pos < beam {
                    finished.push(Hyp {
                        tokens: alive[c.parent].tokens.clone(),
                        score: c.score,
                    });
                }
            } else {
                let mut tokens = alive[c.parent].tokens.clone();
                tokens.push(c.token);
                next.push(Hyp {
                    tokens,
                    score: c.score,
                });
            }
        }
        alive = next;
        let best_finished = finished.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        let best_alive = alive.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        // scores only decrease as hypotheses grow
        if alive.is_empty() || best_finished >= best_alive {
            break;
        }
    }
    finished.extend(alive);
    let mut best = 0;
    for (i, h) in finished.iter().enumerate().skip(1) {
        if h.score > finished[best].score {
            best = i;
        }
    }
    let h = finished.swap_remove(best);
    (h.tokens, h.score)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    /// Hand-set table: prefix -> logits over {0: EOS, 1: a, 2: b}.
    struct Table(HashMap<Vec<TokenId>, [f64; 3]>);

    impl StepScorer for Table {
        fn log_probs(&self, generated: &[TokenId]) -> Vec<f64> {
            let z = self.0.get(generated).copied().unwrap_or([0.0, 0.0, 0.0]);
            let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
            z.iter().map(|v| v - lse).collect()
        }
    }

    fn garden_path() -> Table {
        // greedy takes `a` (slightly preferred) and then faces a flat
        // distribution; `b` leads to an almost certain EOS.
        let mut m = HashMap::new();
        m.insert(vec![], [-5.0, 0.2, 0.0]);
        m.insert(vec![1], [0.0, 0.0, 0.0]);
        m.insert(vec![2], [5.0, -5.0, -5.0]);
        Table(m)
    }

    #[test]
    fn greedy_follows_argmax() {
        let t = garden_path();
        let out = greedy(&t, 0, 3);
        assert_eq!(out[0], 1);
    }

    #[test]
    fn beam_one_equals_greedy() {
        let t = garden_path();
        for max_new in 0..4 {
            assert_eq!(beam(&t, 0, 1, max_new).0, greedy(&t, 0, max_new));
        }
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}
