//! Bipartite matching of predicted queries to ground-truth objects.

use crate::error::{Error, Result};
use crate::model::hungarian;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchWeights {
    pub dice: f64,
    pub bce: f64,
    pub cls: f64,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `1 - (2Σpt + 1) / (Σp + Σt + 1)` with `p = sigmoid(logits)`.
pub fn soft_dice_loss(logits: &[f64], target: &[f64]) -> f64 {
    let (mut pt, mut ps, mut ts) = (0.0, 0.0, 0.0);
    for (&x, &t) in logits.iter().zip(target) {
        let p = sigmoid(x);
        pt += p * t;
        ps += p;
        ts += t;
    }
    1.0 - (2.0 * pt + 1.0) / (ps + ts + 1.0)
}

/// Mean binary cross-entropy of `sigmoid(logits)` against `target`.
pub fn mean_bce(logits: &[f64], target: &[f64]) -> f64 {
    let s: f64 = logits
        .iter()
        .zip(target)
        .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
        .sum();
    s / logits.len().max(1) as f64
}

/// Matching cost components `(1 - dice, bce, cls)` for one query/object pair.
pub fn match_cost_terms(logits: &[f64], score_logit: f64, target: &[f64], is_target: bool) -> (f64, f64, f64) {
    let score = sigmoid(score_logit);
    let cls = if is_target { 1.0 - score } else { score };
    (soft_dice_loss(logits, target), mean_bce(logits, target), cls)
}

/// Minimum-cost assignment of objects to distinct queries. `logits` is
/// `queries × pixels` row-major, `scores` holds one referral logit per
/// query. Returns `(query, object)` pairs ordered by object.
pub fn match_predictions_to_gt(
    logits: &[f64],
    scores: &[f64],
    pixels: usize,
    targets: &[&[f64]],
    is_target: &[bool],
    w: &MatchWeights,
) -> Result<Vec<(usize, usize)>> {
    let nq = scores.len();
    let no = targets.len();
    if no > nq {
        return Err(Error::Config(format!(
            "{no} ground-truth objects exceed {nq} queries"
        )));
    }
    if logits.len() != nq * pixels || targets.iter().any(|t| t.len() != pixels) {
        return Err(Error::Shape {
            op: "match_predictions_to_gt",
            lhs: vec![nq, pixels],
            rhs: vec![no, targets.first().map_or(0, |t| t.len())],
        });
    }
    if no == 0 {
        return Ok(Vec::new());
    }
    // Rows are queries, columns objects; padding columns cost nothing.
    let mut cost = vec![0.0; nq * nq];
    for q in 0..nq {
        let row = &logits[q * pixels..(q + 1) * pixels];
        for (o, tgt) in targets.iter().enumerate() {
            let (d, b, c) = match_cost_terms(row, scores[q], tgt, is_target[o]);
            cost[q * nq + o] = w.dice * d + w.bce * b + w.cls * c;
        }
    }
    let a = hungarian(&cost, nq)?;
    let mut pairs: Vec<(usize, usize)> = a
        .permutation
        .iter()
        .enumerate()
        .filter(|&(_, &col)| col < no)
        .map(|(q, &o)| (q, o))
        .collect();
    pairs.sort_by_key(|&(_, o)| o);
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    const W: MatchWeights = MatchWeights {
        dice: 1.0,
        bce: 1.0,
        cls: 1.0,
    };

    #[test]
    fn perfect_prediction_costs_nothing() {
        let target = [1.0, 0.0, 1.0, 0.0];
        let logits: Vec<f64> = target.iter().map(|&t| if t > 0.5 { 40.0 } else { -40.0 }).collect();
        let (d, b, c) = match_cost_terms(&logits, 40.0, &target, true);
        assert!(d.abs() < 1e-12 && b < 1e-12 && c < 1e-12, "{d} {b} {c}");
    }

    #[test]
    fn crossing_assignment() {
        let a = [1.0, 1.0, 0.0, 0.0];
        let b = [0.0, 0.0, 1.0, 1.0];
        let logit = |m: &[f64]| m.iter().map(|&t| if t > 0.5 { 9.0 } else { -9.0 }).collect::<Vec<_>>();
        // Query 0 predicts object 1, query 1 predicts object 0.
        let logits = [logit(&b), logit(&a)].concat();
        let pairs = match_predictions_to_gt(&logits, &[0.0, 0.0], 4, &[&a, &b], &[true, false], &W).unwrap();
        assert_eq!(pairs, vec![(1, 0), (0, 1)]);
    }

    #[test]
    fn no_objects_no_pairs() {
        let pairs = match_predictions_to_gt(&[0.0; 8], &[0.0, 0.0], 4, &[], &[], &W).unwrap();
        assert!(pairs.is_empty());
    }

    #[test]
    fn too_many_objects_is_a_config_error() {
        let t = [0.0; 2];
        let err = match_predictions_to_gt(&[0.0; 2], &[0.0], 2, &[&t, &t], &[true, true], &W);
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
