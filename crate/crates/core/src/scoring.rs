//! Attention-received token importance and deterministic token rankings.
//!
//! The importance of token `i` in a layer is the attention it receives,
//! averaged over heads and over the valid query tokens:
//! `s(i) = 1/(N_h·n) Σ_h Σ_j A_h[j, i]`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceScores {
    pub layer: usize,
    /// One score per token; invalid (PAD) tokens hold `-inf`.
    pub scores: Vec<f64>,
    pub valid: Vec<bool>,
    /// Index of the classification token, pinned to rank 1 when present.
    pub cls: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TieBreak {
    /// Equal scores are ordered by smaller original position first.
    LowerPositionFirst,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRanking {
    /// Valid token indices, best first.
    pub order: Vec<usize>,
    /// 1-based rank of every token; `None` for invalid tokens.
    pub rank_of: Vec<Option<usize>>,
    pub tie_break: TieBreak,
}

/// Scores from per-head `n×n` attention matrices. Queries and keys outside
/// `valid` are ignored; invalid tokens get `-inf`.
pub fn importance_scores(heads: &[Tensor], valid: &[bool], layer: usize) -> Result<ImportanceScores> {
    let n = valid.len();
    if heads.is_empty() {
        return Err(Error::Input("no attention heads".into()));
    }
    if heads.iter().any(|h| h.shape() != [n, n]) {
        return Err(Error::Dimension(format!("attention heads must be {n}×{n}")));
    }
    let weights: Vec<f64> = valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    let mut scores = weighted_received_attention(heads, &weights)?;
    for (s, &v) in scores.iter_mut().zip(valid) {
        if !v {
            *s = f64::NEG_INFINITY;
        }
    }
    Ok(ImportanceScores {
        layer,
        scores,
        valid: valid.to_vec(),
        cls: None,
    })
}

/// `Σ_h Σ_j w_j·A_h[j, i] / (N_h·Σ_j w_j)`: received attention averaged over
/// heads and over queries weighted by `w`.
pub fn weighted_received_attention(heads: &[Tensor], weights: &[f64]) -> Result<Vec<f64>> {
    let n = weights.len();
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::Input("no valid tokens to score".into()));
    }
    let mut out = vec![0.0; n];
    for h in heads {
        let a = h.data();
        for (j, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for i in 0..n {
                out[i] += w * a[j * n + i];
            }
        }
    }
    let denom = heads.len() as f64 * total;
    for v in &mut out {
        *v /= denom;
    }
    Ok(out)
}

/// Differentiable version of [`weighted_received_attention`]; `None`
/// weights mean every query counts.
pub fn received_attention_on_tape(tape: &mut Tape, heads: &[Var], weights: Option<Var>) -> Result<Var> {
    let n = tape.value(heads[0]).rows();
    let (w_row, norm) = match weights {
        Some(w) => {
            let row = tape.reshape(w, vec![1, n])?;
            let total = tape.sum(w);
            let total = tape.scale(total, heads.len() as f64);
            (row, Some(tape.recip(total)))
        }
        None => (tape.constant(Tensor::ones(&[1, n])), None),
    };
    let mut acc: Option<Var> = None;
    for &h in heads {
        let col = tape.matmul(w_row, h)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, col)?,
            None => col,
        });
    }
    let sum = tape.reshape(acc.expect("at least one head"), vec![n])?;
    match norm {
        Some(inv) => tape.mul_scalar(sum, inv),
        None => Ok(tape.scale(sum, 1.0 / (heads.len() * n) as f64)),
    }
}

impl ImportanceScores {
    pub fn with_cls(mut self, cls: usize) -> Self {
        self.cls = Some(cls);
        self
    }

    pub fn from_values(layer: usize, scores: Vec<f64>) -> Self {
        let valid = vec![true; scores.len()];
        Self {
            layer,
            scores,
            valid,
            cls: None,
        }
    }
}

/// Descending by score, ties by smaller position; the CLS token (if set and
/// valid) goes first regardless of its score.
pub fn rank_tokens(s: &ImportanceScores) -> TokenRanking {
    let mut order: Vec<usize> = (0..s.scores.len()).filter(|&i| s.valid[i]).collect();
    order.sort_by(|&a, &b| s.scores[b].total_cmp(&s.scores[a]).then(a.cmp(&b)));
    if let Some(cls) = s.cls {
        if let Some(at) = order.iter().position(|&i| i == cls) {
            order.remove(at);
            order.insert(0, cls);
        }
    }
    let mut rank_of = vec![None; s.scores.len()];
    for (r, &i) in order.iter().enumerate() {
        rank_of[i] = Some(r + 1);
    }
    TokenRanking {
        order,
        rank_of,
        tie_break: TieBreak::LowerPositionFirst,
    }
}

/// A contiguous band of 1-based rank positions, e.g. `top3 = 1..=3`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankBucket {
    pub name: String,
    pub first: usize,
    pub last: usize,
}

impl RankBucket {
    pub fn new(name: &str, first: usize, last: usize) -> Self {
        Self {
            name: name.into(),
            first,
            last,
        }
    }

    /// The default buckets: top 3, ranks 10-15 and ranks 20-25.
    pub fn defaults() -> Vec<Self> {
        vec![
            Self::new("top3", 1, 3),
            Self::new("top10-15", 10, 15),
            Self::new("top20-25", 20, 25),
        ]
    }
}

/// Summary statistics of the scores that fell into one bucket of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreDistributionRow {
    /// 1-based layer index.
    pub layer: usize,
    pub bucket: String,
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

/// Linear-interpolated quantile of sorted data.
pub(crate) fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.len() == 1 {
        return sorted[0];
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Groups per-example score vectors (one per example, already restricted to
/// real tokens) for each requested layer into rank buckets.
///
/// `per_example[e][l]` holds the scores of example `e` at layer `layers[l]`.
pub fn score_distribution(
    per_example: &[Vec<Vec<f64>>],
    layers: &[usize],
    buckets: &[RankBucket],
) -> Vec<ScoreDistributionRow> {
    if per_example.is_empty() {
        return Vec::new();
    }
    let mut rows = Vec::new();
    for (li, &layer) in layers.iter().enumerate() {
        for b in buckets {
            let mut vals = Vec::new();
            for ex in per_example {
                let mut sorted = ex[li].clone();
                sorted.sort_by(|a, b| b.total_cmp(a));
                for r in b.first..=b.last {
                    if let Some(&v) = sorted.get(r - 1) {
                        vals.push(v);
                    }
                }
            }
            if vals.is_empty() {
                continue;
            }
            vals.sort_by(f64::total_cmp);
            rows.push(ScoreDistributionRow {
                layer,
                bucket: b.name.clone(),
                count: vals.len(),
                mean: vals.iter().sum::<f64>() / vals.len() as f64,
                min: vals[0],
                q25: quantile(&vals, 0.25),
                median: quantile(&vals, 0.5),
                q75: quantile(&vals, 0.75),
                max: vals[vals.len() - 1],
            });
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one_head(rows: &[Vec<f64>]) -> Vec<Tensor> {
        vec![Tensor::from_rows(rows).unwrap()]
    }

    #[test]
    fn column_mean_examples() {
        let s = importance_scores(&one_head(&[vec![0.6, 0.4], vec![0.9, 0.1]]), &[true, true], 1).unwrap();
        assert!((s.scores[0] - 0.75).abs() < 1e-15 && (s.scores[1] - 0.25).abs() < 1e-15);
        let u = importance_scores(&one_head(&vec![vec![0.25; 4]; 4]), &[true; 4], 1).unwrap();
        assert!(u.scores.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let c = importance_scores(&one_head(&[vec![1.0, 0.0], vec![1.0, 0.0]]), &[true, true], 1).unwrap();
        assert_eq!(c.scores, vec![1.0, 0.0]);
        assert!(importance_scores(&one_head(&[vec![1.0]]), &[false], 1).is_err());
    }

    #[test]
    fn invalid_tokens_are_excluded() {
        let a = one_head(&[vec![0.5, 0.5, 0.0], vec![0.2, 0.8, 0.0], vec![0.3, 0.3, 0.4]]);
        let s = importance_scores(&a, &[true, true, false], 2).unwrap();
        assert_eq!(s.scores[2], f64::NEG_INFINITY);
        assert!((s.scores[0] - 0.35).abs() < 1e-15);
        let r = rank_tokens(&s);
        assert_eq!(r.order, vec![1, 0]);
        assert_eq!(r.rank_of, vec![Some(2), Some(1), None]);
    }

    #[test]
    fn ranking_examples() {
        let r = rank_tokens(&ImportanceScores::from_values(1, vec![0.75, 0.25]));
        assert_eq!(r.order, vec![0, 1]);
        let r = rank_tokens(&ImportanceScores::from_values(1, vec![0.3; 4]));
        assert_eq!(r.order, vec![0, 1, 2, 3]);
        let r = rank_tokens(&ImportanceScores::from_values(1, vec![0.1, 0.9, 0.9]));
        assert_eq!(r.order, vec![1, 2, 0]);
        let r = rank_tokens(&ImportanceScores::from_values(1, vec![0.1, 0.9, 0.9]).with_cls(0));
        assert_eq!(r.order, vec![0, 1, 2]);
        assert_eq!(r.rank_of[0], Some(1));
    }

    #[test]
    fn tape_scores_match_plain_scores() {
        let heads = [
            Tensor::from_rows(&[vec![0.6, 0.3, 0.1], vec![0.2, 0.2, 0.6], vec![0.5, 0.25, 0.25]]).unwrap(),
            Tensor::from_rows(&[vec![0.1, 0.8, 0.1], vec![0.3, 0.3, 0.4], vec![0.0, 0.5, 0.5]]).unwrap(),
        ];
        let w = [0.5, 1.0, 0.25];
        let plain = weighted_received_attention(&heads, &w).unwrap();
        let mut t = Tape::new();
        let hv: Vec<Var> = heads.iter().map(|h| t.constant(h.clone())).collect();
        let wv = t.constant(Tensor::vector(w.to_vec()));
        let s = received_attention_on_tape(&mut t, &hv, Some(wv)).unwrap();
        for (a, b) in t.value(s).data().iter().zip(&plain) {
            assert!((a - b).abs() < 1e-15);
        }
        let s1 = received_attention_on_tape(&mut t, &hv, None).unwrap();
        let p1 = weighted_received_attention(&heads, &[1.0; 3]).unwrap();
        for (a, b) in t.value(s1).data().iter().zip(&p1) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn distribution_report_examples() {
        assert!(score_distribution(&[], &[1], &RankBucket::defaults()).is_empty());
        let ex = vec![vec![vec![0.1, 0.4, 0.2, 0.3]]];
        let rows = score_distribution(&ex, &[1], &[RankBucket::new("top3", 1, 3)]);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].count, 3);
        assert_eq!((rows[0].max, rows[0].median, rows[0].min), (0.4, 0.3, 0.2));
    }

    fn stochastic_rows(raw: &[Vec<f64>]) -> Vec<Tensor> {
        let rows: Vec<Vec<f64>> = raw
            .iter()
            .map(|r| {
                let s: f64 = r.iter().sum();
                r.iter().map(|v| v / s).collect()
            })
            .collect();
        vec![Tensor::from_rows(&rows).unwrap()]
    }

    proptest! {
        #[test]
        fn mean_score_is_one_over_n(raw in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 5), 5)) {
            let heads = stochastic_rows(&raw);
            let s = importance_scores(&heads, &[true; 5], 1).unwrap();
            let mean = s.scores.iter().sum::<f64>() / 5.0;
            prop_assert!((mean - 0.2).abs() < 1e-12);
        }

        #[test]
        fn ranking_is_scale_invariant(scores in prop::collection::vec(0.0f64..1.0, 1..20), c in 0.01f64..100.0) {
            let a = rank_tokens(&ImportanceScores::from_values(1, scores.clone()).with_cls(0));
            let scaled: Vec<f64> = scores.iter().map(|v| v * c).collect();
            let b = rank_tokens(&ImportanceScores::from_values(1, scaled).with_cls(0));
            prop_assert_eq!(a.order, b.order);
        }

        #[test]
        fn ranking_is_a_permutation(scores in prop::collection::vec(0.0f64..1.0, 1..30)) {
            let r = rank_tokens(&ImportanceScores::from_values(1, scores.clone()));
            let mut seen = r.order.clone();
            seen.sort();
            prop_assert_eq!(seen, (0..scores.len()).collect::<Vec<_>>());
            for (k, &i) in r.order.iter().enumerate() {
                prop_assert_eq!(r.rank_of[i], Some(k + 1));
            }
        }

        #[test]
        fn scores_permute_with_tokens(raw in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 4), 4), perm_seed in 0u64..1000) {
            let heads = stochastic_rows(&raw);
            let mut perm: Vec<usize> = (0..4).collect();
            crate::rng::Rng::new(perm_seed).shuffle(&mut perm);
            let a = heads[0].data();
            let mut p = vec![0.0; 16];
            for r in 0..4 {
                for c in 0..4 {
                    p[r * 4 + c] = a[perm[r] * 4 + perm[c]];
                }
            }
            let permuted = vec![Tensor::new(vec![4, 4], p).unwrap()];
            let s = importance_scores(&heads, &[true; 4], 1).unwrap();
            let sp = importance_scores(&permuted, &[true; 4], 1).unwrap();
            for k in 0..4 {
                prop_assert!((sp.scores[k] - s.scores[perm[k]]).abs() < 1e-12);
            }
        }
    }
}
