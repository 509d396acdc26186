//! Ranking distillation: graded relevance from the teacher's final-layer
//! token ranking, NDCG, and an NDCG-weighted pairwise logistic loss on the
//! student's early-layer importance scores.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{model_forward, special, EncoderModel};
use crate::scoring::{importance_scores, rank_tokens, TokenRanking};
use crate::tensor::Tensor;

/// Highest relevance grade; grades run `0..=MAX_GRADE`.
pub const MAX_GRADE: u32 = 4;
/// Pairwise logistic sharpness.
pub const SIGMA: f64 = 1.0;

/// Grade of every token from its rank: the ranked tokens are split into
/// `g_max + 1` contiguous bands, best band first. With fewer tokens than
/// bands each token gets its own band from the top. Unranked tokens get 0.
pub fn relevance_grades(r: &TokenRanking, g_max: u32) -> Result<Vec<u32>> {
    if g_max < 1 {
        return Err(Error::Config("at least two relevance grades are required".into()));
    }
    let bands = g_max as usize + 1;
    let n = r.order.len();
    let mut grades = vec![0; r.rank_of.len()];
    for (pos, &tok) in r.order.iter().enumerate() {
        let band = if n >= bands { pos * bands / n } else { pos };
        grades[tok] = g_max - band as u32;
    }
    Ok(grades)
}

fn gain(grade: u32) -> f64 {
    2f64.powi(grade as i32) - 1.0
}

fn discount(pos: usize) -> f64 {
    1.0 / ((pos + 1) as f64).log2()
}

/// `Σ (2^g − 1) / log2(pos + 1)` over 1-based positions.
pub fn dcg(grades_in_order: &[u32]) -> f64 {
    grades_in_order
        .iter()
        .enumerate()
        .map(|(k, &g)| gain(g) * discount(k + 1))
        .sum()
}

/// Positions (1-based) induced by sorting scores descending, ties by index.
fn score_positions(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut pos = vec![0; scores.len()];
    for (k, &i) in order.iter().enumerate() {
        pos[i] = k + 1;
    }
    pos
}

fn ideal_dcg(grades: &[u32]) -> f64 {
    let mut sorted = grades.to_vec();
    sorted.sort_by(|a, b| b.cmp(a));
    dcg(&sorted)
}

/// NDCG of the order induced by `scores`; 1 when every grade is zero.
pub fn ndcg(scores: &[f64], grades: &[u32]) -> Result<f64> {
    if scores.is_empty() || scores.len() != grades.len() {
        return Err(Error::Input("ndcg needs equally many scores and grades".into()));
    }
    let ideal = ideal_dcg(grades);
    if ideal == 0.0 {
        return Ok(1.0);
    }
    let pos = score_positions(scores);
    let mut in_order = vec![0; grades.len()];
    for (i, &p) in pos.iter().enumerate() {
        in_order[p - 1] = grades[i];
    }
    Ok(dcg(&in_order) / ideal)
}

/// Pairs `(i, j)` with `grade_i > grade_j` and their detached `|ΔNDCG|`
/// weights at the current score-induced positions.
fn lambda_pairs(scores: &[f64], grades: &[u32]) -> (Vec<usize>, Vec<usize>, Vec<f64>) {
    let ideal = ideal_dcg(grades);
    let (mut hi, mut lo, mut w) = (Vec::new(), Vec::new(), Vec::new());
    if ideal == 0.0 {
        return (hi, lo, w);
    }
    let pos = score_positions(scores);
    for i in 0..grades.len() {
        for j in 0..grades.len() {
            if grades[i] > grades[j] {
                let dg = (gain(grades[i]) - gain(grades[j])).abs();
                let dd = (discount(pos[i]) - discount(pos[j])).abs();
                hi.push(i);
                lo.push(j);
                w.push(dg * dd / ideal);
            }
        }
    }
    (hi, lo, w)
}

/// `Σ_{g_i > g_j} |ΔNDCG_ij|·ln(1 + exp(−σ(s_i − s_j)))` on the tape.
pub fn lambda_loss_on_tape(tape: &mut Tape, scores: Var, grades: &[u32]) -> Result<Var> {
    let values = tape.value(scores).data().to_vec();
    if values.len() != grades.len() {
        return Err(Error::Input("one grade per score required".into()));
    }
    let (hi, lo, w) = lambda_pairs(&values, grades);
    if hi.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let si = tape.gather_rows(scores, &hi)?;
    let sj = tape.gather_rows(scores, &lo)?;
    let diff = tape.sub(si, sj)?;
    let arg = tape.scale(diff, -SIGMA);
    let sp = tape.softplus(arg);
    let weights = tape.constant(Tensor::vector(w));
    let weighted = tape.mul(sp, weights)?;
    Ok(tape.sum(weighted))
}

/// Plain-value [`lambda_loss_on_tape`].
pub fn lambda_loss(scores: &[f64], grades: &[u32]) -> Result<f64> {
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::vector(scores.to_vec()));
    let l = lambda_loss_on_tape(&mut tape, s, grades)?;
    Ok(tape.item(l))
}

/// Final-layer ranking of the unpruned teacher for one example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherRanking {
    pub ranking: TokenRanking,
    /// Grade per token position; padding gets 0 and never participates.
    pub grades: Vec<u32>,
}

/// Number of leading non-padding tokens.
pub fn real_length(tokens: &[u32]) -> usize {
    tokens.iter().position(|&t| t == special::PAD).unwrap_or(tokens.len())
}

pub fn teacher_ranking(teacher: &EncoderModel, tokens: &[u32]) -> Result<TeacherRanking> {
    let n = real_length(tokens);
    if n == 0 {
        return Err(Error::Input("example has no real tokens".into()));
    }
    let mut tape = Tape::new();
    let params = teacher.params.record(&mut tape, false);
    let trace = model_forward(&mut tape, &teacher.config, &params, &tokens[..n], None)?;
    let last = trace.layers.last().expect("validated config has layers");
    let heads: Vec<Tensor> = last.attention.iter().map(|&a| tape.value(a).clone()).collect();
    let mut valid = vec![false; tokens.len()];
    valid[..n].fill(true);
    let mut padded = Vec::with_capacity(heads.len());
    for h in &heads {
        padded.push(pad_square(h, tokens.len())?);
    }
    let scores = importance_scores(&padded, &valid, teacher.config.num_layers)?.with_cls(0);
    let ranking = rank_tokens(&scores);
    let grades = relevance_grades(&ranking, MAX_GRADE)?;
    Ok(TeacherRanking { ranking, grades })
}

/// Embeds an `n×n` matrix in the top-left of a zero `size×size` matrix.
fn pad_square(a: &Tensor, size: usize) -> Result<Tensor> {
    let n = a.rows();
    let mut out = vec![0.0; size * size];
    for r in 0..n {
        out[r * size..r * size + n].copy_from_slice(a.row(r));
    }
    Tensor::new(vec![size, size], out)
}

/// Scores of one student layer over the tokens present in it.
#[derive(Clone, Debug)]
pub struct StudentScores {
    pub scores: Var,
    /// Original positions of the scored tokens, ascending.
    pub positions: Vec<usize>,
}

/// Sum of [`lambda_loss_on_tape`] over the given student layers, each
/// against the teacher grades of the tokens present in that layer.
pub fn distill_loss(tape: &mut Tape, teacher: &TeacherRanking, layers: &[StudentScores]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for layer in layers {
        let mut grades = Vec::with_capacity(layer.positions.len());
        for &p in &layer.positions {
            match teacher.ranking.rank_of.get(p) {
                Some(Some(_)) => grades.push(teacher.grades[p]),
                _ => {
                    return Err(Error::Input(format!(
                        "student token at position {p} has no teacher ranking"
                    )))
                }
            }
        }
        let l = lambda_loss_on_tape(tape, layer.scores, &grades)?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    Ok(total.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0))))
}
