//! Automatic metrics for generated knowledge and responses.
//!
//! Every metric works on [`TokenSeq`]s produced by [`normalize`]: lowercase,
//! punctuation removed, whitespace split, articles kept.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

/// F-measure weight for ROUGE-L. Recall is weighted `beta` times precision.
pub const ROUGE_L_BETA: f64 = 1.2;

/// METEOR constants (exact-match only, classic parameterisation).
const METEOR_ALPHA_RECALL_WEIGHT: f64 = 9.0;
const METEOR_GAMMA: f64 = 0.5;
const METEOR_BETA: i32 = 3;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(Vec<String>);

impl TokenSeq {
    /// Wrap pre-tokenized input. Empty strings are dropped.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        TokenSeq(
            tokens
                .into_iter()
                .map(Into::into)
                .filter(|t: &String| !t.is_empty())
                .collect(),
        )
    }

    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Lowercase, split punctuation off as separate tokens and drop it, then split
/// on whitespace.
///
/// Any character that is neither alphanumeric nor whitespace counts as
/// punctuation, so `"don't"` becomes `["don", "t"]`.
pub fn normalize(text: &str) -> TokenSeq {
    let cleaned: String = text
        .chars()
        .flat_map(char::to_lowercase)
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    TokenSeq(cleaned.split_whitespace().map(str::to_owned).collect())
}

fn counts<T: Eq + Hash, I: IntoIterator<Item = T>>(items: I) -> HashMap<T, usize> {
    let mut map = HashMap::new();
    for item in items {
        *map.entry(item).or_insert(0) += 1;
    }
    map
}

/// Multiset intersection size: sum over types of min(count_a, count_b).
pub fn overlap_count(a: &TokenSeq, b: &TokenSeq) -> usize {
    let cb = counts(b.0.iter());
    counts(a.0.iter())
        .into_iter()
        .map(|(tok, n)| n.min(cb.get(tok).copied().unwrap_or(0)))
        .sum()
}

pub fn unigram_f1(hypothesis: &TokenSeq, reference: &TokenSeq) -> f64 {
    if hypothesis.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let common = overlap_count(hypothesis, reference);
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / hypothesis.len() as f64;
    let recall = common as f64 / reference.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Knowledge F1: unigram F1 of a response against the gold knowledge.
pub fn kf1(response: &TokenSeq, gold_knowledge: &TokenSeq) -> f64 {
    unigram_f1(response, gold_knowledge)
}

/// Share of response tokens that also appear in the generated knowledge.
/// `None` when the response is empty.
pub fn ratio_knwl(generated_knowledge: &TokenSeq, generated_response: &TokenSeq) -> Option<f64> {
    if generated_response.is_empty() {
        return None;
    }
    Some(overlap_count(generated_response, generated_knowledge) as f64 / generated_response.len() as f64)
}

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    if tokens.len() < n {
        return HashMap::new();
    }
    counts(tokens.windows(n))
}

/// Sentence-level cumulative BLEU-k for k = 1..=4.
///
/// Orders ≥ 2 with zero clipped matches use `1 / (count + 1)` in place of the
/// zero precision. The brevity penalty uses the reference length closest to
/// the hypothesis length (shorter wins ties).
pub fn bleu_per_order(hypothesis: &TokenSeq, references: &[TokenSeq]) -> [f64; 4] {
    let hyp = hypothesis.tokens();
    if hyp.is_empty() || references.is_empty() {
        return [0.0; 4];
    }

    let mut precisions = [0.0f64; 4];
    for (i, slot) in precisions.iter_mut().enumerate() {
        let order = i + 1;
        let hyp_counts = ngrams(hyp, order);
        let mut max_ref: HashMap<&[String], usize> = HashMap::new();
        for r in references {
            for (gram, c) in ngrams(r.tokens(), order) {
                let e = max_ref.entry(gram).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let total = hyp.len().saturating_sub(order - 1);
        let matched: usize = hyp_counts
            .iter()
            .map(|(g, c)| (*c).min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
        *slot = if matched > 0 {
            matched as f64 / total as f64
        } else if order == 1 {
            0.0
        } else {
            1.0 / (total as f64 + 1.0)
        };
    }

    if precisions[0] == 0.0 {
        return [0.0; 4];
    }

    let c = hyp.len();
    let r = references
        .iter()
        .map(TokenSeq::len)
        .min_by_key(|&len| (len.abs_diff(c), len))
        .unwrap_or(0);
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };

    let mut out = [0.0; 4];
    for k in 1..=4 {
        let log_sum: f64 = precisions[..k].iter().map(|p| p.ln() / k as f64).sum();
        out[k - 1] = bp * log_sum.exp();
    }
    out
}

/// Mean of BLEU-1..4.
pub fn avg_bleu(hypothesis: &TokenSeq, references: &[TokenSeq]) -> f64 {
    bleu_per_order(hypothesis, references).iter().sum::<f64>() / 4.0
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F-measure with recall weighted by [`ROUGE_L_BETA`].
pub fn rouge_l(hypothesis: &TokenSeq, reference: &TokenSeq) -> f64 {
    let lcs = lcs_len(hypothesis.tokens(), reference.tokens());
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / hypothesis.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    let b2 = ROUGE_L_BETA * ROUGE_L_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Exact-match METEOR.
///
/// Each hypothesis token is aligned to an unused identical reference token,
/// preferring the position right after the previous alignment (so runs stay
/// in one chunk) and otherwise the earliest free position.
pub fn meteor(hypothesis: &TokenSeq, reference: &TokenSeq) -> f64 {
    let hyp = hypothesis.tokens();
    let refs = reference.tokens();
    if hyp.is_empty() || refs.is_empty() {
        return 0.0;
    }
    let mut used = vec![false; refs.len()];
    let mut alignment: Vec<(usize, usize)> = Vec::new();
    let mut last_ref: Option<usize> = None;
    for (i, tok) in hyp.iter().enumerate() {
        let next = last_ref.map(|j| j + 1).filter(|&j| j < refs.len() && !used[j] && &refs[j] == tok);
        let pick = next.or_else(|| (0..refs.len()).find(|&j| !used[j] && &refs[j] == tok));
        if let Some(j) = pick {
            used[j] = true;
            alignment.push((i, j));
            last_ref = Some(j);
        }
    }
    let m = alignment.len();
    if m == 0 {
        return 0.0;
    }
    let chunks = 1 + alignment
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count();
    let p = m as f64 / hyp.len() as f64;
    let r = m as f64 / refs.len() as f64;
    let f_mean = (1.0 + METEOR_ALPHA_RECALL_WEIGHT) * p * r / (r + METEOR_ALPHA_RECALL_WEIGHT * p);
    let penalty = METEOR_GAMMA * (chunks as f64 / m as f64).powi(METEOR_BETA);
    f_mean * (1.0 - penalty)
}

/// Which generated text the reference-based metrics are computed on.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreTarget {
    /// Generated response against the gold response (KF1 against gold knowledge).
    #[default]
    Response,
    /// Generated knowledge against the gold knowledge.
    Knowledge,
}

/// Inputs for one scored row.
#[derive(Debug, Clone)]
pub struct ScoreRow<'a> {
    pub id: &'a str,
    pub generated_knowledge: &'a str,
    pub generated_response: &'a str,
    pub gold_knowledge: &'a str,
    pub gold_response: &'a str,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RowScores {
    pub id: String,
    pub avg_bleu: Option<f64>,
    pub meteor: Option<f64>,
    pub rouge_l: Option<f64>,
    pub f1: Option<f64>,
    pub kf1: Option<f64>,
    pub ratio_knwl: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub count: usize,
}

impl Aggregate {
    fn of(values: impl Iterator<Item = Option<f64>>) -> Self {
        let (sum, count) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
        Aggregate {
            mean: if count == 0 { 0.0 } else { sum / count as f64 },
            count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub target: ScoreTarget,
    pub rows_total: usize,
    /// Rows whose reference was empty, excluded from B/M/R-L/F1.
    pub excluded_empty_reference: usize,
    pub avg_bleu: Aggregate,
    pub meteor: Aggregate,
    pub rouge_l: Aggregate,
    pub f1: Aggregate,
    pub kf1: Aggregate,
    pub ratio_knwl: Aggregate,
    pub rows: Vec<RowScores>,
}

pub fn score_row(row: &ScoreRow<'_>, target: ScoreTarget) -> RowScores {
    let gen_k = normalize(row.generated_knowledge);
    let gen_r = normalize(row.generated_response);
    let gold_k = normalize(row.gold_knowledge);
    let gold_r = normalize(row.gold_response);

    let (hyp, reference) = match target {
        ScoreTarget::Response => (&gen_r, &gold_r),
        ScoreTarget::Knowledge => (&gen_k, &gold_k),
    };
    let mut out = RowScores {
        id: row.id.to_owned(),
        ..Default::default()
    };
    if !reference.is_empty() {
        out.avg_bleu = Some(avg_bleu(hyp, std::slice::from_ref(reference)));
        out.meteor = Some(meteor(hyp, reference));
        out.rouge_l = Some(rouge_l(hyp, reference));
        out.f1 = Some(unigram_f1(hyp, reference));
    }
    if target == ScoreTarget::Response {
        if !gold_k.is_empty() {
            out.kf1 = Some(kf1(&gen_r, &gold_k));
        }
        out.ratio_knwl = ratio_knwl(&gen_k, &gen_r);
    }
    out
}

/// Score every row and aggregate by arithmetic mean over contributing rows.
pub fn score_batch(rows: &[ScoreRow<'_>], target: ScoreTarget) -> MetricReport {
    let scored: Vec<RowScores> = rows.iter().map(|r| score_row(r, target)).collect();
    MetricReport::from_rows(scored, target)
}

impl MetricReport {
    pub fn from_rows(rows: Vec<RowScores>, target: ScoreTarget) -> Self {
        let excluded = rows.iter().filter(|r| r.f1.is_none()).count();
        MetricReport {
            target,
            rows_total: rows.len(),
            excluded_empty_reference: excluded,
            avg_bleu: Aggregate::of(rows.iter().map(|r| r.avg_bleu)),
            meteor: Aggregate::of(rows.iter().map(|r| r.meteor)),
            rouge_l: Aggregate::of(rows.iter().map(|r| r.rouge_l)),
            f1: Aggregate::of(rows.iter().map(|r| r.f1)),
            kf1: Aggregate::of(rows.iter().map(|r| r.kf1)),
            ratio_knwl: Aggregate::of(rows.iter().map(|r| r.ratio_knwl)),
            rows,
        }
    }
}
