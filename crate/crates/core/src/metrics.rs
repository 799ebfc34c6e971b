//! Quality metrics for operator and query results.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::hash::Hash;

use serde::Serialize;

use crate::operators::{Engine, OperatorError};
use crate::relation::{Cell, Relation};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("inputs have different lengths ({left} vs {right})")]
    LengthMismatch { left: usize, right: usize },
    #[error("prediction is not a permutation of the ground-truth rows")]
    NotAPermutation,
    #[error("cutoff k = {k} must be between 1 and {n}")]
    Cutoff { k: usize, n: usize },
    #[error("partition has no elements")]
    Empty,
    #[error("judge model `{0}` must differ from the task model")]
    SameJudgeModel(String),
    #[error("judge failed: {0}")]
    Judge(#[from] OperatorError),
}

/// String canonicalization applied before comparisons.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct Canon {
    pub case_fold: bool,
}

impl Canon {
    pub fn apply(&self, s: &str) -> String {
        let t = s.trim();
        if self.case_fold {
            t.to_lowercase()
        } else {
            t.to_string()
        }
    }

    fn cell(&self, c: &Cell) -> Option<String> {
        c.as_deref().map(|s| self.apply(s))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SetMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(hit: usize, total: usize, other_total: usize) -> f64 {
    match (total, other_total) {
        (0, 0) => 1.0,
        (0, _) => 0.0,
        _ => hit as f64 / total as f64,
    }
}

/// Precision, recall and F1 of a predicted element set against the truth.
pub fn prf<S: AsRef<str>>(pred: &[S], truth: &[S], canon: Canon) -> SetMetrics {
    let p: HashSet<String> = pred.iter().map(|s| canon.apply(s.as_ref())).collect();
    let t: HashSet<String> = truth.iter().map(|s| canon.apply(s.as_ref())).collect();
    let hit = p.intersection(&t).count();
    let precision = ratio(hit, p.len(), t.len());
    let recall = ratio(hit, t.len(), p.len());
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    SetMetrics {
        precision,
        recall,
        f1,
    }
}

fn same_len<A, B>(a: &[A], b: &[B]) -> Result<(), MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(())
}

/// Fraction of positions whose canonical strings are equal; 1.0 when empty.
pub fn exact_match_ratio<S: AsRef<str>>(
    pred: &[S],
    truth: &[S],
    canon: Canon,
) -> Result<f64, MetricError> {
    same_len(pred, truth)?;
    if pred.is_empty() {
        return Ok(1.0);
    }
    let hits = pred
        .iter()
        .zip(truth)
        .filter(|(a, b)| canon.apply(a.as_ref()) == canon.apply(b.as_ref()))
        .count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Fraction of positions a judge model deems semantically identical.
/// Canonically equal strings count as identical without a judge call.
pub async fn llm_judge_score<S: AsRef<str>>(
    pred: &[S],
    truth: &[S],
    judge: &Engine,
    task_model: &str,
    canon: Canon,
) -> Result<f64, MetricError> {
    same_len(pred, truth)?;
    if judge.gateway().model() == task_model {
        return Err(MetricError::SameJudgeModel(task_model.to_string()));
    }
    if pred.is_empty() {
        return Ok(1.0);
    }
    let pending: Vec<(&str, &str)> = pred
        .iter()
        .zip(truth)
        .map(|(a, b)| (a.as_ref(), b.as_ref()))
        .filter(|(a, b)| canon.apply(a) != canon.apply(b))
        .collect();
    let equal = pred.len() - pending.len();
    let judged = judge
        .judge_pairs(&pending)
        .await?
        .into_iter()
        .filter(|&b| b)
        .count();
    Ok((equal + judged) as f64 / pred.len() as f64)
}

type Contingency<'a, A, B> = (
    BTreeMap<(&'a A, &'a B), u64>,
    BTreeMap<&'a A, u64>,
    BTreeMap<&'a B, u64>,
);

fn contingency<'a, A: Ord, B: Ord>(pred: &'a [A], truth: &'a [B]) -> Contingency<'a, A, B> {
    let mut nij = BTreeMap::new();
    let mut ai = BTreeMap::new();
    let mut bj = BTreeMap::new();
    for (a, b) in pred.iter().zip(truth) {
        *nij.entry((a, b)).or_insert(0) += 1;
        *ai.entry(a).or_insert(0) += 1;
        *bj.entry(b).or_insert(0) += 1;
    }
    (nij, ai, bj)
}

fn choose2(x: u64) -> f64 {
    (x * x.saturating_sub(1)) as f64 / 2.0
}

/// Adjusted Rand index of two labelings of the same elements. Returns 1.0
/// when the index is undefined, which happens only for identical trivial
/// partitions.
pub fn ari<A: Ord, B: Ord>(pred: &[A], truth: &[B]) -> Result<f64, MetricError> {
    same_len(pred, truth)?;
    let n = pred.len() as u64;
    if n < 2 {
        return Ok(1.0);
    }
    let (nij, ai, bj) = contingency(pred, truth);
    let index: f64 = nij.values().map(|&x| choose2(x)).sum();
    let sa: f64 = ai.values().map(|&x| choose2(x)).sum();
    let sb: f64 = bj.values().map(|&x| choose2(x)).sum();
    let expected = sa * sb / choose2(n);
    let max = (sa + sb) / 2.0;
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

fn entropy<K>(counts: &BTreeMap<K, u64>, n: f64) -> f64 {
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information with the arithmetic-mean normalizer;
/// 1.0 when both labelings have zero entropy.
pub fn nmi<A: Ord, B: Ord>(pred: &[A], truth: &[B]) -> Result<f64, MetricError> {
    same_len(pred, truth)?;
    if pred.is_empty() {
        return Err(MetricError::Empty);
    }
    let n = pred.len() as f64;
    let (nij, ai, bj) = contingency(pred, truth);
    let (ha, hb) = (entropy(&ai, n), entropy(&bj, n));
    if ha == 0.0 && hb == 0.0 {
        return Ok(1.0);
    }
    let mi: f64 = nij
        .iter()
        .map(|((a, b), &c)| {
            let c = c as f64;
            c / n * (n * c / (ai[a] as f64 * bj[b] as f64)).ln()
        })
        .sum();
    Ok((mi / ((ha + hb) / 2.0)).clamp(0.0, 1.0))
}

fn check_ranking<T: Eq + Hash>(pred: &[T], truth: &[T], k: usize) -> Result<(), MetricError> {
    let n = truth.len();
    if k == 0 || k > n {
        return Err(MetricError::Cutoff { k, n });
    }
    if pred.len() != n {
        return Err(MetricError::NotAPermutation);
    }
    let mut counts: HashMap<&T, i64> = HashMap::new();
    for t in truth {
        *counts.entry(t).or_insert(0) += 1;
    }
    for p in pred {
        *counts.entry(p).or_insert(0) -= 1;
    }
    if counts.values().any(|&c| c != 0) {
        return Err(MetricError::NotAPermutation);
    }
    Ok(())
}

fn hits<'a, T: Eq + Hash>(pred: &'a [T], truth: &'a [T], k: usize) -> Vec<&'a T> {
    let top: HashSet<&T> = truth[..k].iter().collect();
    pred[..k].iter().filter(|p| top.contains(p)).collect()
}

/// Share of the true top-k rows that appear in the predicted top-k.
pub fn hit_rate_at_k<T: Eq + Hash>(pred: &[T], truth: &[T], k: usize) -> Result<f64, MetricError> {
    check_ranking(pred, truth, k)?;
    Ok(hits(pred, truth, k).len() as f64 / k as f64)
}

/// Kendall tau between the predicted and true relative orders of the hit
/// rows; 1.0 when fewer than two rows hit.
pub fn kendall_tau_on_hits<T: Eq + Hash>(
    pred: &[T],
    truth: &[T],
    k: usize,
) -> Result<f64, MetricError> {
    check_ranking(pred, truth, k)?;
    let h = hits(pred, truth, k);
    let m = h.len();
    if m <= 1 {
        return Ok(1.0);
    }
    let pos: HashMap<&T, usize> = truth.iter().enumerate().map(|(i, t)| (t, i)).collect();
    let mut seq: Vec<usize> = h.iter().map(|t| pos[t]).collect();
    let discordant = inversions(&mut seq);
    let pairs = (m * (m - 1) / 2) as f64;
    Ok((pairs - 2.0 * discordant as f64) / pairs)
}

/// Merge-sort inversion count; sorts `v`.
fn inversions(v: &mut [usize]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let (l, r) = v.split_at_mut(n / 2);
    let mut count = inversions(l) + inversions(r);
    let mut merged = Vec::with_capacity(n);
    let (mut i, mut j) = (0, 0);
    while i < l.len() && j < r.len() {
        if l[i] <= r[j] {
            merged.push(l[i]);
            i += 1;
        } else {
            merged.push(r[j]);
            count += (l.len() - i) as u64;
            j += 1;
        }
    }
    merged.extend_from_slice(&l[i..]);
    merged.extend_from_slice(&r[j..]);
    v.copy_from_slice(&merged);
    count
}

/// Whether two tables are identical: same columns, and the same rows either
/// in the same order or as multisets. Relation names are ignored.
pub fn table_exact_match(
    pred: &Relation,
    truth: &Relation,
    order_sensitive: bool,
    canon: Canon,
) -> bool {
    let cols = |r: &Relation| {
        r.columns()
            .iter()
            .map(|c| canon.apply(c))
            .collect::<Vec<_>>()
    };
    if cols(pred) != cols(truth) || pred.row_count() != truth.row_count() {
        return false;
    }
    let rows = |r: &Relation| {
        r.rows()
            .iter()
            .map(|row| row.iter().map(|c| canon.cell(c)).collect::<Vec<_>>())
            .collect::<Vec<_>>()
    };
    let (mut a, mut b) = (rows(pred), rows(truth));
    if !order_sensitive {
        a.sort();
        b.sort();
    }
    a == b
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{BackendConfig, Gateway, MockBackend, MockScript};
    use crate::prompt::PromptKit;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-9
    }

    #[test]
    fn prf_examples() {
        let m = prf(&["a", "b"], &["a", "c"], Canon::default());
        assert!(close(m.precision, 0.5) && close(m.recall, 0.5) && close(m.f1, 0.5));
        let empty: [&str; 0] = [];
        assert_eq!(prf(&empty, &["a"], Canon::default()).f1, 0.0);
        assert_eq!(prf(&empty, &empty, Canon::default()).f1, 1.0);
        assert_eq!(prf(&[" A"], &["a"], Canon { case_fold: true }).f1, 1.0);
        assert_eq!(prf(&[" A"], &["a"], Canon::default()).f1, 0.0);
    }

    #[test]
    fn exact_match_examples() {
        assert_eq!(
            exact_match_ratio(
                &["a", "b", "c", "d"],
                &["a", "x", "c", "y"],
                Canon::default()
            )
            .unwrap(),
            0.5
        );
        assert!(exact_match_ratio(&["a"], &["a", "b"], Canon::default()).is_err());
    }

    #[test]
    fn cluster_metric_conventions() {
        assert_eq!(ari(&[0, 0, 1, 1], &["x", "x", "y", "y"]).unwrap(), 1.0);
        assert_eq!(nmi(&[0, 0, 0], &[5, 5, 5]).unwrap(), 1.0);
        assert_eq!(nmi(&[0, 1, 2], &[7, 7, 7]).unwrap(), 0.0);
        assert!(ari(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn ranking_examples() {
        let truth = ["a", "b", "c", "d"];
        assert_eq!(
            hit_rate_at_k(&["a", "c", "b", "d"], &truth, 2).unwrap(),
            0.5
        );
        assert_eq!(
            hit_rate_at_k(&["d", "c", "b", "a"], &truth, 4).unwrap(),
            1.0
        );
        assert_eq!(
            kendall_tau_on_hits(&["d", "c", "b", "a"], &truth, 4).unwrap(),
            -1.0
        );
        assert_eq!(
            kendall_tau_on_hits(&["a", "c", "b", "d"], &truth, 2).unwrap(),
            1.0
        );
        assert!(hit_rate_at_k(&["a", "a", "b", "c"], &truth, 2).is_err());
        assert!(hit_rate_at_k(&truth, &truth, 5).is_err());
    }

    #[test]
    fn table_match() {
        let t = Relation::from_strs("out", &["Name"], &[&["Alley Wok"]]).unwrap();
        let p = Relation::from_strs("Restaurants", &["Name"], &[&["Alley Wok"]]).unwrap();
        assert!(table_exact_match(&p, &t, true, Canon::default()));
        let a = Relation::from_strs("r", &["x"], &[&["1"], &["2"]]).unwrap();
        let b = Relation::from_strs("r", &["x"], &[&["2"], &["1"]]).unwrap();
        assert!(table_exact_match(&a, &b, false, Canon::default()));
        assert!(!table_exact_match(&a, &b, true, Canon::default()));
        let c = Relation::from_strs("r", &["x"], &[&["2"], &["1"], &["1"]]).unwrap();
        assert!(!table_exact_match(&a, &c, false, Canon::default()));
    }

    fn judge(script: MockScript, model: &str) -> (Engine, Arc<MockBackend>) {
        let mock = Arc::new(MockBackend::new(script.model(model)));
        let gw = Gateway::new(mock.clone(), BackendConfig::default()).unwrap();
        (Engine::new(gw, PromptKit::default()), mock)
    }

    #[tokio::test(start_paused = true)]
    async fn judge_score() {
        let (eng, mock) = judge(MockScript::new(), "judge");
        assert_eq!(
            llm_judge_score(&["a", "b"], &["a", "b"], &eng, "task", Canon::default())
                .await
                .unwrap(),
            1.0
        );
        assert_eq!(mock.stats().calls, 0);

        let (eng, mock) = judge(
            MockScript::new().responses([
                "{\"same\": true}",
                "{\"same\": false}",
                "{\"same\": true}",
                "{\"same\": false}",
            ]),
            "judge",
        );
        let s = llm_judge_score(
            &["1", "2", "3", "4"],
            &["a", "b", "c", "d"],
            &eng,
            "task",
            Canon::default(),
        )
        .await
        .unwrap();
        assert_eq!(s, 0.5);
        assert_eq!(mock.stats().calls, 4);

        let (eng, _) = judge(MockScript::new(), "task");
        assert!(matches!(
            llm_judge_score(&["a"], &["b"], &eng, "task", Canon::default()).await,
            Err(MetricError::SameJudgeModel(_))
        ));
    }

    fn relabel(labels: &[u8], perm: &[u8]) -> Vec<u8> {
        labels.iter().map(|&l| perm[l as usize]).collect()
    }

    proptest! {
        #[test]
        fn prf_swap_symmetry(p in proptest::collection::vec("[a-d]", 0..5), t in proptest::collection::vec("[a-d]", 0..5)) {
            let a = prf(&p, &t, Canon::default());
            let b = prf(&t, &p, Canon::default());
            prop_assert!(close(a.precision, b.recall) && close(a.recall, b.precision) && close(a.f1, b.f1));
        }

        #[test]
        fn cluster_metrics_label_invariant(
            a in proptest::collection::vec(0u8..4, 1..9),
            b in proptest::collection::vec(0u8..4, 1..9),
            perm in Just(vec![0u8, 1, 2, 3]).prop_shuffle(),
        ) {
            let n = a.len().min(b.len());
            let (a, b) = (&a[..n], &b[..n]);
            prop_assert!(close(ari(a, b).unwrap(), ari(&relabel(a, &perm), b).unwrap()));
            prop_assert!(close(nmi(a, b).unwrap(), nmi(a, &relabel(b, &perm)).unwrap()));
            let mut idx: Vec<usize> = (0..n).collect();
            idx.reverse();
            let ra: Vec<u8> = idx.iter().map(|&i| a[i]).collect();
            let rb: Vec<u8> = idx.iter().map(|&i| b[i]).collect();
            prop_assert!(close(ari(a, b).unwrap(), ari(&ra, &rb).unwrap()));
            prop_assert!(close(nmi(a, b).unwrap(), nmi(&ra, &rb).unwrap()));
        }

        #[test]
        fn tau_self_is_one(p in Just((0..8).collect::<Vec<u8>>()).prop_shuffle(), k in 1usize..=8) {
            prop_assert_eq!(kendall_tau_on_hits(&p, &p, k).unwrap(), 1.0);
        }

        #[test]
        fn table_match_is_symmetric(a in proptest::collection::vec("[ab]", 0..4), b in proptest::collection::vec("[ab]", 0..4), os in any::<bool>()) {
            let mk = |v: &[String]| Relation::new("r", vec!["x".into()], v.iter().map(|s| vec![Some(s.clone())]).collect()).unwrap();
            let (ra, rb) = (mk(&a), mk(&b));
            prop_assert!(table_exact_match(&ra, &ra, os, Canon::default()));
            prop_assert_eq!(table_exact_match(&ra, &rb, os, Canon::default()), table_exact_match(&rb, &ra, os, Canon::default()));
        }
    }
}
