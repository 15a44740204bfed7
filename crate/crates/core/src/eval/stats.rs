use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::metrics::normalize_answer;
use super::runner::Transcript;
use crate::hints::{closest_hint_related_rank, Hint};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StatsError {
    #[error("standard deviation needs at least 2 scores, got {0}")]
    TooFewScores(usize),
}

/// EM and F1 on a 0-100 scale over `n` scored queries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalScores {
    pub em: f64,
    pub f1: f64,
    pub n: usize,
}

impl EvalScores {
    /// Averages per-query (em, f1) pairs, with em in {0,1} and f1 in [0,1].
    pub fn from_pairs(pairs: impl IntoIterator<Item = (u8, f64)>) -> Self {
        let (mut em, mut f1, mut n) = (0.0, 0.0, 0usize);
        for (e, f) in pairs {
            em += f64::from(e);
            f1 += f;
            n += 1;
        }
        if n == 0 {
            return Self { em: 0.0, f1: 0.0, n: 0 };
        }
        Self {
            em: 100.0 * em / n as f64,
            f1: 100.0 * f1 / n as f64,
            n,
        }
    }

    /// Arithmetic mean of per-seed scores; `n` is the total query count.
    pub fn mean(scores: &[EvalScores]) -> Self {
        if scores.is_empty() {
            return Self { em: 0.0, f1: 0.0, n: 0 };
        }
        let k = scores.len() as f64;
        Self {
            em: scores.iter().map(|s| s.em).sum::<f64>() / k,
            f1: scores.iter().map(|s| s.f1).sum::<f64>() / k,
            n: scores.iter().map(|s| s.n).sum(),
        }
    }
}

/// Population standard deviation (divides by N).
pub fn population_std(scores: &[f64]) -> Result<f64, StatsError> {
    if scores.len() < 2 {
        return Err(StatsError::TooFewScores(scores.len()));
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    Ok(var.sqrt())
}

/// Counts of the closest hint-related rank. None hints and hints with no
/// example above the threshold land in `none`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankHistogram {
    pub buckets: BTreeMap<usize, usize>,
    pub none: usize,
}

impl RankHistogram {
    pub fn total(&self) -> usize {
        self.buckets.values().sum::<usize>() + self.none
    }

    pub fn count(&self, rank: usize) -> usize {
        self.buckets.get(&rank).copied().unwrap_or(0)
    }

    /// Fraction of all hints whose closest related example is at `rank`.
    pub fn mass(&self, rank: usize) -> f64 {
        match self.total() {
            0 => 0.0,
            t => self.count(rank) as f64 / t as f64,
        }
    }

    pub fn add(&mut self, rank: Option<usize>) {
        match rank {
            Some(r) => *self.buckets.entry(r).or_default() += 1,
            None => self.none += 1,
        }
    }
}

pub fn rank_histogram(hints: &[Hint], threshold: f64) -> RankHistogram {
    let mut h = RankHistogram::default();
    for hint in hints {
        let rank = if hint.none_flag {
            None
        } else {
            closest_hint_related_rank(&hint.source_attribution, threshold)
        };
        h.add(rank);
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub queries: usize,
    pub covered: usize,
    pub coverage: f64,
    /// EM (fraction) over covered queries; absent when nothing is covered.
    pub subset_accuracy: Option<f64>,
}

fn contains_run(haystack: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

/// A query is covered when some gold alias's normalized tokens occur
/// contiguously in a demonstration's normalized question + shown answer.
pub fn is_covered(transcript: &Transcript) -> bool {
    let golds: Vec<Vec<String>> = transcript.gold.iter().map(|g| normalize_answer(g)).collect();
    transcript.demonstration.iter().any(|d| {
        let text = normalize_answer(&format!("{} {}", d.question, d.first_answer()));
        golds.iter().any(|g| contains_run(&text, g))
    })
}

/// Failed transcripts are ignored.
pub fn coverage_report(transcripts: &[Transcript]) -> CoverageReport {
    let scored: Vec<&Transcript> = transcripts.iter().filter(|t| t.error.is_none()).collect();
    let covered: Vec<&Transcript> = scored.iter().copied().filter(|t| is_covered(t)).collect();
    let correct = covered.iter().filter(|t| t.em == 1).count();
    CoverageReport {
        queries: scored.len(),
        covered: covered.len(),
        coverage: if scored.is_empty() { 0.0 } else { covered.len() as f64 / scored.len() as f64 },
        subset_accuracy: (!covered.is_empty()).then(|| correct as f64 / covered.len() as f64),
    }
}

/// One row per ordering, one column group per method, plus population STDs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderSensitivity {
    pub rows: Vec<(String, BTreeMap<String, EvalScores>)>,
    /// method -> (EM std, F1 std); present when there are at least 2 orderings.
    pub std: BTreeMap<String, (f64, f64)>,
}

pub fn order_sensitivity(rows: Vec<(String, BTreeMap<String, EvalScores>)>) -> OrderSensitivity {
    let mut methods: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (_, cols) in &rows {
        for (m, s) in cols {
            let e = methods.entry(m.clone()).or_default();
            e.0.push(s.em);
            e.1.push(s.f1);
        }
    }
    let std = methods
        .into_iter()
        .filter_map(|(m, (em, f1))| Some((m, (population_std(&em).ok()?, population_std(&f1).ok()?))))
        .collect();
    OrderSensitivity { rows, std }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::eval::prompt::Method;
    use crate::hints::Attribution;
    use crate::store::QAExample;

    fn naive_std(xs: &[f64]) -> f64 {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        (xs.iter().map(|x| x * x).sum::<f64>() / n - m * m).max(0.0).sqrt()
    }

    #[test]
    fn table_three_stds() {
        let cols: [(&[f64], f64); 4] = [
            (&[39.80, 39.33, 38.27, 39.87], 0.64),
            (&[51.34, 50.84, 50.62, 51.63], 0.40),
            (&[41.60, 41.07, 40.20, 41.53], 0.56),
            (&[52.44, 51.98, 51.84, 52.75], 0.36),
        ];
        for (xs, expected) in cols {
            let s = population_std(xs).unwrap();
            assert!((s - expected).abs() < 0.005, "{xs:?}: {s}");
        }
        assert_eq!(population_std(&[3.0; 4]).unwrap(), 0.0);
        assert_eq!(population_std(&[1.0]), Err(StatsError::TooFewScores(1)));
    }

    fn hint(ranks_f1: &[f64], none: bool) -> Hint {
        Hint {
            query_id: "q".into(),
            text: if none { "None".into() } else { "x".into() },
            none_flag: none,
            source_attribution: ranks_f1
                .iter()
                .enumerate()
                .map(|(i, &f)| Attribution { example_id: format!("e{i}"), overlap_f1: f })
                .collect(),
            model_id: "m".into(),
        }
    }

    #[test]
    fn histogram_counts() {
        let hints = [
            hint(&[0.9, 0.0], false),
            hint(&[0.4, 0.0], false),
            hint(&[0.1, 0.5], false),
            hint(&[0.1, 0.1], false),
        ];
        let h = rank_histogram(&hints, 0.3);
        assert_eq!(h.buckets, BTreeMap::from([(1, 2), (2, 1)]));
        assert_eq!(h.none, 1);
        assert_eq!(h.mass(1), 0.5);

        let all_one = rank_histogram(&[hint(&[1.0], false), hint(&[0.8, 0.9], false)], 0.3);
        assert_eq!(all_one.mass(1), 1.0);
        assert_eq!(rank_histogram(&[hint(&[], true)], 0.3).none, 1);
    }

    fn transcript(gold: &str, demo_answer: &str, em: u8) -> Transcript {
        Transcript {
            seed: 0,
            method: Method::StandardIcl,
            query_id: "q".into(),
            question: "question".into(),
            gold: vec![gold.into()],
            demonstration: vec![QAExample {
                id: "d".into(),
                question: "some demo question".into(),
                answers: vec![demo_answer.into()],
            }],
            hint: None,
            recitation: None,
            prompt: String::new(),
            response: String::new(),
            prediction: String::new(),
            em,
            f1: f64::from(em),
            error: None,
        }
    }

    #[test]
    fn coverage_cases() {
        assert!(is_covered(&transcript("1948", "1948", 0)));
        assert!(is_covered(&transcript("Eiffel Tower", "the Eiffel tower.", 0)));
        assert!(!is_covered(&transcript("1948", "1947", 0)));
        assert!(!is_covered(&transcript("tower eiffel", "the Eiffel tower", 0)));

        // 6 covered (4 correct), 4 uncovered
        let mut ts: Vec<Transcript> = (0..6).map(|i| transcript("1948", "1948", u8::from(i < 4))).collect();
        ts.extend((0..4).map(|_| transcript("1948", "Paris", 1)));
        let r = coverage_report(&ts);
        assert_eq!((r.queries, r.covered), (10, 6));
        assert!((r.coverage - 0.60).abs() < 1e-12);
        assert!((r.subset_accuracy.unwrap() - 4.0 / 6.0).abs() < 1e-12);

        let mut failed = transcript("1948", "1948", 0);
        failed.error = Some("boom".into());
        let r = coverage_report(&[failed]);
        assert_eq!(r.queries, 0);
        assert_eq!(r.subset_accuracy, None);
    }

    #[test]
    fn scores_and_means() {
        let s = EvalScores::from_pairs([(1, 1.0), (0, 0.5), (0, 0.0), (1, 1.0)]);
        assert_eq!(s, EvalScores { em: 50.0, f1: 62.5, n: 4 });
        let m = EvalScores::mean(&[s, EvalScores { em: 30.0, f1: 40.0, n: 2 }]);
        assert_eq!(m, EvalScores { em: 40.0, f1: 51.25, n: 6 });
    }

    #[test]
    fn order_table_stds() {
        let cols = [(39.80, 51.34), (39.33, 50.84), (38.27, 50.62), (39.87, 51.63)];
        let rows = ["default", "reverse", "random:1", "random:2"]
            .iter()
            .zip(cols)
            .map(|(o, (em, f1))| (o.to_string(), BTreeMap::from([("standard_icl".to_string(), EvalScores { em, f1, n: 300 })])))
            .collect();
        let t = order_sensitivity(rows);
        let (em, f1) = t.std["standard_icl"];
        assert!((em - 0.64).abs() < 0.005 && (f1 - 0.40).abs() < 0.005);
    }

    proptest! {
        #[test]
        fn std_matches_naive_and_is_shift_invariant(xs in prop::collection::vec(-100.0f64..100.0, 2..20), c in -50.0f64..50.0) {
            let s = population_std(&xs).unwrap();
            prop_assert!((s - naive_std(&xs)).abs() < 1e-6);
            let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
            prop_assert!((population_std(&shifted).unwrap() - s).abs() < 1e-9);
        }
    }
}
