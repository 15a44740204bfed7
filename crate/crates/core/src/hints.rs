//! Hint extraction: prompt the LLM to pull query-related knowledge out of the
//! retrieved examples, filter "None" answers, and attribute each hint back to
//! the examples it overlaps with.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::metrics::token_f1;
use crate::llm::{CallSettings, ChatModel, LlmError};
use crate::store::{QAExample, RetrievalResult};

pub const HINT_INSTRUCTION_PREFIX: &str =
    "Please infer from the following QA-pairs step by step, and return the information related to ";
pub const HINT_INSTRUCTION_SUFFIX: &str = ". If there is no information, please return \"None\"";

/// Default F1 threshold above which an example counts as hint-related.
pub const DEFAULT_ATTRIBUTION_THRESHOLD: f64 = 0.3;

#[derive(Debug, Error)]
pub enum HintError {
    #[error("example set is empty")]
    EmptyExampleSet,
    #[error("hint extraction failed for query {query_id}: {source}")]
    Llm {
        query_id: String,
        #[source]
        source: LlmError,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub example_id: String,
    pub overlap_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hint {
    pub query_id: String,
    pub text: String,
    pub none_flag: bool,
    /// One entry per shown example, in retrieval-rank order. Empty for None hints.
    #[serde(rename = "attribution")]
    pub source_attribution: Vec<Attribution>,
    pub model_id: String,
}

impl Hint {
    /// The hint text if it may be shown to the model.
    pub fn usable_text(&self) -> Option<&str> {
        (!self.none_flag).then_some(self.text.as_str())
    }
}

/// The k examples retrieved for one query, in rank order.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleSet {
    pub query_id: String,
    pub items: Vec<(QAExample, RetrievalResult)>,
}

impl ExampleSet {
    pub fn new(query_id: impl Into<String>, mut items: Vec<(QAExample, RetrievalResult)>) -> Self {
        items.sort_by_key(|(_, r)| r.rank);
        Self {
            query_id: query_id.into(),
            items,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn examples(&self) -> impl Iterator<Item = &QAExample> {
        self.items.iter().map(|(e, _)| e)
    }
}

pub fn hint_instruction(query: &str) -> String {
    format!("{HINT_INSTRUCTION_PREFIX}{query}{HINT_INSTRUCTION_SUFFIX}")
}

pub fn render_qa_block(ex: &QAExample) -> String {
    format!("Q: {}\nA: {}", ex.question, ex.first_answer())
}

/// Instruction line, then one `Q:/A:` block per example in retrieval order.
pub fn render_hint_prompt(query: &str, examples: &ExampleSet) -> Result<String, HintError> {
    if examples.is_empty() {
        return Err(HintError::EmptyExampleSet);
    }
    let blocks: Vec<String> = examples.examples().map(render_qa_block).collect();
    Ok(format!("{}\n\n{}", hint_instruction(query), blocks.join("\n\n")))
}

/// True for the model's "no information" answer: after trimming and dropping
/// punctuation and quotes, the text is "none" in any case. Empty text counts too.
pub fn is_none_response(text: &str) -> bool {
    let core: String = text
        .chars()
        .filter(|c| !c.is_whitespace() && !c.is_ascii_punctuation() && !matches!(c, '“' | '”' | '‘' | '’'))
        .collect();
    core.is_empty() || core.eq_ignore_ascii_case("none")
}

/// Overlap F1 of the hint against each example's question + answer text
/// (max over answer aliases), in retrieval order.
pub fn attribute_hint(hint_text: &str, examples: &ExampleSet) -> Vec<Attribution> {
    examples
        .examples()
        .map(|ex| {
            let targets: Vec<String> = ex
                .answers
                .iter()
                .map(|a| format!("{} {}", ex.question, a))
                .collect();
            Attribution {
                example_id: ex.id.clone(),
                overlap_f1: token_f1(hint_text, &targets),
            }
        })
        .collect()
}

pub fn extract_hint(
    llm: &dyn ChatModel,
    settings: &CallSettings,
    query_id: &str,
    query: &str,
    examples: &ExampleSet,
) -> Result<Hint, HintError> {
    let prompt = render_hint_prompt(query, examples)?;
    let request = settings.request(prompt, format!("hint:{query_id}"));
    let response = llm.complete(&request).map_err(|source| HintError::Llm {
        query_id: query_id.to_string(),
        source,
    })?;
    let text = response.text.trim().to_string();
    let none_flag = is_none_response(&text);
    let source_attribution = if none_flag {
        Vec::new()
    } else {
        attribute_hint(&text, examples)
    };
    Ok(Hint {
        query_id: query_id.to_string(),
        text,
        none_flag,
        source_attribution,
        model_id: settings.model_id.clone(),
    })
}

/// Smallest 1-based rank whose overlap reaches `threshold`.
pub fn closest_hint_related_rank(attribution: &[Attribution], threshold: f64) -> Option<usize> {
    attribution
        .iter()
        .position(|a| a.overlap_f1 >= threshold)
        .map(|i| i + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{MockChat, MockScript};

    fn ex(id: &str, q: &str, a: &[&str]) -> QAExample {
        QAExample {
            id: id.into(),
            question: q.into(),
            answers: a.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn set(exs: Vec<QAExample>) -> ExampleSet {
        let items = exs
            .into_iter()
            .enumerate()
            .map(|(i, e)| {
                let r = RetrievalResult {
                    example_id: e.id.clone(),
                    score: 1.0 - i as f64 * 0.1,
                    rank: i + 1,
                };
                (e, r)
            })
            .collect();
        ExampleSet::new("q", items)
    }

    fn finland() -> QAExample {
        ex(
            "nq-1",
            "When did child benefit start in Finland following other Nordic countries?",
            &["1948"],
        )
    }

    const QUERY: &str = "When was child benefit first paid in Helsinki and implemented nationwide?";
    const HINT: &str =
        "Child benefit was first paid in Helsinki and implemented nationwide in Finland in 1948.";

    #[test]
    fn prompt_has_instruction_and_blocks() {
        let p = render_hint_prompt(QUERY, &set(vec![finland()])).unwrap();
        let instruction = format!(
            "Please infer from the following QA-pairs step by step, and return the information related to {QUERY}. If there is no information, please return \"None\""
        );
        assert!(p.starts_with(&instruction));
        assert_eq!(p.matches(HINT_INSTRUCTION_PREFIX).count(), 1);
        assert!(p.contains(
            "Q: When did child benefit start in Finland following other Nordic countries?\nA: 1948"
        ));
        assert_eq!(p.matches("\nA: ").count(), 1);

        let two = render_hint_prompt(QUERY, &set(vec![finland(), ex("b", "other?", &["x", "y"])])).unwrap();
        assert!(two.ends_with("A: 1948\n\nQ: other?\nA: x"));
        assert_ne!(
            render_hint_prompt("query one", &set(vec![finland()])).unwrap(),
            render_hint_prompt("query two", &set(vec![finland()])).unwrap()
        );
        assert!(matches!(render_hint_prompt(QUERY, &set(vec![])), Err(HintError::EmptyExampleSet)));
    }

    #[test]
    fn none_detection() {
        for s in ["None", "none.", " \"None\" ", "NONE!", "'none'", "“None”", ""] {
            assert!(is_none_response(s), "{s:?}");
        }
        for s in ["None of the examples mention it, but 1948", "nonexistent", "no"] {
            assert!(!is_none_response(s), "{s:?}");
        }
    }

    #[test]
    fn extraction_with_mock() {
        let settings = CallSettings::new("mock");
        let llm = MockChat::new(MockScript::new().substring("related to When was child benefit", HINT));
        let h = extract_hint(&llm, &settings, "q1", QUERY, &set(vec![finland()])).unwrap();
        assert!(!h.none_flag);
        assert_eq!(h.text, HINT);
        assert_eq!(h.source_attribution.len(), 1);
        assert_eq!(h.usable_text(), Some(HINT));

        let h = extract_hint(&llm, &settings, "q2", "unrelated", &set(vec![finland()])).unwrap();
        assert!(h.none_flag);
        assert!(h.source_attribution.is_empty());
        assert_eq!(h.usable_text(), None);

        let llm = MockChat::new(MockScript::new().with_default("none."));
        assert!(extract_hint(&llm, &settings, "q3", QUERY, &set(vec![finland()])).unwrap().none_flag);
    }

    #[test]
    fn attribution_values() {
        let e = finland();
        let same = format!("{} {}", e.question, e.answers[0]);
        let a = attribute_hint(&same, &set(vec![e.clone(), ex("z", "zebra stripes", &["black"])]));
        assert_eq!(a[0].overlap_f1, 1.0);
        assert_eq!(a[1].overlap_f1, 0.0);
        assert_eq!(a[1].example_id, "z");

        // hint tokens (14): child benefit was first paid in helsinki and implemented nationwide in finland in 1948
        // example tokens (12): when did child benefit start in finland following other nordic countries 1948
        // multiset overlap: child, benefit, in, finland, 1948 -> 5
        let got = attribute_hint(HINT, &set(vec![e]))[0].overlap_f1;
        let (p, r) = (5.0 / 14.0, 5.0 / 12.0);
        assert!((got - 2.0 * p * r / (p + r)).abs() < 1e-12, "{got}");
    }

    #[test]
    fn closest_rank() {
        let att = |xs: &[f64]| -> Vec<Attribution> {
            xs.iter()
                .enumerate()
                .map(|(i, &f)| Attribution { example_id: format!("e{i}"), overlap_f1: f })
                .collect()
        };
        assert_eq!(closest_hint_related_rank(&att(&[0.9, 0.1, 0.05]), 0.3), Some(1));
        assert_eq!(closest_hint_related_rank(&att(&[0.1, 0.8, 0.2]), 0.3), Some(2));
        assert_eq!(closest_hint_related_rank(&att(&[0.1, 0.2]), 0.3), None);
    }
}
