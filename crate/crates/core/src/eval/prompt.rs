use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hints::{render_qa_block, Hint};
use crate::store::QAExample;

/// First-stage RECITE request. The baseline's exact template is not published;
/// this is a reconstruction.
pub const RECITE_REQUEST_TEMPLATE: &str = "Recite a passage from your own memory that contains the information needed to answer the question below. Do not answer the question.\n\nQ: {query}";
/// Prefix of the recitation line in the second-stage RECITE prompt.
pub const RECITATION_PREFIX: &str = "Recitation: ";
pub const HINT_PREFIX: &str = "Hint: ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ZeroShot,
    StandardIcl,
    Recite,
    Hicl,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::ZeroShot => "zero_shot",
            Method::StandardIcl => "standard_icl",
            Method::Recite => "recite",
            Method::Hicl => "hicl",
        }
    }

    pub fn uses_demonstrations(self) -> bool {
        self != Method::ZeroShot
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Demonstration order in the prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum OrderPolicy {
    /// Most similar example last, adjacent to the query.
    Default,
    /// Most similar example first.
    Reverse,
    /// Seeded uniform permutation.
    Random(u64),
}

impl fmt::Display for OrderPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OrderPolicy::Default => f.write_str("default"),
            OrderPolicy::Reverse => f.write_str("reverse"),
            OrderPolicy::Random(s) => write!(f, "random:{s}"),
        }
    }
}

impl FromStr for OrderPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "default" => Ok(Self::Default),
            "reverse" => Ok(Self::Reverse),
            _ => s
                .strip_prefix("random:")
                .and_then(|n| n.parse().ok())
                .map(Self::Random)
                .ok_or_else(|| format!("unknown ordering {s:?} (expected default, reverse or random:<seed>)")),
        }
    }
}

impl TryFrom<String> for OrderPolicy {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<OrderPolicy> for String {
    fn from(p: OrderPolicy) -> Self {
        p.to_string()
    }
}

/// Reorders retrieval-ranked items (rank 1 first) into prompt order.
pub fn order_examples<T: Clone>(ranked: &[T], policy: OrderPolicy) -> Vec<T> {
    let mut out = ranked.to_vec();
    match policy {
        OrderPolicy::Default => out.reverse(),
        OrderPolicy::Reverse => {}
        OrderPolicy::Random(seed) => out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed)),
    }
    out
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("hicl prompt needs a usable hint and fallback is disabled")]
    MissingHint,
}

pub fn render_query_block(query: &str) -> String {
    format!("Q: {query}\nA:")
}

fn with_demonstrations(demonstration: &[QAExample], tail: &[String]) -> String {
    demonstration
        .iter()
        .map(render_qa_block)
        .chain(tail.iter().cloned())
        .collect::<Vec<_>>()
        .join("\n\n")
}

pub fn recite_request_prompt(query: &str) -> String {
    RECITE_REQUEST_TEMPLATE.replace("{query}", query)
}

/// Inputs for one rendered prompt. `recitation` is only read by RECITE.
#[derive(Debug, Clone, Copy)]
pub struct PromptParts<'a> {
    pub demonstration: &'a [QAExample],
    pub hint: Option<&'a Hint>,
    pub recitation: Option<&'a str>,
    pub query: &'a str,
}

/// Renders the prompt for `method`.
///
/// - zero-shot: the query block alone
/// - standard: demonstration blocks, then the query block
/// - hicl: demonstration blocks, `Hint: ..`, then the query block; a missing or
///   None hint falls back to standard when `hicl_fallback` is set
/// - recite: without a recitation, the first-stage request; with one, the
///   recitation line, demonstration blocks, then the query block
pub fn render_prompt(method: Method, parts: PromptParts<'_>, hicl_fallback: bool) -> Result<String, PromptError> {
    let query = render_query_block(parts.query);
    Ok(match method {
        Method::ZeroShot => query,
        Method::StandardIcl => with_demonstrations(parts.demonstration, &[query]),
        Method::Hicl => match parts.hint.and_then(Hint::usable_text) {
            Some(h) => with_demonstrations(parts.demonstration, &[format!("{HINT_PREFIX}{h}"), query]),
            None if hicl_fallback => with_demonstrations(parts.demonstration, &[query]),
            None => return Err(PromptError::MissingHint),
        },
        Method::Recite => match parts.recitation {
            None => recite_request_prompt(parts.query),
            Some(r) => {
                let head = format!("{RECITATION_PREFIX}{}", r.trim());
                let body = with_demonstrations(parts.demonstration, &[query]);
                format!("{head}\n\n{body}")
            }
        },
    })
}
