//! Parsing and validation of tagged reasoning chains: flat `<name>…</name>`
//! spans followed by a final answer segment.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised when constructing a [`TagRegistry`].
#[derive(Debug, Error, PartialEq, Eq)]
pub enum GrammarError {
    #[error("tag name '{0}' must be non-empty lowercase letters or underscores")]
    InvalidTagName(String),
    #[error("tag name '{0}' is declared twice")]
    DuplicateTagName(String),
    #[error("registry needs at least one tag name")]
    EmptyRegistry,
    #[error("min_tag_count must be at least 1")]
    ZeroMinTagCount,
}

/// The set of tag names a chain may use, plus the minimum number of tags a
/// valid chain must carry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagRegistry {
    names: Vec<String>,
    min_tag_count: usize,
}

fn valid_tag_name(name: &str) -> bool {
    !name.is_empty() && name.bytes().all(|b| b == b'_' || b.is_ascii_lowercase())
}

impl TagRegistry {
    pub fn new<S: Into<String>>(
        names: impl IntoIterator<Item = S>,
        min_tag_count: usize,
    ) -> Result<Self, GrammarError> {
        if min_tag_count == 0 {
            return Err(GrammarError::ZeroMinTagCount);
        }
        let mut seen = Vec::new();
        for name in names {
            let name = name.into();
            if !valid_tag_name(&name) {
                return Err(GrammarError::InvalidTagName(name));
            }
            if seen.contains(&name) {
                return Err(GrammarError::DuplicateTagName(name));
            }
            seen.push(name);
        }
        if seen.is_empty() {
            return Err(GrammarError::EmptyRegistry);
        }
        Ok(Self { names: seen, min_tag_count })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn min_tag_count(&self) -> usize {
        self.min_tag_count
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.iter().any(|n| n == name)
    }
}

impl Default for TagRegistry {
    /// Five-tag reasoning vocabulary with a three-tag minimum.
    fn default() -> Self {
        Self::new(
            [
                "analyze_input",
                "examine_examples",
                "identify_patterns",
                "compare_entities",
                "make_decision",
            ],
            3,
        )
        .expect("default registry is well-formed")
    }
}

/// One `<name>body</name>` region. Offsets are byte positions into the raw
/// text; `start` points at the opening `<`, `end` one past the closing `>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagSpan {
    pub name: String,
    pub start: usize,
    pub end: usize,
    pub body: String,
}

/// Kinds of structural or registry violations a chain can carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    UnclosedTag,
    StrayClose,
    UnknownTag,
    NestedTag,
    BelowMinCount,
    EmptyBody,
}

/// One failed check, with a human-readable location or name detail.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub detail: String,
}

/// Outcome of [`validate`]: empty means the chain is clean.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Parse result: spans in positional order, the trailing answer text, and
/// any structural defects found while scanning.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedChain {
    pub raw: String,
    pub spans: Vec<TagSpan>,
    /// Text after the final close marker, trimmed. The whole text when no
    /// span closed.
    pub answer: String,
    defects: Vec<Violation>,
}

impl TaggedChain {
    /// Structural defects recorded during parsing (unclosed, stray, nested).
    pub fn defects(&self) -> &[Violation] {
        &self.defects
    }

    /// Rebuilds the raw text from spans plus the text between them; equals
    /// `raw` for every parse.
    pub fn reassemble(&self) -> String {
        let mut out = String::new();
        let mut cursor = 0;
        for span in &self.spans {
            out.push_str(&self.raw[cursor..span.start]);
            out.push('<');
            out.push_str(&span.name);
            out.push('>');
            out.push_str(&span.body);
            out.push_str("</");
            out.push_str(&span.name);
            out.push('>');
            cursor = span.end;
        }
        out.push_str(&self.raw[cursor..]);
        out
    }
}

enum Marker {
    Open(String),
    Close(String),
}

/// Tries to read a marker starting at `pos` (which must point at `<`).
/// Returns the marker and the byte offset one past its `>`.
fn read_marker(raw: &str, pos: usize) -> Option<(Marker, usize)> {
    let rest = &raw.as_bytes()[pos + 1..];
    let (closing, name_start) = if rest.first() == Some(&b'/') { (true, 1) } else { (false, 0) };
    let mut name_end = name_start;
    while name_end < rest.len() && (rest[name_end] == b'_' || rest[name_end].is_ascii_lowercase()) {
        name_end += 1;
    }
    if name_end == name_start || rest.get(name_end) != Some(&b'>') {
        return None;
    }
    let name = raw[pos + 1 + name_start..pos + 1 + name_end].to_string();
    let after = pos + 1 + name_end + 1;
    Some((if closing { Marker::Close(name) } else { Marker::Open(name) }, after))
}

/// Scans raw text into a [`TaggedChain`]. Total: malformed markup is kept as
/// literal text and recorded as a defect rather than rejected.
pub fn parse_chain(raw: &str) -> TaggedChain {
    let mut spans = Vec::new();
    let mut defects = Vec::new();
    // (name, open marker start, body start)
    let mut open: Option<(String, usize, usize)> = None;
    let mut i = 0;
    while let Some(rel) = raw[i..].find('<') {
        let at = i + rel;
        let Some((marker, after)) = read_marker(raw, at) else {
            i = at + 1;
            continue;
        };
        match (&mut open, marker) {
            (None, Marker::Open(name)) => open = Some((name, at, after)),
            (None, Marker::Close(name)) => defects.push(Violation {
                kind: ViolationKind::StrayClose,
                detail: format!("close marker '</{name}>' at byte {at} has no open tag"),
            }),
            (Some((cur, start, body_start)), Marker::Close(name)) if *cur == name => {
                spans.push(TagSpan {
                    name,
                    start: *start,
                    end: after,
                    body: raw[*body_start..at].to_string(),
                });
                open = None;
            }
            (Some((cur, ..)), Marker::Close(name)) => defects.push(Violation {
                kind: ViolationKind::StrayClose,
                detail: format!("close marker '</{name}>' at byte {at} inside open tag '{cur}'"),
            }),
            (Some((cur, ..)), Marker::Open(name)) => defects.push(Violation {
                kind: ViolationKind::NestedTag,
                detail: format!("tag '{name}' at byte {at} opens inside '{cur}'"),
            }),
        }
        i = after;
    }
    if let Some((name, start, _)) = open {
        defects.push(Violation {
            kind: ViolationKind::UnclosedTag,
            detail: format!("tag '{name}' opened at byte {start} never closes"),
        });
    }
    let answer = match spans.last() {
        Some(span) => raw[span.end..].trim().to_string(),
        None => raw.trim().to_string(),
    };
    TaggedChain { raw: raw.to_string(), spans, answer, defects }
}

/// Checks a parsed chain against a registry: structural defects, unknown
/// names, empty bodies, and the minimum tag count.
pub fn validate(chain: &TaggedChain, registry: &TagRegistry) -> ValidationReport {
    let mut violations = chain.defects.clone();
    for span in &chain.spans {
        if !registry.contains(&span.name) {
            violations.push(Violation {
                kind: ViolationKind::UnknownTag,
                detail: format!("tag name '{}' is not registered", span.name),
            });
        }
        if span.body.trim().is_empty() {
            violations.push(Violation {
                kind: ViolationKind::EmptyBody,
                detail: format!("tag '{}' at byte {} has an empty body", span.name, span.start),
            });
        }
    }
    if chain.spans.len() < registry.min_tag_count() {
        violations.push(Violation {
            kind: ViolationKind::BelowMinCount,
            detail: format!(
                "chain has {} tags, registry requires at least {}",
                chain.spans.len(),
                registry.min_tag_count()
            ),
        });
    }
    ValidationReport { violations }
}

/// Relative frequency of each tag name across a corpus of chains. Sums to 1
/// when any span exists; empty map otherwise.
pub fn tag_histogram(chains: &[TaggedChain]) -> BTreeMap<String, f64> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut total = 0usize;
    for chain in chains {
        for span in &chain.spans {
            *counts.entry(span.name.clone()).or_insert(0) += 1;
            total += 1;
        }
    }
    counts.into_iter().map(|(name, count)| (name, count as f64 / total as f64)).collect()
}
