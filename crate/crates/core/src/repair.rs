//! Best-effort repair of model-generated slot objects.
//!
//! Input that already parses as a JSON object is returned untouched. Anything
//! else goes through a fixed sequence of text fixes before a strict parse:
//!
//! 1. `fence_strip`: keep only the body of a Markdown code fence
//! 2. `prose_trim`: cut text before the opening brace and after its match
//! 3. `quote_normalize`: single and curly quoted strings become JSON strings
//! 4. `key_quote`: quote bare object keys
//! 5. `trailing_comma`: drop commas before `}`/`]` or at the end
//! 6. `string_close`: terminate an unterminated final string
//! 7. `brace_close`: close open brackets and braces
//!
//! Fixes only remove or complete delimiters; keys and values are never made
//! up. `applied_fixes` lists the fixes that changed the text.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::corpus::{normalize_value, Schema, NOT_MENTIONED};
use crate::eval::{Prediction, SlotTriple};

/// Top-level brace regions tried as the object before giving up.
const MAX_START_CANDIDATES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fix {
    FenceStrip,
    ProseTrim,
    QuoteNormalize,
    KeyQuote,
    TrailingComma,
    StringClose,
    BraceClose,
}

impl Fix {
    pub const ALL: [Fix; 7] = [
        Fix::FenceStrip,
        Fix::ProseTrim,
        Fix::QuoteNormalize,
        Fix::KeyQuote,
        Fix::TrailingComma,
        Fix::StringClose,
        Fix::BraceClose,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Fix::FenceStrip => "fence_strip",
            Fix::ProseTrim => "prose_trim",
            Fix::QuoteNormalize => "quote_normalize",
            Fix::KeyQuote => "key_quote",
            Fix::TrailingComma => "trailing_comma",
            Fix::StringClose => "string_close",
            Fix::BraceClose => "brace_close",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepairStatus {
    ParsedClean,
    ParsedAfterRepair,
    Unparseable,
}

impl RepairStatus {
    pub fn is_parsed(self) -> bool {
        self != RepairStatus::Unparseable
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairOutcome {
    pub status: RepairStatus,
    /// The parsed object, before any schema filtering.
    pub value: Option<Map<String, Value>>,
    /// Text that was finally parsed.
    pub repaired_text: Option<String>,
    pub applied_fixes: Vec<Fix>,
}

impl RepairOutcome {
    fn unparseable(applied_fixes: Vec<Fix>) -> Self {
        Self { status: RepairStatus::Unparseable, value: None, repaired_text: None, applied_fixes }
    }
}

fn parse_object(text: &str) -> Option<Map<String, Value>> {
    match serde_json::from_str::<Value>(text) {
        Ok(Value::Object(map)) => Some(map),
        _ => None,
    }
}

pub fn repair_and_parse(raw: &str) -> RepairOutcome {
    if let Some(map) = parse_object(raw) {
        return RepairOutcome {
            status: RepairStatus::ParsedClean,
            value: Some(map),
            repaired_text: Some(raw.trim().to_string()),
            applied_fixes: Vec::new(),
        };
    }

    let mut fixes = Vec::new();
    let mut text = raw.trim().to_string();
    apply(&mut text, &mut fixes, Fix::FenceStrip, strip_fences);

    let chars: Vec<char> = text.chars().collect();
    let starts = object_starts(&chars);
    if starts.is_empty() {
        return RepairOutcome::unparseable(fixes);
    }

    let mut first_failure = None;
    for start in starts {
        let mut attempt = text.clone();
        let mut attempt_fixes = fixes.clone();
        apply(&mut attempt, &mut attempt_fixes, Fix::ProseTrim, |t| trim_prose(t, start));
        apply(&mut attempt, &mut attempt_fixes, Fix::QuoteNormalize, normalize_quotes);
        apply(&mut attempt, &mut attempt_fixes, Fix::KeyQuote, quote_bare_keys);
        apply(&mut attempt, &mut attempt_fixes, Fix::TrailingComma, remove_trailing_commas);
        apply(&mut attempt, &mut attempt_fixes, Fix::StringClose, close_string);
        apply(&mut attempt, &mut attempt_fixes, Fix::BraceClose, close_brackets);
        // closing may have exposed a dangling comma
        if attempt_fixes.contains(&Fix::BraceClose) || attempt_fixes.contains(&Fix::StringClose) {
            let before = attempt.clone();
            attempt = remove_trailing_commas(&attempt);
            if attempt != before && !attempt_fixes.contains(&Fix::TrailingComma) {
                attempt_fixes.push(Fix::TrailingComma);
                attempt_fixes.sort();
            }
        }
        if let Some(map) = parse_object(&attempt) {
            return RepairOutcome {
                status: RepairStatus::ParsedAfterRepair,
                value: Some(map),
                repaired_text: Some(attempt),
                applied_fixes: attempt_fixes,
            };
        }
        first_failure.get_or_insert(attempt_fixes);
    }
    RepairOutcome::unparseable(first_failure.unwrap_or(fixes))
}

fn apply(text: &mut String, fixes: &mut Vec<Fix>, fix: Fix, f: impl FnOnce(&str) -> String) {
    let next = f(text);
    if next != *text {
        fixes.push(fix);
        *text = next;
    }
}

fn strip_fences(text: &str) -> String {
    let Some(open) = text.find("```") else {
        return text.to_string();
    };
    let mut body = &text[open + 3..];
    // language tag on the fence line
    let tag_len = body
        .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_' || c == '-'))
        .unwrap_or(body.len());
    body = &body[tag_len..];
    if let Some(close) = body.find("```") {
        body = &body[..close];
    }
    body.trim().to_string()
}

fn is_double_open(c: char) -> bool {
    matches!(c, '"' | '\u{201C}' | '\u{201D}')
}

fn is_single_open(c: char) -> bool {
    matches!(c, '\'' | '\u{2018}' | '\u{2019}')
}

/// Whether a quote at `i` can start a string: the previous non-space
/// character is a structural one.
fn at_value_start(chars: &[char], i: usize) -> bool {
    chars[..i]
        .iter()
        .rev()
        .find(|c| !c.is_whitespace())
        .is_none_or(|c| matches!(c, '{' | '[' | ',' | ':'))
}

/// Whether a single quote at `i` closes a string: what follows is a
/// delimiter or the end.
fn closes_single(chars: &[char], i: usize) -> bool {
    chars[i + 1..]
        .iter()
        .find(|c| !c.is_whitespace())
        .is_none_or(|c| matches!(c, ':' | ',' | '}' | ']'))
}

/// Scans a quoted string starting at `open`. Returns the index just past the
/// closing quote, or `None` if the string never closes. Backslash escapes are
/// honoured inside every string kind.
fn scan_string(chars: &[char], open: usize) -> Option<usize> {
    let single = is_single_open(chars[open]);
    let mut i = open + 1;
    while i < chars.len() {
        let c = chars[i];
        if c == '\\' {
            i += 2;
            continue;
        }
        if single {
            if is_single_open(c) && closes_single(chars, i) {
                return Some(i + 1);
            }
        } else if chars[open] == '"' {
            if c == '"' {
                return Some(i + 1);
            }
        } else if is_double_open(c) {
            return Some(i + 1);
        }
        i += 1;
    }
    None
}

/// Whether the quote at `i` opens a string under the lenient rules.
fn opens_string(chars: &[char], i: usize) -> bool {
    let c = chars[i];
    c == '"' || ((is_double_open(c) || is_single_open(c)) && at_value_start(chars, i))
}

/// End (exclusive) of the bracketed region opening at `start`: just past
/// its matching close, or the end of the text.
fn region_end(chars: &[char], start: usize) -> usize {
    let mut depth = 0usize;
    let mut i = start;
    while i < chars.len() {
        if opens_string(chars, i) {
            match scan_string(chars, i) {
                Some(end) => {
                    i = end;
                    continue;
                }
                None => return chars.len(),
            }
        }
        match chars[i] {
            '{' | '[' => depth += 1,
            '}' | ']' => {
                depth = depth.saturating_sub(1);
                if depth == 0 {
                    return i + 1;
                }
            }
            _ => {}
        }
        i += 1;
    }
    chars.len()
}

/// Candidate object starts: the first `{`, then the first `{` after each
/// candidate's region.
fn object_starts(chars: &[char]) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut from = 0;
    while starts.len() < MAX_START_CANDIDATES {
        let Some(start) = chars[from..].iter().position(|&c| c == '{').map(|p| p + from) else {
            break;
        };
        starts.push(start);
        from = region_end(chars, start);
    }
    starts
}

fn trim_prose(text: &str, start: usize) -> String {
    let chars: Vec<char> = text.chars().collect();
    let end = region_end(&chars, start);
    chars[start..end].iter().collect::<String>().trim_end().to_string()
}

fn normalize_quotes(text: &str) -> String {
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len());
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c == '"' {
            let end = scan_string(&chars, i).unwrap_or(chars.len());
            out.extend(&chars[i..end]);
            i = end;
            continue;
        }
        if (is_double_open(c) || is_single_open(c)) && at_value_start(&chars, i) {
            let end = scan_string(&chars, i);
            let body_end = end.map_or(chars.len(), |e| e - 1);
            out.push('"');
            let mut j = i + 1;
            while j < body_end {
                match chars[j] {
                    '\\' if j + 1 < body_end && is_single_open(chars[j + 1]) => {
                        out.push(chars[j + 1]);
                        j += 2;
                        continue;
                    }
                    '\\' => {
                        out.push('\\');
                        if j + 1 < body_end {
                            out.push(chars[j + 1]);
                        }
                        j += 2;
                        continue;
                    }
                    '"' => out.push_str("\\\""),
                    other => out.push(other),
                }
                j += 1;
            }
            if end.is_some() {
                out.push('"');
            }
            i = end.unwrap_or(chars.len());
            continue;
        }
        out.push(c);
        i += 1;
    }
    out
}

/// Calls `f` for every character outside `"` strings with its index; string
/// bodies are copied verbatim. Returns the rebuilt text and whether the text
/// ended inside a string.
fn outside_strings(text: &str, mut f: impl FnMut(&[char], usize, &mut String) -> usize) -> (String, bool) {
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len() + 8);
    let mut i = 0;
    while i < chars.len() {
        if chars[i] == '"' {
            match scan_string(&chars, i) {
                Some(end) => {
                    out.extend(&chars[i..end]);
                    i = end;
                }
                None => {
                    out.extend(&chars[i..]);
                    return (out, true);
                }
            }
            continue;
        }
        i = f(&chars, i, &mut out);
    }
    (out, false)
}

fn quote_bare_keys(text: &str) -> String {
    let is_start = |c: char| c.is_alphabetic() || c == '_' || c == '$';
    let is_body = |c: char| c.is_alphanumeric() || matches!(c, '_' | '$' | '-' | '.');
    outside_strings(text, |chars, i, out| {
        let c = chars[i];
        let after_delim = chars[..i]
            .iter()
            .rev()
            .find(|c| !c.is_whitespace())
            .is_some_and(|c| matches!(c, '{' | ','));
        if is_start(c) && after_delim {
            let mut j = i;
            while j < chars.len() && is_body(chars[j]) {
                j += 1;
            }
            let colon = chars[j..].iter().position(|c| !c.is_whitespace()).map(|p| j + p);
            if colon.is_some_and(|p| chars[p] == ':') {
                out.push('"');
                out.extend(&chars[i..j]);
                out.push('"');
                return j;
            }
        }
        out.push(c);
        i + 1
    })
    .0
}

fn remove_trailing_commas(text: &str) -> String {
    outside_strings(text, |chars, i, out| {
        if chars[i] == ',' {
            let next = chars[i + 1..].iter().find(|c| !c.is_whitespace());
            if next.is_none_or(|c| matches!(c, '}' | ']')) {
                return i + 1;
            }
        }
        out.push(chars[i]);
        i + 1
    })
    .0
}

fn close_string(text: &str) -> String {
    let (mut out, open) = outside_strings(text, |chars, i, out| {
        out.push(chars[i]);
        i + 1
    });
    if open {
        // an odd run of trailing backslashes would escape the closing quote
        let slashes = out.chars().rev().take_while(|&c| c == '\\').count();
        if slashes % 2 == 1 {
            out.pop();
        }
        out.push('"');
    }
    out
}

fn close_brackets(text: &str) -> String {
    let mut stack = Vec::new();
    let (mut out, _) = outside_strings(text, |chars, i, out| {
        match chars[i] {
            '{' => stack.push('}'),
            '[' => stack.push(']'),
            c @ ('}' | ']') if stack.last() == Some(&c) => {
                stack.pop();
            }
            _ => {}
        }
        out.push(chars[i]);
        i + 1
    });
    let trimmed = out.trim_end().len();
    out.truncate(trimmed);
    if stack.is_empty() {
        return text.to_string();
    }
    out.extend(stack.iter().rev());
    out
}

fn value_text(value: &Value) -> Option<String> {
    let text = match value {
        Value::Null => return None,
        Value::String(s) => normalize_value(s),
        other => normalize_value(&other.to_string()),
    };
    (!text.is_empty() && text != NOT_MENTIONED).then_some(text)
}

/// Attaches a parsed slots object to the schema.
///
/// Object-valued entries are matched to domains by name; scalar entries
/// belong to the single listed domain (or to the one listed domain whose
/// schema has that key). Anything that cannot be placed in the schema goes to
/// the off-schema bucket, where it counts as a wrong prediction.
pub fn to_state(outcome: &RepairOutcome, domains: &[String], schema: &Schema) -> Prediction {
    let mut prediction = Prediction::default();
    let Some(object) = outcome.value.as_ref().filter(|_| outcome.status.is_parsed()) else {
        prediction.parse_failed = true;
        return prediction;
    };
    let place = |domain: &str, key: &str, value: &Value, prediction: &mut Prediction| {
        let Some(text) = value_text(value) else { return };
        if schema.has_key(domain, key) {
            prediction.state.insert(domain, key, &text);
        } else {
            prediction.off_schema.push(SlotTriple::new(domain, key, text));
        }
    };
    for (name, value) in object {
        if let Value::Object(inner) = value {
            for (key, v) in inner {
                place(name, key, v, &mut prediction);
            }
            continue;
        }
        let owners: Vec<&String> = if let [only] = domains {
            vec![only]
        } else {
            domains.iter().filter(|d| schema.has_key(d, name)).collect()
        };
        match owners.as_slice() {
            [domain] => place(domain, name, value, &mut prediction),
            _ => place("*", name, value, &mut prediction),
        }
    }
    prediction
}

/// The bundled malformed-output corpus, one JSON case per line.
pub const REPAIR_CORPUS: &str = include_str!("../data/repair_corpus.jsonl");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairCase {
    pub id: String,
    pub class: String,
    pub raw: String,
    /// The object the output was meant to be; `null` for hopeless cases.
    pub expected: Option<Value>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RepairSuiteReport {
    pub cases: usize,
    pub parsed_clean: usize,
    pub parsed_after_repair: usize,
    pub unparseable: usize,
    /// Parsed cases whose object differs from the expected one.
    pub mismatched: Vec<String>,
    /// Unparseable case ids.
    pub failed: Vec<String>,
    pub fixes: std::collections::BTreeMap<String, usize>,
}

impl RepairSuiteReport {
    pub fn parsed(&self) -> usize {
        self.parsed_clean + self.parsed_after_repair
    }
}

pub fn parse_repair_cases(text: &str) -> Result<Vec<RepairCase>, String> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("line {}: {e}", i + 1)))
        .collect()
}

/// Repairs every case and tallies outcomes.
pub fn run_repair_suite(cases: &[RepairCase]) -> RepairSuiteReport {
    let mut report = RepairSuiteReport { cases: cases.len(), ..Default::default() };
    for case in cases {
        let outcome = repair_and_parse(&case.raw);
        match outcome.status {
            RepairStatus::ParsedClean => report.parsed_clean += 1,
            RepairStatus::ParsedAfterRepair => report.parsed_after_repair += 1,
            RepairStatus::Unparseable => {
                report.unparseable += 1;
                report.failed.push(case.id.clone());
            }
        }
        for fix in &outcome.applied_fixes {
            *report.fixes.entry(fix.as_str().to_string()).or_default() += 1;
        }
        if let (Some(value), Some(expected)) = (outcome.value, &case.expected) {
            if Value::Object(value) != *expected {
                report.mismatched.push(case.id.clone());
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parsed(raw: &str) -> (RepairStatus, Value, Vec<Fix>) {
        let outcome = repair_and_parse(raw);
        let value = outcome.value.clone().map(Value::Object).unwrap_or(Value::Null);
        (outcome.status, value, outcome.applied_fixes)
    }

    #[test]
    fn valid_input_is_clean() {
        let (status, value, fixes) = parsed(r#"{"area": "centre"}"#);
        assert_eq!(status, RepairStatus::ParsedClean);
        assert_eq!(value, serde_json::json!({"area": "centre"}));
        assert!(fixes.is_empty());
    }

    #[test]
    fn prose_and_trailing_comma() {
        let raw = r#"Sure! {"area": "centre",}"#;
        let outcome = repair_and_parse(raw);
        assert_eq!(outcome.status, RepairStatus::ParsedAfterRepair);
        assert_eq!(outcome.applied_fixes, [Fix::ProseTrim, Fix::TrailingComma]);
        // the repaired text parses to the same map under the standard parser
        let reparsed: Value = serde_json::from_str(outcome.repaired_text.as_deref().unwrap()).unwrap();
        assert_eq!(reparsed, serde_json::json!({"area": "centre"}));
    }

    #[test]
    fn hopeless_input() {
        assert_eq!(repair_and_parse("{{{").status, RepairStatus::Unparseable);
        assert_eq!(repair_and_parse("no json here").status, RepairStatus::Unparseable);
        assert_eq!(repair_and_parse("").status, RepairStatus::Unparseable);
    }

    #[test]
    fn each_fix_class() {
        let cases: [(&str, Fix, Value); 7] = [
            ("```json\n{\"a\": \"b\"}\n```", Fix::FenceStrip, serde_json::json!({"a": "b"})),
            ("{\"a\": \"b\"} hope this helps", Fix::ProseTrim, serde_json::json!({"a": "b"})),
            ("{'a': 'saint john's college'}", Fix::QuoteNormalize, serde_json::json!({"a": "saint john's college"})),
            ("{a: \"b\", c_d: \"e\"}", Fix::KeyQuote, serde_json::json!({"a": "b", "c_d": "e"})),
            ("{\"a\": [\"b\",], }", Fix::TrailingComma, serde_json::json!({"a": ["b"]})),
            ("{\"a\": \"cen", Fix::StringClose, serde_json::json!({"a": "cen"})),
            ("{\"t\": {\"a\": \"b\"", Fix::BraceClose, serde_json::json!({"t": {"a": "b"}})),
        ];
        for (raw, fix, expected) in cases {
            let (status, value, fixes) = parsed(raw);
            assert_eq!(status, RepairStatus::ParsedAfterRepair, "{raw}");
            assert!(fixes.contains(&fix), "{raw}: {fixes:?}");
            assert_eq!(value, expected, "{raw}");
        }
    }

    #[test]
    fn curly_quotes() {
        let (_, value, fixes) = parsed("{\u{201C}area\u{201D}: \u{201C}centre\u{201D}}");
        assert_eq!(value, serde_json::json!({"area": "centre"}));
        assert_eq!(fixes, [Fix::QuoteNormalize]);
    }

    #[test]
    fn truncated_after_comma() {
        let (status, value, _) = parsed(r#"{"area": "centre", "#);
        assert_eq!(status, RepairStatus::ParsedAfterRepair);
        assert_eq!(value, serde_json::json!({"area": "centre"}));
    }

    #[test]
    fn later_brace_tried_when_first_fails() {
        let (status, value, _) = parsed(r#"Use {placeholders} like this: {"area": "north"}"#);
        assert_eq!(status, RepairStatus::ParsedAfterRepair);
        assert_eq!(value, serde_json::json!({"area": "north"}));
    }

    #[test]
    fn does_not_invent_values() {
        assert_eq!(repair_and_parse(r#"{"area": }"#).status, RepairStatus::Unparseable);
        assert_eq!(repair_and_parse(r#"{"area": centre}"#).status, RepairStatus::Unparseable);
    }

    #[test]
    fn to_state_flat_and_nested() {
        let schema = Schema::multiwoz();
        let flat = repair_and_parse(r#"{"arriveBy": "17:00", "leaveAt": "not mentioned"}"#);
        let p = to_state(&flat, &["taxi".into()], &schema);
        assert_eq!(p.state.get("taxi", "arriveBy"), Some("17:00"));
        assert_eq!(p.state.get("taxi", "leaveAt"), None);
        assert!(p.off_schema.is_empty());

        let nested = repair_and_parse(r#"{"hotelz": {"area": "north"}, "taxi": {"colour": "Red"}}"#);
        let p = to_state(&nested, &["taxi".into()], &schema);
        assert!(p.state.is_empty());
        assert_eq!(
            p.off_schema,
            [SlotTriple::new("hotelz", "area", "north"), SlotTriple::new("taxi", "colour", "red")]
        );

        let p = to_state(&repair_and_parse("{{{"), &["taxi".into()], &schema);
        assert!(p.parse_failed);
        assert!(p.state.is_empty());
    }

    #[test]
    fn to_state_multi_domain_flat_keys() {
        let schema = Schema::multiwoz();
        let outcome = repair_and_parse(r#"{"food": "thai", "area": "east"}"#);
        let p = to_state(&outcome, &["taxi".into(), "restaurant".into()], &schema);
        assert_eq!(p.state.get("restaurant", "food"), Some("thai"));
        assert_eq!(p.state.get("restaurant", "area"), Some("east"));

        let p = to_state(&outcome, &["hotel".into(), "restaurant".into()], &schema);
        // "area" exists in both domains
        assert_eq!(p.off_schema, [SlotTriple::new("*", "area", "east")]);
    }

    #[test]
    fn bundled_corpus() {
        let cases = parse_repair_cases(REPAIR_CORPUS).unwrap();
        assert_eq!(cases.len(), 100);
        let report = run_repair_suite(&cases);
        assert!(report.failed.is_empty(), "{:?}", report.failed);
        assert!(report.mismatched.is_empty(), "{:?}", report.mismatched);
    }

    proptest::proptest! {
        #[test]
        fn never_panics(raw in "\\PC{0,80}") {
            let _ = repair_and_parse(&raw);
        }

        #[test]
        fn repaired_text_always_parses(raw in "[{}\\[\\]\"',: a-z0-9]{0,40}") {
            let outcome = repair_and_parse(&raw);
            if outcome.status.is_parsed() {
                let text = outcome.repaired_text.unwrap();
                proptest::prop_assert!(serde_json::from_str::<Value>(&text).is_ok());
            }
            proptest::prop_assert!(outcome.status != RepairStatus::ParsedClean || outcome.applied_fixes.is_empty());
        }
    }
}
