//! Recovery of structured JSON from free-form model output.

use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum JsonExtractError {
    #[error("no JSON value found in model output")]
    NoJsonFound,
    #[error("model output contains an unbalanced JSON object starting at byte {start}")]
    UnbalancedJson { start: usize },
}

/// Returns the first JSON value recoverable from `text`.
///
/// Tried in order: the whole trimmed text, the contents of each fenced code
/// block, then every balanced `{...}` span (and finally `[...]` span) found by
/// brace-depth scanning that skips over string literals.
pub fn extract_json(text: &str) -> Result<Value, JsonExtractError> {
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return Err(JsonExtractError::NoJsonFound);
    }
    if let Ok(v) = serde_json::from_str(trimmed) {
        return Ok(v);
    }
    for block in fenced_blocks(trimmed) {
        if let Ok(v) = serde_json::from_str(block.trim()) {
            return Ok(v);
        }
    }
    let mut unbalanced = None;
    for (open, close) in [(b'{', b'}'), (b'[', b']')] {
        match scan_balanced(trimmed, open, close) {
            Ok(v) => return Ok(v),
            Err(Some(start)) => {
                unbalanced.get_or_insert(start);
            }
            Err(None) => {}
        }
    }
    match unbalanced {
        Some(start) => Err(JsonExtractError::UnbalancedJson {
            start: start + (text.len() - text.trim_start().len()),
        }),
        None => Err(JsonExtractError::NoJsonFound),
    }
}

/// Bodies of ``` fenced blocks, with any info string on the opening line removed.
fn fenced_blocks(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find("```") {
        let after = &rest[open + 3..];
        let body_start = after.find('\n').map_or(after.len(), |i| i + 1);
        let body = &after[body_start..];
        match body.find("```") {
            Some(close) => {
                out.push(&body[..close]);
                rest = &body[close + 3..];
            }
            None => {
                out.push(body);
                break;
            }
        }
    }
    out
}

/// Tries each `open` position in turn. A start that never balances runs to
/// the end of the text, so every later candidate is nested inside a truncated
/// value; scanning stops there with `Err(Some(start))`.
fn scan_balanced(text: &str, open: u8, close: u8) -> Result<Value, Option<usize>> {
    let bytes = text.as_bytes();
    for start in bytes.iter().enumerate().filter(|(_, &b)| b == open).map(|(i, _)| i) {
        match balanced_end(bytes, start, open, close) {
            Some(end) => {
                if let Ok(v) = serde_json::from_str(&text[start..=end]) {
                    return Ok(v);
                }
            }
            None => return Err(Some(start)),
        }
    }
    Err(None)
}

fn balanced_end(bytes: &[u8], start: usize, open: u8, close: u8) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            _ if b == open => depth += 1,
            _ if b == close => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    #[test]
    fn bare_object() {
        assert_eq!(extract_json(r#"{"a":1}"#).unwrap(), json!({"a": 1}));
    }

    #[test]
    fn fenced_with_prose() {
        let text = "Sure! Here is the result:\n```json\n{\"scene\":\"rural\"}\n```";
        // Reference parse of the span between the fences.
        let span = &text[text.find('{').unwrap()..=text.rfind('}').unwrap()];
        let reference: Value = serde_json::from_str(span).unwrap();
        assert_eq!(extract_json(text).unwrap(), reference);
        assert_eq!(reference, json!({"scene": "rural"}));
    }

    #[test]
    fn no_structure() {
        assert_eq!(extract_json("no structure here"), Err(JsonExtractError::NoJsonFound));
        assert_eq!(extract_json("   "), Err(JsonExtractError::NoJsonFound));
    }

    #[test]
    fn unbalanced() {
        assert!(matches!(
            extract_json("result: {\"a\": {\"b\": 1}"),
            Err(JsonExtractError::UnbalancedJson { .. })
        ));
    }

    #[test]
    fn braces_inside_strings_and_prose_braces() {
        let text = r#"I think {this} matters. {"rule": "use {curly} \"quotes\"", "n": [1, {"x": "}"}]} done"#;
        assert_eq!(
            extract_json(text).unwrap(),
            json!({"rule": "use {curly} \"quotes\"", "n": [1, {"x": "}"}]})
        );
    }

    fn arb_json() -> impl Strategy<Value = Value> {
        let leaf = prop_oneof![
            Just(Value::Null),
            any::<bool>().prop_map(Value::Bool),
            any::<i64>().prop_map(|n| json!(n)),
            (-1e6f64..1e6).prop_map(|f| json!(f)),
            "[ -~]{0,12}".prop_map(Value::String),
        ];
        leaf.prop_recursive(4, 32, 6, |inner| {
            prop_oneof![
                prop::collection::vec(inner.clone(), 0..5).prop_map(Value::Array),
                prop::collection::btree_map("[a-z{}\"]{1,6}", inner, 0..5)
                    .prop_map(|m| Value::Object(m.into_iter().collect())),
            ]
        })
    }

    proptest! {
        #[test]
        fn serialized_values_roundtrip(v in arb_json()) {
            prop_assert_eq!(extract_json(&serde_json::to_string(&v).unwrap()).unwrap(), v.clone());
            prop_assert_eq!(extract_json(&serde_json::to_string_pretty(&v).unwrap()).unwrap(), v);
        }

        #[test]
        fn wrapped_objects_roundtrip(m in prop::collection::btree_map("[a-z}{]{1,6}", "[ -~]{0,10}", 1..4)) {
            let v = Value::Object(m.into_iter().map(|(k, s)| (k, Value::String(s))).collect());
            let text = format!("Here you go:\n{}\nHope that helps.", serde_json::to_string(&v).unwrap());
            prop_assert_eq!(extract_json(&text).unwrap(), v);
        }
    }
}
