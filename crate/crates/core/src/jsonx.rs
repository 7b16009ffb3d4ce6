//! Tolerant extraction of a single JSON object from LLM output, which may
//! wrap the object in code fences or surrounding prose.

use serde_json::Value;

/// Find and parse the first balanced JSON object in `text`. Scans from each
/// `{` and returns the first slice that parses, so prose and fences around
/// the object are ignored.
pub(crate) fn first_json_object(text: &str) -> Option<Value> {
    let bytes = text.as_bytes();
    let mut start = None;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate() {
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
            b'"' if start.is_some() => in_string = true,
            b'{' => {
                if start.is_none() {
                    start = Some(i);
                }
                depth += 1;
            }
            b'}' if start.is_some() => {
                depth -= 1;
                if depth == 0 {
                    let candidate = &text[start.unwrap()..=i];
                    if let Ok(value) = serde_json::from_str::<Value>(candidate) {
                        if value.is_object() {
                            return Some(value);
                        }
                    }
                    // Not valid JSON; keep scanning after this brace.
                    start = None;
                }
            }
            _ => {}
        }
    }
    None
}
