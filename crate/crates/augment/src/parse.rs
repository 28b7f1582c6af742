use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;

use crate::{AugmentError, Result};

fn numbered_line() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*(\d+)\.\s*(.*?)\s*$").expect("valid pattern"))
}

/// Extracts the captions numbered `1.` to `n.` from a reply, in index order.
/// Lines without a leading number and numbers above `n` are ignored.
pub fn parse_numbered_response(text: &str, n: usize) -> Result<Vec<String>> {
    let fail = |reason: String| AugmentError::Parse {
        reason,
        raw: text.to_string(),
    };
    let mut found: BTreeMap<usize, String> = BTreeMap::new();
    for line in text.lines() {
        let Some(cap) = numbered_line().captures(line) else {
            continue;
        };
        let Ok(k) = cap[1].parse::<usize>() else {
            continue;
        };
        if k == 0 || k > n {
            continue;
        }
        let body = cap[2].to_string();
        if body.is_empty() {
            return Err(fail(format!("caption {k} is empty")));
        }
        if found.insert(k, body).is_some() {
            return Err(fail(format!("caption {k} appears more than once")));
        }
    }
    let missing: Vec<String> = (1..=n).filter(|k| !found.contains_key(k)).map(|k| k.to_string()).collect();
    if !missing.is_empty() {
        return Err(fail(format!("missing caption(s) {}", missing.join(", "))));
    }
    Ok(found.into_values().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_spacings() {
        assert_eq!(parse_numbered_response("1. foo\n2.bar", 2).unwrap(), ["foo", "bar"]);
    }

    #[test]
    fn out_of_order_is_normalized() {
        assert_eq!(parse_numbered_response("2. b\n1. a", 2).unwrap(), ["a", "b"]);
    }

    #[test]
    fn missing_and_duplicate_indices_keep_raw_text() {
        let text = "1. a\n2. b\n4. d\n5. e";
        match parse_numbered_response(text, 5) {
            Err(AugmentError::Parse { reason, raw }) => {
                assert!(reason.contains('3'));
                assert_eq!(raw, text);
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_numbered_response("1. a\n1. b", 1), Err(AugmentError::Parse { .. })));
        assert!(matches!(parse_numbered_response("1.   ", 1), Err(AugmentError::Parse { .. })));
    }
}
