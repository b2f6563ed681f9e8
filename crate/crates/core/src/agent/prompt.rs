use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("missing placeholder {0}")]
    Missing(String),
    #[error("unknown placeholder {0}")]
    Unknown(String),
    #[error("malformed template: {0}")]
    Malformed(String),
}

enum Piece<'a> {
    Text(&'a str),
    Hole(&'a str),
}

fn parse(template: &str) -> Result<Vec<Piece<'_>>, PromptError> {
    let mut pieces = Vec::new();
    let mut rest = template;
    while let Some(pos) = rest.find(['{', '}']) {
        let (head, tail) = rest.split_at(pos);
        if !head.is_empty() {
            pieces.push(Piece::Text(head));
        }
        if let Some(t) = tail.strip_prefix("{{") {
            pieces.push(Piece::Text("{"));
            rest = t;
        } else if let Some(t) = tail.strip_prefix("}}") {
            pieces.push(Piece::Text("}"));
            rest = t;
        } else if tail.starts_with('}') {
            return Err(PromptError::Malformed("unmatched '}'".into()));
        } else {
            let close = tail
                .find('}')
                .ok_or_else(|| PromptError::Malformed("unclosed '{'".into()))?;
            let name = &tail[1..close];
            if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(PromptError::Malformed(format!("bad placeholder name {name:?}")));
            }
            pieces.push(Piece::Hole(name));
            rest = &tail[close + 1..];
        }
    }
    if !rest.is_empty() {
        pieces.push(Piece::Text(rest));
    }
    Ok(pieces)
}

/// Placeholder names in order of first appearance.
pub fn placeholders(template: &str) -> Result<Vec<String>, PromptError> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for piece in parse(template)? {
        if let Piece::Hole(name) = piece {
            if seen.insert(name) {
                out.push(name.to_string());
            }
        }
    }
    Ok(out)
}

/// Substitutes `{name}` placeholders. Every placeholder must be filled and
/// every fill must name a placeholder. `{{` and `}}` are literal braces.
pub fn render_prompt(template: &str, fills: &BTreeMap<String, String>) -> Result<String, PromptError> {
    let pieces = parse(template)?;
    let mut used = BTreeSet::new();
    let mut out = String::with_capacity(template.len());
    for piece in &pieces {
        match piece {
            Piece::Text(t) => out.push_str(t),
            Piece::Hole(name) => {
                let value = fills.get(*name).ok_or_else(|| PromptError::Missing(name.to_string()))?;
                out.push_str(value);
                used.insert(*name);
            }
        }
    }
    if let Some(extra) = fills.keys().find(|k| !used.contains(k.as_str())) {
        return Err(PromptError::Unknown(extra.clone()));
    }
    Ok(out)
}

/// Like [`render_prompt`] but leaves unfilled placeholders as-is and
/// ignores extra fills. Used by mock reply templates.
pub(crate) fn render_lenient(template: &str, fills: &BTreeMap<String, String>) -> String {
    let Ok(pieces) = parse(template) else {
        return template.to_string();
    };
    pieces
        .iter()
        .map(|p| match p {
            Piece::Text(t) => t.to_string(),
            Piece::Hole(name) => fills.get(*name).cloned().unwrap_or_else(|| format!("{{{name}}}")),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fills(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    const T: &str = "Classify: {sentence} into {labels}";

    #[test]
    fn substitutes() {
        let out = render_prompt(T, &fills(&[("sentence", "A."), ("labels", "x, y")])).unwrap();
        assert_eq!(out, "Classify: A. into x, y");
    }

    #[test]
    fn missing_and_extra() {
        let err = render_prompt(T, &fills(&[("sentence", "A.")])).unwrap_err();
        assert_eq!(err.to_string(), "missing placeholder labels");
        let err = render_prompt(T, &fills(&[("sentence", "A."), ("labels", "x"), ("foo", "1")])).unwrap_err();
        assert_eq!(err.to_string(), "unknown placeholder foo");
    }

    #[test]
    fn fill_values_are_not_reexpanded() {
        let out = render_prompt("{a}", &fills(&[("a", "{b}")])).unwrap();
        assert_eq!(out, "{b}");
    }

    #[test]
    fn escapes_and_malformed() {
        assert_eq!(render_prompt("{{x}}", &BTreeMap::new()).unwrap(), "{x}");
        assert!(matches!(
            render_prompt("{x", &BTreeMap::new()),
            Err(PromptError::Malformed(_))
        ));
        assert!(matches!(
            render_prompt("x}", &BTreeMap::new()),
            Err(PromptError::Malformed(_))
        ));
        assert_eq!(placeholders("{a} {b} {a}").unwrap(), vec!["a", "b"]);
    }

    #[test]
    fn lenient_keeps_unknown() {
        assert_eq!(render_lenient("{a}-{b}", &fills(&[("a", "1"), ("z", "2")])), "1-{b}");
    }
}
