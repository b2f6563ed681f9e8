//! Phrase spotting with clause-scoped negation, shared by the keyword
//! labeler and the mock judge.

use crate::corpus::tokenize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mention {
    Positive,
    Negative,
}

const NEGATION_CUES: [&str; 7] = ["no", "not", "without", "negative", "absent", "absence", "resolved"];
/// Cues that negate only when followed by "of", as in "clear of".
const OF_CUES: [&str; 2] = ["clear", "free"];
const CLAUSE_BREAKS: [&str; 6] = [";", "but", "however", "although", "though", "which"];

fn token_matches(token: &str, word: &str) -> bool {
    token == word || token.strip_suffix('s') == Some(word) || token.strip_suffix("es") == Some(word)
}

fn negated_before(tokens: &[String], pos: usize) -> bool {
    let clause_start = tokens[..pos]
        .iter()
        .rposition(|t| CLAUSE_BREAKS.contains(&t.as_str()))
        .map_or(0, |p| p + 1);
    let clause = &tokens[clause_start..pos];
    clause.iter().enumerate().any(|(i, t)| {
        NEGATION_CUES.contains(&t.as_str())
            || (OF_CUES.contains(&t.as_str()) && clause.get(i + 1).is_some_and(|n| n == "of"))
    })
}

/// How `phrase` is mentioned in `sentence`, if at all. Any non-negated
/// occurrence makes the mention positive.
pub fn mention(sentence: &str, phrase: &str) -> Option<Mention> {
    let tokens = tokenize(sentence);
    let words = tokenize(phrase);
    if words.is_empty() || tokens.len() < words.len() {
        return None;
    }
    let mut found = None;
    for start in 0..=tokens.len() - words.len() {
        let hit = words.iter().zip(&tokens[start..]).all(|(w, t)| token_matches(t, w));
        if !hit {
            continue;
        }
        if negated_before(&tokens, start) {
            found.get_or_insert(Mention::Negative);
        } else {
            return Some(Mention::Positive);
        }
    }
    found
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polarity() {
        assert_eq!(
            mention("There is a large pleural effusion.", "pleural effusion"),
            Some(Mention::Positive)
        );
        assert_eq!(mention("No pneumothorax.", "pneumothorax"), Some(Mention::Negative));
        assert_eq!(
            mention("No pneumothorax or pleural effusions.", "pleural effusion"),
            Some(Mention::Negative)
        );
        assert_eq!(
            mention("Lungs are clear of consolidation.", "consolidation"),
            Some(Mention::Negative)
        );
        assert_eq!(mention("Lungs are clear.", "consolidation"), None);
        assert_eq!(
            mention("No pneumothorax, but there is consolidation.", "consolidation"),
            Some(Mention::Positive)
        );
    }
}
