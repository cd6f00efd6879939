//! Output parsing for generated query lists.
//!
//! Generations are expected to be one query per line, but models often number the
//! lines, add bullets, or wrap the list in chatter ("Sure, I can help..." before,
//! "These APIs should..." after). The rules:
//!
//! 1. Split on newlines. From each line strip surrounding whitespace and any number
//!    of leading list markers: bullet characters, or `N.` / `N)` / `N:` / `(N)`
//!    followed by whitespace. Drop lines left empty.
//! 2. If at least one line carried a marker, it is a list: lines before the first
//!    marked line are preamble and lines after the last marked line are postamble;
//!    both are dropped.
//! 3. Leading lines that open like a conversational lead-in and trailing lines that
//!    read like a closing remark are dropped.
//! 4. At most five queries are kept; step 3's trailer check is re-applied after
//!    truncation.
//!
//! Every applied rule is recorded as a [`ParseNote`]. The output never contains
//! text that is not a substring of the input, and re-parsing the newline-joined
//! output returns it unchanged.

use serde::{Deserialize, Serialize};

use crate::index::MAX_GENERATED_QUERIES;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseNote {
    StrippedListPrefix,
    DroppedPreamble,
    DroppedPostamble,
    TruncatedToFive,
    EmptyAfterParse,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("nothing survived parsing")]
pub struct EmptyGeneration;

const BULLETS: &[char] = &['-', '*', '•', '·', '–', '—', '+', '>', '▪', '◦', '‣'];

const LEAD_INS: &[&str] = &[
    "sure",
    "certainly",
    "of course",
    "absolutely",
    "here are",
    "here is",
    "here's",
    "okay",
    "ok,",
    "i can",
    "i'd be happy",
    "i would be happy",
    "happy to help",
    "below are",
    "the following",
];

const TRAILERS: &[&str] = &[
    "these apis",
    "these api",
    "this api",
    "these descriptions",
    "these tools",
    "the above",
    "i hope",
    "hope this",
    "let me know",
    "note:",
    "please note",
    "feel free",
];

/// Strips one leading list marker, if present.
fn strip_one_marker(s: &str) -> Option<&str> {
    let mut chars = s.chars();
    let first = chars.next()?;
    if BULLETS.contains(&first) {
        return Some(chars.as_str().trim_start());
    }
    // "(12)" followed by whitespace or end.
    let (digits_from, closing): (&str, &[char]) = if let Some(rest) = s.strip_prefix('(') {
        (rest, &[')'])
    } else {
        (s, &['.', ')', ':'])
    };
    let ndigits = digits_from.bytes().take_while(u8::is_ascii_digit).count();
    if ndigits == 0 || ndigits > 3 {
        return None;
    }
    let rest = &digits_from[ndigits..];
    let sep = rest.chars().next()?;
    if !closing.contains(&sep) {
        return None;
    }
    let after = &rest[sep.len_utf8()..];
    if after.is_empty() || after.starts_with(char::is_whitespace) {
        Some(after.trim_start())
    } else {
        None
    }
}

/// Trims and strips all leading list markers; reports whether any were found.
fn strip_markers(line: &str) -> (&str, bool) {
    let mut s = line.trim();
    let mut stripped = false;
    while let Some(rest) = strip_one_marker(s) {
        s = rest.trim();
        stripped = true;
    }
    (s, stripped)
}

fn starts_with_any(line: &str, patterns: &[&str]) -> bool {
    let lower = line.to_lowercase();
    patterns.iter().any(|p| lower.starts_with(p))
}

fn is_lead_in(line: &str) -> bool {
    starts_with_any(line, LEAD_INS)
}

fn is_trailer(line: &str) -> bool {
    starts_with_any(line, TRAILERS)
}

pub fn parse_generation(raw: &str) -> Result<(Vec<String>, Vec<ParseNote>), EmptyGeneration> {
    let mut notes = Vec::new();
    let note = |n: ParseNote, notes: &mut Vec<ParseNote>| {
        if !notes.contains(&n) {
            notes.push(n);
        }
    };

    let lines: Vec<(&str, bool)> = raw
        .split('\n')
        .map(strip_markers)
        .filter(|(s, _)| !s.is_empty())
        .collect();
    if lines.iter().any(|(_, m)| *m) {
        note(ParseNote::StrippedListPrefix, &mut notes);
    }

    let mut content: Vec<&str> = match (
        lines.iter().position(|(_, m)| *m),
        lines.iter().rposition(|(_, m)| *m),
    ) {
        (Some(first), Some(last)) => {
            if first > 0 {
                note(ParseNote::DroppedPreamble, &mut notes);
            }
            if last + 1 < lines.len() {
                note(ParseNote::DroppedPostamble, &mut notes);
            }
            lines[first..=last].iter().map(|(s, _)| *s).collect()
        }
        _ => lines.iter().map(|(s, _)| *s).collect(),
    };

    let lead = content.iter().take_while(|l| is_lead_in(l)).count();
    if lead > 0 {
        content.drain(..lead);
        note(ParseNote::DroppedPreamble, &mut notes);
    }
    let drop_trailers = |content: &mut Vec<&str>, notes: &mut Vec<ParseNote>| {
        let mut dropped = false;
        while content.last().is_some_and(|l| is_trailer(l)) {
            content.pop();
            dropped = true;
        }
        if dropped && !notes.contains(&ParseNote::DroppedPostamble) {
            notes.push(ParseNote::DroppedPostamble);
        }
    };
    drop_trailers(&mut content, &mut notes);
    if content.len() > MAX_GENERATED_QUERIES {
        content.truncate(MAX_GENERATED_QUERIES);
        note(ParseNote::TruncatedToFive, &mut notes);
        drop_trailers(&mut content, &mut notes);
    }

    if content.is_empty() {
        return Err(EmptyGeneration);
    }
    Ok((content.into_iter().map(str::to_string).collect(), notes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn numbered_list() {
        let (q, notes) = parse_generation("1. Weather API: gets forecast\n2. Maps API: routing").unwrap();
        assert_eq!(q, ["Weather API: gets forecast", "Maps API: routing"]);
        assert_eq!(notes, [ParseNote::StrippedListPrefix]);
    }

    #[test]
    fn preamble_and_postamble() {
        let (q, notes) = parse_generation("Sure, I can help!\n- Get recipes\nThese APIs should help.").unwrap();
        assert_eq!(q, ["Get recipes"]);
        assert!(notes.contains(&ParseNote::DroppedPreamble));
        assert!(notes.contains(&ParseNote::DroppedPostamble));
    }

    #[test]
    fn plain_lines_with_chatter() {
        let (q, _) = parse_generation("Here are the APIs:\nGet recipes by ingredient\nFind grocery stores\nI hope this helps!").unwrap();
        assert_eq!(q, ["Get recipes by ingredient", "Find grocery stores"]);
    }

    #[test]
    fn empty_is_error() {
        assert_eq!(parse_generation(""), Err(EmptyGeneration));
        assert_eq!(parse_generation("\n  \n- \n"), Err(EmptyGeneration));
        assert_eq!(parse_generation("Sure, I can help with that."), Err(EmptyGeneration));
    }

    #[test]
    fn truncates_to_five() {
        let raw: String = (1..=7).map(|i| format!("{i}) query number {i}\n")).collect();
        let (q, notes) = parse_generation(&raw).unwrap();
        assert_eq!(q.len(), 5);
        assert_eq!(q[4], "query number 5");
        assert!(notes.contains(&ParseNote::TruncatedToFive));
    }

    #[test]
    fn markers_need_separator_and_whitespace() {
        let (q, _) = parse_generation("3.5 inch screen size lookup\n2023 sales report").unwrap();
        assert_eq!(q, ["3.5 inch screen size lookup", "2023 sales report"]);
        let (q, _) = parse_generation("(2) - nested marker").unwrap();
        assert_eq!(q, ["nested marker"]);
    }

    #[test]
    fn hallucinated_names_pass_through() {
        let (q, _) = parse_generation("- PartyPlanningAPI: Create a party checklist").unwrap();
        assert_eq!(q, ["PartyPlanningAPI: Create a party checklist"]);
    }

    fn fuzz_line() -> impl Strategy<Value = String> {
        let pieces = prop::sample::select(vec![
            "- ", "* ", "1. ", "2) ", "(3) ", "• ", "Sure, ", "These APIs ", "Here are ", "I hope ",
            "weather", "api", " ", "\t", "3.5", "-", ":", "Note: ", "get", "maps", "\r",
        ]);
        prop::collection::vec(pieces, 0..6).prop_map(|v| v.concat())
    }

    proptest! {
        #[test]
        fn idempotent_and_substring(lines in prop::collection::vec(fuzz_line(), 0..10)) {
            let raw = lines.join("\n");
            if let Ok((q, _)) = parse_generation(&raw) {
                for line in &q {
                    prop_assert!(raw.contains(line.as_str()));
                    prop_assert!(!line.is_empty());
                }
                prop_assert!(q.len() <= 5);
                let (again, _) = parse_generation(&q.join("\n")).unwrap();
                prop_assert_eq!(again, q);
            }
        }
    }
}
