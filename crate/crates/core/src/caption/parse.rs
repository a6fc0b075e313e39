//! Rule-based parsing of free-text region captions.

use crate::dataset::{RegionCaption, UiType};

const ATTRIBUTE_WORDS: &[&str] = &[
    // colors
    "red", "orange", "yellow", "green", "blue", "purple", "pink", "white", "black", "gray", "grey",
    "brown", "cyan", "teal",
    // states
    "disabled", "enabled", "selected", "focused", "checked", "unchecked", "active", "inactive",
    "highlighted", "expanded", "collapsed",
];

const TEXT_MARKERS: &[&str] = &["with text ", "labeled ", "labelled "];

#[derive(Debug)]
struct Word<'a> {
    start: usize,
    text: &'a str,
}

fn words(s: &str) -> Vec<Word<'_>> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in s.char_indices() {
        let part = c.is_alphanumeric() || c == '-';
        match (part, start) {
            (true, None) => start = Some(i),
            (false, Some(st)) => {
                out.push(Word { start: st, text: &s[st..i] });
                start = None;
            }
            _ => {}
        }
    }
    if let Some(st) = start {
        out.push(Word { start: st, text: &s[st..] });
    }
    out
}

fn is_word_char(c: Option<char>) -> bool {
    c.is_some_and(|c| c.is_alphanumeric())
}

/// Byte range of the first quoted span's contents (quotes excluded). Single
/// quotes only open at a word boundary so apostrophes are not mistaken for
/// quotes.
fn quoted_span(raw: &str) -> Option<(usize, usize)> {
    let chars: Vec<(usize, char)> = raw.char_indices().collect();
    for (pos, &(open_at, q)) in chars.iter().enumerate() {
        let close_char = match q {
            '\'' | '"' => q,
            '\u{2018}' => '\u{2019}',
            '\u{201C}' => '\u{201D}',
            _ => continue,
        };
        let prev = pos.checked_sub(1).map(|p| chars[p].1);
        if q == '\'' && is_word_char(prev) {
            continue;
        }
        let body_start = open_at + q.len_utf8();
        for (cpos, &(at, c)) in chars.iter().enumerate().skip(pos + 1) {
            if c != close_char {
                continue;
            }
            let next = chars.get(cpos + 1).map(|x| x.1);
            if close_char == '\'' && is_word_char(next) {
                continue;
            }
            if raw[body_start..at].trim().is_empty() {
                break;
            }
            return Some((body_start, at));
        }
    }
    None
}

fn marker_text(raw: &str) -> Option<String> {
    let lower = raw.to_ascii_lowercase();
    let (at, marker) = TEXT_MARKERS
        .iter()
        .filter_map(|m| lower.find(m).map(|i| (i, *m)))
        .min_by_key(|(i, _)| *i)?;
    let rest = &raw[at + marker.len()..];
    let end = rest.find([',', '.', ';', '(', ')']).unwrap_or(rest.len());
    let text = rest[..end].trim();
    (!text.is_empty()).then(|| text.to_string())
}

/// Parses a raw caption. Total: unrecognized input yields `ui_type = other`
/// and no text, with `raw` preserved verbatim.
///
/// * `ui_type`: the first vocabulary word outside the quoted span.
/// * `text`: the first quoted span, else what follows "with text" or
///   "labeled" up to punctuation.
/// * `attributes`: known color/state words before the type word (anywhere
///   when no type word is found), lowercased and deduplicated.
pub fn parse_caption(raw: &str) -> RegionCaption {
    let quote = quoted_span(raw);
    let outside_quote = |w: &Word| match quote {
        Some((s, e)) => !(s..e).contains(&w.start),
        None => true,
    };
    let ws: Vec<Word> = words(raw).into_iter().filter(|w| outside_quote(w)).collect();

    let typed = ws
        .iter()
        .enumerate()
        .find_map(|(i, w)| UiType::from_word(w.text).map(|t| (i, t)));
    let (ui_type, attr_scope) = match typed {
        Some((i, t)) => (t, &ws[..i]),
        None => (UiType::Other, &ws[..]),
    };

    let mut attributes: Vec<String> = Vec::new();
    for w in attr_scope {
        let lw = w.text.to_lowercase();
        if ATTRIBUTE_WORDS.contains(&lw.as_str()) && !attributes.contains(&lw) {
            attributes.push(lw);
        }
    }

    let text = match quote {
        Some((s, e)) => Some(raw[s..e].trim().to_string()),
        None => marker_text(raw),
    };

    RegionCaption {
        ui_type,
        text,
        attributes,
        raw: raw.to_string(),
    }
}
