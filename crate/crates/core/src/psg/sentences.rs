/// Words that end in a period without ending a sentence (compared
/// lowercased, without the final period).
pub const ABBREVIATIONS: &[&str] = &[
    "mr", "mrs", "ms", "dr", "prof", "sr", "jr", "st", "vs", "etc", "e.g", "i.e", "inc", "ltd", "co", "corp", "fig",
    "vol", "dept", "gen", "gov", "sen", "rep", "u.s", "u.k", "a.m", "p.m", "approx", "jan", "feb", "aug", "sept",
    "oct", "nov", "dec", "cf", "al",
];

const CLOSERS: &[char] = &['"', '\'', ')', ']', '\u{201d}', '\u{2019}'];
const OPENERS: &[char] = &['"', '\'', '(', '[', '\u{201c}', '\u{2018}'];

fn is_abbreviation(before: &str) -> bool {
    let word = before.rsplit(char::is_whitespace).next().unwrap_or("");
    let word = word.trim_start_matches(|c: char| OPENERS.contains(&c)).to_lowercase();
    ABBREVIATIONS.contains(&word.as_str())
}

/// Split text into sentences.
///
/// A boundary follows `.`, `!` or `?` (plus any closing quotes or brackets)
/// when whitespace comes next and the following character is uppercase or an
/// opening quote/bracket. A period closing a listed abbreviation never splits.
/// Sentences are trimmed; empty ones are dropped.
pub fn split_sentences(text: &str) -> Vec<String> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut out = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < chars.len() {
        let (pos, c) = chars[i];
        if !matches!(c, '.' | '!' | '?') {
            i += 1;
            continue;
        }
        let mut end = i + 1;
        while end < chars.len() && CLOSERS.contains(&chars[end].1) {
            end += 1;
        }
        let mut next = end;
        while next < chars.len() && chars[next].1.is_whitespace() {
            next += 1;
        }
        let boundary = next > end
            && next < chars.len()
            && (chars[next].1.is_uppercase() || OPENERS.contains(&chars[next].1))
            && !(c == '.' && is_abbreviation(&text[start..pos]));
        if boundary {
            let cut = chars[end].0;
            let s = text[start..cut].trim();
            if !s.is_empty() {
                out.push(s.to_string());
            }
            start = chars[next].0;
            i = next;
        } else {
            i = end;
        }
    }
    let s = text[start..].trim();
    if !s.is_empty() {
        out.push(s.to_string());
    }
    out
}
