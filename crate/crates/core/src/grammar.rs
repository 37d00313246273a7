//! Scanning helpers for the bracketed list syntax models emit:
//! `["a", "b"]` and `[["h", "r", "t"], ...]`.

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{0}")]
pub struct GrammarError(pub String);

/// Maps typographic variants the models sometimes produce onto ASCII.
pub fn normalize_llm_text(text: &str) -> String {
    text.replace(['\u{201c}', '\u{201d}'], "\"")
        .replace(['\u{27e8}', '\u{2329}', '\u{3008}'], "<")
        .replace(['\u{27e9}', '\u{232a}', '\u{3009}'], ">")
}

/// The first balanced `[...]` block at or after byte `from`, honoring
/// double-quoted strings with backslash escapes. Returns `(start, end)` with
/// `end` exclusive.
pub fn bracket_block(text: &str, from: usize) -> Option<(usize, usize)> {
    let bytes = text.as_bytes();
    let start = from + text.get(from..)?.find('[')?;
    let mut depth = 0usize;
    let mut in_str = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_str {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_str = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_str = true,
            b'[' => depth += 1,
            b']' => {
                depth -= 1;
                if depth == 0 {
                    return Some((start, i + 1));
                }
            }
            _ => {}
        }
    }
    None
}

pub fn parse_string_list(block: &str) -> Result<Vec<String>, GrammarError> {
    serde_json::from_str::<Vec<String>>(block)
        .map_err(|e| GrammarError(format!("malformed string list {}: {e}", preview(block))))
}

pub fn parse_triple_list(block: &str) -> Result<Vec<[String; 3]>, GrammarError> {
    let rows: Vec<Vec<String>> = serde_json::from_str(block)
        .map_err(|e| GrammarError(format!("malformed triple list {}: {e}", preview(block))))?;
    rows.into_iter()
        .enumerate()
        .map(|(i, row)| {
            <[String; 3]>::try_from(row).map_err(|row| {
                GrammarError(format!("triple {} has {} elements, expected 3", i + 1, row.len()))
            })
        })
        .collect()
}

fn preview(s: &str) -> String {
    let cut: String = s.chars().take(60).collect();
    if cut.len() < s.len() {
        format!("{cut:?}...")
    } else {
        format!("{cut:?}")
    }
}
