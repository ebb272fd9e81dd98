//! Tolerant CSV parsing for model-generated test tables.
//!
//! Models are instructed to emit exactly five columns with commas only
//! inside quoted values, but real replies drift: stray whitespace before
//! quotes, code fences, short rows. This parser salvages every well-formed
//! row and reports the rest with positions instead of aborting.
//!
//! Grammar per row: fields separated by `,`; a field is either quoted
//! (`"..."`, doubled quotes escape, may span lines) or raw text, both with
//! surrounding whitespace ignored. A row ends at an unquoted newline.

/// One parsed row with the 1-based line it started on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvRow {
    pub line: usize,
    pub fields: Vec<String>,
}

/// A rejected row and why.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowIssue {
    pub line: usize,
    pub reason: String,
}

impl std::fmt::Display for RowIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "line {}: {}", self.line, self.reason)
    }
}

/// Parse `text` into rows of exactly `expected_cols` fields. Rows with any
/// other arity, or with garbage after a closing quote, become issues.
pub fn parse_rows(text: &str, expected_cols: usize) -> (Vec<CsvRow>, Vec<RowIssue>) {
    let mut rows = Vec::new();
    let mut issues = Vec::new();
    let mut chars = text.chars().peekable();
    let mut line = 1usize;

    'rows: loop {
        // skip blank lines between records
        while let Some(&c) = chars.peek() {
            if c == '\n' {
                chars.next();
                line += 1;
            } else if c == '\r' || c == ' ' || c == '\t' {
                // lookahead: consume whitespace-only prefixes of blank lines
                let mut probe = chars.clone();
                let mut only_ws = true;
                let mut consumed = 0usize;
                while let Some(&pc) = probe.peek() {
                    if pc == '\n' {
                        break;
                    }
                    if !pc.is_whitespace() {
                        only_ws = false;
                        break;
                    }
                    probe.next();
                    consumed += 1;
                }
                if only_ws {
                    for _ in 0..consumed {
                        chars.next();
                    }
                    if chars.peek().is_none() {
                        break 'rows;
                    }
                    // loop re-checks the '\n'
                } else {
                    break;
                }
            } else {
                break;
            }
        }
        if chars.peek().is_none() {
            break;
        }

        let row_line = line;
        let mut fields: Vec<String> = Vec::new();
        let mut error: Option<String> = None;

        'fields: loop {
            // leading whitespace before a field
            while matches!(chars.peek(), Some(' ') | Some('\t') | Some('\r')) {
                chars.next();
            }
            match chars.peek() {
                Some('"') => {
                    chars.next();
                    let mut value = String::new();
                    loop {
                        match chars.next() {
                            Some('"') => {
                                if chars.peek() == Some(&'"') {
                                    chars.next();
                                    value.push('"');
                                } else {
                                    break;
                                }
                            }
                            Some('\n') => {
                                line += 1;
                                value.push('\n');
                            }
                            Some(c) => value.push(c),
                            None => {
                                error = Some("unterminated quoted field".into());
                                fields.push(value);
                                break 'fields;
                            }
                        }
                    }
                    fields.push(value);
                    // only whitespace may follow a closing quote
                    while matches!(chars.peek(), Some(' ') | Some('\t') | Some('\r')) {
                        chars.next();
                    }
                    match chars.peek() {
                        Some(',') => {
                            chars.next();
                        }
                        Some('\n') => {
                            chars.next();
                            line += 1;
                            break 'fields;
                        }
                        None => break 'fields,
                        Some(c) => {
                            error = Some(format!("unexpected {c:?} after closing quote"));
                            // resync: discard the rest of the line
                            for c in chars.by_ref() {
                                if c == '\n' {
                                    line += 1;
                                    break;
                                }
                            }
                            break 'fields;
                        }
                    }
                }
                _ => {
                    let mut value = String::new();
                    loop {
                        match chars.peek() {
                            Some(',') => {
                                chars.next();
                                fields.push(value.trim().to_string());
                                continue 'fields;
                            }
                            Some('\n') => {
                                chars.next();
                                line += 1;
                                fields.push(value.trim().to_string());
                                break 'fields;
                            }
                            None => {
                                fields.push(value.trim().to_string());
                                break 'fields;
                            }
                            Some(_) => value.push(chars.next().unwrap()),
                        }
                    }
                }
            }
        }

        // a lone empty unquoted field is a blank line artifact, not a row
        if fields.len() == 1 && fields[0].is_empty() && error.is_none() {
            continue;
        }

        if let Some(reason) = error {
            issues.push(RowIssue {
                line: row_line,
                reason,
            });
        } else if fields.len() != expected_cols {
            issues.push(RowIssue {
                line: row_line,
                reason: format!("expected {expected_cols} fields, found {}", fields.len()),
            });
        } else {
            rows.push(CsvRow {
                line: row_line,
                fields,
            });
        }
    }
    (rows, issues)
}

/// Serialize one row; fields that need quoting get it, quotes are doubled.
pub fn serialize_row(fields: &[String]) -> String {
    fields
        .iter()
        .map(|f| {
            let needs_quoting = f.contains(',')
                || f.contains('"')
                || f.contains('\n')
                || f.starts_with(char::is_whitespace)
                || f.ends_with(char::is_whitespace);
            if needs_quoting {
                format!("\"{}\"", f.replace('"', "\"\""))
            } else {
                f.clone()
            }
        })
        .collect::<Vec<_>>()
        .join(",")
}

/// Strip a wrapping code fence (``` or ```lang … ```), which models emit
/// even when told not to.
pub fn strip_code_fences(text: &str) -> &str {
    let trimmed = text.trim();
    let Some(rest) = trimmed.strip_prefix("```") else {
        return trimmed;
    };
    // drop the fence line (possibly with a language tag)
    let body = match rest.split_once('\n') {
        Some((_lang, body)) => body,
        None => return trimmed,
    };
    match body.trim_end().strip_suffix("```") {
        Some(inner) => inner.trim_end_matches(['\n', '\r', ' ']),
        None => body,
    }
}
