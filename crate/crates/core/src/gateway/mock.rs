//! Scripted mock backend for deterministic pipeline runs and tests.
//!
//! A script is line-oriented. Blank lines and `#` comments are ignored.
//! Every other line is a rule:
//!
//! ```text
//! once <regex> => <reply>
//! repeat <regex> => <reply>
//! ```
//!
//! For each request the first unconsumed rule whose regex matches the
//! concatenated message text (`role:\ntext\n` per message, dot matches
//! newline) is selected; `once` rules are consumed by the match, `repeat`
//! rules never are. A request matching no rule fails with
//! `MockScriptExhausted`.
//!
//! Reply forms:
//! - `<echo>` replies with the last user message text;
//! - `@path` replies with the content of `path`, relative to the script;
//! - `!<status> <body>` fails with a provider error, e.g. `!429 slow down`;
//! - anything else is inline text with `\n`, `\t`, and `\\` escapes.

use std::fs;
use std::path::{Path, PathBuf};

use regex::RegexBuilder;

use super::{ChatResponse, GatewayError, TokenUsage};
use crate::prompt_store::{Message, Role};

#[derive(Debug, Clone)]
pub enum MockReply {
    Inline(String),
    File(PathBuf),
    Error { status: u16, body: String },
    Echo,
}

#[derive(Debug, Clone)]
pub struct MockRule {
    pub pattern: regex::Regex,
    pub reply: MockReply,
    pub repeat: bool,
}

#[derive(Debug)]
pub struct MockScript {
    path: PathBuf,
    rules: Vec<MockRule>,
    consumed: Vec<bool>,
}

impl MockScript {
    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let text = fs::read_to_string(path).map_err(|e| GatewayError::MalformedScript {
            path: path.display().to_string(),
            line: 0,
            detail: format!("read failed: {e}"),
        })?;
        Self::parse(path, &text)
    }

    pub fn parse(path: &Path, text: &str) -> Result<Self, GatewayError> {
        let malformed = |line: usize, detail: String| GatewayError::MalformedScript {
            path: path.display().to_string(),
            line,
            detail,
        };
        let mut rules = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (directive, rest) = line.split_once(char::is_whitespace).ok_or_else(|| {
                malformed(line_no, "expected 'once|repeat <regex> => <reply>'".into())
            })?;
            let repeat = match directive {
                "once" => false,
                "repeat" => true,
                other => return Err(malformed(line_no, format!("unknown directive {other:?}"))),
            };
            let (pattern_text, reply_text) = rest
                .split_once(" => ")
                .ok_or_else(|| malformed(line_no, "missing ' => ' separator".into()))?;
            let pattern = RegexBuilder::new(pattern_text.trim())
                .dot_matches_new_line(true)
                .build()
                .map_err(|e| malformed(line_no, format!("bad regex: {e}")))?;
            let reply_text = reply_text.trim();
            let reply = if reply_text == "<echo>" {
                MockReply::Echo
            } else if let Some(file) = reply_text.strip_prefix('@') {
                let base = path.parent().unwrap_or_else(|| Path::new("."));
                MockReply::File(base.join(file))
            } else if let Some(err) = reply_text.strip_prefix('!') {
                let (status, body) = err.split_once(' ').unwrap_or((err, ""));
                let status: u16 = status
                    .parse()
                    .map_err(|_| malformed(line_no, format!("bad status in {err:?}")))?;
                MockReply::Error {
                    status,
                    body: body.to_string(),
                }
            } else {
                MockReply::Inline(unescape(reply_text))
            };
            rules.push(MockRule {
                pattern,
                reply,
                repeat,
            });
        }
        let consumed = vec![false; rules.len()];
        Ok(MockScript {
            path: path.to_path_buf(),
            rules,
            consumed,
        })
    }

    /// Serve one request; mutates one-shot rule state.
    pub fn respond(&mut self, messages: &[Message]) -> Result<ChatResponse, GatewayError> {
        let haystack = concat_messages(messages);
        let matched = self
            .rules
            .iter()
            .enumerate()
            .position(|(i, rule)| !self.consumed[i] && rule.pattern.is_match(&haystack));
        let Some(idx) = matched else {
            return Err(GatewayError::MockScriptExhausted {
                script: self.path.display().to_string(),
            });
        };
        if !self.rules[idx].repeat {
            self.consumed[idx] = true;
        }
        let text = match &self.rules[idx].reply {
            MockReply::Inline(text) => text.clone(),
            MockReply::File(path) => {
                fs::read_to_string(path).map_err(|e| GatewayError::MalformedScript {
                    path: self.path.display().to_string(),
                    line: 0,
                    detail: format!("reply file {}: {e}", path.display()),
                })?
            }
            MockReply::Error { status, body } => {
                return Err(GatewayError::Provider {
                    status: *status,
                    body: body.clone(),
                })
            }
            MockReply::Echo => messages
                .iter()
                .rev()
                .find(|m| m.role == Role::User)
                .map(|m| m.text.clone())
                .unwrap_or_default(),
        };
        Ok(ChatResponse {
            text,
            finish_reason: "stop".to_string(),
            usage: TokenUsage::default(),
            latency_us: 0,
        })
    }
}

fn concat_messages(messages: &[Message]) -> String {
    let mut out = String::new();
    for msg in messages {
        out.push_str(msg.role.as_str());
        out.push_str(":\n");
        out.push_str(&msg.text);
        out.push('\n');
    }
    out
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('n') => out.push('\n'),
                Some('t') => out.push('\t'),
                Some('\\') => out.push('\\'),
                Some(other) => {
                    out.push('\\');
                    out.push(other);
                }
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}
