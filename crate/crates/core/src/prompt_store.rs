//! Prompt file parsing, rendering, and the bundled benchmark fixtures.
//!
//! A prompt file is UTF-8 text with an optional `---`-delimited front-matter
//! block (`key: value` lines) followed by one or more role sections. A role
//! header is `system:`, `user:`, or `assistant:` alone on a line at column
//! zero; everything until the next header belongs to that section.
//!
//! Placeholders are written `{{name}}` (internal whitespace allowed, so
//! `{{ name }}` is equivalent) where `name` matches `[A-Za-z_][A-Za-z0-9_]*`.
//! Rendering is a single byte-for-byte substitution pass: substituted values
//! are never re-scanned, so a binding containing `{{x}}` stays literal.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Message role inside a prompt file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }

    fn from_header(s: &str) -> Option<Role> {
        match s {
            "system" => Some(Role::System),
            "user" => Some(Role::User),
            "assistant" => Some(Role::Assistant),
            _ => None,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One role-tagged message, possibly containing placeholders.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub text: String,
}

impl Message {
    pub fn new(role: Role, text: impl Into<String>) -> Self {
        Message {
            role,
            text: text.into(),
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("prompt file is empty")]
    EmptyFile,
    #[error("unterminated front matter block")]
    UnterminatedFrontMatter,
    #[error("malformed front matter at line {line}: {text:?}")]
    MalformedFrontMatter { line: usize, text: String },
    #[error("unknown front matter key {key:?} at line {line}")]
    UnknownFrontMatterKey { key: String, line: usize },
    #[error("malformed role header at line {line}: {text:?}")]
    MalformedRoleHeader { line: usize, text: String },
    #[error("malformed placeholder in {role} message: {detail}")]
    MalformedPlaceholder { role: Role, detail: String },
    #[error("user messages contain {count} placeholders; exactly one is required")]
    MultipleUserPlaceholders { count: usize },
    #[error("user messages contain no placeholder")]
    NoUserPlaceholder,
    #[error("no binding for placeholder {0:?}")]
    UnboundPlaceholder(String),
}

/// A prompt used as a software artifact: the thing being tested.
///
/// Invariant (enforced by [`PromptUnderTest::parse`] and
/// [`PromptUnderTest::synthesize`]): exactly one placeholder occurrence
/// appears across all user-role messages, so a test input binds to exactly
/// one slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptUnderTest {
    pub id: String,
    pub name: String,
    pub source: String,
    pub messages: Vec<Message>,
    pub placeholders: BTreeSet<String>,
}

impl PromptUnderTest {
    /// Parse a prompt file. See the module docs for the grammar.
    pub fn parse(text: &str) -> Result<Self, PromptError> {
        if text.trim().is_empty() {
            return Err(PromptError::EmptyFile);
        }
        let (front, messages) = parse_sections(text)?;

        let mut placeholders = BTreeSet::new();
        let mut user_occurrences = 0usize;
        for msg in &messages {
            let found = scan_placeholders(&msg.text).map_err(|detail| {
                PromptError::MalformedPlaceholder {
                    role: msg.role,
                    detail,
                }
            })?;
            if msg.role == Role::User {
                user_occurrences += found.len();
            }
            placeholders.extend(found.into_iter().map(|(_, name)| name));
        }
        match user_occurrences {
            0 => return Err(PromptError::NoUserPlaceholder),
            1 => {}
            n => return Err(PromptError::MultipleUserPlaceholders { count: n }),
        }

        let declared_id = front.get("id").cloned();
        let declared_name = front.get("name").cloned();
        let id = match (&declared_id, &declared_name) {
            (Some(id), _) => id.clone(),
            (None, Some(name)) => slugify(name),
            (None, None) => content_digest(text)[..12].to_string(),
        };
        let name = declared_name.unwrap_or_else(|| id.clone());
        let source = front.get("source").cloned().unwrap_or_default();

        Ok(PromptUnderTest {
            id,
            name,
            source,
            messages,
            placeholders,
        })
    }

    /// Build a prompt directly from a system text and a single user
    /// placeholder. The system text is defused so the result serializes and
    /// re-parses cleanly even when it came from a model: `{{` becomes
    /// `{ {`, and any line that would read as a role header gets indented.
    pub fn synthesize(
        id: impl Into<String>,
        name: impl Into<String>,
        source: impl Into<String>,
        system_text: &str,
        placeholder: &str,
    ) -> Self {
        let system_text = system_text
            .replace("{{", "{ {")
            .lines()
            .map(|line| {
                if is_role_header(line).is_some() {
                    format!(" {line}")
                } else {
                    line.to_string()
                }
            })
            .collect::<Vec<_>>()
            .join("\n");
        let mut placeholders = BTreeSet::new();
        placeholders.insert(placeholder.to_string());
        PromptUnderTest {
            id: id.into(),
            name: name.into(),
            source: source.into(),
            messages: vec![
                Message::new(Role::System, system_text),
                Message::new(Role::User, format!("{{{{{placeholder}}}}}")),
            ],
            placeholders,
        }
    }

    /// The name of the single user-message placeholder (the input slot).
    pub fn input_placeholder(&self) -> &str {
        for msg in &self.messages {
            if msg.role != Role::User {
                continue;
            }
            let spans =
                scan_placeholders(&msg.text).expect("placeholders validated at construction");
            if let Some(((start, end), _)) = spans.into_iter().next() {
                return msg.text[start + 2..end - 2].trim();
            }
        }
        unreachable!("invariant: exactly one user placeholder")
    }

    /// The prompt body as meta-models see it: role-tagged sections without
    /// front matter.
    pub fn spec_text(&self) -> String {
        serialize_sections(&self.messages)
    }

    /// Serialize back to the prompt file format. `parse` of the result
    /// reproduces this prompt exactly.
    pub fn to_file_text(&self) -> String {
        let mut out = String::new();
        out.push_str("---\n");
        out.push_str(&format!("id: {}\n", self.id));
        out.push_str(&format!("name: {}\n", self.name));
        if !self.source.is_empty() {
            out.push_str(&format!("source: {}\n", self.source));
        }
        out.push_str("---\n");
        out.push_str(&serialize_sections(&self.messages));
        out
    }

    /// Substitute `bindings` into every message. All placeholders must be
    /// bound; extra bindings are ignored.
    pub fn render(&self, bindings: &BTreeMap<String, String>) -> Result<Vec<Message>, PromptError> {
        render_messages(&self.messages, bindings)
    }

    /// Render with the single user placeholder bound to `input`.
    pub fn render_with_input(&self, input: &str) -> Result<Vec<Message>, PromptError> {
        let mut bindings = BTreeMap::new();
        bindings.insert(self.input_placeholder().to_string(), input.to_string());
        self.render(&bindings)
    }
}

/// A pipeline-internal prompt template (extractors, generators, judges).
/// Unlike a [`PromptUnderTest`] it may take any number of placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetaPromptTemplate {
    pub id: String,
    pub messages: Vec<Message>,
    pub required: BTreeSet<String>,
}

impl MetaPromptTemplate {
    pub fn parse(id: impl Into<String>, text: &str) -> Result<Self, PromptError> {
        if text.trim().is_empty() {
            return Err(PromptError::EmptyFile);
        }
        let (_, messages) = parse_sections(text)?;
        let mut required = BTreeSet::new();
        for msg in &messages {
            let found = scan_placeholders(&msg.text).map_err(|detail| {
                PromptError::MalformedPlaceholder {
                    role: msg.role,
                    detail,
                }
            })?;
            required.extend(found.into_iter().map(|(_, name)| name));
        }
        Ok(MetaPromptTemplate {
            id: id.into(),
            messages,
            required,
        })
    }

    /// Render the template; fails if any required placeholder is unbound.
    pub fn render(&self, bindings: &BTreeMap<String, String>) -> Result<Vec<Message>, PromptError> {
        render_messages(&self.messages, bindings)
    }

    /// SHA-256 of the template body, recorded in run manifests.
    pub fn digest(&self) -> String {
        content_digest(&serialize_sections(&self.messages))
    }
}

fn render_messages(
    messages: &[Message],
    bindings: &BTreeMap<String, String>,
) -> Result<Vec<Message>, PromptError> {
    messages
        .iter()
        .map(|msg| {
            let text = render_text(&msg.text, bindings)?;
            Ok(Message::new(msg.role, text))
        })
        .collect()
}

/// Single-pass substitution of `{{name}}` tokens. Substituted content is
/// copied verbatim and never re-scanned.
fn render_text(template: &str, bindings: &BTreeMap<String, String>) -> Result<String, PromptError> {
    let spans =
        scan_placeholders(template).expect("templates are placeholder-validated at parse time");
    let mut out = String::with_capacity(template.len());
    let mut cursor = 0usize;
    for ((start, end), name) in spans {
        out.push_str(&template[cursor..start]);
        let value = bindings
            .get(&name)
            .ok_or_else(|| PromptError::UnboundPlaceholder(name.clone()))?;
        out.push_str(value);
        cursor = end;
    }
    out.push_str(&template[cursor..]);
    Ok(out)
}

/// Byte range (start of `{{`, end past `}}`) and trimmed name of one
/// placeholder occurrence.
type PlaceholderSpan = ((usize, usize), String);

/// Find every `{{name}}` span, or describe the first malformed token.
fn scan_placeholders(text: &str) -> Result<Vec<PlaceholderSpan>, String> {
    let bytes = text.as_bytes();
    let mut spans = Vec::new();
    let mut i = 0usize;
    while i + 1 < bytes.len() {
        if bytes[i] == b'{' && bytes[i + 1] == b'{' {
            let start = i;
            let rest = &text[i + 2..];
            let close = rest
                .find("}}")
                .ok_or_else(|| format!("unterminated '{{{{' at byte {i}"))?;
            let inner = &rest[..close];
            let name = inner.trim();
            if !is_identifier(name) {
                return Err(format!("invalid placeholder name {inner:?} at byte {i}"));
            }
            let end = i + 2 + close + 2;
            spans.push(((start, end), name.to_string()));
            i = end;
        } else {
            i += 1;
        }
    }
    Ok(spans)
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn slugify(name: &str) -> String {
    let slug: String = name
        .trim()
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c.to_ascii_lowercase()
            } else {
                '-'
            }
        })
        .collect();
    if slug.is_empty() {
        "prompt".to_string()
    } else {
        slug
    }
}

pub(crate) fn content_digest(text: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    hex::encode(hasher.finalize())
}

fn is_role_header(line: &str) -> Option<Role> {
    let trimmed_end = line.trim_end();
    let name = trimmed_end.strip_suffix(':')?;
    Role::from_header(name)
}

/// Split a prompt file into front matter and role sections.
fn parse_sections(text: &str) -> Result<(BTreeMap<String, String>, Vec<Message>), PromptError> {
    let mut lines: Vec<&str> = text.lines().collect();
    let mut front = BTreeMap::new();
    let mut idx = 0usize;

    if lines.first().map(|l| l.trim_end()) == Some("---") {
        idx = 1;
        let mut closed = false;
        while idx < lines.len() {
            let line = lines[idx];
            if line.trim_end() == "---" {
                idx += 1;
                closed = true;
                break;
            }
            let (key, value) = line
                .split_once(':')
                .ok_or(PromptError::MalformedFrontMatter {
                    line: idx + 1,
                    text: line.to_string(),
                })?;
            let key = key.trim();
            match key {
                "id" | "name" | "source" => {
                    front.insert(key.to_string(), value.trim().to_string());
                }
                _ => {
                    return Err(PromptError::UnknownFrontMatterKey {
                        key: key.to_string(),
                        line: idx + 1,
                    })
                }
            }
            idx += 1;
        }
        if !closed {
            return Err(PromptError::UnterminatedFrontMatter);
        }
    }
    lines.drain(..idx);

    // Skip blank lines before the first header.
    let mut offset = idx;
    while lines.first().is_some_and(|l| l.trim().is_empty()) {
        lines.remove(0);
        offset += 1;
    }

    let first = lines.first().ok_or(PromptError::EmptyFile)?;
    if is_role_header(first).is_none() {
        return Err(PromptError::MalformedRoleHeader {
            line: offset + 1,
            text: first.to_string(),
        });
    }

    let mut messages = Vec::new();
    let mut current_role: Option<Role> = None;
    let mut body: Vec<&str> = Vec::new();
    for line in lines {
        if let Some(role) = is_role_header(line) {
            if let Some(prev) = current_role {
                messages.push(Message::new(prev, join_body(&body)));
            }
            current_role = Some(role);
            body.clear();
        } else {
            body.push(line);
        }
    }
    if let Some(prev) = current_role {
        messages.push(Message::new(prev, join_body(&body)));
    }
    Ok((front, messages))
}

/// Join section lines, dropping leading and trailing blank lines but
/// preserving interior blanks exactly.
fn join_body(lines: &[&str]) -> String {
    let start = lines
        .iter()
        .position(|l| !l.trim().is_empty())
        .unwrap_or(lines.len());
    let end = lines
        .iter()
        .rposition(|l| !l.trim().is_empty())
        .map(|p| p + 1)
        .unwrap_or(start);
    lines[start..end].join("\n")
}

fn serialize_sections(messages: &[Message]) -> String {
    let mut out = String::new();
    for msg in messages {
        out.push_str(msg.role.as_str());
        out.push_str(":\n");
        out.push_str(&msg.text);
        out.push('\n');
    }
    out
}

macro_rules! bundled {
    ($($id:literal => $file:literal),+ $(,)?) => {
        &[$(($id, include_str!(concat!("../../../benchmarks/", $file)))),+]
    };
}

/// `(id, file text)` pairs for the eight bundled benchmark prompts.
pub const BENCHMARK_SOURCES: &[(&str, &str)] = bundled![
    "speech-tag" => "speech-tag.prompt",
    "text-to-p" => "text-to-p.prompt",
    "shakespeare" => "shakespeare.prompt",
    "sentence" => "sentence.prompt",
    "extract-names" => "extract-names.prompt",
    "elements" => "elements.prompt",
    "classify" => "classify.prompt",
    "art-prompt" => "art-prompt.prompt",
];

/// Parse and return the eight bundled benchmark prompts, in bundle order.
pub fn list_benchmarks() -> Vec<PromptUnderTest> {
    BENCHMARK_SOURCES
        .iter()
        .map(|(id, text)| {
            PromptUnderTest::parse(text)
                .unwrap_or_else(|e| panic!("bundled benchmark {id} failed to parse: {e}"))
        })
        .collect()
}

/// Look up one bundled benchmark by id.
pub fn benchmark(id: &str) -> Option<PromptUnderTest> {
    BENCHMARK_SOURCES
        .iter()
        .find(|(bid, _)| *bid == id)
        .map(|(_, text)| PromptUnderTest::parse(text).expect("bundled benchmark parses"))
}

pub mod templates {
    //! The pipeline's own prompt templates, embedded at compile time.

    use super::MetaPromptTemplate;

    macro_rules! template_fn {
        ($(#[$doc:meta])* $name:ident, $file:literal) => {
            $(#[$doc])*
            pub fn $name() -> MetaPromptTemplate {
                MetaPromptTemplate::parse(
                    stringify!($name),
                    include_str!(concat!("../templates/", $file)),
                )
                .expect("bundled template parses")
            }
        };
    }

    template_fn!(
        /// Judges whether a model output complies with the prompt it came
        /// from, without seeing the test input. Takes `system`, `result`.
        compliance_judge,
        "compliance_judge.prompt"
    );
    template_fn!(
        /// Extracts the input specification from a prompt. Takes `context`.
        input_spec_extract,
        "input_spec_extract.prompt"
    );
    template_fn!(
        /// Produces one contradicting rule per given rule. Takes `rule`.
        inverse_rules,
        "inverse_rules.prompt"
    );
    template_fn!(
        /// Extracts all output rules from a prompt. Takes `input_data`.
        output_rules_all,
        "output_rules_all.prompt"
    );
    template_fn!(
        /// Extracts at least `num_rules` crucial output rules. Takes
        /// `num_rules`, `input_data`.
        output_rules_limited,
        "output_rules_limited.prompt"
    );
    template_fn!(
        /// Generates per-rule test cases in 5-column CSV. Takes `num`,
        /// `input_spec`, `context`, `rule`, `num_rules`, `total_tests`.
        rule_test_gen,
        "rule_test_gen.prompt"
    );
    template_fn!(
        /// Zero-shot baseline generator, `===`-delimited output. Takes
        /// `num`, `prompt`.
        baseline_test_gen,
        "baseline_test_gen.prompt"
    );
    template_fn!(
        /// Judges a test input against the input specification. Takes
        /// `input_spec`, `test`.
        input_validity_judge,
        "input_validity_judge.prompt"
    );
    template_fn!(
        /// Judges whether a rule is grounded in the prompt. Takes
        /// `description`, `rule`.
        groundedness_judge,
        "groundedness_judge.prompt"
    );
    template_fn!(
        /// Extracts the task intent from a prompt. Takes `prompt`.
        task_spec_extract,
        "task_spec_extract.prompt"
    );

    /// All bundled templates, for manifest digests.
    pub fn all() -> Vec<MetaPromptTemplate> {
        vec![
            compliance_judge(),
            input_spec_extract(),
            inverse_rules(),
            output_rules_all(),
            output_rules_limited(),
            rule_test_gen(),
            baseline_test_gen(),
            input_validity_judge(),
            groundedness_judge(),
            task_spec_extract(),
        ]
    }
}
