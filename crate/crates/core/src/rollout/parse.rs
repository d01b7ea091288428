//! Extracting tool calls and final answers from model responses.
//!
//! Structured calls (from the inference protocol) win when present.
//! Otherwise the text is read in ReAct form:
//!
//! ```text
//! Thought: ...
//! Action: tool_name
//! Input: {"json": "object"}
//! ...
//! Answer: final answer
//! ```
//!
//! An `Answer:` line with no `Action:` after it ends the chain; so does a
//! response without any action.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// A tool call as returned by a chat-completions style endpoint; the
/// arguments are the raw JSON text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredCall {
    #[serde(default)]
    pub id: String,
    pub name: String,
    pub arguments: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedCall {
    pub name: String,
    /// The decoded arguments, or a message explaining why they could not be
    /// decoded.
    pub args: Result<Value, String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParsedResponse {
    pub calls: Vec<ParsedCall>,
    pub final_answer: bool,
    /// Text of the terminal `Answer:` block, if one was given.
    pub answer: Option<String>,
}

const ACTION: &str = "Action:";
const INPUT: &str = "Input:";
const ANSWER: &str = "Answer:";

fn decode_args(raw: &str) -> Result<Value, String> {
    let raw = raw.trim();
    if raw.is_empty() {
        return Ok(Value::Object(Map::new()));
    }
    let mut stream = serde_json::Deserializer::from_str(raw).into_iter::<Value>();
    match stream.next() {
        Some(Ok(v)) => Ok(v),
        Some(Err(e)) => Err(format!("Error: could not parse Input as JSON: {e}")),
        None => Ok(Value::Object(Map::new())),
    }
}

/// Strips a leading `> ` quote marker and surrounding whitespace.
fn line_body(line: &str) -> &str {
    let t = line.trim_start();
    t.strip_prefix('>').map(str::trim_start).unwrap_or(t)
}

pub fn parse_actions(text: &str, structured: &[StructuredCall]) -> ParsedResponse {
    if !structured.is_empty() {
        return ParsedResponse {
            calls: structured
                .iter()
                .map(|c| ParsedCall {
                    name: c.name.trim().to_string(),
                    args: decode_args(&c.arguments),
                })
                .collect(),
            final_answer: false,
            answer: None,
        };
    }
    let lines: Vec<&str> = text.lines().collect();
    let mut calls = Vec::new();
    let mut answer: Option<(usize, String)> = None;
    let mut last_action_line = None;
    let mut i = 0;
    while i < lines.len() {
        let body = line_body(lines[i]);
        if let Some(name) = body.strip_prefix(ACTION) {
            last_action_line = Some(i);
            let name = name.trim().to_string();
            // The input runs from `Input:` to the next Action/Answer/Thought line.
            let mut j = i + 1;
            let mut input: Option<String> = None;
            while j < lines.len() {
                let b = line_body(lines[j]);
                if b.starts_with(ACTION) || b.starts_with(ANSWER) || b.starts_with("Thought:") {
                    break;
                }
                if let Some(rest) = b.strip_prefix(INPUT) {
                    let mut buf = rest.to_string();
                    let mut k = j + 1;
                    while k < lines.len() {
                        let bk = line_body(lines[k]);
                        if bk.starts_with(ACTION)
                            || bk.starts_with(ANSWER)
                            || bk.starts_with("Thought:")
                            || bk.starts_with("Observation:")
                        {
                            break;
                        }
                        buf.push('\n');
                        buf.push_str(lines[k]);
                        k += 1;
                    }
                    input = Some(buf);
                    j = k;
                    break;
                }
                j += 1;
            }
            let args = match input {
                Some(raw) => decode_args(&raw),
                None => Ok(Value::Object(Map::new())),
            };
            calls.push(ParsedCall { name, args });
            i = j;
            continue;
        }
        if let Some(rest) = body.strip_prefix(ANSWER) {
            let tail: Vec<&str> = std::iter::once(rest)
                .chain(lines[i + 1..].iter().copied())
                .collect();
            answer = Some((i, tail.join("\n").trim().to_string()));
        }
        i += 1;
    }
    let terminal = match (&answer, last_action_line) {
        (Some((a, _)), Some(l)) => *a > l,
        (Some(_), None) => true,
        (None, _) => false,
    };
    if terminal {
        return ParsedResponse {
            calls: Vec::new(),
            final_answer: true,
            answer: answer.map(|a| a.1),
        };
    }
    ParsedResponse {
        final_answer: calls.is_empty(),
        calls,
        answer: None,
    }
}

/// ReAct rendering of structured calls, appended to the response text so the
/// transcript records what the model generated.
pub fn render_calls(calls: &[StructuredCall]) -> String {
    calls
        .iter()
        .map(|c| format!("Action: {}\nInput: {}", c.name, c.arguments))
        .collect::<Vec<_>>()
        .join("\n")
}
