//! Multi-turn trajectories and the token-level loss mask.
//!
//! A trajectory is the prompt followed by alternating model responses and
//! tool observations. Only tokens that belong to a response segment are
//! trainable, so the mask is a pure function of segment kinds.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::tools::ToolErrorKind;

#[derive(Debug, thiserror::Error)]
pub enum TrajectoryError {
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("parse error on line {line} (byte {offset}): {message}")]
    ParseLine {
        line: usize,
        offset: usize,
        message: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Prompt,
    Response,
    Observation,
}

impl SegmentKind {
    /// Mask contribution of every token in a segment of this kind.
    pub fn mask_bit(self) -> u8 {
        match self {
            SegmentKind::Response => 1,
            SegmentKind::Prompt | SegmentKind::Observation => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub text: String,
    pub tokens: Vec<u32>,
}

impl Segment {
    pub fn new(kind: SegmentKind, text: impl Into<String>, tokens: Vec<u32>) -> Self {
        Self {
            kind,
            text: text.into(),
            tokens,
        }
    }

    /// Encodes `text` with `tokenizer`. Response segments get the tokenizer's
    /// end-of-turn token appended, as a generated turn always ends with one.
    pub fn encode(kind: SegmentKind, text: impl Into<String>, tokenizer: &dyn Tokenizer) -> Self {
        let text = text.into();
        let mut tokens = tokenizer.encode(&text);
        if kind == SegmentKind::Response {
            tokens.push(tokenizer.end_of_turn());
        }
        Self { kind, text, tokens }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Natural,
    MaxTurns,
    Error,
}

/// One entry of a chain's tool log, as stored in the trajectory record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCallRecord {
    pub turn: u32,
    pub name: String,
    pub args: Value,
    pub valid: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ToolErrorKind>,
}

impl ToolCallRecord {
    /// Unknown tool names and malformed arguments count as hallucinations;
    /// environment failures and timeouts do not.
    pub fn is_hallucination(&self) -> bool {
        matches!(
            self.error,
            Some(ToolErrorKind::UnknownTool) | Some(ToolErrorKind::BadArgs)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub chain_id: String,
    pub group: usize,
    pub segments: Vec<Segment>,
    pub terminated: Termination,
    pub reward: f64,
    #[serde(default)]
    pub tool_calls: Vec<ToolCallRecord>,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
}

impl Trajectory {
    pub fn new(chain_id: impl Into<String>, group: usize, prompt: Segment) -> Self {
        Self {
            chain_id: chain_id.into(),
            group,
            segments: vec![prompt],
            terminated: Termination::Error,
            reward: 0.0,
            tool_calls: Vec::new(),
            metrics: BTreeMap::new(),
        }
    }

    /// Number of model turns (response segments).
    pub fn turns(&self) -> usize {
        self.segments
            .iter()
            .filter(|s| s.kind == SegmentKind::Response)
            .count()
    }

    pub fn token_count(&self) -> usize {
        self.segments.iter().map(|s| s.tokens.len()).sum()
    }

    pub fn response_token_count(&self) -> usize {
        self.segments
            .iter()
            .filter(|s| s.kind == SegmentKind::Response)
            .map(|s| s.tokens.len())
            .sum()
    }

    /// Full conversation text: the concatenation of all segment texts.
    pub fn transcript(&self) -> String {
        self.segments.iter().map(|s| s.text.as_str()).collect()
    }

    pub fn final_response(&self) -> Option<&Segment> {
        self.segments
            .iter()
            .rev()
            .find(|s| s.kind == SegmentKind::Response)
    }

    /// Checks the structural invariants: a single leading prompt, responses
    /// and observations alternating after it, non-empty responses, and a
    /// trailing response for naturally terminated chains. Error chains may
    /// stop before the first response.
    pub fn validate(&self) -> Result<(), TrajectoryError> {
        let invalid = |msg: String| Err(TrajectoryError::InvalidTrajectory(msg));
        let Some(first) = self.segments.first() else {
            return invalid("trajectory has no segments".into());
        };
        if first.kind != SegmentKind::Prompt {
            return invalid("first segment must be the prompt".into());
        }
        let mut expect = SegmentKind::Response;
        for (i, seg) in self.segments.iter().enumerate().skip(1) {
            if seg.kind != expect {
                return invalid(format!("segment {i} is {:?}, expected {:?}", seg.kind, expect));
            }
            if seg.kind == SegmentKind::Response && seg.tokens.is_empty() {
                return invalid(format!("response segment {i} has no tokens"));
            }
            expect = match expect {
                SegmentKind::Response => SegmentKind::Observation,
                _ => SegmentKind::Response,
            };
        }
        let turns = self.turns();
        if turns == 0 && self.terminated != Termination::Error {
            return invalid("trajectory has no responses".into());
        }
        if self.terminated == Termination::Natural
            && self.segments.last().map(|s| s.kind) != Some(SegmentKind::Response)
        {
            return invalid("naturally terminated trajectory must end with a response".into());
        }
        if !self.reward.is_finite() {
            return invalid(format!("reward {} is not finite", self.reward));
        }
        Ok(())
    }

    /// Returns a copy whose total token count fits in `max_tokens`, dropping
    /// the oldest response/observation pairs first. Segments are never split;
    /// the prompt and the last response always survive.
    pub fn truncate_oldest_turns(&self, max_tokens: usize) -> Trajectory {
        let mut out = self.clone();
        while out.token_count() > max_tokens {
            let droppable = out.segments.len() >= 4
                && out.segments[1].kind == SegmentKind::Response
                && out.segments[2].kind == SegmentKind::Observation;
            if !droppable {
                break;
            }
            out.segments.drain(1..3);
        }
        out
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("trajectory serializes")
    }

    pub fn from_json_line(line: &str) -> Result<Self, TrajectoryError> {
        let traj: Trajectory = serde_json::from_str(line).map_err(|e| TrajectoryError::Parse {
            offset: byte_offset(line, e.line(), e.column()),
            message: e.to_string(),
        })?;
        traj.validate()?;
        Ok(traj)
    }
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    line_start + column.saturating_sub(1)
}

pub fn write_jsonl<W: Write>(mut out: W, trajectories: &[Trajectory]) -> std::io::Result<()> {
    for t in trajectories {
        out.write_all(t.to_json_line().as_bytes())?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads one trajectory per non-blank line. Errors report the 1-based line
/// number and the byte offset into the whole stream.
pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<Trajectory>, TrajectoryError> {
    let mut out = Vec::new();
    let mut consumed = 0usize;
    for (idx, line) in input.lines().enumerate() {
        let line = line?;
        let start = consumed;
        consumed += line.len() + 1;
        if line.trim().is_empty() {
            continue;
        }
        match Trajectory::from_json_line(&line) {
            Ok(t) => out.push(t),
            Err(TrajectoryError::Parse { offset, message }) => {
                return Err(TrajectoryError::ParseLine {
                    line: idx + 1,
                    offset: start + offset,
                    message,
                })
            }
            Err(TrajectoryError::InvalidTrajectory(message)) => {
                return Err(TrajectoryError::ParseLine {
                    line: idx + 1,
                    offset: start,
                    message,
                })
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Flat token ids of one trajectory with the matching loss mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedRow {
    pub token_ids: Vec<u32>,
    pub mask: Vec<u8>,
    pub group_index: usize,
}

impl MaskedRow {
    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }
}

/// Concatenates all segment tokens in order, marking exactly the response
/// tokens with 1.
pub fn build_mask(trajectory: &Trajectory) -> Result<MaskedRow, TrajectoryError> {
    trajectory.validate()?;
    let total = trajectory.token_count();
    let mut token_ids = Vec::with_capacity(total);
    let mut mask = Vec::with_capacity(total);
    for seg in &trajectory.segments {
        token_ids.extend_from_slice(&seg.tokens);
        mask.extend(std::iter::repeat_n(seg.kind.mask_bit(), seg.tokens.len()));
    }
    Ok(MaskedRow {
        token_ids,
        mask,
        group_index: trajectory.group,
    })
}

pub fn build_masks(trajectories: &[Trajectory]) -> Result<Vec<MaskedRow>, TrajectoryError> {
    trajectories.iter().map(build_mask).collect()
}

/// Text-to-token encoder. Mask logic is independent of the vocabulary, so any
/// encoder works as long as it is deterministic.
pub trait Tokenizer: Send + Sync {
    fn encode(&self, text: &str) -> Vec<u32>;
    /// Token closing every generated turn; it decodes to the empty string.
    fn end_of_turn(&self) -> u32;
}

/// One token per UTF-8 byte; the end-of-turn token is 256.
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteTokenizer;

impl Tokenizer for ByteTokenizer {
    fn encode(&self, text: &str) -> Vec<u32> {
        text.bytes().map(u32::from).collect()
    }

    fn end_of_turn(&self) -> u32 {
        256
    }
}

/// One token per whitespace-separated word, ids from a 64-bit FNV-1a hash
/// folded into a 2^20 vocabulary (id 0 is the end-of-turn token).
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(|w| {
                let mut h: u64 = 0xcbf2_9ce4_8422_2325;
                for b in w.bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
                (h % ((1 << 20) - 1)) as u32 + 1
            })
            .collect()
    }

    fn end_of_turn(&self) -> u32 {
        0
    }
}

/// Role-header template used to render chat turns into segment text.
///
/// The assistant header that opens each turn is emitted at the end of the
/// preceding prompt or observation segment, so response segments contain
/// only generated text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatTemplate {
    pub system_header: String,
    pub user_header: String,
    pub assistant_header: String,
    pub tool_header: String,
}

impl Default for ChatTemplate {
    fn default() -> Self {
        Self {
            system_header: "<|system|>\n".into(),
            user_header: "<|user|>\n".into(),
            assistant_header: "<|assistant|>\n".into(),
            tool_header: "<|tool|>\n".into(),
        }
    }
}

impl ChatTemplate {
    pub fn render_prompt(&self, system: Option<&str>, user: &str) -> String {
        let mut out = String::new();
        if let Some(sys) = system {
            out.push_str(&self.system_header);
            out.push_str(sys);
            out.push('\n');
        }
        out.push_str(&self.user_header);
        out.push_str(user);
        out.push('\n');
        out.push_str(&self.assistant_header);
        out
    }

    pub fn render_observation(&self, observation: &str) -> String {
        format!("\n{}{}\n{}", self.tool_header, observation, self.assistant_header)
    }
}
