//! Browser bindings: segment masking, advantage estimation and a playable
//! GridHouse episode.

use std::sync::Arc;

use chainforge::algorithms::{grpo_advantages, reinforcepp_advantages, rloo_advantages};
use chainforge::envs::{GridHouse, GridHouseFixtures, ResetRequest};
use chainforge::trajectory::{
    build_mask, Segment, SegmentKind, Termination, Tokenizer, Trajectory, WhitespaceTokenizer,
};
use serde_json::json;
use wasm_bindgen::prelude::*;

fn kind_of(header: &str) -> Option<SegmentKind> {
    match header.trim().to_ascii_lowercase().as_str() {
        "user" | "prompt" | "system" => Some(SegmentKind::Prompt),
        "assistant" | "response" => Some(SegmentKind::Response),
        "tool" | "observation" => Some(SegmentKind::Observation),
        _ => None,
    }
}

/// Reads either one trajectory JSON line or a plain transcript whose
/// blocks start with `## user`, `## assistant` or `## tool`.
fn parse_input(text: &str) -> Result<Trajectory, String> {
    if text.trim_start().starts_with('{') {
        return Trajectory::from_json_line(text.trim()).map_err(|e| e.to_string());
    }
    let tok = WhitespaceTokenizer;
    let mut blocks: Vec<(SegmentKind, String)> = Vec::new();
    for line in text.lines() {
        if let Some(h) = line.strip_prefix("## ") {
            let kind = kind_of(h).ok_or_else(|| format!("unknown block header {h:?}"))?;
            blocks.push((kind, String::new()));
            continue;
        }
        let Some((_, body)) = blocks.last_mut() else {
            return Err("the transcript must start with a '## user' line".into());
        };
        body.push_str(line);
        body.push('\n');
    }
    // Consecutive prompt blocks merge into one prompt.
    let mut it = blocks.into_iter().peekable();
    let mut prompt = String::new();
    while let Some((SegmentKind::Prompt, _)) = it.peek() {
        prompt.push_str(&it.next().unwrap().1);
    }
    if prompt.is_empty() {
        return Err("the transcript must start with a '## user' block".into());
    }
    let mut t = Trajectory::new("browser", 0, Segment::encode(SegmentKind::Prompt, prompt, &tok));
    for (kind, body) in it {
        t.segments
            .push(Segment::encode(kind, body, &tok as &dyn Tokenizer));
    }
    t.terminated = match t.segments.last().map(|s| s.kind) {
        Some(SegmentKind::Response) => Termination::Natural,
        _ => Termination::MaxTurns,
    };
    t.validate().map_err(|e| e.to_string())?;
    Ok(t)
}

/// Token-level mask of a trajectory as JSON: `{segments: [{kind, text,
/// tokens, mask}], masked, total}`.
#[wasm_bindgen]
pub fn mask_view(text: &str) -> Result<String, String> {
    let t = parse_input(text)?;
    let row = build_mask(&t).map_err(|e| e.to_string())?;
    let segments: Vec<_> = t
        .segments
        .iter()
        .map(|s| {
            json!({
                "kind": s.kind,
                "text": s.text,
                "tokens": s.tokens.len(),
                "mask": s.kind.mask_bit(),
            })
        })
        .collect();
    Ok(json!({
        "segments": segments,
        "masked": row.masked_count(),
        "total": row.mask.len(),
        "terminated": t.terminated,
    })
    .to_string())
}

fn parse_numbers(text: &str) -> Result<Vec<f64>, String> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| format!("not a number: {s:?}")))
        .collect()
}

/// Per-chain advantages for `rewards`, grouped `group_size` at a time.
/// `reinforce_pp` treats each chain as a single response token.
#[wasm_bindgen]
pub fn advantages(rewards: &str, group_size: usize, algorithm: &str) -> Result<String, String> {
    let rewards = parse_numbers(rewards)?;
    if rewards.is_empty() || group_size == 0 {
        return Err("need at least one reward and a group size >= 1".into());
    }
    let groups: Vec<usize> = (0..rewards.len()).map(|i| i / group_size).collect();
    let out = match algorithm {
        "grpo" => grpo_advantages(&rewards, &groups, 1e-6),
        "rloo" => rloo_advantages(&rewards, &groups),
        "reinforce_pp" => {
            let masks = vec![vec![1u8]; rewards.len()];
            reinforcepp_advantages(&rewards, &masks, 1.0, 1e-6, None)
                .map(|rows| rows.into_iter().map(|r| r[0]).collect())
        }
        other => return Err(format!("unknown algorithm {other:?}")),
    }
    .map_err(|e| e.to_string())?;
    Ok(json!({ "groups": groups, "advantages": out }).to_string())
}

/// One GridHouse episode driven from the page.
#[wasm_bindgen]
pub struct Episode {
    env: GridHouse,
    steps: usize,
}

impl Default for Episode {
    fn default() -> Self {
        Self::new()
    }
}

#[wasm_bindgen]
impl Episode {
    #[wasm_bindgen(constructor)]
    pub fn new() -> Episode {
        Episode {
            env: GridHouse::new(Arc::new(GridHouseFixtures::builtin())),
            steps: 0,
        }
    }

    pub fn tasks(&self) -> String {
        json!(self.env.fixtures().task_ids()).to_string()
    }

    pub fn reset(&mut self, task_id: &str) -> Result<String, String> {
        self.steps = 0;
        self.env
            .reset(&ResetRequest::task(task_id))
            .map_err(|e| e.to_string())
    }

    /// `{observation, reward, done, steps}` after one action.
    pub fn step(&mut self, action: &str) -> Result<String, String> {
        let r = self.env.step(action).map_err(|e| e.to_string())?;
        self.steps += 1;
        Ok(json!({
            "observation": r.observation,
            "reward": r.reward,
            "done": r.done,
            "steps": self.steps,
        })
        .to_string())
    }

    pub fn admissible(&self) -> Result<String, String> {
        Ok(json!(self.env.admissible_commands().map_err(|e| e.to_string())?).to_string())
    }

    pub fn objective(&self) -> Result<String, String> {
        self.env.task_objective().map_err(|e| e.to_string())
    }
}
