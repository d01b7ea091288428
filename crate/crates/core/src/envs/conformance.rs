//! Protocol conformance checks for an environment server.
//!
//! Run against a freshly started server: the first check expects `/step`
//! to be refused before any `/reset`. The counter profile additionally
//! plays a scripted episode against the counter environment semantics
//! (`inc` increments, the empty action polls without mutating, reward 1.0
//! exactly when the counter reaches the target).

use std::fmt;
use std::time::Duration;

use serde::Serialize;
use serde_json::{json, Value};

use super::INVALID_ACTION;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ConformanceProfile {
    Generic,
    Counter,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConformanceReport {
    pub base_url: String,
    pub profile: ConformanceProfile,
    pub checks: Vec<CheckResult>,
}

impl ConformanceReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

impl fmt::Display for ConformanceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let mark = if c.passed { "PASS" } else { "FAIL" };
            writeln!(f, "{mark} {:<28} {}", c.name, c.detail)?;
        }
        Ok(())
    }
}

struct Probe {
    client: reqwest::Client,
    base: String,
}

type Reply = Result<(u16, Value), String>;

impl Probe {
    async fn call(&self, method: &str, path: &str, body: Option<Value>) -> Reply {
        let url = format!("{}{path}", self.base);
        let req = match method {
            "GET" => self.client.get(&url),
            _ => self.client.post(&url),
        };
        let req = match body {
            Some(b) => req.json(&b),
            None => req,
        };
        let resp = req.send().await.map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let text = resp.text().await.map_err(|e| e.to_string())?;
        let value = serde_json::from_str(&text).map_err(|e| format!("non-JSON body {text:?}: {e}"))?;
        Ok((status, value))
    }

    async fn raw_post(&self, path: &str, body: &'static str) -> Result<u16, String> {
        self.client
            .post(format!("{}{path}", self.base))
            .header("content-type", "application/json")
            .body(body)
            .send()
            .await
            .map(|r| r.status().as_u16())
            .map_err(|e| e.to_string())
    }

    async fn step(&self, action: &str) -> Reply {
        self.call("POST", "/step", Some(json!({ "action": action })))
            .await
    }
}

fn check_step_schema(v: &Value) -> Result<(), String> {
    let obj = v.as_object().ok_or("step reply is not an object")?;
    let mut keys: Vec<&str> = obj.keys().map(String::as_str).collect();
    keys.sort_unstable();
    if keys != ["done", "info", "observation", "reward"] {
        return Err(format!("step reply keys {keys:?}"));
    }
    if !obj["observation"].is_string() {
        return Err("observation is not a string".into());
    }
    let reward = obj["reward"].as_f64().ok_or("reward is not a number")?;
    if !obj["done"].is_boolean() {
        return Err("done is not a boolean".into());
    }
    let info = obj["info"].as_object().ok_or("info is not an object")?;
    match info.get("reward").and_then(Value::as_f64) {
        Some(r) if r == reward => Ok(()),
        other => Err(format!("info.reward {other:?} does not echo reward {reward}")),
    }
}

fn expect_ok(reply: Reply, key: &str) -> Result<Value, String> {
    let (status, v) = reply?;
    if status != 200 {
        return Err(format!("status {status}, body {v}"));
    }
    v.get(key)
        .cloned()
        .ok_or_else(|| format!("reply {v} lacks {key:?}"))
}

struct Recorder(Vec<CheckResult>);

impl Recorder {
    fn record(&mut self, name: &'static str, outcome: Result<String, String>) {
        let (passed, detail) = match outcome {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        self.0.push(CheckResult { name, passed, detail });
    }
}

/// Runs the suite against `base_url` (e.g. `http://127.0.0.1:8000`).
pub async fn run_conformance(base_url: &str, profile: ConformanceProfile) -> ConformanceReport {
    let client = reqwest::Client::builder()
        .timeout(Duration::from_secs(30))
        .build()
        .expect("reqwest client");
    let p = Probe {
        client,
        base: base_url.trim_end_matches('/').to_string(),
    };
    let mut rec = Recorder(Vec::new());

    let r = p.call("GET", "/health", None).await;
    rec.record(
        "health",
        r.and_then(|(s, v)| {
            if s == 200 && v["status"] == "ok" {
                Ok("200 {\"status\":\"ok\"}".into())
            } else {
                Err(format!("status {s}, body {v}"))
            }
        }),
    );

    let r = p.step("look").await;
    rec.record(
        "step_before_reset_409",
        r.and_then(|(s, v)| match (s, v.get("detail")) {
            (409, Some(d)) if d.is_string() => Ok(format!("409 {d}")),
            _ => Err(format!("status {s}, body {v}")),
        }),
    );

    let first = expect_ok(
        p.call("POST", "/reset", Some(json!({ "seed": 1 }))).await,
        "observation",
    );
    let second = expect_ok(
        p.call("POST", "/reset", Some(json!({ "seed": 1 }))).await,
        "observation",
    );
    rec.record(
        "reset_schema_and_determinism",
        match (first, second) {
            (Ok(a), Ok(b)) if a.is_string() && a == b => Ok("same seed, same observation".into()),
            (Ok(a), Ok(b)) => Err(format!("{a} vs {b}")),
            (Err(e), _) | (_, Err(e)) => Err(e),
        },
    );

    let poll_a = p.step("").await;
    let poll_b = p.step("").await;
    rec.record(
        "empty_step_polls",
        match (poll_a, poll_b) {
            (Ok((200, a)), Ok((200, b))) => check_step_schema(&a).and_then(|_| {
                if a == b {
                    Ok(format!("reward {}", a["reward"]))
                } else {
                    Err(format!("consecutive polls differ: {a} vs {b}"))
                }
            }),
            (a, b) => Err(format!("{a:?} / {b:?}")),
        },
    );

    let r = p.step("xyzzy plugh frobozz").await;
    rec.record(
        "invalid_action_feedback",
        r.and_then(|(s, v)| {
            if s != 200 {
                return Err(format!("status {s}, body {v}"));
            }
            check_step_schema(&v)?;
            if v["observation"] == INVALID_ACTION && v["done"] == false {
                Ok(INVALID_ACTION.into())
            } else {
                Err(format!("got {v}"))
            }
        }),
    );

    let r = p.raw_post("/step", "{not json").await;
    rec.record(
        "malformed_body_4xx",
        r.and_then(|s| {
            if (400..500).contains(&s) {
                Ok(s.to_string())
            } else {
                Err(format!("status {s}"))
            }
        }),
    );

    for (name, path, key) in [
        ("admissible_commands_schema", "/admissible_commands", "commands"),
        ("task_objective_schema", "/task_objective", "objective"),
    ] {
        let get = p.call("GET", path, None).await;
        let post = p.call("POST", path, None).await;
        let outcome = match (get, post) {
            (Ok((501, g)), Ok((501, _))) if g.get("detail").is_some() => Ok("501 not supported".into()),
            (g, po) => {
                let g = expect_ok(g, key);
                let po = expect_ok(po, key);
                match (g, po) {
                    (Ok(a), Ok(b)) if a != b => Err(format!("GET {a} vs POST {b}")),
                    (Ok(a), Ok(_)) => {
                        let typed = if key == "commands" {
                            a.as_array().is_some_and(|xs| xs.iter().all(Value::is_string))
                        } else {
                            a.is_string()
                        };
                        if typed {
                            Ok(format!("{key} ok"))
                        } else {
                            Err(format!("{key} has wrong type: {a}"))
                        }
                    }
                    (Err(e), _) | (_, Err(e)) => Err(e),
                }
            }
        };
        rec.record(name, outcome);
    }

    if profile == ConformanceProfile::Counter {
        rec.record("counter_episode", counter_episode(&p).await);
    }

    ConformanceReport {
        base_url: p.base,
        profile,
        checks: rec.0,
    }
}

async fn counter_episode(p: &Probe) -> Result<String, String> {
    expect_ok(
        p.call("POST", "/reset", Some(json!({ "seed": 3, "target": 3 })))
            .await,
        "observation",
    )?;
    for i in 1..=2 {
        let (_, v) = p.step("inc").await?;
        check_step_schema(&v)?;
        if v["reward"] != 0.0 || v["done"] != false {
            return Err(format!("after inc #{i}: {v}"));
        }
    }
    let (_, poll) = p.step("").await?;
    if poll["reward"] != 0.0 || poll["done"] != false {
        return Err(format!("poll after 2 incs: {poll}"));
    }
    let (_, again) = p.step("").await?;
    if again != poll {
        return Err(format!("empty step mutated state: {poll} then {again}"));
    }
    let (_, fin) = p.step("inc").await?;
    if fin["reward"] != 1.0 || fin["done"] != true {
        return Err(format!("third inc: {fin}"));
    }
    let (_, after) = p.step("inc").await?;
    if after["done"] != true || after["reward"] != 1.0 {
        return Err(format!("step after done: {after}"));
    }
    let (_, poll) = p.step("").await?;
    if poll["reward"] != 1.0 || poll["done"] != true {
        return Err(format!("final poll: {poll}"));
    }
    Ok("target 3 reached after 3 incs; polls are side-effect free".into())
}

#[cfg(test)]
mod tests {
    use std::net::SocketAddr;
    use std::sync::Arc;

    use super::*;
    use crate::envs::http::serve;
    use crate::envs::{CounterEnv, EnvFactory, Environment, GridHouse};

    #[tokio::test]
    async fn builtin_servers_conform() {
        let addr = SocketAddr::from(([127, 0, 0, 1], 0));
        let counter: EnvFactory = Arc::new(|_| Ok(Box::new(CounterEnv::new()) as Box<dyn Environment>));
        let server = serve(counter, addr).await.unwrap();
        let report = run_conformance(&server.url(), ConformanceProfile::Counter).await;
        assert!(report.all_passed(), "{report}");
        server.shutdown().await;

        let gh: EnvFactory = Arc::new(|_| Ok(Box::new(GridHouse::default()) as Box<dyn Environment>));
        let server = serve(gh, addr).await.unwrap();
        let report = run_conformance(&server.url(), ConformanceProfile::Generic).await;
        assert!(report.all_passed(), "{report}");
        server.shutdown().await;
    }
}
