//! Wire-level checks of the environment server and client.

use std::net::SocketAddr;
use std::sync::Arc;

use chainforge::envs::conformance::{run_conformance, ConformanceProfile};
use chainforge::envs::http::{serve, serve_many, EnvServer, HttpEnvironment};
use chainforge::envs::{CounterEnv, EnvFactory, Environment, GridHouse, ResetRequest};
use rand::rngs::StdRng;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use serde_json::{json, Value};

fn gridhouse() -> EnvFactory {
    Arc::new(|_| Ok(Box::new(GridHouse::default()) as Box<dyn Environment>))
}

fn counter() -> EnvFactory {
    Arc::new(|_| Ok(Box::new(CounterEnv::new()) as Box<dyn Environment>))
}

async fn start(f: EnvFactory) -> EnvServer {
    serve(f, SocketAddr::from(([127, 0, 0, 1], 0))).await.unwrap()
}

async fn post(url: &str, body: Value) -> (u16, Value) {
    let r = reqwest::Client::new().post(url).json(&body).send().await.unwrap();
    (r.status().as_u16(), r.json().await.unwrap())
}

async fn get(url: &str) -> (u16, Value) {
    let r = reqwest::get(url).await.unwrap();
    (r.status().as_u16(), r.json().await.unwrap())
}

fn keys(v: &Value) -> Vec<&str> {
    v.as_object().unwrap().keys().map(String::as_str).collect()
}

#[tokio::test]
async fn reply_shapes() {
    let server = start(gridhouse()).await;
    let base = server.url();

    assert_eq!(
        get(&format!("{base}/health")).await,
        (200, json!({"status": "ok"}))
    );

    let (status, body) = post(&format!("{base}/step"), json!({"action": "look"})).await;
    assert_eq!(status, 409);
    assert_eq!(keys(&body), ["detail"]);
    let (status, _) = get(&format!("{base}/admissible_commands")).await;
    assert_eq!(status, 409);

    let (status, body) = post(
        &format!("{base}/reset"),
        json!({"task_id": "put_apple_in_fridge"}),
    )
    .await;
    assert_eq!(status, 200);
    assert_eq!(keys(&body), ["observation"]);
    assert!(body["observation"].is_string());

    let (status, body) = post(&format!("{base}/step"), json!({"action": "go to kitchen"})).await;
    assert_eq!(status, 200);
    assert_eq!(keys(&body), ["done", "info", "observation", "reward"]);
    assert!(body["reward"].is_f64() && body["done"].is_boolean() && body["info"].is_object());

    for route in ["admissible_commands", "task_objective"] {
        let (s1, g) = get(&format!("{base}/{route}")).await;
        let (s2, p) = post(&format!("{base}/{route}"), json!({})).await;
        assert_eq!((s1, s2), (200, 200));
        assert_eq!(g, p);
    }
    let (_, cmds) = get(&format!("{base}/admissible_commands")).await;
    assert!(cmds["commands"].as_array().unwrap().iter().all(Value::is_string));
    let (_, obj) = get(&format!("{base}/task_objective")).await;
    assert_eq!(keys(&obj), ["objective"]);

    let (status, body) = post(&format!("{base}/reset"), json!({"task_id": "no_such_task"})).await;
    assert_eq!(status, 404);
    assert!(body["detail"].as_str().unwrap().contains("no_such_task"));

    let r = reqwest::Client::new()
        .post(format!("{base}/step"))
        .body("not json")
        .send()
        .await
        .unwrap();
    assert_eq!(r.status().as_u16(), 422);
    server.shutdown().await;
}

#[tokio::test]
async fn empty_reset_body_is_accepted() {
    let server = start(counter()).await;
    let r = reqwest::Client::new()
        .post(format!("{}/reset", server.url()))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status().as_u16(), 200);
    server.shutdown().await;
}

#[tokio::test]
async fn builtin_servers_conform() {
    for (f, profile) in [
        (gridhouse(), ConformanceProfile::Generic),
        (counter(), ConformanceProfile::Generic),
        (counter(), ConformanceProfile::Counter),
    ] {
        let server = start(f).await;
        let report = run_conformance(&server.url(), profile).await;
        assert!(report.all_passed(), "{report}");
        server.shutdown().await;
    }
}

#[tokio::test]
async fn conformance_flags_a_wrong_counter() {
    // A gridhouse server does not count.
    let server = start(gridhouse()).await;
    let report = run_conformance(&server.url(), ConformanceProfile::Counter).await;
    assert!(!report.all_passed());
    server.shutdown().await;
}

/// Random gridhouse episodes give the same replies in process and over HTTP.
#[tokio::test]
async fn remote_matches_in_process_on_random_episodes() {
    let servers = serve_many(gridhouse(), 4).await.unwrap();
    let fixtures = GridHouse::default();
    let tasks: Vec<String> = fixtures
        .fixtures()
        .task_ids()
        .into_iter()
        .map(String::from)
        .collect();
    let mut rng = StdRng::seed_from_u64(11);
    for episode in 0..24 {
        let server = &servers[episode % servers.len()];
        let mut remote = HttpEnvironment::new(server.url()).unwrap();
        let mut local = GridHouse::default();
        let req = ResetRequest::task(tasks.choose(&mut rng).unwrap().clone());
        assert_eq!(
            Environment::reset(&mut remote, &req).await.unwrap(),
            local.reset(&req).unwrap()
        );
        for _ in 0..rng.random_range(1..20) {
            let cmds = local.admissible_commands().unwrap();
            let action = match rng.random_range(0..10) {
                0 => "dance wildly".to_string(),
                1 => String::new(),
                _ => cmds.choose(&mut rng).unwrap().clone(),
            };
            let a = Environment::step(&mut remote, &action).await.unwrap();
            let b = local.step(&action).unwrap();
            assert_eq!(
                serde_json::to_string(&a).unwrap(),
                serde_json::to_string(&b).unwrap()
            );
            assert_eq!(
                Environment::admissible_commands(&mut remote).await.unwrap(),
                local.admissible_commands().unwrap()
            );
            if b.done {
                break;
            }
        }
    }
    for s in servers {
        s.shutdown().await;
    }
}
