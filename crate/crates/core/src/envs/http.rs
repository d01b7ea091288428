//! Environment wire protocol: an HTTP server hosting one environment
//! instance and the matching client.
//!
//! | route                  | method     | body                    | reply                                      |
//! |------------------------|------------|-------------------------|--------------------------------------------|
//! | `/reset`               | POST       | `{"seed"}`/`{"task_id"}`| `{"observation"}`                          |
//! | `/step`                | POST       | `{"action"}`            | `{"observation","reward","done","info"}`   |
//! | `/admissible_commands` | GET, POST  |                         | `{"commands"}`                             |
//! | `/task_objective`      | GET, POST  |                         | `{"objective"}`                            |
//! | `/health`              | GET        |                         | `{"status":"ok"}`                          |
//!
//! Errors reply `{"detail": message}`; stepping before the first reset is
//! a 409.

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::{oneshot, Mutex};

use super::{EnvError, EnvFactory, EnvStepResult, Environment, ResetRequest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRequest {
    pub action: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResetReply {
    pub observation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandsReply {
    pub commands: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveReply {
    pub objective: String,
}

struct ServerState {
    factory: EnvFactory,
    env: Mutex<Option<Box<dyn Environment>>>,
    label: String,
}

struct ApiError(StatusCode, String);

impl From<EnvError> for ApiError {
    fn from(e: EnvError) -> Self {
        let status = match &e {
            EnvError::NotReset => StatusCode::CONFLICT,
            EnvError::UnknownTask(_) => StatusCode::NOT_FOUND,
            EnvError::Unsupported(_) => StatusCode::NOT_IMPLEMENTED,
            EnvError::Timeout(_) => StatusCode::GATEWAY_TIMEOUT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let detail = match &e {
            EnvError::NotReset => "Environment not initialized. Call /reset first.".to_string(),
            other => other.to_string(),
        };
        ApiError(status, detail)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "detail": self.1 }))).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn bad_request(e: impl std::fmt::Display) -> ApiError {
    ApiError(
        StatusCode::UNPROCESSABLE_ENTITY,
        format!("invalid request body: {e}"),
    )
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

async fn reset(State(st): State<Arc<ServerState>>, body: Bytes) -> ApiResult<ResetReply> {
    let request: ResetRequest = if body.iter().all(u8::is_ascii_whitespace) {
        ResetRequest::default()
    } else {
        serde_json::from_slice(&body).map_err(bad_request)?
    };
    let mut guard = st.env.lock().await;
    if guard.is_none() {
        *guard = Some((st.factory)(0).map_err(ApiError::from)?);
    }
    let env = guard.as_mut().expect("created above");
    let observation = env.reset(&request).await.map_err(ApiError::from)?;
    tracing::info!(server = %st.label, ?request, "reset");
    Ok(Json(ResetReply { observation }))
}

async fn step(State(st): State<Arc<ServerState>>, body: Bytes) -> ApiResult<EnvStepResult> {
    let request: StepRequest = serde_json::from_slice(&body).map_err(bad_request)?;
    let mut guard = st.env.lock().await;
    let env = guard.as_mut().ok_or(ApiError::from(EnvError::NotReset))?;
    let result = env.step(&request.action).await.map_err(ApiError::from)?;
    tracing::info!(server = %st.label, action = %request.action, reward = result.reward, done = result.done, "step");
    Ok(Json(result))
}

async fn admissible(State(st): State<Arc<ServerState>>) -> ApiResult<CommandsReply> {
    let mut guard = st.env.lock().await;
    let env = guard.as_mut().ok_or(ApiError::from(EnvError::NotReset))?;
    let commands = env.admissible_commands().await.map_err(ApiError::from)?;
    tracing::info!(server = %st.label, n = commands.len(), "admissible_commands");
    Ok(Json(CommandsReply { commands }))
}

async fn objective(State(st): State<Arc<ServerState>>) -> ApiResult<ObjectiveReply> {
    let mut guard = st.env.lock().await;
    let env = guard.as_mut().ok_or(ApiError::from(EnvError::NotReset))?;
    let objective = env.task_objective().await.map_err(ApiError::from)?;
    tracing::info!(server = %st.label, "task_objective");
    Ok(Json(ObjectiveReply { objective }))
}

/// The protocol routes around one lazily created environment instance.
pub fn router(factory: EnvFactory, label: impl Into<String>) -> Router {
    let state = Arc::new(ServerState {
        factory,
        env: Mutex::new(None),
        label: label.into(),
    });
    Router::new()
        .route("/health", get(health))
        .route("/reset", post(reset))
        .route("/step", post(step))
        .route("/admissible_commands", get(admissible).post(admissible))
        .route("/task_objective", get(objective).post(objective))
        .with_state(state)
}

/// A running server; dropping it does not stop it, call [`EnvServer::shutdown`].
pub struct EnvServer {
    pub addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    handle: tokio::task::JoinHandle<()>,
}

impl EnvServer {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub async fn shutdown(mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        let _ = (&mut self.handle).await;
    }
}

/// Binds `addr` (port 0 picks a free port) and serves in the background.
pub async fn serve(factory: EnvFactory, addr: SocketAddr) -> Result<EnvServer, EnvError> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| EnvError::Backend(format!("cannot bind {addr}: {e}")))?;
    let addr = listener
        .local_addr()
        .map_err(|e| EnvError::Backend(e.to_string()))?;
    let app = router(factory, addr.to_string());
    let (tx, rx) = oneshot::channel::<()>();
    let handle = tokio::spawn(async move {
        let _ = axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = rx.await;
            })
            .await;
    });
    Ok(EnvServer {
        addr,
        shutdown: Some(tx),
        handle,
    })
}

/// Starts `count` servers on free local ports, one instance each.
pub async fn serve_many(factory: EnvFactory, count: usize) -> Result<Vec<EnvServer>, EnvError> {
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let f = factory.clone();
        let shifted: EnvFactory = Arc::new(move |_| f(i));
        out.push(serve(shifted, SocketAddr::from(([127, 0, 0, 1], 0))).await?);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct HttpClientConfig {
    pub request_timeout: Duration,
    pub reset_retries: u32,
    pub backoff: Duration,
}

impl Default for HttpClientConfig {
    fn default() -> Self {
        Self {
            request_timeout: Duration::from_secs(30),
            reset_retries: 3,
            backoff: Duration::from_millis(50),
        }
    }
}

/// Client for a remote environment speaking the protocol above.
#[derive(Debug, Clone)]
pub struct HttpEnvironment {
    base: String,
    client: reqwest::Client,
    config: HttpClientConfig,
}

impl HttpEnvironment {
    pub fn new(base_url: impl Into<String>) -> Result<Self, EnvError> {
        Self::with_config(base_url, HttpClientConfig::default())
    }

    pub fn with_config(base_url: impl Into<String>, config: HttpClientConfig) -> Result<Self, EnvError> {
        let client = reqwest::Client::builder()
            .timeout(config.request_timeout)
            .build()
            .map_err(|e| EnvError::Network(e.to_string()))?;
        Ok(Self {
            base: base_url.into().trim_end_matches('/').to_string(),
            client,
            config,
        })
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    async fn send<T: serde::de::DeserializeOwned>(
        &self,
        builder: reqwest::RequestBuilder,
    ) -> Result<T, EnvError> {
        let resp = builder.send().await.map_err(network)?;
        let status = resp.status();
        if !status.is_success() {
            let text = resp.text().await.unwrap_or_default();
            let message = serde_json::from_str::<serde_json::Value>(&text)
                .ok()
                .and_then(|v| {
                    v.get("detail")
                        .map(|d| d.as_str().map(str::to_string).unwrap_or_else(|| d.to_string()))
                })
                .unwrap_or(text);
            return Err(EnvError::Http {
                status: status.as_u16(),
                message,
            });
        }
        resp.json::<T>().await.map_err(network)
    }

    pub async fn health(&self) -> Result<(), EnvError> {
        let _: serde_json::Value = self
            .send(self.client.get(format!("{}/health", self.base)))
            .await?;
        Ok(())
    }
}

fn network(e: reqwest::Error) -> EnvError {
    if e.is_timeout() {
        EnvError::Network(format!("request timed out: {e}"))
    } else {
        EnvError::Network(e.to_string())
    }
}

fn retryable(e: &EnvError) -> bool {
    match e {
        EnvError::Network(_) => true,
        EnvError::Http { status, .. } => *status >= 500,
        _ => false,
    }
}

#[async_trait]
impl Environment for HttpEnvironment {
    async fn reset(&mut self, request: &ResetRequest) -> Result<String, EnvError> {
        let url = format!("{}/reset", self.base);
        let mut attempt = 0;
        loop {
            let r: Result<ResetReply, EnvError> = self.send(self.client.post(&url).json(request)).await;
            match r {
                Ok(reply) => return Ok(reply.observation),
                Err(e) if attempt < self.config.reset_retries && retryable(&e) => {
                    tracing::warn!(url = %url, attempt, error = %e, "reset failed, retrying");
                    tokio::time::sleep(self.config.backoff * 2u32.pow(attempt)).await;
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    async fn step(&mut self, action: &str) -> Result<EnvStepResult, EnvError> {
        let body = StepRequest {
            action: action.to_string(),
        };
        self.send(self.client.post(format!("{}/step", self.base)).json(&body))
            .await
    }

    async fn admissible_commands(&mut self) -> Result<Vec<String>, EnvError> {
        let reply: CommandsReply = self
            .send(self.client.get(format!("{}/admissible_commands", self.base)))
            .await?;
        Ok(reply.commands)
    }

    async fn task_objective(&mut self) -> Result<String, EnvError> {
        let reply: ObjectiveReply = self
            .send(self.client.get(format!("{}/task_objective", self.base)))
            .await?;
        Ok(reply.objective)
    }
}

/// Pool factory whose slot `i` talks to `urls[i % urls.len()]`.
pub fn http_factory(urls: Vec<String>, config: HttpClientConfig) -> EnvFactory {
    Arc::new(move |i| {
        if urls.is_empty() {
            return Err(EnvError::Backend("no environment endpoints configured".into()));
        }
        let env = HttpEnvironment::with_config(urls[i % urls.len()].clone(), config.clone())?;
        Ok(Box::new(env) as Box<dyn Environment>)
    })
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicU32, Ordering};

    use super::*;
    use crate::envs::{CounterEnv, GridHouse};

    fn local() -> SocketAddr {
        SocketAddr::from(([127, 0, 0, 1], 0))
    }

    fn gridhouse() -> EnvFactory {
        Arc::new(|_| Ok(Box::new(GridHouse::default()) as Box<dyn Environment>))
    }

    #[tokio::test]
    async fn step_before_reset_is_409() {
        let server = serve(gridhouse(), local()).await.unwrap();
        let mut client = HttpEnvironment::new(server.url()).unwrap();
        client.health().await.unwrap();
        match client.step("look").await {
            Err(EnvError::Http { status, message }) => {
                assert_eq!(status, 409);
                assert!(message.contains("/reset"));
            }
            other => panic!("{other:?}"),
        }
        server.shutdown().await;
    }

    #[tokio::test]
    async fn matches_in_process() {
        let server = serve(gridhouse(), local()).await.unwrap();
        let mut remote = HttpEnvironment::new(server.url()).unwrap();
        let mut local_env = GridHouse::default();
        let req = ResetRequest::task("put_apple_in_fridge");
        assert_eq!(
            Environment::reset(&mut remote, &req).await.unwrap(),
            local_env.reset(&req).unwrap()
        );
        for action in [
            "go to kitchen",
            "go to countertop 1",
            "take apple 1 from countertop 1",
            "",
            "xyzzy",
        ] {
            assert_eq!(
                Environment::step(&mut remote, action).await.unwrap(),
                local_env.step(action).unwrap()
            );
            assert_eq!(
                Environment::admissible_commands(&mut remote).await.unwrap(),
                local_env.admissible_commands().unwrap()
            );
        }
        server.shutdown().await;
    }

    #[tokio::test]
    async fn server_down_is_an_error() {
        let server = serve(gridhouse(), local()).await.unwrap();
        let url = server.url();
        server.shutdown().await;
        let mut client = HttpEnvironment::with_config(
            url,
            HttpClientConfig {
                backoff: Duration::from_millis(1),
                ..HttpClientConfig::default()
            },
        )
        .unwrap();
        assert!(matches!(client.step("look").await, Err(EnvError::Network(_))));
        assert!(matches!(
            Environment::reset(&mut client, &ResetRequest::default()).await,
            Err(EnvError::Network(_))
        ));
    }

    struct FlakyReset {
        failures: Arc<AtomicU32>,
        inner: CounterEnv,
    }

    #[async_trait]
    impl Environment for FlakyReset {
        async fn reset(&mut self, request: &ResetRequest) -> Result<String, EnvError> {
            if self
                .failures
                .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |v| v.checked_sub(1))
                .is_ok()
            {
                return Err(EnvError::Backend("injected".into()));
            }
            self.inner.reset(request)
        }

        async fn step(&mut self, action: &str) -> Result<EnvStepResult, EnvError> {
            self.inner.step(action)
        }
    }

    #[tokio::test]
    async fn reset_is_retried_after_a_500() {
        let failures = Arc::new(AtomicU32::new(1));
        let f = failures.clone();
        let factory: EnvFactory = Arc::new(move |_| {
            Ok(Box::new(FlakyReset {
                failures: f.clone(),
                inner: CounterEnv::new(),
            }) as Box<dyn Environment>)
        });
        let server = serve(factory, local()).await.unwrap();
        let mut client = HttpEnvironment::new(server.url()).unwrap();
        let obs = Environment::reset(&mut client, &ResetRequest::seed(2))
            .await
            .unwrap();
        assert_eq!(obs, "Counter: 0. Target: 2.");
        server.shutdown().await;
    }
}
