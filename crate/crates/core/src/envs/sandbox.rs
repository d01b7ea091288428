//! Python code sandbox backed by a persistent interpreter subprocess.
//!
//! Each instance owns one `python3 -I` process running a small driver that
//! executes cells in a persistent namespace and reports captured
//! stdout/stderr over a JSON-lines channel. The process runs in a private
//! temporary directory with an empty environment and rlimits on address
//! space, CPU time, file size and core dumps. A cell that exceeds the wall
//! clock limit kills the process; the next call starts a fresh one.

use std::path::PathBuf;
use std::process::Stdio;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::process::{Child, ChildStdin, ChildStdout, Command};

use super::{EnvError, EnvStepResult, Environment, ResetRequest};

const DRIVER: &str = r#"
import ast, io, json, os, sys, traceback
_in = os.fdopen(os.dup(0), "r", encoding="utf-8")
_out = os.fdopen(os.dup(1), "w", encoding="utf-8")
_null = os.open(os.devnull, os.O_RDWR)
for _fd in (0, 1, 2):
    os.dup2(_null, _fd)
_ns = {"__name__": "__main__", "__builtins__": __builtins__}
def _run(code, buf):
    tree = ast.parse(code, "<cell>", "exec")
    last = None
    if tree.body and isinstance(tree.body[-1], ast.Expr):
        last = ast.Expression(tree.body.pop().value)
    exec(compile(tree, "<cell>", "exec"), _ns)
    if last is not None:
        value = eval(compile(last, "<cell>", "eval"), _ns)
        if value is not None:
            buf.write(repr(value) + "\n")
for _line in _in:
    _code = json.loads(_line)["code"]
    _buf = io.StringIO()
    sys.stdin, sys.stdout, sys.stderr = io.StringIO(), _buf, _buf
    try:
        _run(_code, _buf)
    except BaseException as _e:
        _tb = _e.__traceback__
        while _tb is not None and _tb.tb_frame.f_code.co_filename != "<cell>":
            _tb = _tb.tb_next
        _buf.write("".join(traceback.format_exception(type(_e), _e, _tb)))
    finally:
        sys.stdout, sys.stderr = sys.__stdout__, sys.__stderr__
    _out.write(json.dumps({"output": _buf.getvalue()}) + "\n")
    _out.flush()
"#;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SandboxConfig {
    pub python: PathBuf,
    pub wall_timeout: Duration,
    pub memory_bytes: u64,
    pub cpu_seconds: u64,
    pub file_size_bytes: u64,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        Self {
            python: PathBuf::from("python3"),
            wall_timeout: Duration::from_secs(10),
            memory_bytes: 512 << 20,
            cpu_seconds: 300,
            file_size_bytes: 64 << 20,
        }
    }
}

struct Process {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
    _dir: tempfile::TempDir,
}

pub struct PythonSandbox {
    config: SandboxConfig,
    process: Option<Process>,
    dirty: bool,
}

#[derive(Deserialize)]
struct Reply {
    output: String,
}

fn backend(e: impl std::fmt::Display) -> EnvError {
    EnvError::Backend(format!("python sandbox: {e}"))
}

impl PythonSandbox {
    /// Creates the instance; the interpreter starts on first use.
    pub fn new(config: SandboxConfig) -> Result<Self, EnvError> {
        Ok(Self {
            config,
            process: None,
            dirty: false,
        })
    }

    fn spawn(&self) -> Result<Process, EnvError> {
        let dir = tempfile::Builder::new()
            .prefix("chainforge-sandbox-")
            .tempdir()
            .map_err(backend)?;
        let mut cmd = Command::new(&self.config.python);
        cmd.args(["-I", "-u", "-c", DRIVER])
            .current_dir(dir.path())
            .env_clear()
            .env("PATH", "/usr/local/bin:/usr/bin:/bin")
            .env("HOME", dir.path())
            .env("TMPDIR", dir.path())
            .env("PYTHONIOENCODING", "utf-8")
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .kill_on_drop(true);
        let limits = [
            (libc::RLIMIT_AS, self.config.memory_bytes),
            (libc::RLIMIT_CPU, self.config.cpu_seconds),
            (libc::RLIMIT_FSIZE, self.config.file_size_bytes),
            (libc::RLIMIT_CORE, 0),
        ];
        // SAFETY: only async-signal-safe calls (setrlimit) run in the child.
        unsafe {
            cmd.pre_exec(move || {
                for (resource, value) in limits {
                    let lim = libc::rlimit {
                        rlim_cur: value as libc::rlim_t,
                        rlim_max: value as libc::rlim_t,
                    };
                    if libc::setrlimit(resource, &lim) != 0 {
                        return Err(std::io::Error::last_os_error());
                    }
                }
                Ok(())
            });
        }
        let mut child = cmd.spawn().map_err(backend)?;
        let stdin = child.stdin.take().ok_or_else(|| backend("no stdin"))?;
        let stdout = child.stdout.take().ok_or_else(|| backend("no stdout"))?;
        Ok(Process {
            child,
            stdin,
            stdout: BufReader::new(stdout),
            _dir: dir,
        })
    }

    async fn kill(&mut self) {
        if let Some(mut p) = self.process.take() {
            let _ = p.child.kill().await;
        }
    }

    /// Runs one cell and returns its captured output.
    pub async fn execute(&mut self, code: &str) -> Result<String, EnvError> {
        if self.process.is_none() {
            self.process = Some(self.spawn()?);
        }
        self.dirty = true;
        let wall = self.config.wall_timeout;
        let p = self.process.as_mut().expect("spawned above");
        let mut request = serde_json::to_string(&serde_json::json!({ "code": code })).map_err(backend)?;
        request.push('\n');
        let exchange = async {
            p.stdin.write_all(request.as_bytes()).await?;
            p.stdin.flush().await?;
            let mut line = String::new();
            let n = p.stdout.read_line(&mut line).await?;
            Ok::<_, std::io::Error>((n, line))
        };
        match tokio::time::timeout(wall, exchange).await {
            Err(_) => {
                self.kill().await;
                Err(EnvError::Timeout(wall))
            }
            Ok(Err(e)) => {
                self.kill().await;
                Err(backend(e))
            }
            Ok(Ok((0, _))) => {
                self.kill().await;
                Err(backend("interpreter exited"))
            }
            Ok(Ok((_, line))) => {
                let reply: Reply = serde_json::from_str(&line).map_err(backend)?;
                let mut out = reply.output;
                if out.ends_with('\n') {
                    out.pop();
                }
                Ok(out)
            }
        }
    }

    pub fn is_running(&self) -> bool {
        self.process.is_some()
    }
}

#[async_trait]
impl Environment for PythonSandbox {
    /// Discards all interpreter state. A process that has not run any code
    /// yet is kept.
    async fn reset(&mut self, _request: &ResetRequest) -> Result<String, EnvError> {
        if self.dirty {
            self.kill().await;
            self.dirty = false;
        }
        Ok(String::new())
    }

    async fn step(&mut self, code: &str) -> Result<EnvStepResult, EnvError> {
        let out = self.execute(code).await?;
        Ok(EnvStepResult::new(out, 0.0, false))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sandbox() -> PythonSandbox {
        PythonSandbox::new(SandboxConfig {
            wall_timeout: Duration::from_secs(2),
            ..SandboxConfig::default()
        })
        .unwrap()
    }

    #[tokio::test]
    async fn prints_and_persists() {
        let mut s = sandbox();
        assert_eq!(s.execute("print(21*2)").await.unwrap(), "42");
        s.execute("x = 5").await.unwrap();
        assert_eq!(s.execute("print(x)").await.unwrap(), "5");
        assert_eq!(s.execute("x + 1").await.unwrap(), "6");
    }

    #[tokio::test]
    async fn errors_are_output() {
        let mut s = sandbox();
        let out = s.execute("1/0").await.unwrap();
        assert!(out.contains("ZeroDivisionError"), "{out}");
        assert!(!out.contains("_run"), "{out}");
        assert_eq!(s.execute("print('still alive')").await.unwrap(), "still alive");
    }

    #[tokio::test]
    async fn infinite_loop_times_out_then_recovers() {
        let mut s = sandbox();
        s.execute("y = 1").await.unwrap();
        let err = s.execute("while True: pass").await.unwrap_err();
        assert_eq!(err, EnvError::Timeout(Duration::from_secs(2)));
        let out = s.execute("print('y' in globals())").await.unwrap();
        assert_eq!(out, "False");
    }

    #[tokio::test]
    async fn instances_are_isolated() {
        let mut a = sandbox();
        let mut b = sandbox();
        a.execute("secret = 7\nopen('note.txt', 'w').write('hi')")
            .await
            .unwrap();
        assert!(b.execute("print(secret)").await.unwrap().contains("NameError"));
        let out = b
            .execute("import os\nprint(os.path.exists('note.txt'))")
            .await
            .unwrap();
        assert_eq!(out, "False");
    }

    #[tokio::test]
    async fn reset_clears_state() {
        let mut s = sandbox();
        s.execute("z = 3").await.unwrap();
        s.reset(&ResetRequest::default()).await.unwrap();
        assert!(s.execute("print(z)").await.unwrap().contains("NameError"));
    }

    #[tokio::test]
    async fn stdin_reads_do_not_hang() {
        let mut s = sandbox();
        let out = s.execute("input()").await.unwrap();
        assert!(out.contains("EOFError"), "{out}");
    }
}
