//! Client for evaluators running as a subprocess.
//!
//! Requests go out on the child's stdin; a reader thread parses stdout and
//! routes each response to the waiting caller by request id. Several
//! requests may be in flight when the evaluator's hello advertises
//! `max_concurrency > 1`.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use super::protocol::{to_line, ClientMessage, EvaluatorMessage};
use super::Evaluator;
use crate::budget::LayerBudgets;
use crate::error::{Error, EvalError, Result};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(600);

type Reply = std::result::Result<f64, EvalError>;

#[derive(Default)]
struct Pending {
    waiters: HashMap<u64, Sender<Reply>>,
    // Set once stdout is closed; later requests fail immediately.
    closed: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Hello {
    pub layers: usize,
    pub metric: String,
    pub max_concurrency: usize,
    pub deterministic: bool,
}

pub struct ExternalEvaluator {
    command: String,
    child: Arc<Mutex<Child>>,
    stdin: Mutex<Option<ChildStdin>>,
    pending: Arc<Mutex<Pending>>,
    hello: Hello,
    next_id: AtomicU64,
    timeout: Duration,
}

impl std::fmt::Debug for ExternalEvaluator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalEvaluator")
            .field("command", &self.command)
            .field("hello", &self.hello)
            .finish_non_exhaustive()
    }
}

impl ExternalEvaluator {
    /// Spawns `command_line` (split with shell quoting rules) and waits for
    /// its hello message.
    pub fn spawn(command_line: &str, timeout: Duration) -> Result<Self> {
        let argv = shlex::split(command_line)
            .filter(|argv| !argv.is_empty())
            .ok_or_else(|| Error::invalid(format!("cannot parse evaluator command `{command_line}`")))?;
        let mut child = Command::new(&argv[0])
            .args(&argv[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::invalid(format!("cannot start evaluator `{}`: {e}", argv[0])))?;
        let stdin = child.stdin.take().expect("stdin is piped");
        let stdout = child.stdout.take().expect("stdout is piped");
        let child = Arc::new(Mutex::new(child));
        let pending = Arc::new(Mutex::new(Pending::default()));
        let (hello_tx, hello_rx) = mpsc::channel();
        {
            let pending = Arc::clone(&pending);
            let child = Arc::clone(&child);
            thread::Builder::new()
                .name("evaluator-reader".into())
                .spawn(move || read_loop(stdout, pending, child, hello_tx))?;
        }

        let hello = match hello_rx.recv_timeout(timeout) {
            Ok(Ok(hello)) => hello,
            Ok(Err(e)) => return Err(kill_with(&child, e)),
            Err(RecvTimeoutError::Timeout) => {
                return Err(kill_with(
                    &child,
                    EvalError::Timeout {
                        id: 0,
                        seconds: timeout.as_secs_f64(),
                    },
                ))
            }
            Err(RecvTimeoutError::Disconnected) => {
                return Err(kill_with(
                    &child,
                    EvalError::ProcessExited("exited before hello".into()),
                ))
            }
        };
        if hello.max_concurrency == 0 {
            return Err(kill_with(
                &child,
                EvalError::Malformed("hello advertises max_concurrency 0".into()),
            ));
        }

        Ok(ExternalEvaluator {
            command: command_line.to_string(),
            child,
            stdin: Mutex::new(Some(stdin)),
            pending,
            hello,
            next_id: AtomicU64::new(1),
            timeout,
        })
    }

    pub fn hello(&self) -> &Hello {
        &self.hello
    }

    pub fn command(&self) -> &str {
        &self.command
    }

    pub fn process_id(&self) -> u32 {
        self.child.lock().expect("child lock").id()
    }

    fn send(&self, msg: &ClientMessage) -> std::result::Result<(), EvalError> {
        let line = to_line(msg).map_err(|e| EvalError::Malformed(e.to_string()))?;
        let mut guard = self.stdin.lock().expect("stdin lock");
        let stdin = guard
            .as_mut()
            .ok_or_else(|| EvalError::ProcessExited("evaluator already shut down".into()))?;
        stdin
            .write_all(line.as_bytes())
            .and_then(|()| stdin.flush())
            .map_err(|e| EvalError::ProcessExited(format!("cannot write request: {e}")))
    }

    /// Sends `shutdown` and waits up to `grace` for the process to exit
    /// before killing it.
    pub fn shutdown(&self, grace: Duration) {
        if self.stdin.lock().expect("stdin lock").is_some() {
            let _ = self.send(&ClientMessage::Shutdown);
        }
        // Dropping stdin signals EOF to evaluators that ignore shutdown.
        self.stdin.lock().expect("stdin lock").take();
        let deadline = Instant::now() + grace;
        let mut child = self.child.lock().expect("child lock");
        while Instant::now() < deadline {
            if let Ok(Some(_)) = child.try_wait() {
                return;
            }
            thread::sleep(Duration::from_millis(10));
        }
        let _ = child.kill();
        let _ = child.wait();
    }
}

fn kill_with(child: &Mutex<Child>, err: EvalError) -> Error {
    let mut child = child.lock().expect("child lock");
    let _ = child.kill();
    let _ = child.wait();
    Error::Eval(err)
}

fn read_loop(
    stdout: ChildStdout,
    pending: Arc<Mutex<Pending>>,
    child: Arc<Mutex<Child>>,
    hello_tx: Sender<std::result::Result<Hello, EvalError>>,
) {
    let mut hello_tx = Some(hello_tx);
    for line in BufReader::new(stdout).lines() {
        let Ok(line) = line else { break };
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<EvaluatorMessage>(&line) {
            Ok(EvaluatorMessage::Hello {
                layers,
                metric,
                max_concurrency,
                deterministic,
            }) => {
                if let Some(tx) = hello_tx.take() {
                    let _ = tx.send(Ok(Hello {
                        layers,
                        metric,
                        max_concurrency,
                        deterministic,
                    }));
                }
            }
            Ok(EvaluatorMessage::Result { id, score }) => deliver(&pending, id, Ok(score)),
            Ok(EvaluatorMessage::Error { id, message }) => {
                deliver(&pending, id, Err(EvalError::Remote { id, message }))
            }
            Err(e) => {
                let diag = format!("{e} in line `{}`", truncate(&line, 200));
                if let Some(tx) = hello_tx.take() {
                    let _ = tx.send(Err(EvalError::Malformed(diag)));
                    continue;
                }
                // No id to correlate with: fail everything that is waiting.
                let mut p = pending.lock().expect("pending lock");
                for (_, tx) in p.waiters.drain() {
                    let _ = tx.send(Err(EvalError::Malformed(diag.clone())));
                }
            }
        }
    }

    let status = exit_status(&child);
    let mut p = pending.lock().expect("pending lock");
    let reason = format!("evaluator closed its output ({status})");
    for (_, tx) in p.waiters.drain() {
        let _ = tx.send(Err(EvalError::ProcessExited(reason.clone())));
    }
    p.closed = Some(reason);
}

fn exit_status(child: &Mutex<Child>) -> String {
    let deadline = Instant::now() + Duration::from_secs(1);
    loop {
        if let Ok(mut c) = child.try_lock() {
            match c.try_wait() {
                Ok(Some(status)) => return status.to_string(),
                Ok(None) => {}
                Err(e) => return e.to_string(),
            }
        }
        if Instant::now() >= deadline {
            return "still running".into();
        }
        thread::sleep(Duration::from_millis(10));
    }
}

fn deliver(pending: &Mutex<Pending>, id: u64, reply: Reply) {
    if let Some(tx) = pending.lock().expect("pending lock").waiters.remove(&id) {
        let _ = tx.send(reply);
    }
}

fn truncate(s: &str, max: usize) -> &str {
    match s.char_indices().nth(max) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

impl Evaluator for ExternalEvaluator {
    fn layer_count(&self) -> usize {
        self.hello.layers
    }

    fn metric_name(&self) -> &str {
        &self.hello.metric
    }

    fn max_concurrency(&self) -> usize {
        self.hello.max_concurrency
    }

    fn is_deterministic(&self) -> bool {
        self.hello.deterministic
    }

    fn evaluate(&self, budgets: &LayerBudgets) -> std::result::Result<f64, EvalError> {
        if budgets.layer_count() != self.hello.layers {
            return Err(EvalError::DimensionMismatch {
                expected: self.hello.layers,
                actual: budgets.layer_count(),
            });
        }
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let rx: Receiver<Reply> = {
            let mut p = self.pending.lock().expect("pending lock");
            if let Some(reason) = &p.closed {
                return Err(EvalError::ProcessExited(reason.clone()));
            }
            let (tx, rx) = mpsc::channel();
            p.waiters.insert(id, tx);
            rx
        };
        let request = ClientMessage::Evaluate {
            id,
            budgets: budgets.as_slice().to_vec(),
            policy: budgets.policy().copied(),
        };
        if let Err(e) = self.send(&request) {
            self.pending.lock().expect("pending lock").waiters.remove(&id);
            return Err(e);
        }
        match rx.recv_timeout(self.timeout) {
            Ok(Ok(score)) if score.is_finite() => Ok(score),
            Ok(Ok(score)) => Err(EvalError::NonFinite(score)),
            Ok(Err(e)) => Err(e),
            Err(RecvTimeoutError::Timeout) => {
                self.pending.lock().expect("pending lock").waiters.remove(&id);
                Err(EvalError::Timeout {
                    id,
                    seconds: self.timeout.as_secs_f64(),
                })
            }
            Err(RecvTimeoutError::Disconnected) => Err(EvalError::ProcessExited("evaluator reader stopped".into())),
        }
    }
}

impl Drop for ExternalEvaluator {
    fn drop(&mut self) {
        self.shutdown(Duration::from_secs(2));
    }
}
