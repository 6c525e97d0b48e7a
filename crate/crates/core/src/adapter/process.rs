use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde_json::Value;

use super::{Adapter, AdapterError, AdapterTimeouts, Handshake, Reply, Request, Task, PROTOCOL_VERSION};

/// How many unmatched reply ids are kept for timeout diagnostics.
const STRAY_HISTORY: usize = 16;

enum Outcome {
    Reply(Reply),
    Failed(AdapterError),
}

#[derive(Debug, Clone)]
enum State {
    Running,
    Exited(String),
    Broken(String),
    Shutdown,
}

struct Inner {
    state: State,
    pending: HashMap<String, Sender<Outcome>>,
    stray_ids: Vec<String>,
}

impl Inner {
    fn unusable(&self) -> Option<AdapterError> {
        match &self.state {
            State::Running => None,
            State::Exited(why) => Some(AdapterError::ChildExited(why.clone())),
            State::Broken(why) => Some(AdapterError::Protocol(why.clone())),
            State::Shutdown => Some(AdapterError::Shutdown),
        }
    }

    /// Moves to a terminal state and fails everything still waiting.
    fn terminate(&mut self, state: State) {
        if matches!(self.state, State::Running) {
            self.state = state;
        }
        let err = self.unusable().expect("terminal state");
        for (_, tx) in self.pending.drain() {
            let _ = tx.send(Outcome::Failed(err.clone()));
        }
    }
}

/// A running adapter child process.
///
/// Writes are serialized through one lock; any number of requests may be in
/// flight and replies are routed back to callers by id. The handle is
/// `Send + Sync` and is normally shared behind an `Arc`.
pub struct AdapterHandle {
    command: String,
    handshake: Handshake,
    tasks: Vec<Task>,
    timeouts: AdapterTimeouts,
    inner: Arc<Mutex<Inner>>,
    stdin: Mutex<Option<ChildStdin>>,
    child: Mutex<Child>,
    next_id: AtomicU64,
}

/// Starts `argv[0]` with the remaining arguments and waits for its handshake.
pub fn spawn_adapter(argv: &[String], timeouts: AdapterTimeouts) -> Result<AdapterHandle, AdapterError> {
    let command = argv.join(" ");
    let Some((program, args)) = argv.split_first() else {
        return Err(AdapterError::SpawnFailure {
            command,
            reason: "empty command line".into(),
        });
    };
    let mut child = Command::new(program)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| AdapterError::SpawnFailure {
            command: command.clone(),
            reason: e.to_string(),
        })?;
    let stdout = child.stdout.take().expect("piped stdout");
    let stderr = child.stderr.take().expect("piped stderr");
    let stdin = child.stdin.take().expect("piped stdin");

    let label = command.clone();
    thread::spawn(move || {
        for line in BufReader::new(stderr).lines().map_while(Result::ok) {
            log::debug!("adapter {label}: {line}");
        }
    });

    let inner = Arc::new(Mutex::new(Inner {
        state: State::Running,
        pending: HashMap::new(),
        stray_ids: Vec::new(),
    }));
    let (handshake_tx, handshake_rx) = mpsc::channel::<Result<String, String>>();
    {
        let inner = Arc::clone(&inner);
        thread::spawn(move || read_loop(BufReader::new(stdout), handshake_tx, inner));
    }

    let fail = |child: &mut Child, err: AdapterError| {
        let _ = child.kill();
        let _ = child.wait();
        Err(err)
    };
    let line = match handshake_rx.recv_timeout(timeouts.handshake()) {
        Ok(Ok(line)) => line,
        Ok(Err(why)) => return fail(&mut child, AdapterError::ChildExited(why)),
        Err(_) => return fail(&mut child, AdapterError::HandshakeTimeout(timeouts.handshake())),
    };
    let handshake: Handshake = match serde_json::from_str(&line) {
        Ok(h) => h,
        Err(e) => return fail(&mut child, AdapterError::HandshakeParse(format!("{e}: {line:?}"))),
    };
    if handshake.protocol != PROTOCOL_VERSION {
        return fail(
            &mut child,
            AdapterError::ProtocolVersionMismatch {
                expected: PROTOCOL_VERSION,
                got: handshake.protocol,
            },
        );
    }
    // Task names this client doesn't know are simply never requested.
    let tasks = handshake.tasks.iter().filter_map(|t| t.parse().ok()).collect();
    Ok(AdapterHandle {
        command,
        handshake,
        tasks,
        timeouts,
        inner,
        stdin: Mutex::new(Some(stdin)),
        child: Mutex::new(child),
        next_id: AtomicU64::new(1),
    })
}

fn read_loop(mut reader: impl BufRead, handshake_tx: Sender<Result<String, String>>, inner: Arc<Mutex<Inner>>) {
    let mut line = String::new();
    let mut handshake_tx = Some(handshake_tx);
    loop {
        line.clear();
        let read = reader.read_line(&mut line);
        let mut guard = inner.lock().expect("adapter state lock");
        match read {
            Ok(0) => {
                if let Some(tx) = handshake_tx.take() {
                    let _ = tx.send(Err("exited before handshake".into()));
                }
                guard.terminate(State::Exited("stdout closed".into()));
                return;
            }
            Err(e) => {
                if let Some(tx) = handshake_tx.take() {
                    let _ = tx.send(Err(e.to_string()));
                }
                guard.terminate(State::Broken(format!("unreadable output: {e}")));
                return;
            }
            Ok(_) => {}
        }
        let text = line.trim_end_matches(['\n', '\r']);
        if let Some(tx) = handshake_tx.take() {
            let _ = tx.send(Ok(text.to_string()));
            continue;
        }
        match serde_json::from_str::<Reply>(text) {
            Ok(reply) => match guard.pending.remove(&reply.id) {
                Some(tx) => {
                    let _ = tx.send(Outcome::Reply(reply));
                }
                None => {
                    log::warn!("adapter reply for unknown request id {:?}", reply.id);
                    if guard.stray_ids.len() == STRAY_HISTORY {
                        guard.stray_ids.remove(0);
                    }
                    guard.stray_ids.push(reply.id);
                }
            },
            Err(e) => {
                guard.terminate(State::Broken(format!("invalid reply frame ({e}): {text:?}")));
                return;
            }
        }
    }
}

impl AdapterHandle {
    pub fn handshake(&self) -> &Handshake {
        &self.handshake
    }

    pub fn command(&self) -> &str {
        &self.command
    }

    pub fn call_with_timeout(&self, task: Task, payload: Value, timeout: Duration) -> Result<Value, AdapterError> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed).to_string();
        let line = serde_json::to_string(&Request {
            id: id.clone(),
            task: task.as_str().to_string(),
            payload,
        })
        .expect("requests serialize");
        self.send(&id, task, &line, timeout)
    }

    /// Writes a prebuilt request line. Exposed for conformance tests that
    /// need to put arbitrary task names on the wire.
    pub fn call_raw(&self, id: &str, line: &str, timeout: Duration) -> Result<Reply, AdapterError> {
        let rx = self.register(id)?;
        self.write_line(line)?;
        self.await_reply(id, "raw", rx, timeout)
    }

    fn send(&self, id: &str, task: Task, line: &str, timeout: Duration) -> Result<Value, AdapterError> {
        if !self.tasks.contains(&task) {
            return Err(AdapterError::UnsupportedTask(task));
        }
        let rx = self.register(id)?;
        if let Err(e) = self.write_line(line) {
            self.inner.lock().expect("adapter state lock").pending.remove(id);
            return Err(e);
        }
        let reply = self.await_reply(id, task.as_str(), rx, timeout)?;
        match (reply.ok, reply.result, reply.error) {
            (true, Some(result), _) => Ok(result),
            (false, _, Some(err)) => Err(AdapterError::Remote {
                code: err.code,
                message: err.message,
            }),
            _ => Err(AdapterError::Protocol(format!("reply {id} has neither result nor error"))),
        }
    }

    fn register(&self, id: &str) -> Result<mpsc::Receiver<Outcome>, AdapterError> {
        let mut guard = self.inner.lock().expect("adapter state lock");
        if let Some(err) = guard.unusable() {
            return Err(err);
        }
        let (tx, rx) = mpsc::channel();
        guard.pending.insert(id.to_string(), tx);
        Ok(rx)
    }

    fn write_line(&self, line: &str) -> Result<(), AdapterError> {
        debug_assert!(!line.contains('\n'));
        let mut stdin = self.stdin.lock().expect("adapter stdin lock");
        let pipe = stdin.as_mut().ok_or(AdapterError::Shutdown)?;
        pipe.write_all(line.as_bytes())
            .and_then(|_| pipe.write_all(b"\n"))
            .and_then(|_| pipe.flush())
            .map_err(|e| AdapterError::ChildExited(format!("write failed: {e}")))
    }

    fn await_reply(
        &self,
        id: &str,
        task: &str,
        rx: mpsc::Receiver<Outcome>,
        timeout: Duration,
    ) -> Result<Reply, AdapterError> {
        let started = Instant::now();
        match rx.recv_timeout(timeout) {
            Ok(Outcome::Reply(reply)) => Ok(reply),
            Ok(Outcome::Failed(err)) => Err(err),
            Err(RecvTimeoutError::Timeout) | Err(RecvTimeoutError::Disconnected) => {
                let mut guard = self.inner.lock().expect("adapter state lock");
                guard.pending.remove(id);
                // The reply may have landed between the timeout and the lock.
                if let Ok(outcome) = rx.try_recv() {
                    return match outcome {
                        Outcome::Reply(reply) => Ok(reply),
                        Outcome::Failed(err) => Err(err),
                    };
                }
                let diagnostic = if guard.stray_ids.is_empty() {
                    String::new()
                } else {
                    format!("; replies arrived for unknown ids {:?}", guard.stray_ids)
                };
                log::warn!("adapter request {id} ({task}) timed out after {:?}", started.elapsed());
                Err(AdapterError::Timeout {
                    task: task.to_string(),
                    timeout,
                    diagnostic,
                })
            }
        }
    }

    /// Closes the child's stdin, waits briefly for it to exit, then kills it.
    /// Calls made afterwards fail with [`AdapterError::Shutdown`].
    pub fn shutdown(&self) {
        self.inner.lock().expect("adapter state lock").terminate(State::Shutdown);
        self.stdin.lock().expect("adapter stdin lock").take();
        let mut child = self.child.lock().expect("adapter child lock");
        let deadline = Instant::now() + Duration::from_secs(2);
        while Instant::now() < deadline {
            if let Ok(Some(_)) = child.try_wait() {
                return;
            }
            thread::sleep(Duration::from_millis(10));
        }
        let _ = child.kill();
        let _ = child.wait();
    }

    /// OS process id of the child.
    pub fn pid(&self) -> u32 {
        self.child.lock().expect("adapter child lock").id()
    }
}

impl std::fmt::Debug for AdapterHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AdapterHandle")
            .field("command", &self.command)
            .field("tasks", &self.tasks)
            .finish_non_exhaustive()
    }
}

impl Adapter for AdapterHandle {
    fn tasks(&self) -> Vec<Task> {
        self.tasks.clone()
    }

    fn call(&self, task: Task, payload: Value) -> Result<Value, AdapterError> {
        self.call_with_timeout(task, payload, self.timeouts.for_task(task))
    }
}

impl Drop for AdapterHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}
