use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use corpus_forge::adapter::{spawn_adapter, Adapter, AdapterError, AdapterTimeouts, Task};
use serde_json::json;

const MOCK: &str = env!("CARGO_BIN_EXE_corpus-forge-mock-adapter");

fn argv(extra: &[&str]) -> Vec<String> {
    std::iter::once(MOCK).chain(extra.iter().copied()).map(String::from).collect()
}

fn quick() -> AdapterTimeouts {
    AdapterTimeouts {
        handshake_s: 5.0,
        separate_s: 5.0,
        instruments_s: 5.0,
        caption_s: 5.0,
        classify_labels_s: 5.0,
    }
}

fn caption_payload(text: &str) -> serde_json::Value {
    json!({ "prompt": { "tokens": [{ "slot": "tempo", "text": text }] }, "prompt_text": text })
}

#[test]
fn handshake_lists_five_tasks() {
    let handle = spawn_adapter(&argv(&[]), quick()).unwrap();
    assert_eq!(handle.handshake().protocol, 1);
    let mut tasks = handle.tasks();
    tasks.sort();
    assert_eq!(tasks, Task::ALL.to_vec());
}

#[test]
fn missing_executable_is_spawn_failure() {
    let err = spawn_adapter(&["/nonexistent/adapter-binary".to_string()], quick()).unwrap_err();
    assert!(matches!(err, AdapterError::SpawnFailure { .. }), "{err:?}");
}

#[test]
fn garbage_handshake_is_rejected() {
    let err = spawn_adapter(&argv(&["--garbage-handshake"]), quick()).unwrap_err();
    assert!(matches!(err, AdapterError::HandshakeParse(_)), "{err:?}");
}

#[test]
fn silent_child_times_out_in_handshake() {
    let mut t = quick();
    t.handshake_s = 0.3;
    let err = spawn_adapter(&argv(&["--no-handshake"]), t).unwrap_err();
    assert!(matches!(err, AdapterError::HandshakeTimeout(_)), "{err:?}");
}

#[test]
fn protocol_version_mismatch() {
    let err = spawn_adapter(&argv(&["--protocol", "2"]), quick()).unwrap_err();
    assert_eq!(
        err,
        AdapterError::ProtocolVersionMismatch {
            expected: 1,
            got: 2
        }
    );
}

#[test]
fn out_of_order_replies_reach_their_callers() {
    let handle = Arc::new(spawn_adapter(&argv(&["--reverse-batch", "4"]), quick()).unwrap());
    let workers: Vec<_> = (0..4)
        .map(|i| {
            let h = Arc::clone(&handle);
            thread::spawn(move || {
                let text = format!("token-{i}");
                let out = h.call(Task::Caption, caption_payload(&text)).unwrap();
                assert_eq!(out["text"], text.as_str());
            })
        })
        .collect();
    for w in workers {
        w.join().unwrap();
    }
}

#[test]
fn ten_concurrent_calls_get_distinct_replies() {
    let handle = Arc::new(spawn_adapter(&argv(&[]), quick()).unwrap());
    let results: Vec<String> = (0..10)
        .map(|i| {
            let h = Arc::clone(&handle);
            thread::spawn(move || {
                h.call(Task::Caption, caption_payload(&format!("c{i}"))).unwrap()["text"]
                    .as_str()
                    .unwrap()
                    .to_string()
            })
        })
        .collect::<Vec<_>>()
        .into_iter()
        .map(|w| w.join().unwrap())
        .collect();
    let expected: Vec<String> = (0..10).map(|i| format!("c{i}")).collect();
    assert_eq!(results, expected);
}

#[test]
fn slow_reply_times_out() {
    let handle = spawn_adapter(&argv(&["--delay", "caption=1500"]), quick()).unwrap();
    let started = Instant::now();
    let err = handle
        .call_with_timeout(Task::Caption, caption_payload("x"), Duration::from_millis(200))
        .unwrap_err();
    assert!(matches!(err, AdapterError::Timeout { .. }), "{err:?}");
    assert!(started.elapsed() < Duration::from_millis(1200));
}

#[test]
fn mismatched_id_times_out_with_diagnostic() {
    let handle = spawn_adapter(&argv(&["--wrong-id"]), quick()).unwrap();
    let err = handle
        .call_with_timeout(Task::Caption, caption_payload("x"), Duration::from_millis(400))
        .unwrap_err();
    match err {
        AdapterError::Timeout { diagnostic, .. } => assert!(diagnostic.contains("-mismatch"), "{diagnostic}"),
        other => panic!("expected timeout, got {other:?}"),
    }
}

#[test]
fn child_crash_fails_pending_request_and_later_calls() {
    let handle = spawn_adapter(&argv(&["--crash-on", "caption"]), quick()).unwrap();
    let err = handle.call(Task::Caption, caption_payload("x")).unwrap_err();
    assert!(matches!(err, AdapterError::ChildExited(_)), "{err:?}");
    let again = handle.call(Task::Caption, caption_payload("y")).unwrap_err();
    assert!(matches!(again, AdapterError::ChildExited(_)), "{again:?}");
}

#[test]
fn unsupported_task_on_the_wire() {
    let handle = spawn_adapter(&argv(&[]), quick()).unwrap();
    let reply = handle
        .call_raw(
            "raw-1",
            r#"{"id":"raw-1","task":"transcribe","payload":{}}"#,
            Duration::from_secs(5),
        )
        .unwrap();
    assert!(!reply.ok);
    assert_eq!(reply.error.unwrap().code, "unsupported_task");
}

#[test]
fn task_missing_from_handshake_is_refused_locally() {
    let handle = spawn_adapter(&argv(&["--tasks", "caption"]), quick()).unwrap();
    let err = handle.call(Task::Separate, json!({})).unwrap_err();
    assert_eq!(err, AdapterError::UnsupportedTask(Task::Separate));
}

#[test]
fn remote_error_is_surfaced() {
    let handle = spawn_adapter(&argv(&[]), quick()).unwrap();
    let err = handle.call(Task::Caption, json!({})).unwrap_err();
    match err {
        AdapterError::Remote { code, .. } => assert_eq!(code, "bad_payload"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn invalid_frame_breaks_the_handle() {
    let handle = spawn_adapter(&argv(&["--garbage-after", "1"]), quick()).unwrap();
    handle.call(Task::Caption, caption_payload("a")).unwrap();
    thread::sleep(Duration::from_millis(200));
    let err = handle.call(Task::Caption, caption_payload("b")).unwrap_err();
    assert!(matches!(err, AdapterError::Protocol(_)), "{err:?}");
}

#[test]
fn shutdown_makes_handle_unusable() {
    let handle = spawn_adapter(&argv(&[]), quick()).unwrap();
    handle.shutdown();
    let err = handle.call(Task::Caption, caption_payload("a")).unwrap_err();
    assert_eq!(err, AdapterError::Shutdown);
}
