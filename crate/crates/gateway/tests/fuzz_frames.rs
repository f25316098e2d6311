mod common;

use std::sync::Arc;

use futures::{SinkExt, StreamExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reflect_core::engine::{InputMode, SessionStatus};
use reflect_gateway::wire::{LearnerMessage, SystemMessage};
use reflect_gateway::{Connection, Gateway, WireMessage};
use tokio::net::TcpListener;
use tokio_tungstenite::tungstenite::Message;

/// An arbitrary client frame, mostly invalid.
fn noise(rng: &mut ChaCha8Rng) -> String {
    let word = |rng: &mut ChaCha8Rng| -> String {
        (0..rng.random_range(0..12)).map(|_| rng.random_range(' '..='~')).collect()
    };
    match rng.random_range(0..10) {
        0 => word(rng),
        1 => {
            let bytes: Vec<u8> = (0..rng.random_range(0..64)).map(|_| rng.random()).collect();
            String::from_utf8_lossy(&bytes).into_owned()
        }
        2 => ["null", "[]", "42", "\"learner_message\"", "{}"][rng.random_range(0..5)].to_owned(),
        3 => format!(r#"{{"type":{}}}"#, serde_json::to_string(&word(rng)).unwrap()),
        4 => WireMessage::LearnerMessage(LearnerMessage::text(word(rng))).to_json(),
        5 => {
            let id = ["yes", "no", "same", "zzz", ""][rng.random_range(0..5)];
            WireMessage::LearnerMessage(LearnerMessage::option(id)).to_json()
        }
        6 => r#"{"type":"learner_message","payload":{"text":"a","option_id":"yes"}}"#.to_owned(),
        7 => {
            let t = ["session_start", "system_message", "session_end", "error"][rng.random_range(0..4)];
            format!(r#"{{"type":"{t}","payload":{{"session_id":"x"}}}}"#)
        }
        8 => "[".repeat(rng.random_range(100..5000)),
        _ => WireMessage::LearnerMessage(LearnerMessage::text("x".repeat(rng.random_range(1000..100_000)))).to_json(),
    }
}

/// The frame a well-behaved learner would send in reply to `m`.
fn answer(m: &SystemMessage) -> Option<String> {
    let msg = match m.input_mode {
        InputMode::Options => LearnerMessage::option(m.options.as_ref()?[0].option_id.clone()),
        InputMode::Open if m.text.contains("How do you think") => LearnerMessage::text("by coding"),
        InputMode::Open => LearnerMessage::text("I made the arms wave with a loop"),
        InputMode::None => return None,
    };
    Some(WireMessage::LearnerMessage(msg).to_json())
}

fn system_frames(frames: &[WireMessage]) -> Vec<SystemMessage> {
    frames
        .iter()
        .filter_map(|f| match f {
            WireMessage::SystemMessage(m) => Some(m.clone()),
            _ => None,
        })
        .collect()
}

/// Drives a healthy session to its end, optionally calling `between` before each reply.
async fn healthy_run(conn: &mut Connection, first: Vec<WireMessage>, mut between: impl AsyncFnMut()) -> Vec<SystemMessage> {
    let mut seen = system_frames(&first);
    while !conn.is_finished() {
        between().await;
        let reply = answer(seen.last().unwrap()).expect("waiting on an answerable prompt");
        let frames = conn.handle_text(&reply).await;
        assert!(frames.iter().all(|f| !matches!(f, WireMessage::Error(_))), "{frames:?}");
        seen.extend(system_frames(&frames));
    }
    seen
}

#[tokio::test]
async fn noisy_neighbour_does_not_disturb_a_healthy_session() {
    let gateway = Arc::new(common::gateway());

    let (mut reference, first) = gateway.open(None);
    let expected = healthy_run(&mut reference, first, async || {}).await;
    assert_eq!(reference.status(), Some(SessionStatus::Completed));

    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut healthy, first) = gateway.open(None);
        let (mut noisy, _) = gateway.open(None);
        let healthy_id = healthy.session_id().unwrap().to_owned();
        let got = healthy_run(&mut healthy, first, async || {
            for _ in 0..rng.random_range(0..6) {
                let frame = noise(&mut rng);
                let out = noisy.handle_text(&frame).await;
                assert!(!out.is_empty(), "every client frame gets an answer");
                if noisy.is_finished() {
                    noisy = gateway.open(None).0;
                }
            }
        })
        .await;
        assert_eq!(got, expected, "seed {seed}");
        assert_eq!(healthy.state().unwrap().session_id, healthy_id);
        assert_eq!(healthy.status(), Some(SessionStatus::Completed));
    }
}

#[tokio::test]
async fn garbage_after_close_is_answered_not_fatal() {
    let gateway = Arc::new(common::gateway());
    let (mut conn, _) = gateway.open(None);
    assert!(conn.close(reflect_gateway::CloseReason::Disconnect).is_some());
    assert!(conn.close(reflect_gateway::CloseReason::Disconnect).is_none());
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..200 {
        let out = conn.handle_text(&noise(&mut rng)).await;
        assert_eq!(out.len(), 1);
        assert!(matches!(out[0], WireMessage::Error(_)));
    }
    assert_eq!(conn.status(), Some(SessionStatus::Aborted));
}

async fn serve(gateway: Gateway) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(reflect_gateway::serve(listener, Arc::new(gateway), std::future::pending()));
    format!("ws://{addr}/ws")
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn fuzzed_socket_alongside_healthy_socket() {
    let url = serve(common::gateway()).await;

    let reference = {
        let gateway = Arc::new(common::gateway());
        let (mut conn, first) = gateway.open(None);
        healthy_run(&mut conn, first, async || {}).await
    };

    let noisy_url = url.clone();
    let noisy = tokio::spawn(async move {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let (mut ws, _) = tokio_tungstenite::connect_async(&noisy_url).await.unwrap();
        for _ in 0..300 {
            let msg = if rng.random_bool(0.1) {
                Message::Binary((0..rng.random_range(0..32)).map(|_| rng.random()).collect::<Vec<u8>>().into())
            } else {
                Message::Text(noise(&mut rng).into())
            };
            if ws.send(msg).await.is_err() {
                // the session ended; start another one
                ws = tokio_tungstenite::connect_async(&noisy_url).await.unwrap().0;
            }
        }
    });

    let (mut ws, _) = tokio_tungstenite::connect_async(&url).await.unwrap();
    let mut seen = Vec::new();
    while let Some(Ok(msg)) = ws.next().await {
        let Message::Text(t) = msg else { continue };
        match serde_json::from_str::<WireMessage>(t.as_str()).unwrap() {
            WireMessage::SystemMessage(m) => {
                if let Some(reply) = answer(&m) {
                    ws.send(Message::Text(reply.into())).await.unwrap();
                }
                seen.push(m);
            }
            WireMessage::SessionEnd(end) => {
                assert_eq!(end.status, SessionStatus::Completed);
                break;
            }
            WireMessage::SessionStart(_) => {}
            other => panic!("healthy session got {other:?}"),
        }
    }
    noisy.await.unwrap();
    assert_eq!(seen, reference);

    // the server is still accepting sessions
    let (mut ws, _) = tokio_tungstenite::connect_async(&url).await.unwrap();
    let first = ws.next().await.unwrap().unwrap();
    assert!(first.to_text().unwrap().contains("session_start"));
}
