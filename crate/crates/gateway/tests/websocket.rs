mod common;

use std::sync::Arc;
use std::time::Duration;

use futures::{SinkExt, StreamExt};
use reflect_core::engine::{InputMode, SessionStatus};
use reflect_core::store::SessionStore;
use reflect_gateway::wire::{ErrorCode, LearnerMessage, SystemMessage};
use reflect_gateway::{Gateway, WireMessage};
use tokio::net::{TcpListener, TcpStream};
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};

use common::PUBLISHED_FOLLOWUP;

type Client = WebSocketStream<MaybeTlsStream<TcpStream>>;

async fn start(gateway: Gateway) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(reflect_gateway::serve(listener, Arc::new(gateway), std::future::pending()));
    format!("ws://{addr}/ws")
}

async fn connect(url: &str) -> Client {
    tokio_tungstenite::connect_async(url).await.unwrap().0
}

/// Next frame, or `None` once the server closes.
async fn recv(ws: &mut Client) -> Option<WireMessage> {
    loop {
        let msg = tokio::time::timeout(Duration::from_secs(5), ws.next())
            .await
            .expect("server answered in time")?;
        match msg.ok()? {
            Message::Text(t) => {
                let frame: WireMessage = serde_json::from_str(t.as_str()).unwrap();
                if let WireMessage::SystemMessage(m) = &frame {
                    // widget contract: option prompts always list options, others never do
                    assert_eq!(m.input_mode == InputMode::Options, m.options.as_ref().is_some_and(|o| !o.is_empty()));
                }
                return Some(frame);
            }
            Message::Close(_) => return None,
            _ => continue,
        }
    }
}

async fn system(ws: &mut Client) -> SystemMessage {
    match recv(ws).await {
        Some(WireMessage::SystemMessage(m)) => m,
        other => panic!("expected system_message, got {other:?}"),
    }
}

async fn send(ws: &mut Client, msg: LearnerMessage) {
    let frame = WireMessage::LearnerMessage(msg).to_json();
    ws.send(Message::Text(frame.into())).await.unwrap();
}

async fn session_start(ws: &mut Client) -> String {
    match recv(ws).await {
        Some(WireMessage::SessionStart(s)) => s.session_id,
        other => panic!("expected session_start, got {other:?}"),
    }
}

#[tokio::test]
async fn published_exchange_over_the_wire() {
    let url = start(common::gateway()).await;
    let mut ws = connect(&url).await;
    session_start(&mut ws).await;

    let greet = system(&mut ws).await;
    assert_eq!((greet.node_id.as_str(), greet.input_mode), ("rapport_greet", InputMode::None));
    let check = system(&mut ws).await;
    assert_eq!(check.input_mode, InputMode::Options);
    assert!(check.tts);

    send(&mut ws, LearnerMessage::option("yes")).await;
    assert_eq!(system(&mut ws).await.node_id, "goals_known");
    send(&mut ws, LearnerMessage::option("yes")).await;
    let what = system(&mut ws).await;
    assert_eq!((what.node_id.as_str(), what.input_mode), ("goals_what", InputMode::Open));
    send(&mut ws, LearnerMessage::text("walk and ctalk")).await;
    assert_eq!(system(&mut ws).await.node_id, "goals_change");
    send(&mut ws, LearnerMessage::option("no")).await;
    assert_eq!(system(&mut ws).await.text, "Yay! How do you think you'll do it?");

    send(&mut ws, LearnerMessage::text("by coding")).await;
    let followup = system(&mut ws).await;
    assert_eq!(followup.text, PUBLISHED_FOLLOWUP);
    assert_eq!((followup.node_id.as_str(), followup.input_mode), ("plans_how", InputMode::Open));

    send(&mut ws, LearnerMessage::text("I coded my robot to move and say word problems")).await;
    assert_eq!(system(&mut ws).await.node_id, "activities_today");
}

#[tokio::test]
async fn unknown_scenario_is_refused() {
    let url = start(common::gateway()).await;
    let mut ws = connect(&format!("{url}?scenario=nope")).await;
    match recv(&mut ws).await {
        Some(WireMessage::Error(e)) => assert_eq!(e.code, ErrorCode::UnknownScenario),
        other => panic!("{other:?}"),
    }
    assert!(recv(&mut ws).await.is_none());
}

#[tokio::test]
async fn wrong_input_kind_resends_options() {
    let url = start(common::gateway()).await;
    let mut ws = connect(&format!("{url}?scenario=robot-runway-reflection")).await;
    session_start(&mut ws).await;
    system(&mut ws).await;
    let check = system(&mut ws).await;

    send(&mut ws, LearnerMessage::text("hello")).await;
    match recv(&mut ws).await {
        Some(WireMessage::Error(e)) => assert_eq!(e.code, ErrorCode::InputKindMismatch),
        other => panic!("{other:?}"),
    }
    assert_eq!(system(&mut ws).await, check);

    send(&mut ws, LearnerMessage::option("maybe")).await;
    match recv(&mut ws).await {
        Some(WireMessage::Error(e)) => assert_eq!(e.code, ErrorCode::UnknownOption),
        other => panic!("{other:?}"),
    }
    assert_eq!(system(&mut ws).await, check);

    // the connection is still usable
    send(&mut ws, LearnerMessage::option("yes")).await;
    assert_eq!(system(&mut ws).await.node_id, "goals_known");
}

#[tokio::test]
async fn concurrent_sessions_are_independent() {
    let url = start(common::gateway()).await;
    let mut a = connect(&url).await;
    let mut b = connect(&url).await;
    let ida = session_start(&mut a).await;
    let idb = session_start(&mut b).await;
    assert_ne!(ida, idb);
    for ws in [&mut a, &mut b] {
        system(ws).await;
        system(ws).await;
    }
    send(&mut a, LearnerMessage::option("yes")).await;
    send(&mut b, LearnerMessage::option("no")).await;
    assert_eq!(system(&mut a).await.node_id, "goals_known");
    assert_eq!(system(&mut b).await.node_id, "rapport_encourage");
    assert_eq!(system(&mut b).await.node_id, "goals_known");
}

/// Answers every prompt with the first option or a substantive sentence until the session ends.
async fn run_to_end(ws: &mut Client) -> SessionStatus {
    loop {
        let m = match recv(ws).await {
            Some(WireMessage::SystemMessage(m)) => m,
            Some(WireMessage::SessionEnd(end)) => return end.status,
            Some(WireMessage::SessionStart(_)) => continue,
            other => panic!("{other:?}"),
        };
        match m.input_mode {
            InputMode::Options => {
                let id = m.options.as_ref().unwrap()[0].option_id.clone();
                send(ws, LearnerMessage::option(id)).await;
            }
            InputMode::Open => send(ws, LearnerMessage::text("I made the arms wave with a loop")).await,
            InputMode::None => {}
        }
    }
}

async fn wait_for_status(store: &SessionStore, id: &str, want: SessionStatus) {
    for _ in 0..100 {
        if store.load(id).is_ok_and(|r| r.status == want) {
            return;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    panic!("session {id} never reached {want}");
}

#[tokio::test]
async fn completed_and_aborted_sessions_are_stored() {
    let dir = tempfile::tempdir().unwrap();
    let store = SessionStore::open(dir.path()).unwrap();
    let url = start(common::gateway().with_store(store.clone())).await;

    let mut done = connect(&url).await;
    let done_id = session_start(&mut done).await;
    assert_eq!(run_to_end(&mut done).await, SessionStatus::Completed);
    assert!(recv(&mut done).await.is_none(), "server closes after session_end");
    wait_for_status(&store, &done_id, SessionStatus::Completed).await;
    let record = store.load(&done_id).unwrap();
    assert_eq!(record.turns.last().unwrap().node_id.as_str(), "closing");
    assert!(!record.gate_events.is_empty());

    let mut quit = connect(&url).await;
    let quit_id = session_start(&mut quit).await;
    system(&mut quit).await;
    system(&mut quit).await;
    send(&mut quit, LearnerMessage::option("yes")).await;
    system(&mut quit).await;
    drop(quit);
    wait_for_status(&store, &quit_id, SessionStatus::Aborted).await;
    assert_eq!(store.load(&quit_id).unwrap().turns.len(), 4);
}

#[tokio::test]
async fn idle_sessions_are_aborted() {
    let gateway = common::gateway().with_idle_timeout(Duration::from_millis(150));
    let url = start(gateway).await;
    let mut ws = connect(&url).await;
    let id = session_start(&mut ws).await;
    system(&mut ws).await;
    system(&mut ws).await;
    match recv(&mut ws).await {
        Some(WireMessage::SessionEnd(end)) => {
            assert_eq!(end.session_id, id);
            assert_eq!(end.status, SessionStatus::Aborted);
        }
        other => panic!("{other:?}"),
    }
    assert!(recv(&mut ws).await.is_none());
}

#[tokio::test]
async fn binary_and_garbage_frames_get_error_replies() {
    let url = start(common::gateway()).await;
    let mut ws = connect(&url).await;
    session_start(&mut ws).await;
    system(&mut ws).await;
    system(&mut ws).await;

    ws.send(Message::Binary(vec![0xff, 0x00].into())).await.unwrap();
    ws.send(Message::Text("{\"type\":".into())).await.unwrap();
    ws.send(Message::Text(r#"{"type":"session_start","payload":{}}"#.into())).await.unwrap();
    let mut codes = Vec::new();
    for _ in 0..3 {
        match recv(&mut ws).await {
            Some(WireMessage::Error(e)) => codes.push(e.code),
            other => panic!("{other:?}"),
        }
    }
    assert_eq!(
        codes,
        [ErrorCode::UnsupportedFrame, ErrorCode::MalformedFrame, ErrorCode::UnexpectedType]
    );
    send(&mut ws, LearnerMessage::option("yes")).await;
    assert_eq!(system(&mut ws).await.node_id, "goals_known");
}
