use std::sync::Arc;
use std::time::Duration;

use futures::{SinkExt, StreamExt};
use hitl_sgraph::scene_graph::PlaneId;
use hitl_sgraph::simulator::{presets, simulate, PipelineEngine, PipelineOptions, Scenario};
use hitl_sgraph_service::protocol::{decode, encode, state_hash, Hello, Message, Mirror, PROTOCOL_VERSION};
use hitl_sgraph_service::{server, Hub};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio_tungstenite::tungstenite::Message as Ws;
use tokio_tungstenite::{connect_async, MaybeTlsStream, WebSocketStream};

type Client = WebSocketStream<MaybeTlsStream<TcpStream>>;

async fn start(ui_dir: Option<std::path::PathBuf>) -> (Arc<Hub>, String) {
    let log = simulate(&Scenario::from_json(presets::OCCLUSION).unwrap());
    let hub = Arc::new(Hub::new(PipelineEngine::new(log, PipelineOptions::default()).unwrap()));
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    tokio::spawn(server::serve(listener, hub.clone(), ui_dir, 0.0));
    (hub, addr)
}

async fn connect(addr: &str, last_revision: Option<u64>) -> Client {
    let (mut ws, _) = connect_async(format!("ws://{addr}/ws")).await.unwrap();
    let hello = Message::Hello(Hello { protocol_version: PROTOCOL_VERSION, last_revision });
    ws.send(Ws::Text(encode(&hello).into())).await.unwrap();
    ws
}

async fn next(ws: &mut Client) -> Message {
    loop {
        let frame = tokio::time::timeout(Duration::from_secs(10), ws.next()).await.expect("frame in time");
        match frame.expect("open").expect("ok") {
            Ws::Text(t) => return decode(t.as_str()).unwrap(),
            Ws::Ping(_) | Ws::Pong(_) => continue,
            other => panic!("unexpected frame {other:?}"),
        }
    }
}

/// Next ack or nack, applying anything else to `mirror`.
async fn reply(ws: &mut Client, mirror: &mut Mirror) -> Message {
    loop {
        let m = next(ws).await;
        if matches!(m, Message::Ack { .. } | Message::Nack { .. }) {
            return m;
        }
        mirror.apply(&m).unwrap();
    }
}

/// Read until the mirror reaches `revision`.
async fn sync_to(ws: &mut Client, mirror: &mut Mirror, revision: u64) {
    while mirror.graph.revision < revision {
        let m = next(ws).await;
        mirror.apply(&m).unwrap();
    }
}

async fn http(addr: &str, request: &str) -> String {
    let mut s = TcpStream::connect(addr).await.unwrap();
    s.write_all(request.as_bytes()).await.unwrap();
    let mut out = String::new();
    s.read_to_string(&mut out).await.unwrap();
    out
}

async fn post_step(addr: &str) -> String {
    http(addr, "POST /step HTTP/1.1\r\nHost: t\r\nContent-Length: 0\r\nConnection: close\r\n\r\n").await
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn live_session_end_to_end() {
    let (hub, addr) = start(None).await;
    let mut ws = connect(&addr, None).await;
    assert!(matches!(next(&mut ws).await, Message::Hello(h) if h.last_revision == Some(0)));
    let mut mirror = Mirror::default();
    let snap = next(&mut ws).await;
    assert!(matches!(&snap, Message::Snapshot(s) if s.revision == 0));
    mirror.apply(&snap).unwrap();

    // speed 0: the client drives the log
    let stepped = post_step(&addr).await;
    assert!(stepped.starts_with("HTTP/1.1 200"), "{stepped}");
    assert!(stepped.contains("\"stepped\":true"), "{stepped}");
    while !hub.is_finished() {
        let hub = hub.clone();
        tokio::task::spawn_blocking(move || hub.step().unwrap()).await.unwrap();
    }
    sync_to(&mut ws, &mut mirror, hub.revision()).await;
    assert_eq!(mirror.graph, hub.snapshot());
    assert_eq!(state_hash(&mirror.graph), state_hash(&hub.snapshot()));

    let ids = hub.with_engine(|e| {
        ["room1:wall:-x", "room1:wall:+x", "room0:wall:-y", "room1:wall:+y"].map(|k| e.plane_for_key(k).unwrap())
    });
    let cmd = Message::CreateRoom { cmd_id: "ui-1".into(), plane_ids: ids };
    ws.send(Ws::Text(encode(&cmd).into())).await.unwrap();
    let ack = reply(&mut ws, &mut mirror).await;
    let Message::Ack { cmd_id, revision, room_id } = ack else { panic!("{ack:?}") };
    assert_eq!(cmd_id, "ui-1");
    // deltas up to the ack revision arrive before the ack itself
    assert!(mirror.graph.revision >= revision);
    assert!(mirror.graph.rooms.iter().any(|r| r.id == room_id));

    // resending the same command changes nothing
    ws.send(Ws::Text(encode(&cmd).into())).await.unwrap();
    let again = reply(&mut ws, &mut mirror).await;
    assert_eq!(again, Message::Ack { cmd_id: "ui-1".into(), revision, room_id });

    let bad = Message::CreateRoom { cmd_id: "ui-2".into(), plane_ids: [ids[0], ids[0], ids[2], ids[3]] };
    ws.send(Ws::Text(encode(&bad).into())).await.unwrap();
    match reply(&mut ws, &mut mirror).await {
        Message::Nack { cmd_id, violation, .. } => assert_eq!((cmd_id.as_str(), violation.as_str()), ("ui-2", "not-4-distinct")),
        other => panic!("{other:?}"),
    }
    sync_to(&mut ws, &mut mirror, hub.revision()).await;
    assert_eq!(mirror.graph, hub.snapshot());

    // the snapshot endpoint serves the same state
    let body = http(&addr, "GET /snapshot HTTP/1.1\r\nHost: t\r\nConnection: close\r\n\r\n").await;
    let json = body.split("\r\n\r\n").nth(1).unwrap();
    let served: hitl_sgraph::scene_graph::GraphSnapshot = serde_json::from_str(json).unwrap();
    assert_eq!(served, hub.snapshot());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn reconnect_resumes_without_duplication() {
    let (hub, addr) = start(None).await;
    for _ in 0..10 {
        post_step(&addr).await;
    }
    let mut ws = connect(&addr, None).await;
    let mut mirror = Mirror::default();
    next(&mut ws).await;
    mirror.apply(&next(&mut ws).await).unwrap();
    let held = mirror.graph.revision;
    assert_eq!(held, hub.revision());
    drop(ws);

    for _ in 0..10 {
        post_step(&addr).await;
    }
    let mut ws = connect(&addr, Some(held)).await;
    assert!(matches!(next(&mut ws).await, Message::Hello(_)));
    let mut seen = Vec::new();
    while mirror.graph.revision < hub.revision() {
        let m = next(&mut ws).await;
        assert!(!matches!(m, Message::Snapshot(_)), "resume should not resend a snapshot");
        if let Message::Delta(d) = &m {
            seen.push(d.revision);
        }
        mirror.apply(&m).unwrap();
    }
    let expected: Vec<u64> = (held + 1..=hub.revision()).collect();
    assert_eq!(seen, expected);
    assert_eq!(mirror.graph, hub.snapshot());
}

async fn expect_protocol_close(ws: &mut Client) {
    loop {
        let frame = tokio::time::timeout(Duration::from_secs(10), ws.next()).await.unwrap();
        match frame {
            Some(Ok(Ws::Close(Some(f)))) => {
                assert_eq!(u16::from(f.code), 1002, "{f:?}");
                return;
            }
            Some(Ok(Ws::Text(_))) => continue,
            other => panic!("expected close frame, got {other:?}"),
        }
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn malformed_messages_close_with_protocol_error() {
    let (_hub, addr) = start(None).await;

    let (mut ws, _) = connect_async(format!("ws://{addr}/ws")).await.unwrap();
    ws.send(Ws::Text("{not json".into())).await.unwrap();
    expect_protocol_close(&mut ws).await;

    let (mut ws, _) = connect_async(format!("ws://{addr}/ws")).await.unwrap();
    let cmd = Message::CreateRoom { cmd_id: "early".into(), plane_ids: [PlaneId(0), PlaneId(1), PlaneId(2), PlaneId(3)] };
    ws.send(Ws::Text(encode(&cmd).into())).await.unwrap();
    expect_protocol_close(&mut ws).await;

    let mut ws = connect(&addr, None).await;
    ws.send(Ws::Text(r#"{"type":"create_room","payload":{"plane_ids":[0,1,2,3]}}"#.into())).await.unwrap();
    expect_protocol_close(&mut ws).await;

    let (mut ws, _) = connect_async(format!("ws://{addr}/ws")).await.unwrap();
    let hello = Message::Hello(Hello { protocol_version: PROTOCOL_VERSION + 1, last_revision: None });
    ws.send(Ws::Text(encode(&hello).into())).await.unwrap();
    expect_protocol_close(&mut ws).await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn two_clients_see_the_same_commits() {
    let (hub, addr) = start(None).await;
    let mut a = connect(&addr, None).await;
    let mut b = connect(&addr, None).await;
    let (mut ma, mut mb) = (Mirror::default(), Mirror::default());
    for _ in 0..15 {
        post_step(&addr).await;
    }
    let target = hub.revision();
    sync_to(&mut a, &mut ma, target).await;
    sync_to(&mut b, &mut mb, target).await;
    assert_eq!(ma.graph, mb.graph);
    assert_eq!(ma.graph, hub.snapshot());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn serves_static_ui_files() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<html>viewer</html>").unwrap();
    let (_hub, addr) = start(Some(dir.path().to_path_buf())).await;
    let body = http(&addr, "GET /index.html HTTP/1.1\r\nHost: t\r\nConnection: close\r\n\r\n").await;
    assert!(body.starts_with("HTTP/1.1 200"), "{body}");
    assert!(body.ends_with("<html>viewer</html>"));
}
