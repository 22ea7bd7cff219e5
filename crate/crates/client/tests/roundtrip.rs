use std::collections::BTreeMap;

use futures::StreamExt;
use photoloop_client::{Client, ClientError};
use photoloop_core::api::{EventKind, ParamSource, ParamsPatch};
use photoloop_core::{FilterId, ImageBuffer, Status, StopReason};
use photoloop_service::{serve, ServiceConfig};

async fn start(config: ServiceConfig) -> (Client, tempfile::TempDir) {
    let data = tempfile::tempdir().unwrap();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let config = ServiceConfig {
        data_dir: data.path().to_path_buf(),
        ..config
    };
    tokio::spawn(serve(listener, config, std::future::pending()));
    (Client::new(base).unwrap(), data)
}

fn photo() -> Vec<u8> {
    ImageBuffer::from_fn(80, 60, |x, y| {
        let t = 0.1 + 0.25 * (x + y) as f64 / 138.0;
        [t * 1.1, t, t * 0.7]
    })
    .encode_png()
    .unwrap()
}

fn set(name: &str, v: f64) -> ParamsPatch {
    ParamsPatch {
        set: BTreeMap::from([(name.to_string(), v)]),
        ..ParamsPatch::default()
    }
}

#[tokio::test]
async fn a_run_is_streamed_and_rendered() {
    let (client, _data) = start(ServiceConfig::default()).await;
    let created = client.create_session(photo(), false).await.unwrap();
    let accepted = client.optimize(&created.id, Some(4)).await.unwrap();
    let events = client.wait_for_run(&created.id, accepted.events_after).await.unwrap();

    let seqs: Vec<u64> = events.iter().map(|e| e.seq).collect();
    assert!(seqs.windows(2).all(|w| w[0] < w[1]));
    assert!(events.iter().all(|e| e.session_id == created.id));
    let records: Vec<_> = events
        .iter()
        .filter_map(|e| match &e.kind {
            EventKind::IterationDone { record } => Some(record.clone()),
            _ => None,
        })
        .collect();
    assert_eq!(records.iter().map(|r| r.iteration).collect::<Vec<_>>(), [1, 2, 3, 4]);
    assert!(matches!(
        events.last().unwrap().kind,
        EventKind::StatusChanged { status: Status::Done, reason: Some(StopReason::Budget) }
    ));

    let state = client.session(&created.id).await.unwrap();
    assert_eq!(state.k, records.last().unwrap().k);
    assert_eq!(&state.history[1..], &records[..]);

    let url = events
        .iter()
        .rev()
        .find_map(|e| match &e.kind {
            EventKind::PreviewReady { url, .. } => Some(url.clone()),
            _ => None,
        })
        .unwrap();
    let preview = ImageBuffer::decode(&client.preview(&url).await.unwrap()).unwrap();
    assert_eq!(preview.width(), 224);
    let full = ImageBuffer::decode(&client.render(&created.id).await.unwrap()).unwrap();
    assert_eq!((full.width(), full.height()), (80, 60));
}

#[tokio::test]
async fn errors_carry_status_and_message() {
    let (client, _data) = start(ServiceConfig::default()).await;
    match client.session("missing").await {
        Err(ClientError::Api { status, message }) => {
            assert_eq!(status.as_u16(), 404);
            assert!(message.contains("missing"));
        }
        other => panic!("{other:?}"),
    }
    let id = client.create_session(photo(), true).await.unwrap().id;
    match client.set_params(&id, &set("sat", 2.0)).await {
        Err(ClientError::Api { status, .. }) => assert_eq!(status.as_u16(), 400),
        other => panic!("{other:?}"),
    }
    assert!(matches!(Client::new("not a url"), Err(ClientError::Url(_))));
}

#[tokio::test]
async fn edits_during_a_run_reach_the_next_record() {
    let mut config = ServiceConfig::default();
    config.defaults.optimizer.early_stop = None;
    let (client, _data) = start(config).await;
    let id = client.create_session(photo(), false).await.unwrap().id;
    let accepted = client.optimize(&id, Some(200)).await.unwrap();

    let stream = client.events(&id, accepted.events_after).await.unwrap();
    futures::pin_mut!(stream);
    let mut latest = 0;
    while latest < 2 {
        if let EventKind::IterationDone { record } = stream.next().await.unwrap().unwrap().kind {
            latest = record.iteration;
        }
    }
    let mut patch = set("sat", 0.3);
    patch.fix.push("sat".into());
    let answered = client.set_params(&id, &patch).await.unwrap();
    assert_eq!(answered.k.get(FilterId::Sat), 0.3);
    let answered_at = answered.history.last().unwrap().iteration;

    let mut user_edit_seen = false;
    loop {
        match stream.next().await.unwrap().unwrap().kind {
            EventKind::ParamsChanged { source: ParamSource::User, k, .. } => {
                assert_eq!(k.get(FilterId::Sat), 0.3);
                user_edit_seen = true;
            }
            EventKind::IterationDone { record } if record.iteration == answered_at + 1 => {
                assert!(user_edit_seen);
                assert_eq!(record.k.get(FilterId::Sat), 0.3);
                assert!(record.k.is_fixed(FilterId::Sat));
                break;
            }
            _ => {}
        }
    }
    client.stop(&id).await.unwrap();
    let end = client.wait_for_run(&id, 0).await.unwrap();
    assert!(matches!(
        end.last().unwrap().kind,
        EventKind::StatusChanged { status: Status::Idle, reason: Some(StopReason::Stopped) }
    ));
    let state = client.session(&id).await.unwrap();
    assert!(state.history.iter().skip(answered_at + 1).all(|r| r.k.get(FilterId::Sat) == 0.3));
}

#[tokio::test]
async fn persisted_sessions_load_elsewhere() {
    let (client, data) = start(ServiceConfig::default()).await;
    let id = client.create_session(photo(), true).await.unwrap().id;
    client.set_params(&id, &set("exp", 0.2)).await.unwrap();
    client.persist(&id, "kept").await.unwrap();
    assert!(client.load("kept").await.is_err());

    let (other, other_data) = start(ServiceConfig::default()).await;
    let from = data.path().join("kept");
    let to = other_data.path().join("kept");
    std::fs::create_dir(&to).unwrap();
    for entry in std::fs::read_dir(&from).unwrap() {
        let entry = entry.unwrap();
        std::fs::copy(entry.path(), to.join(entry.file_name())).unwrap();
    }
    let loaded = other.load("kept").await.unwrap();
    assert_eq!(loaded, client.session(&id).await.unwrap());
    assert_eq!(other.render(&id).await.unwrap(), client.render(&id).await.unwrap());
}
