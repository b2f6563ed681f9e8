use std::sync::Arc;

use chrono::TimeZone;
use radforge::corpus::Sentence;
use radforge::curation::CurationStore;
use radforge::kg::chest_fixture;
use radforge::tree::{EditKind, PerceptionTree, TreeEdit};
use serde_json::{json, Value};

struct Server {
    base: String,
    store: Arc<CurationStore>,
    _dir: tempfile::TempDir,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
}

impl Drop for Server {
    fn drop(&mut self) {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
    }
}

async fn start() -> Server {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tree.json");
    let mut tree = chest_fixture().prune_all_organs().unwrap();
    let edema = tree.nodes.iter_mut().find(|n| n.id == "lungs/edema").unwrap();
    edema.sentences.push(Sentence {
        report_id: "r1".into(),
        index: 0,
        text: "Mild edema.".into(),
    });
    tree.save(&path).unwrap();
    let store = Arc::new(CurationStore::open(&path).unwrap());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    tokio::spawn(radforge_cli::serve::serve(store.clone(), listener, async {
        let _ = rx.await;
    }));
    Server {
        base,
        store,
        _dir: dir,
        stop: Some(tx),
    }
}

fn edit(kind: EditKind, targets: &[&str], payload: Option<&str>, base_version: u64) -> Value {
    let e = TreeEdit::new(
        kind,
        targets,
        payload,
        "curator",
        chrono::Utc.with_ymd_and_hms(2024, 3, 1, 12, 0, 0).unwrap(),
    );
    let mut v = serde_json::to_value(e).unwrap();
    v["base_version"] = json!(base_version);
    v
}

#[tokio::test]
async fn edit_flow_and_replay() {
    let s = start().await;
    let http = reqwest::Client::new();

    let health: Value = http
        .get(format!("{}/health", s.base))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(health["status"], "ok");

    let tree: PerceptionTree = http
        .get(format!("{}/tree", s.base))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    let v = tree.version;
    assert_eq!(tree, s.store.tree());

    let r = http
        .post(format!("{}/edits", s.base))
        .json(&edit(EditKind::PruneNode, &["devices"], None, v))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), 200);
    let t: PerceptionTree = r.json().await.unwrap();
    assert_eq!(t.version, v + 1);
    assert!(t.node("devices").is_none());

    let stale = http
        .post(format!("{}/edits", s.base))
        .json(&edit(EditKind::PruneNode, &["bones"], None, v))
        .send()
        .await
        .unwrap();
    assert_eq!(stale.status(), 409);
    let body: Value = stale.json().await.unwrap();
    assert_eq!(body["current_version"], v + 1);

    let merge = edit(
        EditKind::MergeNodes,
        &["lungs/atelectasis", "lungs/lung_opacity"],
        None,
        v + 1,
    );
    assert_eq!(
        http.post(format!("{}/edits", s.base))
            .json(&merge)
            .send()
            .await
            .unwrap()
            .status(),
        200
    );
    let rename = edit(EditKind::RenameNode, &["heart"], Some("cardiac"), v + 2);
    assert_eq!(
        http.post(format!("{}/edits", s.base))
            .json(&rename)
            .send()
            .await
            .unwrap()
            .status(),
        200
    );

    let empty = edit(EditKind::RenameNode, &["heart"], Some(""), v + 3);
    let r = http
        .post(format!("{}/edits", s.base))
        .json(&empty)
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), 422);
    assert!(r.json::<Value>().await.unwrap()["error"].is_string());

    let garbage = http
        .post(format!("{}/edits", s.base))
        .json(&json!({"kind": "explode"}))
        .send()
        .await
        .unwrap();
    assert_eq!(garbage.status(), 422);

    let edits: Vec<TreeEdit> = http
        .get(format!("{}/edits", s.base))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(edits.len(), 3);
    let served: PerceptionTree = http
        .get(format!("{}/tree", s.base))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(served.version, v + 3);
    assert_eq!(PerceptionTree::replay(&s.store.base(), &edits).unwrap(), served);

    let on_disk = PerceptionTree::load(s.store.paths().0).unwrap();
    assert_eq!(on_disk, served);
}

#[tokio::test]
async fn leaf_sentences_route() {
    let s = start().await;
    let http = reqwest::Client::new();
    let r = http
        .get(format!("{}/leaves/lungs/edema/sentences", s.base))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), 200);
    let sentences: Vec<Value> = r.json().await.unwrap();
    assert_eq!(sentences.len(), 1);
    assert_eq!(sentences[0]["report_id"], "r1");

    let encoded = http
        .get(format!("{}/leaves/lungs%2Fedema/sentences", s.base))
        .send()
        .await
        .unwrap();
    assert_eq!(encoded.status(), 200);

    let missing = http
        .get(format!("{}/leaves/spleen/sentences", s.base))
        .send()
        .await
        .unwrap();
    assert_eq!(missing.status(), 404);
}
