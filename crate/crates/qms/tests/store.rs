use std::collections::BTreeSet;
use std::sync::Arc;

use proptest::prelude::*;
use qms::store::{filter, is_valid_id, Filter, Store};
use serde_json::{json, Value};

#[test]
fn hundred_concurrent_writers() {
    let dir = tempfile::tempdir().unwrap();
    let store = Arc::new(Store::open(dir.path()).unwrap());
    let counter = store.insert("counters", json!({"n": 0})).unwrap();
    let threads: Vec<_> = (0..100)
        .map(|i| {
            let store = store.clone();
            let counter = counter.clone();
            std::thread::spawn(move || {
                let id = store.insert("items", json!({"writer": i, "payload": "x".repeat(i * 10)})).unwrap();
                store
                    .modify("counters", &counter, |body| {
                        body["n"] = (body["n"].as_u64().unwrap() + 1).into();
                        Ok::<_, qms::store::StoreError>(())
                    })
                    .unwrap();
                id
            })
        })
        .collect();
    let ids: BTreeSet<String> = threads.into_iter().map(|t| t.join().unwrap()).collect();
    assert_eq!(ids.len(), 100);
    assert!(ids.iter().all(|id| is_valid_id(id)));
    assert_eq!(store.count("items").unwrap(), 100);
    assert_eq!(store.get("counters", &counter).unwrap().unwrap().body["n"], 100);

    let reopened = Store::open(dir.path()).unwrap();
    let writers: BTreeSet<u64> =
        reopened.query("items", &Filter::new()).unwrap().iter().map(|d| d.body["writer"].as_u64().unwrap()).collect();
    assert_eq!(writers, (0..100).collect());
    let leftovers: Vec<_> = walk(dir.path()).into_iter().filter(|p| p.extension().is_none_or(|e| e != "json")).collect();
    assert!(leftovers.is_empty(), "temporary files left behind: {leftovers:?}");
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(walk(&path));
        } else {
            out.push(path);
        }
    }
    out
}

#[test]
fn unique_insert_under_contention() {
    let dir = tempfile::tempdir().unwrap();
    let store = Arc::new(Store::open(dir.path()).unwrap());
    let threads: Vec<_> = (0..32)
        .map(|_| {
            let store = store.clone();
            std::thread::spawn(move || {
                store.insert_unique("users", &filter([("user_id", "u1")]), json!({"user_id": "u1"})).unwrap()
            })
        })
        .collect();
    let created = threads.into_iter().map(|t| t.join().unwrap()).filter(|(_, created)| *created).count();
    assert_eq!(created, 1);
    assert_eq!(store.count("users").unwrap(), 1);
}

#[test]
fn missing_and_malformed_ids() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    assert!(store.get("things", "0123456789abcdef01234567").unwrap().is_none());
    assert!(store.get("things", "../../etc/passwd").unwrap().is_none());
    assert!(store.get("../escape", "0123456789abcdef01234567").is_err());
    assert!(store.update("things", "0123456789abcdef01234567", json!({})).is_err());
}

fn json_value() -> impl Strategy<Value = Value> {
    let leaf = prop_oneof![
        Just(Value::Null),
        any::<bool>().prop_map(Value::from),
        any::<i64>().prop_map(Value::from),
        (-1e12f64..1e12).prop_map(Value::from),
        "[a-zA-Z0-9 \\-_é\"\\\\]{0,12}".prop_map(Value::from),
    ];
    leaf.prop_recursive(3, 24, 4, |inner| {
        prop_oneof![
            prop::collection::vec(inner.clone(), 0..4).prop_map(Value::from),
            prop::collection::btree_map("[a-z]{1,6}", inner, 0..4).prop_map(|m| Value::Object(m.into_iter().collect())),
        ]
    })
}

fn object() -> impl Strategy<Value = Value> {
    prop::collection::btree_map("[a-z]{1,6}", json_value(), 0..5).prop_map(|m| Value::Object(m.into_iter().collect()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn insert_get_round_trip(body in object(), replacement in object()) {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let id = store.insert("docs", body.clone()).unwrap();
        let doc = store.get("docs", &id).unwrap().unwrap();
        prop_assert_eq!(&doc.body, &body);
        prop_assert_eq!(doc.id.as_str(), id.as_str());

        let updated = store.update("docs", &id, replacement.clone()).unwrap();
        prop_assert_eq!(&updated.body, &replacement);
        prop_assert_eq!(updated.created_at, doc.created_at);

        let reopened = Store::open(dir.path()).unwrap();
        prop_assert_eq!(reopened.get("docs", &id).unwrap().unwrap().body, replacement);
    }

    #[test]
    fn query_matches_exact_fields(values in prop::collection::vec(0u8..4, 1..12), probe in 0u8..4) {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        for v in &values {
            store.insert("docs", json!({"k": v})).unwrap();
        }
        let hits = store.query("docs", &filter([("k", probe)])).unwrap();
        prop_assert_eq!(hits.len(), values.iter().filter(|&&v| v == probe).count());
        prop_assert_eq!(store.count("docs").unwrap(), values.len());
    }
}
