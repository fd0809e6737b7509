//! Shared helpers for HTTP-level tests: fixtures, a client that talks to a
//! router in-process or to a live server, a random selection-query
//! generator, and the REST-composition oracle for queries.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use parking_lot::Mutex;
use rand::seq::IndexedRandom;
use rand::Rng;
use seastar_api::query::{self, Selection, Target};
use seastar_core::entity::{EntityId, Kind, Timestamp};
use seastar_core::metric::Topology;
use seastar_core::model::{ModelStore, Relation};
use serde_json::{Map, Value};
use tower::ServiceExt;

pub enum Client {
    Router(Router),
    Http { client: reqwest::Client, base: String },
}

impl Client {
    pub fn http(addr: SocketAddr) -> Client {
        Client::Http {
            client: reqwest::Client::new(),
            base: format!("http://{addr}"),
        }
    }

    pub async fn call(&self, method: &str, path: &str, headers: &[(&str, String)], body: &str) -> (StatusCode, Value) {
        match self {
            Client::Router(router) => {
                let mut req = Request::builder().method(method).uri(path);
                for (k, v) in headers {
                    req = req.header(*k, v.as_str());
                }
                let resp = router
                    .clone()
                    .oneshot(req.body(Body::from(body.to_string())).unwrap())
                    .await
                    .unwrap();
                let status = resp.status();
                let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
                (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
            }
            Client::Http { client, base } => {
                let method = reqwest::Method::from_bytes(method.as_bytes()).unwrap();
                let mut req = client.request(method, format!("{base}{path}")).body(body.to_string());
                for (k, v) in headers {
                    req = req.header(*k, v.as_str());
                }
                let resp = req.send().await.unwrap();
                let status = StatusCode::from_u16(resp.status().as_u16()).unwrap();
                let bytes = resp.bytes().await.unwrap();
                (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
            }
        }
    }

    pub async fn get(&self, path: &str) -> (StatusCode, Value) {
        self.call("GET", path, &[], "").await
    }

    pub async fn query(&self, text: &str) -> (StatusCode, Value) {
        self.call("POST", "/query", &[], text).await
    }
}

pub async fn spawn(router: Router) -> SocketAddr {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move {
        axum::serve(listener, router).await.unwrap();
    });
    addr
}

/// A webhook receiver that records every body it gets.
pub async fn spawn_receiver() -> (SocketAddr, Arc<Mutex<Vec<Value>>>) {
    let got = Arc::new(Mutex::new(Vec::new()));
    let sink = got.clone();
    let router = Router::new().route(
        "/hook",
        axum::routing::post(move |axum::Json(v): axum::Json<Value>| {
            let sink = sink.clone();
            async move {
                sink.lock().push(v);
                StatusCode::OK
            }
        }),
    );
    (spawn(router).await, got)
}

/// A localhost port nothing listens on.
pub fn dead_port() -> u16 {
    let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    l.local_addr().unwrap().port()
}

pub fn path_of(id: &str) -> String {
    let e = EntityId::from_raw(id);
    format!("/{}/{}", e.kind().expect("typed id"), e.stable_key())
}

/// Removes `timestamp` fields anywhere in a JSON tree.
pub fn strip_timestamps(v: &mut Value) {
    match v {
        Value::Object(map) => {
            map.remove("timestamp");
            map.values_mut().for_each(strip_timestamps);
        }
        Value::Array(items) => items.iter_mut().for_each(strip_timestamps),
        _ => {}
    }
}

const METRIC_POOL: [&str; 6] = [
    "memory_rss",
    "memory_total",
    "cpu_utilization",
    "io_read_bytes",
    "io_write_bytes",
    "no_such_metric",
];
const FIELD_POOL: [&str; 7] = ["kind", "id", "labels", "parent_node", "child_nodes", "sibling_nodes", "attributes"];

fn gen_selection(rng: &mut impl Rng, kind: Kind, depth: usize, out: &mut String) {
    out.push_str("{ ");
    let n = rng.random_range(1..=3);
    for _ in 0..n {
        let roll = if depth == 0 { rng.random_range(0..2) } else { rng.random_range(0..6) };
        match roll {
            0 => out.push_str(FIELD_POOL.choose(rng).unwrap()),
            1 => out.push_str(METRIC_POOL.choose(rng).unwrap()),
            2 => {
                out.push_str("parent ");
                gen_selection(rng, kind.parent().unwrap_or(kind), depth - 1, out);
            }
            3 => {
                out.push_str("context ");
                gen_selection(rng, kind.counterpart(), depth - 1, out);
            }
            4 => {
                let child = kind.child().unwrap_or(kind);
                out.push_str(&format!("children {{ {} ", child.plural()));
                gen_selection(rng, child, depth - 1, out);
                out.push_str(" }");
            }
            _ => {
                out.push_str(&format!("siblings {{ {} ", kind.plural()));
                gen_selection(rng, kind, depth - 1, out);
                out.push_str(" }");
            }
        }
        out.push(' ');
    }
    out.push('}');
}

/// A random query rooted at an entity alive at `t`.
pub fn gen_query(rng: &mut impl Rng, model: &ModelStore, t: Timestamp) -> String {
    let kind = *Kind::ALL.choose(rng).unwrap();
    let alive = model.alive_of_kind(kind, t);
    let root = alive.choose(rng).expect("fixture has every kind alive");
    let mut text = format!("{{ {kind}(id: {}) ", root.stable_key());
    gen_selection(rng, kind, 3, &mut text);
    text.push_str(" }");
    text
}

/// Answers `text` by composing REST calls only.
pub async fn rest_oracle(client: &Client, text: &str) -> Value {
    let q = query::parse(text).expect("generated queries parse");
    let Target::Id(id) = &q.target else { panic!("oracle needs an explicit id") };
    let (status, obj) = client.get(&format!("/{}/{}", q.kind, id)).await;
    assert_eq!(status, StatusCode::OK, "{text}");
    compose(client, obj, &q.selection).await
}

fn compose<'a>(
    client: &'a Client,
    obj: Value,
    selection: &'a [Selection],
) -> std::pin::Pin<Box<dyn std::future::Future<Output = Value> + 'a>> {
    Box::pin(async move {
        let id = obj["id"].as_str().unwrap().to_string();
        let base = path_of(&id);
        let mut out = Map::new();
        for s in selection {
            match s {
                Selection::Field(f) => {
                    out.insert(f.clone(), obj.get(f).cloned().unwrap_or(Value::Null));
                }
                Selection::Metric(m) => {
                    let v = obj["attributes"]
                        .get(m)
                        .and_then(|w| w.as_array())
                        .and_then(|w| w.last())
                        .map(|pair| pair[1].clone())
                        .unwrap_or(Value::Null);
                    out.insert(m.clone(), v);
                }
                Selection::Parent(inner) => {
                    let v = match obj["parent_node"].as_object().and_then(|p| p.values().next()) {
                        Some(_) => {
                            let (status, parent) = client.get(&format!("{base}/parent")).await;
                            assert_eq!(status, StatusCode::OK);
                            compose(client, parent, inner).await
                        }
                        None => Value::Null,
                    };
                    out.insert("parent".into(), v);
                }
                Selection::Context(inner) => {
                    let (status, ctx) = client.get(&format!("{base}/context")).await;
                    assert_eq!(status, StatusCode::OK);
                    let v = match ctx {
                        Value::Array(items) => keyed(client, items, inner).await,
                        one => compose(client, one, inner).await,
                    };
                    out.insert("context".into(), v);
                }
                Selection::Related(relation, groups) => {
                    let aspect = if *relation == Relation::Children { "children" } else { "siblings" };
                    let (status, related) = client.get(&format!("{base}/{aspect}")).await;
                    assert_eq!(status, StatusCode::OK);
                    let related = related.as_array().cloned().unwrap_or_default();
                    let mut grouped = Map::new();
                    for (kind, inner) in groups {
                        let members: Vec<Value> = related
                            .iter()
                            .filter(|o| o["kind"] == kind.to_string())
                            .cloned()
                            .collect();
                        grouped.insert(kind.plural().to_string(), keyed(client, members, inner).await);
                    }
                    out.insert(aspect.into(), Value::Object(grouped));
                }
            }
        }
        Value::Object(out)
    })
}

async fn keyed(client: &Client, items: Vec<Value>, inner: &[Selection]) -> Value {
    let mut map = BTreeMap::new();
    for item in items {
        let id = item["id"].as_str().unwrap().to_string();
        map.insert(id, compose(client, item, inner).await);
    }
    Value::Object(map.into_iter().collect())
}
