//! Newline-delimited JSON front end for an [`Engine`], over stdio or TCP.
//!
//! Requests, one per line:
//!
//! ```text
//! {"id": "a", "query": {"c1": ["1"]}}          query (object or query text)
//! {"op": "refresh", "u": 2}
//! {"op": "stats"}
//! {"op": "open_session", "query": ..., "eps": 0.1, "rho": 0.1, "T": 10}
//! {"op": "respond", "session": 1}
//! {"op": "apply_delta", "kind": "insert", "row": ["1", "0"], "t": 2}
//! ```
//!
//! Query responses carry `value`, `charged`, `path` and `remaining_budget`;
//! a refused query has `path: "refused"` and a null value.

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, ToSocketAddrs};
use std::sync::Arc;
use std::thread;

use serde_json::{json, Map, Value};

use crate::dataset::{DeltaKind, RowDelta};
use crate::engine::{Engine, Path, Response};
use crate::error::{Error, Result};
use crate::query::Query;

pub struct Server {
    engine: Engine,
}

fn response_json(r: &Response) -> Map<String, Value> {
    let mut m = Map::new();
    m.insert("value".into(), json!(r.value));
    m.insert("charged".into(), json!(r.charged));
    m.insert("path".into(), json!(r.path));
    m.insert("remaining_budget".into(), json!(r.remaining_budget));
    m
}

impl Server {
    pub fn new(engine: Engine) -> Self {
        Server { engine }
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    /// Handles one request line and returns one response line (without the
    /// trailing newline). Never panics on bad input.
    pub fn handle_line(&self, line: &str) -> String {
        let req: Value = match serde_json::from_str(line) {
            Ok(v) => v,
            Err(e) => return json!({ "error": format!("invalid JSON: {e}") }).to_string(),
        };
        let id = req.get("id").cloned();
        let mut out = match self.dispatch(&req) {
            Ok(m) => m,
            Err(e) => {
                let mut m = Map::new();
                m.insert("error".into(), json!(e.to_string()));
                m
            }
        };
        if let Some(id) = id {
            out.insert("id".into(), id);
        }
        Value::Object(out).to_string()
    }

    fn dispatch(&self, req: &Value) -> Result<Map<String, Value>> {
        let schema = self.engine.database().schema_arc();
        let op = req.get("op").and_then(Value::as_str);
        match op {
            None | Some("query") => {
                let q = Query::from_json(
                    req.get("query")
                        .ok_or_else(|| Error::InvalidArgument("missing `query`".into()))?,
                    &schema,
                )?;
                match self.engine.handle(&q) {
                    Ok(r) => Ok(response_json(&r)),
                    Err(Error::BudgetExhausted { .. }) => {
                        let mut m = Map::new();
                        m.insert("value".into(), Value::Null);
                        m.insert("charged".into(), json!(0.0));
                        m.insert("path".into(), json!(Path::Refused));
                        m.insert(
                            "remaining_budget".into(),
                            json!(self.engine.remaining_budget()),
                        );
                        m.insert("error".into(), json!("budget exhausted"));
                        Ok(m)
                    }
                    Err(e) => Err(e),
                }
            }
            Some("refresh") => {
                let u = match req.get("u") {
                    None => self.engine.config().threshold_u,
                    Some(v) => v
                        .as_u64()
                        .ok_or_else(|| Error::InvalidArgument("`u` must be an integer".into()))?
                        as usize,
                };
                let rep = self.engine.refresh(u)?;
                let mut m = serde_json::to_value(&rep)?
                    .as_object()
                    .cloned()
                    .unwrap_or_default();
                m.insert(
                    "status".into(),
                    json!(if rep.warning.is_some() {
                        "warning"
                    } else {
                        "ok"
                    }),
                );
                Ok(m)
            }
            Some("stats") => {
                let st = self.engine.stats();
                let mut m = serde_json::to_value(st)?
                    .as_object()
                    .cloned()
                    .unwrap_or_default();
                m.insert("p".into(), json!(st.p()));
                Ok(m)
            }
            Some("open_session") => {
                let q = Query::from_json(req.get("query").unwrap_or(&Value::Null), &schema)?;
                let num = |k: &str| {
                    req.get(k)
                        .and_then(Value::as_f64)
                        .ok_or_else(|| Error::InvalidArgument(format!("missing numeric `{k}`")))
                };
                let eps = num("eps")?;
                let rho = num("rho")?;
                let t = req
                    .get("T")
                    .and_then(Value::as_u64)
                    .ok_or_else(|| Error::InvalidArgument("missing integer `T`".into()))?;
                let t = u32::try_from(t)
                    .map_err(|_| Error::InvalidArgument("`T` is too large".into()))?;
                let (sid, r) = self.engine.open_session(&q, eps, rho, t)?;
                let mut m = response_json(&r);
                m.insert("session".into(), json!(sid));
                Ok(m)
            }
            Some("respond") => {
                let sid = req
                    .get("session")
                    .and_then(Value::as_u64)
                    .ok_or_else(|| Error::InvalidArgument("missing integer `session`".into()))?;
                Ok(response_json(&self.engine.respond_session(sid)?))
            }
            Some("apply_delta") => {
                let kind: DeltaKind =
                    serde_json::from_value(req.get("kind").cloned().unwrap_or(Value::Null))?;
                let row: Vec<String> =
                    serde_json::from_value(req.get("row").cloned().unwrap_or(Value::Null))?;
                let t = req.get("t").and_then(Value::as_u64).unwrap_or(2) as u32;
                let version = self.engine.apply_delta(&RowDelta {
                    kind,
                    row,
                    time_step: t,
                })?;
                let mut m = Map::new();
                m.insert("version".into(), json!(version));
                m.insert("n".into(), json!(self.engine.database().n()));
                Ok(m)
            }
            Some(other) => Err(Error::InvalidArgument(format!("unknown op `{other}`"))),
        }
    }

    /// Serves one line-oriented stream until it closes.
    pub fn serve_stream<R: BufRead, W: Write>(&self, input: R, mut output: W) -> Result<()> {
        for line in input.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            writeln!(output, "{}", self.handle_line(&line))?;
            output.flush()?;
        }
        Ok(())
    }

    /// Accepts TCP connections, one thread each. Does not return unless
    /// binding fails.
    pub fn serve_tcp(self: Arc<Self>, addr: impl ToSocketAddrs) -> Result<()> {
        let listener = TcpListener::bind(addr)?;
        for stream in listener.incoming() {
            let stream = match stream {
                Ok(s) => s,
                Err(_) => continue,
            };
            let me = Arc::clone(&self);
            thread::spawn(move || {
                let reader = match stream.try_clone() {
                    Ok(r) => BufReader::new(r),
                    Err(_) => return,
                };
                let _ = me.serve_stream(reader, stream);
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Database, Schema};
    use crate::engine::EngineConfig;

    fn server(budget: f64) -> Server {
        let s = Schema::binary(2).unwrap();
        let rows: Vec<Vec<u32>> = (0..20u32).map(|i| vec![i % 2, (i / 2) % 2]).collect();
        let db = Database::from_rows(s, rows).unwrap();
        let cfg = EngineConfig {
            epsilon_budget: budget,
            epsilon_per_query: 0.1,
            ..Default::default()
        };
        Server::new(Engine::new(db, cfg).unwrap())
    }

    fn call(s: &Server, line: &str) -> Value {
        serde_json::from_str(&s.handle_line(line)).unwrap()
    }

    #[test]
    fn query_then_refresh_then_free() {
        let s = server(1.0);
        let r = call(&s, r#"{"id":"a","query":{"c1":["1"]}}"#);
        assert_eq!(r["id"], "a");
        assert_eq!(r["path"], "benchmark");
        assert_eq!(r["charged"], 0.1);
        let r = call(&s, r#"{"op":"refresh","u":1}"#);
        assert_eq!(r["status"], "ok");
        assert_eq!(r["new_algebras"], 1);
        let r = call(&s, r#"{"id":"b","query":"c1 IN {1}"}"#);
        assert_eq!(r["path"], "sigma");
        assert_eq!(r["charged"], 0.0);
        let st = call(&s, r#"{"op":"stats"}"#);
        assert_eq!(st["covered"], 1);
        assert_eq!(st["uncovered"], 1);
        assert_eq!(st["p"], 0.5);
    }

    #[test]
    fn refusal_is_reported() {
        let s = server(0.1);
        call(&s, r#"{"id":1,"query":{}}"#);
        let r = call(&s, r#"{"id":2,"query":{"c2":["0"]}}"#);
        assert_eq!(r["path"], "refused");
        assert!(r["value"].is_null());
        assert_eq!(r["id"], 2);
    }

    #[test]
    fn sessions_and_deltas() {
        let s = server(10.0);
        let r = call(
            &s,
            r#"{"op":"open_session","query":{"c1":["1"]},"eps":0.5,"rho":0,"T":5}"#,
        );
        let sid = r["session"].as_u64().unwrap();
        let base = r["value"].as_f64().unwrap();
        assert_eq!(r["charged"], 0.5);
        let r = call(
            &s,
            r#"{"op":"apply_delta","kind":"insert","row":["1","1"]}"#,
        );
        assert_eq!(r["n"], 21);
        let r = call(&s, &format!(r#"{{"op":"respond","session":{sid}}}"#));
        assert_eq!(r["value"].as_f64().unwrap(), base + 1.0);
    }

    #[test]
    fn bad_requests_get_errors() {
        let s = server(1.0);
        assert!(call(&s, "not json")["error"].is_string());
        assert!(call(&s, r#"{"id":"x","query":{"zz":["1"]}}"#)["error"].is_string());
        assert!(call(&s, r#"{"op":"nope"}"#)["error"].is_string());
        assert!(call(&s, r#"{"op":"respond","session":42}"#)["error"].is_string());
    }

    #[test]
    fn stream_mode_answers_each_line() {
        let s = server(1.0);
        let input = "{\"id\":1,\"query\":{}}\n\n{\"op\":\"stats\"}\n";
        let mut out = Vec::new();
        s.serve_stream(input.as_bytes(), &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 2);
    }
}
