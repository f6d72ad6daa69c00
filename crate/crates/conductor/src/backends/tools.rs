//! Tool services: the per-execution gateway that enforces call limits, a
//! scripted in-process service for simulation, and an HTTP client speaking
//! the tool-microservice wire protocol.
//!
//! Wire protocol: `POST {base}/call` with `{"tool": ..., "arguments": ...}`
//! answered by `{"ok": true, "result": ...}` or `{"ok": false, "error": ...}`;
//! `GET {base}/tools` answers `{"tools": [...]}`.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde_json::{json, Value};
use thiserror::Error;

use crate::executor::{LimiterDeny, ToolCallLimiter, ToolLimits, ToolTraceEntry};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ToolServiceError {
    #[error("tool call timed out")]
    Timeout,
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("tool error: {0}")]
    Tool(String),
}

/// A service exposing named tools. Implementations must tolerate concurrent
/// invocation across executions.
pub trait ToolService: Send + Sync {
    fn list_tools(&self) -> Result<Vec<String>, ToolServiceError>;
    fn call(&self, tool: &str, arguments: &Value) -> Result<Value, ToolServiceError>;
}

/// Placeholder service for registries without tools; every call fails.
pub struct NullToolService;

impl ToolService for NullToolService {
    fn list_tools(&self) -> Result<Vec<String>, ToolServiceError> {
        Ok(Vec::new())
    }

    fn call(&self, tool: &str, _arguments: &Value) -> Result<Value, ToolServiceError> {
        Err(ToolServiceError::Tool(format!(
            "no tool service registered (requested `{tool}`)"
        )))
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ToolCallError {
    #[error("denied by limiter: {0}")]
    Denied(LimiterDeny),
    #[error(transparent)]
    Service(ToolServiceError),
}

/// Per-execution tool access: consults the call limiter before anything
/// reaches the wire and records every outcome in the execution's tool trace.
pub struct ToolGateway {
    service: Arc<dyn ToolService>,
    limiter: ToolCallLimiter,
    trace: Vec<ToolTraceEntry>,
}

impl ToolGateway {
    pub fn new(service: Arc<dyn ToolService>, limits: ToolLimits) -> Self {
        Self {
            service,
            limiter: ToolCallLimiter::new(limits),
            trace: Vec::new(),
        }
    }

    pub fn call(&mut self, tool: &str, arguments: &Value) -> Result<Value, ToolCallError> {
        if let Err(deny) = self.limiter.record_tool_call(tool) {
            self.trace
                .push(ToolTraceEntry::new(tool, format!("denied: {deny}")));
            return Err(ToolCallError::Denied(deny));
        }
        match self.service.call(tool, arguments) {
            Ok(value) => {
                self.trace.push(ToolTraceEntry::new(tool, "ok"));
                Ok(value)
            }
            Err(err) => {
                let outcome = match &err {
                    ToolServiceError::Timeout => "timeout".to_string(),
                    other => format!("error: {other}"),
                };
                self.trace.push(ToolTraceEntry::new(tool, outcome));
                Err(ToolCallError::Service(err))
            }
        }
    }

    pub fn list_tools(&self) -> Result<Vec<String>, ToolServiceError> {
        self.service.list_tools()
    }

    pub fn limiter(&self) -> &ToolCallLimiter {
        &self.limiter
    }

    /// Appends an engine-level marker (not a tool call) to the trace.
    pub fn record_marker(&mut self, outcome: impl Into<String>) {
        self.trace.push(ToolTraceEntry::engine_marker(outcome));
    }

    pub fn trace(&self) -> &[ToolTraceEntry] {
        &self.trace
    }

    pub fn into_trace(self) -> Vec<ToolTraceEntry> {
        self.trace
    }
}

/// Behavior of one scripted tool.
#[derive(Debug, Clone)]
pub enum ToolScript {
    /// Returns the request arguments unchanged.
    Echo,
    /// Returns a fixed value.
    Fixed(Value),
    /// Fails with a server-side error message.
    Fail(String),
    /// Takes `delay` before answering `null`; exceeds the service deadline
    /// and turns into a timeout when `delay > deadline`.
    Stall { delay: Duration },
}

/// Deterministic in-process tool service for simulation and tests.
pub struct ScriptedToolServer {
    tools: BTreeMap<String, ToolScript>,
    deadline: Duration,
    calls_received: AtomicU64,
}

impl ScriptedToolServer {
    pub fn new(deadline: Duration) -> Self {
        Self {
            tools: BTreeMap::new(),
            deadline,
            calls_received: AtomicU64::new(0),
        }
    }

    pub fn with_tool(mut self, name: impl Into<String>, script: ToolScript) -> Self {
        self.tools.insert(name.into(), script);
        self
    }

    /// Number of calls that reached the service (denied calls never do).
    pub fn calls_received(&self) -> u64 {
        self.calls_received.load(Ordering::SeqCst)
    }
}

impl ToolService for ScriptedToolServer {
    fn list_tools(&self) -> Result<Vec<String>, ToolServiceError> {
        Ok(self.tools.keys().cloned().collect())
    }

    fn call(&self, tool: &str, arguments: &Value) -> Result<Value, ToolServiceError> {
        self.calls_received.fetch_add(1, Ordering::SeqCst);
        match self.tools.get(tool) {
            None => Err(ToolServiceError::Tool(format!("unknown tool `{tool}`"))),
            Some(ToolScript::Echo) => Ok(arguments.clone()),
            Some(ToolScript::Fixed(value)) => Ok(value.clone()),
            Some(ToolScript::Fail(message)) => Err(ToolServiceError::Tool(message.clone())),
            Some(ToolScript::Stall { delay }) => {
                if *delay > self.deadline {
                    Err(ToolServiceError::Timeout)
                } else {
                    Ok(Value::Null)
                }
            }
        }
    }
}

/// HTTP client for a tool microservice.
pub struct HttpToolClient {
    base_url: String,
    agent: ureq::Agent,
}

impl HttpToolClient {
    pub fn new(base_url: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout_connect(timeout)
            .timeout(timeout)
            .build();
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            agent,
        }
    }

    fn map_transport(err: ureq::Error) -> ToolServiceError {
        match err {
            ureq::Error::Status(code, _) => {
                ToolServiceError::Transport(format!("http status {code}"))
            }
            ureq::Error::Transport(t) => {
                let text = t.to_string();
                if text.contains("timed out") || text.contains("timeout") {
                    ToolServiceError::Timeout
                } else {
                    ToolServiceError::Transport(text)
                }
            }
        }
    }
}

impl ToolService for HttpToolClient {
    fn list_tools(&self) -> Result<Vec<String>, ToolServiceError> {
        let response = self
            .agent
            .get(&format!("{}/tools", self.base_url))
            .call()
            .map_err(Self::map_transport)?;
        let body: Value = response
            .into_json()
            .map_err(|e| ToolServiceError::Malformed(e.to_string()))?;
        let tools = body
            .get("tools")
            .and_then(Value::as_array)
            .ok_or_else(|| ToolServiceError::Malformed("missing `tools` array".into()))?;
        tools
            .iter()
            .map(|v| {
                v.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| ToolServiceError::Malformed("non-string tool name".into()))
            })
            .collect()
    }

    fn call(&self, tool: &str, arguments: &Value) -> Result<Value, ToolServiceError> {
        let request = json!({ "tool": tool, "arguments": arguments });
        let response = self
            .agent
            .post(&format!("{}/call", self.base_url))
            .send_json(request)
            .map_err(Self::map_transport)?;
        let body: Value = response
            .into_json()
            .map_err(|e| ToolServiceError::Malformed(e.to_string()))?;
        match body.get("ok").and_then(Value::as_bool) {
            Some(true) => Ok(body.get("result").cloned().unwrap_or(Value::Null)),
            Some(false) => {
                let message = body
                    .get("error")
                    .and_then(Value::as_str)
                    .unwrap_or("unspecified tool error");
                Err(ToolServiceError::Tool(message.to_string()))
            }
            None => Err(ToolServiceError::Malformed("missing `ok` field".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gateway(server: Arc<ScriptedToolServer>) -> ToolGateway {
        ToolGateway::new(server, ToolLimits::default())
    }

    #[test]
    fn echo_tool_returns_arguments() {
        let server = Arc::new(
            ScriptedToolServer::new(Duration::from_secs(5)).with_tool("echo", ToolScript::Echo),
        );
        let mut gw = gateway(server);
        let args = json!({"k": [1, 2, 3]});
        assert_eq!(gw.call("echo", &args).unwrap(), args);
        assert_eq!(gw.trace()[0].outcome, "ok");
    }

    #[test]
    fn stalling_tool_times_out_past_deadline() {
        let server = Arc::new(
            ScriptedToolServer::new(Duration::from_millis(100)).with_tool(
                "slow",
                ToolScript::Stall {
                    delay: Duration::from_millis(500),
                },
            ),
        );
        let mut gw = gateway(server);
        assert_eq!(
            gw.call("slow", &Value::Null),
            Err(ToolCallError::Service(ToolServiceError::Timeout))
        );
        assert_eq!(gw.trace()[0].outcome, "timeout");
    }

    #[test]
    fn denied_call_never_reaches_the_service() {
        let server = Arc::new(
            ScriptedToolServer::new(Duration::from_secs(1)).with_tool("t", ToolScript::Echo),
        );
        let limits = ToolLimits {
            max_consecutive_same_tool: 10,
            max_total_tool_calls: 50,
        };
        let mut gw = ToolGateway::new(server.clone(), limits);
        for _ in 0..10 {
            gw.call("t", &Value::Null).unwrap();
        }
        let denied = gw.call("t", &Value::Null);
        assert!(matches!(
            denied,
            Err(ToolCallError::Denied(LimiterDeny::Consecutive { .. }))
        ));
        assert_eq!(server.calls_received(), 10);
        assert!(gw.trace().last().unwrap().outcome.starts_with("denied"));
    }

    #[test]
    fn unknown_tool_is_a_tool_error() {
        let server = Arc::new(ScriptedToolServer::new(Duration::from_secs(1)));
        let mut gw = gateway(server);
        assert!(matches!(
            gw.call("nope", &Value::Null),
            Err(ToolCallError::Service(ToolServiceError::Tool(_)))
        ));
    }
}
