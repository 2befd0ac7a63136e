//! Blocking JSON-over-HTTP backend.
//!
//! Default wire format: `POST {"prompt", "temperature", "max_tokens", "stop"}`,
//! reply `{"text": ...}`. A request template and a JSON pointer into the reply
//! adapt this to other servers (for example chat-completions endpoints).

use std::time::Duration;

use serde_json::{json, Value};

use super::{LanguageModel, LmError, LmRequest};

#[derive(Debug, Clone, PartialEq)]
pub struct HttpConfig {
    pub url: String,
    pub timeout: Duration,
    pub max_retries: u32,
    pub backoff: Duration,
    /// JSON body with `$prompt`, `$temperature`, `$max_tokens`, `$stop`,
    /// `$seed` and `$role` markers. A string that is exactly a marker is
    /// replaced by the typed value; markers inside longer strings are
    /// replaced textually.
    pub request_template: Option<Value>,
    pub response_pointer: String,
}

impl HttpConfig {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            timeout: Duration::from_millis(30_000),
            max_retries: 3,
            backoff: Duration::from_millis(250),
            request_template: None,
            response_pointer: "/text".to_string(),
        }
    }

    /// Reads `BAGEL_LM_URL` and `BAGEL_LM_TIMEOUT_MS` through `lookup`.
    pub fn from_env(lookup: impl Fn(&str) -> Option<String>) -> Result<Self, LmError> {
        let url = lookup("BAGEL_LM_URL").ok_or_else(|| LmError::Config("BAGEL_LM_URL is not set".into()))?;
        let mut cfg = Self::new(url);
        if let Some(ms) = lookup("BAGEL_LM_TIMEOUT_MS") {
            let ms: u64 = ms
                .trim()
                .parse()
                .map_err(|_| LmError::Config(format!("BAGEL_LM_TIMEOUT_MS is not an integer: {ms:?}")))?;
            cfg.timeout = Duration::from_millis(ms);
        }
        Ok(cfg)
    }
}

pub struct HttpBackend {
    config: HttpConfig,
    client: reqwest::blocking::Client,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend").field("config", &self.config).finish()
    }
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self, LmError> {
        if config.url.trim().is_empty() {
            return Err(LmError::Config("empty LM URL".into()));
        }
        if !config.response_pointer.is_empty() && !config.response_pointer.starts_with('/') {
            return Err(LmError::Config(format!(
                "response pointer must start with '/': {:?}",
                config.response_pointer
            )));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| LmError::Config(e.to_string()))?;
        Ok(Self { config, client })
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }

    fn body(&self, req: &LmRequest) -> Value {
        match &self.config.request_template {
            None => json!({
                "prompt": req.prompt,
                "temperature": req.temperature,
                "max_tokens": req.max_tokens,
                "stop": req.stop,
            }),
            Some(t) => fill(t, req),
        }
    }

    fn extract(&self, body: &str) -> Result<String, LmError> {
        let v: Value =
            serde_json::from_str(body).map_err(|e| LmError::MalformedResponse(format!("reply is not JSON: {e}")))?;
        match v.pointer(&self.config.response_pointer) {
            Some(Value::String(s)) => Ok(s.clone()),
            Some(other) => Err(LmError::MalformedResponse(format!(
                "{} is not a string: {other}",
                self.config.response_pointer
            ))),
            None => Err(LmError::MalformedResponse(format!(
                "reply has no {}",
                self.config.response_pointer
            ))),
        }
    }
}

fn fill(template: &Value, req: &LmRequest) -> Value {
    let role = req.meta.role.as_str();
    match template {
        Value::String(s) => match s.as_str() {
            "$prompt" => json!(req.prompt),
            "$temperature" => json!(req.temperature),
            "$max_tokens" => json!(req.max_tokens),
            "$stop" => json!(req.stop),
            "$seed" => json!(req.meta.sample_key),
            "$role" => json!(role),
            _ => Value::String(
                s.replace("$prompt", &req.prompt)
                    .replace("$role", role)
                    .replace("$seed", &req.meta.sample_key.to_string()),
            ),
        },
        Value::Array(items) => Value::Array(items.iter().map(|v| fill(v, req)).collect()),
        Value::Object(map) => Value::Object(map.iter().map(|(k, v)| (k.clone(), fill(v, req))).collect()),
        other => other.clone(),
    }
}

impl LanguageModel for HttpBackend {
    fn generate(&self, req: &LmRequest) -> Result<String, LmError> {
        let body = self.body(req);
        let mut last = String::new();
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                std::thread::sleep(self.config.backoff * 2u32.saturating_pow(attempt - 1));
            }
            match self.client.post(&self.config.url).json(&body).send() {
                Ok(resp) => {
                    let status = resp.status();
                    let text = resp.text().unwrap_or_default();
                    if status.is_success() {
                        return self.extract(&text);
                    }
                    last = format!("HTTP {status}: {}", text.chars().take(200).collect::<String>());
                    let retryable = status.is_server_error() || status.as_u16() == 429;
                    if !retryable {
                        return Err(LmError::BackendUnavailable {
                            message: last,
                            retries: attempt,
                        });
                    }
                }
                Err(e) => last = e.to_string(),
            }
        }
        Err(LmError::BackendUnavailable {
            message: last,
            retries: self.config.max_retries,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{RequestMeta, Role};
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::mpsc;

    /// Serves the given (status, body) replies in order, one per connection,
    /// and forwards each received request body.
    fn stub(replies: Vec<(u16, String)>) -> (String, mpsc::Receiver<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/complete", listener.local_addr().unwrap());
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for (status, body) in replies {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                tx.send(String::from_utf8(buf).unwrap()).ok();
                let mut stream = stream;
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
        });
        (url, rx)
    }

    fn fast(url: String) -> HttpConfig {
        HttpConfig {
            backoff: Duration::from_millis(1),
            timeout: Duration::from_secs(5),
            ..HttpConfig::new(url)
        }
    }

    fn req() -> LmRequest {
        LmRequest::new("Observation: x\nAction:", RequestMeta::new(Role::Explore).key(42))
    }

    #[test]
    fn echo_stub_returns_finish() {
        let (url, rx) = stub(vec![(200, r#"{"text": "finish\nignored"}"#.into())]);
        let lm = HttpBackend::new(fast(url)).unwrap();
        assert_eq!(lm.complete(&req()).unwrap(), "finish");
        let sent: Value = serde_json::from_str(&rx.recv().unwrap()).unwrap();
        assert_eq!(
            sent,
            json!({"prompt": "Observation: x\nAction:", "temperature": 1.0, "max_tokens": 256, "stop": ["\n"]})
        );
    }

    #[test]
    fn adapter_template_and_pointer() {
        let (url, rx) = stub(vec![(
            200,
            r#"{"choices": [{"message": {"content": "click 3"}}]}"#.into(),
        )]);
        let mut cfg = fast(url);
        cfg.request_template = Some(json!({
            "model": "m",
            "messages": [{"role": "user", "content": "$prompt"}],
            "temperature": "$temperature",
            "max_tokens": "$max_tokens",
            "stop": "$stop",
            "seed": "$seed",
            "user": "bagel-$role",
        }));
        cfg.response_pointer = "/choices/0/message/content".into();
        let lm = HttpBackend::new(cfg).unwrap();
        assert_eq!(lm.complete(&req()).unwrap(), "click 3");
        let sent: Value = serde_json::from_str(&rx.recv().unwrap()).unwrap();
        assert_eq!(sent["messages"][0]["content"], "Observation: x\nAction:");
        assert_eq!(sent["max_tokens"], 256);
        assert_eq!(sent["seed"], 42);
        assert_eq!(sent["user"], "bagel-explore");
    }

    #[test]
    fn retries_server_errors() {
        let (url, _rx) = stub(vec![
            (503, "{}".into()),
            (500, "{}".into()),
            (200, r#"{"text": "ok"}"#.into()),
        ]);
        let lm = HttpBackend::new(fast(url)).unwrap();
        assert_eq!(lm.complete(&req()).unwrap(), "ok");
    }

    #[test]
    fn gives_up_with_retry_count() {
        let (url, _rx) = stub(vec![(503, "{}".into()), (503, "{}".into())]);
        let mut cfg = fast(url);
        cfg.max_retries = 1;
        let lm = HttpBackend::new(cfg).unwrap();
        match lm.complete(&req()) {
            Err(LmError::BackendUnavailable { retries, .. }) => assert_eq!(retries, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn client_errors_are_not_retried() {
        let (url, _rx) = stub(vec![(400, r#"{"error": "bad"}"#.into())]);
        let lm = HttpBackend::new(fast(url)).unwrap();
        assert!(matches!(
            lm.complete(&req()),
            Err(LmError::BackendUnavailable { retries: 0, .. })
        ));
    }

    #[test]
    fn connection_refused() {
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let mut cfg = fast(format!("http://127.0.0.1:{port}/"));
        cfg.max_retries = 2;
        let lm = HttpBackend::new(cfg).unwrap();
        assert!(matches!(
            lm.complete(&req()),
            Err(LmError::BackendUnavailable { retries: 2, .. })
        ));
    }

    #[test]
    fn malformed_replies() {
        let (url, _rx) = stub(vec![
            (200, "not json".into()),
            (200, r#"{"output": "x"}"#.into()),
            (200, r#"{"text": 5}"#.into()),
            (200, r#"{"text": "  "}"#.into()),
        ]);
        let lm = HttpBackend::new(fast(url)).unwrap();
        for _ in 0..4 {
            assert!(matches!(lm.complete(&req()), Err(LmError::MalformedResponse(_))));
        }
    }

    #[test]
    fn config_from_env() {
        let env = |k: &str| match k {
            "BAGEL_LM_URL" => Some("http://h/x".to_string()),
            "BAGEL_LM_TIMEOUT_MS" => Some("1500".to_string()),
            _ => None,
        };
        let cfg = HttpConfig::from_env(env).unwrap();
        assert_eq!(cfg.url, "http://h/x");
        assert_eq!(cfg.timeout, Duration::from_millis(1500));
        assert!(HttpConfig::from_env(|_| None).is_err());
        assert!(HttpConfig::from_env(|k| (k == "BAGEL_LM_URL").then(|| "u".into()).or(Some("x".into()))).is_err());
    }
}
