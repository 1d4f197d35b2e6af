use std::thread;
use std::time::Duration;

use log::{debug, warn};
use serde::Deserialize;
use serde_json::json;

use super::{ChatClient, ChatRequest, ChatResponse, ClientConfig, LlmError, TokenLogprobs};

/// Blocking client for an OpenAI-compatible chat-completions endpoint.
pub struct HttpClient {
    agent: ureq::Agent,
    config: ClientConfig,
    api_key: String,
}

impl HttpClient {
    /// Reads the bearer token from the environment variable named in the
    /// config.
    pub fn new(config: ClientConfig) -> Result<Self, LlmError> {
        let key = std::env::var(&config.api_key_env)
            .map_err(|_| LlmError::MissingKey(config.api_key_env.clone()))?;
        Ok(Self::with_key(config, key))
    }

    pub fn with_key(config: ClientConfig, api_key: impl Into<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            agent,
            config,
            api_key: api_key.into(),
        }
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    fn attempt(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let mut body = json!({
            "model": request.model,
            "messages": request.messages,
            "temperature": request.temperature,
        });
        if request.want_logprobs {
            body["logprobs"] = json!(true);
            body["top_logprobs"] = json!(request.top_logprobs);
        }
        let resp = self
            .agent
            .post(&self.config.endpoint)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(&body)
            .map_err(map_transport)?;
        let status = resp.status().as_u16();
        let text = resp
            .into_body()
            .read_to_string()
            .map_err(map_transport)?;
        match status {
            200..=299 => parse_completion(&text),
            401 | 403 => Err(LlmError::Auth(status)),
            429 => Err(LlmError::RateLimited),
            500..=599 => Err(LlmError::Server(status)),
            _ => Err(LlmError::Http {
                status,
                body: text.chars().take(500).collect(),
            }),
        }
    }
}

impl ChatClient for HttpClient {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        request.validate()?;
        let mut attempt = 0u32;
        loop {
            match self.attempt(request) {
                Err(e) if e.is_transient() && attempt < self.config.retries => {
                    let pause = backoff(self.config.backoff, attempt);
                    warn!("{e}; retry {} of {} in {pause:?}", attempt + 1, self.config.retries);
                    thread::sleep(pause);
                    attempt += 1;
                }
                other => {
                    debug!("completion finished after {} attempt(s)", attempt + 1);
                    return other;
                }
            }
        }
    }
}

fn backoff(base: Duration, attempt: u32) -> Duration {
    base.saturating_mul(1 << attempt.min(10))
}

fn map_transport(e: ureq::Error) -> LlmError {
    match e {
        ureq::Error::Timeout(_) => LlmError::Timeout,
        other => LlmError::Transport(other.to_string()),
    }
}

#[derive(Deserialize)]
struct Completion {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
    #[serde(default)]
    logprobs: Option<ChoiceLogprobs>,
}

#[derive(Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChoiceLogprobs {
    #[serde(default)]
    content: Option<Vec<WireToken>>,
}

#[derive(Deserialize)]
struct WireToken {
    token: String,
    logprob: f64,
    #[serde(default)]
    top_logprobs: Vec<WireAlt>,
}

#[derive(Deserialize)]
struct WireAlt {
    token: String,
    logprob: f64,
}

/// Decodes a chat-completions response body.
pub(crate) fn parse_completion(body: &str) -> Result<ChatResponse, LlmError> {
    let c: Completion = serde_json::from_str(body).map_err(|e| LlmError::Decode(e.to_string()))?;
    let choice = c
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| LlmError::Decode("no choices".into()))?;
    let token_logprobs = choice.logprobs.and_then(|l| l.content).map(|toks| {
        toks.into_iter()
            .map(|t| TokenLogprobs {
                token: t.token,
                logprob: t.logprob,
                top_logprobs: t
                    .top_logprobs
                    .into_iter()
                    .map(|a| (a.token, a.logprob))
                    .collect(),
            })
            .collect()
    });
    Ok(ChatResponse {
        content: choice.message.content.unwrap_or_default(),
        token_logprobs,
    })
}

#[cfg(test)]
pub(crate) mod stub {
    //! A tiny HTTP/1.1 server answering canned responses in order.

    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::{Arc, Mutex};
    use std::thread;

    pub struct Stub {
        pub url: String,
        pub hits: Arc<Mutex<Vec<String>>>,
    }

    pub fn serve(replies: Vec<(u16, String)>) -> Stub {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let hits = Arc::new(Mutex::new(Vec::new()));
        let log = hits.clone();
        thread::spawn(move || {
            for (status, body) in replies {
                let Ok((stream, _)) = listener.accept() else {
                    return;
                };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 {
                        break;
                    }
                    let l = line.to_ascii_lowercase();
                    if let Some(v) = l.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap_or(0);
                    }
                    if line == "\r\n" {
                        break;
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).ok();
                log.lock().unwrap().push(String::from_utf8_lossy(&buf).into_owned());
                let mut stream = stream;
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                )
                .ok();
            }
        });
        Stub { url, hits }
    }
}
