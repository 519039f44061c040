//! Client for a local model server's completion endpoint.

use std::time::{Duration, Instant};

use serde_json::{json, Value};

use super::{GenerationError, GenerationRequest, GenerationResult, Generator, GeneratorConfig, TokenCounts};

#[derive(Debug, Clone)]
pub struct LiveGenerator {
    config: GeneratorConfig,
    client: reqwest::blocking::Client,
}

impl LiveGenerator {
    pub fn new(config: GeneratorConfig) -> Result<Self, GenerationError> {
        config.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.request_timeout_seconds))
            .build()
            .map_err(|e| GenerationError::Misconfigured(e.to_string()))?;
        Ok(Self { config, client })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    /// Request body for one stateless completion: no context, no session id.
    pub fn request_body(&self, prompt: &str) -> Value {
        let mut options = json!({ "temperature": self.config.temperature });
        let mut body = json!({
            "model": self.config.model_name,
            "prompt": prompt,
            "system": self.config.system_prompt,
            "temperature": self.config.temperature,
            "stream": false,
        });
        if let Some(max) = self.config.max_tokens {
            options["num_predict"] = json!(max);
            body["max_tokens"] = json!(max);
        }
        body["options"] = options;
        body
    }
}

fn lookup<'a>(value: &'a Value, path: &str) -> Option<&'a Value> {
    path.split('.').try_fold(value, |v, key| match key.parse::<usize>() {
        Ok(i) if v.is_array() => v.get(i),
        _ => v.get(key),
    })
}

impl Generator for LiveGenerator {
    fn generate(&self, request: &GenerationRequest<'_>) -> Result<GenerationResult, GenerationError> {
        let started = Instant::now();
        let response = self
            .client
            .post(&self.config.endpoint_url)
            .json(&self.request_body(request.prompt))
            .send()
            .map_err(|e| GenerationError::Transport(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            let text = response.text().unwrap_or_default();
            return Err(GenerationError::Transport(format!("HTTP {status}: {}", text.trim())));
        }
        let payload: Value = response
            .json()
            .map_err(|e| GenerationError::Transport(format!("unreadable response: {e}")))?;
        let text = match lookup(&payload, &self.config.response_field) {
            Some(Value::String(s)) => s.clone(),
            Some(Value::Null) | None => String::new(),
            Some(other) => other.to_string(),
        };
        let mut result = GenerationResult::from_raw(text, started.elapsed());
        result.tokens = TokenCounts {
            prompt: payload.get("prompt_eval_count").and_then(Value::as_u64),
            completion: payload.get("eval_count").and_then(Value::as_u64),
        };
        Ok(result)
    }
}

#[cfg(test)]
mod tests {
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::thread;

    use super::*;

    /// Serve canned HTTP responses, returning the request bodies received.
    fn serve(responses: Vec<(u16, String)>) -> (String, thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/api/generate", listener.local_addr().unwrap());
        let handle = thread::spawn(move || {
            let mut bodies = Vec::new();
            for (status, body) in responses {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                bodies.push(String::from_utf8(buf).unwrap());
                let mut stream = stream;
                write!(
                    stream,
                    "HTTP/1.1 {status} OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
            bodies
        });
        (url, handle)
    }

    #[test]
    fn sends_stateless_request_and_extracts_code() {
        let (url, server) = serve(vec![
            (200, r#"{"response":"```python\ndef f(): pass\n```","prompt_eval_count":12,"eval_count":7}"#.into()),
            (200, r#"{"response":"```python\ndef g(): pass\n```"}"#.into()),
        ]);
        let gen = LiveGenerator::new(GeneratorConfig::new(url, "yi-coder:9b")).unwrap();
        let req = GenerationRequest {
            node_id: "g_impl",
            attempt: 1,
            prompt: "Write f",
        };
        let r = gen.generate(&req).unwrap();
        assert_eq!(r.extracted_code.as_deref(), Some("def f(): pass"));
        assert_eq!(r.tokens.prompt, Some(12));
        gen.generate(&req).unwrap();

        let bodies = server.join().unwrap();
        let first: Value = serde_json::from_str(&bodies[0]).unwrap();
        assert_eq!(first["model"], "yi-coder:9b");
        assert_eq!(first["prompt"], "Write f");
        assert_eq!(first["temperature"], 0.7);
        assert_eq!(first["stream"], false);
        assert!(first["system"].as_str().unwrap().contains("fenced code block"));
        // identical requests: no hidden session state leaks into the second call
        assert_eq!(bodies[0], bodies[1]);
    }

    #[test]
    fn http_error_is_transport_failure() {
        let (url, server) = serve(vec![(500, r#"{"error":"model not loaded"}"#.into())]);
        let gen = LiveGenerator::new(GeneratorConfig::new(url, "m")).unwrap();
        let err = gen
            .generate(&GenerationRequest {
                node_id: "n",
                attempt: 1,
                prompt: "p",
            })
            .unwrap_err();
        assert!(matches!(err, GenerationError::Transport(ref m) if m.contains("500")));
        server.join().unwrap();
    }

    #[test]
    fn unreachable_endpoint_is_transport_failure() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/api/generate", listener.local_addr().unwrap());
        drop(listener);
        let gen = LiveGenerator::new(GeneratorConfig::new(url, "m")).unwrap();
        let err = gen
            .generate(&GenerationRequest {
                node_id: "n",
                attempt: 1,
                prompt: "p",
            })
            .unwrap_err();
        assert!(matches!(err, GenerationError::Transport(_)));
    }

    #[test]
    fn configurable_response_field_and_empty_reply() {
        let (url, server) = serve(vec![
            (200, r#"{"choices":[{"text":"```\nx = 1\n```"}]}"#.into()),
            (200, r#"{"response":""}"#.into()),
        ]);
        let mut cfg = GeneratorConfig::new(url.clone(), "m");
        cfg.response_field = "choices.0.text".into();
        let gen = LiveGenerator::new(cfg).unwrap();
        let req = GenerationRequest {
            node_id: "n",
            attempt: 1,
            prompt: "p",
        };
        assert_eq!(gen.generate(&req).unwrap().extracted_code.as_deref(), Some("x = 1"));
        let gen = LiveGenerator::new(GeneratorConfig::new(url, "m")).unwrap();
        assert!(!gen.generate(&req).unwrap().qualified());
        server.join().unwrap();
    }

    #[test]
    fn max_tokens_forwarded() {
        let mut cfg = GeneratorConfig::new("http://127.0.0.1:1", "m");
        cfg.max_tokens = Some(256);
        let body = LiveGenerator::new(cfg).unwrap().request_body("p");
        assert_eq!(body["options"]["num_predict"], 256);
        assert_eq!(body["options"]["temperature"], 0.7);
    }
}
