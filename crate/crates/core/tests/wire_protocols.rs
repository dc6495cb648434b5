//! Wire-level checks for the remote embedding protocol and the chat client,
//! against a single-shot loopback HTTP stub.

use std::io::{Read, Write};
use std::net::TcpListener;
use std::sync::Arc;
use std::thread;

use ifir_core::embedding::{EmbeddingProvider, RemoteConfig, RemoteEmbedder};
use ifir_core::synth::{ChatClient, ChatClientConfig, ChatRequest, HttpChatClient};

/// Serves one HTTP request with the given JSON body; returns the request
/// text seen by the server.
fn one_shot_server(body: &'static str) -> (String, thread::JoinHandle<String>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let handle = thread::spawn(move || {
        let (mut stream, _) = listener.accept().unwrap();
        let mut buf = vec![0u8; 65536];
        let mut seen = Vec::new();
        // Read until the JSON body is complete (headers + content-length).
        loop {
            let n = stream.read(&mut buf).unwrap();
            seen.extend_from_slice(&buf[..n]);
            let text = String::from_utf8_lossy(&seen);
            if let Some(header_end) = text.find("\r\n\r\n") {
                let content_length = text
                    .lines()
                    .find_map(|l| l.to_ascii_lowercase().strip_prefix("content-length: ").map(str::to_string))
                    .and_then(|v| v.trim().parse::<usize>().ok())
                    .unwrap_or(0);
                if seen.len() >= header_end + 4 + content_length {
                    break;
                }
            }
            if n == 0 {
                break;
            }
        }
        let response = format!(
            "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{}",
            body.len(),
            body
        );
        stream.write_all(response.as_bytes()).unwrap();
        String::from_utf8_lossy(&seen).to_string()
    });
    (format!("http://{addr}"), handle)
}

#[test]
fn remote_embedder_parses_single_vector_responses_in_order() {
    let (url, server) = one_shot_server(
        r#"{"data":[{"embedding":[1.0,0.0,0.0]},{"embedding":[0.0,1.0,0.0]}]}"#,
    );
    let cfg = RemoteConfig {
        endpoint_url: url,
        model_name: "stub-embedder".into(),
        api_key_env: None,
        timeout_secs: 5,
        max_attempts: 1,
        backoff_secs: 0.0,
        max_batch: 16,
    };
    let provider = RemoteEmbedder::new(cfg, 3).unwrap();
    let out = provider.embed_batch(&["first text", "second text"]).unwrap();
    assert_eq!(out.len(), 2);
    assert_eq!(out[0].token_count(), 1);
    assert_eq!(out[0].rows()[[0, 0]], 1.0);
    assert_eq!(out[1].rows()[[0, 1]], 1.0);

    let request = server.join().unwrap();
    assert!(request.contains("\"model\":\"stub-embedder\""));
    assert!(request.contains("\"input\":[\"first text\",\"second text\"]"));
}

#[test]
fn chat_client_sends_messages_and_reads_first_choice() {
    let (url, server) =
        one_shot_server(r#"{"choices":[{"message":{"content":"Instruction: focus on depth"}}]}"#);
    std::env::set_var("IFIR_TEST_CHAT_KEY", "sekrit");
    let cfg = ChatClientConfig {
        endpoint_url: url,
        model_name: "stub-chat".into(),
        api_key_env: "IFIR_TEST_CHAT_KEY".into(),
        max_parallel: 1,
        timeout_secs: 5,
        max_attempts: 1,
        backoff_secs: 0.0,
        temperature: 0.2,
    };
    let client = HttpChatClient::new(cfg).unwrap();
    let response = client
        .complete(&ChatRequest {
            template: "instruction_synthesis_pos".into(),
            family_id: "fam-1".into(),
            prompt: "write an instruction".into(),
            judge: None,
        })
        .unwrap();
    assert_eq!(response, "Instruction: focus on depth");

    let request = server.join().unwrap();
    assert!(request.contains("authorization: Bearer sekrit") || request.contains("Authorization: Bearer sekrit"));
    assert!(request.contains("\"model\":\"stub-chat\""));
    assert!(request.contains("\"role\":\"user\""));
    assert!(request.contains("\"temperature\":0.2"));
}

#[test]
fn missing_api_key_env_names_the_variable() {
    let cfg = ChatClientConfig {
        endpoint_url: "http://127.0.0.1:1".into(),
        model_name: "m".into(),
        api_key_env: "IFIR_TEST_UNSET_KEY_VAR".into(),
        max_parallel: 1,
        timeout_secs: 5,
        max_attempts: 1,
        backoff_secs: 0.0,
        temperature: 0.0,
    };
    let err = HttpChatClient::new(cfg).err().expect("must fail");
    assert!(err.to_string().contains("IFIR_TEST_UNSET_KEY_VAR"));
}

/// A provider wrapper that counts embed calls.
struct CountingProvider {
    inner: ifir_core::embedding::HashEmbedder,
    calls: std::sync::atomic::AtomicUsize,
}

impl EmbeddingProvider for CountingProvider {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn embed(&self, text: &str) -> ifir_core::Result<ifir_core::embedding::TokenMatrix> {
        self.calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        self.inner.embed(text)
    }
}

// Marginal sampling keeps encoder work linear per anchor: a batch of 8 rows
// materializes 8x8 tables from at most B^2 + B provider calls under the
// concat interaction, nowhere near the 8^3 full enumeration.
#[test]
fn bundle_construction_is_linear_per_anchor() {
    use ifir_core::fusion::{init_params, InitScheme};
    use ifir_core::model::{Interaction, ScoringModel};
    use ifir_core::objectives::{build_score_bundle, BatchRow};

    let counting = Arc::new(CountingProvider {
        inner: ifir_core::embedding::HashEmbedder::new(8, 0),
        calls: std::sync::atomic::AtomicUsize::new(0),
    });
    let params = init_params(8, 1, InitScheme::UniformFan, false).unwrap();
    let model = ScoringModel::new(
        params,
        Interaction::Concat,
        ifir_core::embedding::Pooling::Mean,
        1.0,
        counting.clone(),
        counting.clone(),
        "counting",
    )
    .unwrap();
    let rows: Vec<BatchRow> = (0..8)
        .map(|i| BatchRow {
            passage: format!("passage {i} body"),
            instruction: format!("instruction {i}"),
            query: format!("query {i}"),
        })
        .collect();
    let bundle = build_score_bundle(&rows, &model).unwrap();
    assert_eq!(bundle.batch_size(), 8);
    for t in bundle.tables() {
        assert_eq!((t.nrows(), t.ncols()), (8, 8));
    }
    let calls = counting.calls.load(std::sync::atomic::Ordering::SeqCst);
    assert!(
        calls <= 8 * 8 + 8,
        "expected at most B^2 + B = 72 embed calls, saw {calls}"
    );
    assert!(calls < 512, "cubic enumeration detected: {calls} calls");
}
