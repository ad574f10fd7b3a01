//! Request bodies and response envelopes of the supported chat APIs.

use serde_json::{json, Value};

use super::{TokenUsage, WireFormat};

pub const ANTHROPIC_VERSION: &str = "2023-06-01";

pub struct WireRequest {
    pub headers: Vec<(String, String)>,
    pub body: Value,
}

pub fn build_request(
    format: WireFormat,
    model: &str,
    prompt: &str,
    temperature: f64,
    max_tokens: u32,
    api_key: &str,
) -> WireRequest {
    let messages = json!([{ "role": "user", "content": prompt }]);
    match format {
        WireFormat::OpenaiChat => WireRequest {
            headers: vec![("authorization".into(), format!("Bearer {api_key}"))],
            body: json!({
                "model": model,
                "messages": messages,
                "temperature": temperature,
                "max_tokens": max_tokens,
            }),
        },
        WireFormat::AnthropicMessages => WireRequest {
            headers: vec![
                ("x-api-key".into(), api_key.to_owned()),
                ("anthropic-version".into(), ANTHROPIC_VERSION.into()),
            ],
            body: json!({
                "model": model,
                "max_tokens": max_tokens,
                "temperature": temperature,
                "messages": messages,
            }),
        },
        WireFormat::Mock => WireRequest {
            headers: Vec::new(),
            body: Value::Null,
        },
    }
}

/// Pulls the completion text (and usage, when reported) out of a response body.
pub fn extract_text(format: WireFormat, body: &str) -> Result<(String, Option<TokenUsage>), String> {
    let value: Value = serde_json::from_str(body).map_err(|e| format!("response is not JSON: {e}"))?;
    let (text, usage) = match format {
        WireFormat::OpenaiChat => (
            value.pointer("/choices/0/message/content"),
            value.get("usage").map(|u| TokenUsage {
                input_tokens: u["prompt_tokens"].as_u64().unwrap_or(0),
                output_tokens: u["completion_tokens"].as_u64().unwrap_or(0),
            }),
        ),
        WireFormat::AnthropicMessages => (
            value.pointer("/content/0/text"),
            value.get("usage").map(|u| TokenUsage {
                input_tokens: u["input_tokens"].as_u64().unwrap_or(0),
                output_tokens: u["output_tokens"].as_u64().unwrap_or(0),
            }),
        ),
        WireFormat::Mock => return Err("mock provider has no wire envelope".into()),
    };
    let text = text
        .and_then(Value::as_str)
        .ok_or_else(|| "completion text not found in response envelope".to_string())?;
    Ok((text.to_owned(), usage))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn openai_shape() {
        let req = build_request(WireFormat::OpenaiChat, "gpt-4", "hi", 0.7, 1024, "k");
        assert_eq!(req.body["messages"][0]["content"], "hi");
        assert_eq!(req.body["max_tokens"], 1024);
        assert_eq!(req.headers[0].1, "Bearer k");
        let (text, usage) = extract_text(
            WireFormat::OpenaiChat,
            r#"{"choices":[{"message":{"role":"assistant","content":"ok"}}],"usage":{"prompt_tokens":3,"completion_tokens":1}}"#,
        )
        .unwrap();
        assert_eq!(text, "ok");
        assert_eq!(usage.unwrap().input_tokens, 3);
    }

    #[test]
    fn anthropic_shape() {
        let req = build_request(WireFormat::AnthropicMessages, "claude", "hi", 0.0, 512, "k");
        assert_eq!(req.body["model"], "claude");
        assert!(req.headers.iter().any(|(h, v)| h == "anthropic-version" && v == ANTHROPIC_VERSION));
        let (text, _) =
            extract_text(WireFormat::AnthropicMessages, r#"{"content":[{"type":"text","text":"yo"}]}"#).unwrap();
        assert_eq!(text, "yo");
        assert!(extract_text(WireFormat::AnthropicMessages, r#"{"content":[]}"#).is_err());
        assert!(extract_text(WireFormat::OpenaiChat, "<html>").is_err());
    }
}
