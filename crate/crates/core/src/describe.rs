//! Figure descriptions from a vision-language endpoint, with output validation.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chat::{ChatClient, ChatEndpointConfig, ChatMessage, ContentPart};
use crate::error::{Error, Result};
use crate::prompts;

pub const DEFAULT_BANNED_OPENERS: [&str; 3] = ["Certainly", "The image depicts", "Here is a precise description"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Validation {
    Ok,
    TooShort,
    ContainsListMarkup,
    ContainsBannedPreamble,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DescribeConfig {
    pub min_chars: usize,
    /// Case-insensitive prefixes that disqualify a description.
    pub banned_openers: Vec<String>,
}

impl Default for DescribeConfig {
    fn default() -> Self {
        DescribeConfig {
            min_chars: 200,
            banned_openers: DEFAULT_BANNED_OPENERS.map(String::from).to_vec(),
        }
    }
}

fn is_list_line(line: &str) -> bool {
    let t = line.trim_start();
    if t.starts_with(['-', '*', '•', '–', '+']) && t.chars().nth(1).is_some_and(char::is_whitespace) {
        return true;
    }
    let digits = t.chars().take_while(char::is_ascii_digit).count();
    digits > 0 && t[digits..].starts_with(['.', ')']) && t[digits + 1..].starts_with(char::is_whitespace)
}

/// Pure verdict on a description: banned opener, then list markup or line breaks, then length.
pub fn validate_description(text: &str, cfg: &DescribeConfig) -> Validation {
    let t = text.trim();
    let lower = t.to_lowercase();
    if cfg.banned_openers.iter().any(|b| lower.starts_with(&b.to_lowercase())) {
        return Validation::ContainsBannedPreamble;
    }
    if t.contains(['\n', '\r', '•']) || t.lines().any(is_list_line) {
        return Validation::ContainsListMarkup;
    }
    let has_sentence = t.contains(['.', '!', '?']);
    if t.chars().count() < cfg.min_chars || !has_sentence {
        return Validation::TooShort;
    }
    Validation::Ok
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodingMeta {
    /// `None` means the endpoint default was used.
    pub temperature: Option<f64>,
    pub max_tokens: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptionResult {
    pub record_id: String,
    pub description: String,
    pub validation: Validation,
    pub model_name: String,
    pub attempts: u32,
    pub decoding: DecodingMeta,
}

fn media_type(bytes: &[u8]) -> Result<&'static str> {
    if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
        png::Decoder::new(std::io::Cursor::new(bytes))
            .read_info()
            .map_err(|e| Error::invalid(format!("undecodable PNG: {e}")))?;
        Ok("image/png")
    } else if bytes.starts_with(&[0xFF, 0xD8, 0xFF]) {
        Ok("image/jpeg")
    } else {
        Err(Error::invalid("image is neither PNG nor JPEG"))
    }
}

pub fn build_describe_prompt() -> String {
    prompts::describe_prompt()
}

/// Describes one image; a failed validation is retried once.
pub fn describe(
    record_id: &str,
    image_path: &Path,
    client: &dyn ChatClient,
    endpoint: &ChatEndpointConfig,
    cfg: &DescribeConfig,
) -> Result<DescriptionResult> {
    let bytes = std::fs::read(image_path)
        .map_err(|e| Error::invalid(format!("cannot read image {}: {e}", image_path.display())))?;
    let media = media_type(&bytes)?;
    let request = endpoint.request(vec![ChatMessage::user_parts(vec![
        ContentPart::Text {
            text: build_describe_prompt(),
        },
        ContentPart::image(media, &bytes),
    ])]);
    let mut attempts = 0;
    let (description, validation) = loop {
        attempts += 1;
        let text = client.complete(&request)?.trim().to_string();
        let verdict = validate_description(&text, cfg);
        if verdict == Validation::Ok || attempts == 2 {
            break (text, verdict);
        }
    };
    Ok(DescriptionResult {
        record_id: record_id.to_string(),
        description,
        validation,
        model_name: endpoint.model_name.clone(),
        attempts,
        decoding: DecodingMeta {
            temperature: request.temperature,
            max_tokens: request.max_tokens,
        },
    })
}

/// Describes `(record_id, image)` pairs on `jobs` workers; per-item errors are kept.
pub fn describe_all(
    items: &[(String, std::path::PathBuf)],
    client: &dyn ChatClient,
    endpoint: &ChatEndpointConfig,
    cfg: &DescribeConfig,
    jobs: usize,
) -> Result<Vec<Result<DescriptionResult>>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Infrastructure(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(|| {
        items
            .par_iter()
            .map(|(id, path)| describe(id, path, client, endpoint, cfg))
            .collect()
    }))
}
