//! Provider talking to OpenAI-compatible HTTP endpoints.
//!
//! Chat-style requests go to `{base_url}/chat/completions`, text embeddings
//! to `{base_url}/embeddings`. Image embeddings and detection use
//! `{base_url}/embeddings/image` and `{base_url}/detect`, which take a
//! base64 PNG and return plain JSON.

use std::io::Cursor;
use std::path::Path;
use std::time::Duration;

use base64::Engine;
use image::RgbImage;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    normalize_tags, ContextItem, Detection, Embedding, HierQuery, Level, Modality, ParsedQuery, PixelMask,
    PixelRect, Provider, ProviderError, Request, Response, TagResult,
};

const DESCRIBE_FRAME: &str = include_str!("../../prompts/describe_frame.txt");
const SUMMARIZE_ROOM: &str = include_str!("../../prompts/summarize_room.txt");
const SUMMARIZE_FLOOR: &str = include_str!("../../prompts/summarize_floor.txt");
const PARSE_QUERY: &str = include_str!("../../prompts/parse_query.txt");
const DECOMPOSE_QUERY: &str = include_str!("../../prompts/decompose_query.txt");
const TAG_FRAME: &str = include_str!("../../prompts/tag_frame.txt");
const ANSWER: &str = include_str!("../../prompts/answer.txt");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Models {
    pub chat: String,
    pub vision: String,
    pub embed_text: String,
    pub embed_image: String,
    pub detect: String,
}

/// Contents of `providers.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProvidersToml {
    pub base_url: String,
    /// Name of the environment variable holding the API key.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_ms: u64,
    pub models: Models,
}

fn default_timeout() -> u64 {
    30_000
}

impl ProvidersToml {
    pub fn load(path: &Path) -> Result<Self, ProviderError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ProviderError::InvalidInput(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| ProviderError::InvalidInput(format!("{}: {e}", path.display())))
    }
}

pub struct HttpProvider {
    cfg: ProvidersToml,
    api_key: Option<String>,
    agent: ureq::Agent,
}

/// Substitutes `{name}` placeholders; other braces are left alone.
fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (k, v) in vars {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}

fn png_base64(image: &RgbImage) -> String {
    let mut buf = Cursor::new(Vec::new());
    image
        .write_to(&mut buf, image::ImageFormat::Png)
        .expect("in-memory png encode");
    base64::engine::general_purpose::STANDARD.encode(buf.into_inner())
}

/// Pulls the first JSON object out of model output that may wrap it in prose
/// or code fences.
fn extract_json<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T, ProviderError> {
    let start = text.find('{');
    let end = text.rfind('}');
    match (start, end) {
        (Some(s), Some(e)) if s < e => serde_json::from_str(&text[s..=e])
            .map_err(|err| ProviderError::ParseFailure(format!("{err}: {text:?}"))),
        _ => Err(ProviderError::ParseFailure(format!("no JSON object in {text:?}"))),
    }
}

impl HttpProvider {
    pub fn new(cfg: ProvidersToml) -> Self {
        let api_key = cfg.api_key_env.as_ref().and_then(|k| std::env::var(k).ok());
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        HttpProvider { cfg, api_key, agent }
    }

    fn post(&self, path: &str, body: Value) -> Result<Value, ProviderError> {
        let url = format!("{}/{}", self.cfg.base_url.trim_end_matches('/'), path);
        let mut req = self.agent.post(&url);
        if let Some(k) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {k}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| match e {
            ureq::Error::Timeout(_) => ProviderError::Timeout,
            other => ProviderError::Transport(other.to_string()),
        })?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            let msg = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(ProviderError::from_status(status, msg));
        }
        resp.body_mut()
            .read_json::<Value>()
            .map_err(|e| ProviderError::ParseFailure(e.to_string()))
    }

    fn chat(&self, model: &str, prompt: &str, image: Option<&RgbImage>) -> Result<String, ProviderError> {
        let mut content = vec![json!({"type": "text", "text": prompt})];
        if let Some(img) = image {
            content.push(json!({
                "type": "image_url",
                "image_url": {"url": format!("data:image/png;base64,{}", png_base64(img))}
            }));
        }
        let v = self.post(
            "chat/completions",
            json!({"model": model, "temperature": 0, "messages": [{"role": "user", "content": content}]}),
        )?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| ProviderError::ParseFailure(format!("chat response without content: {v}")))
    }

    fn vector(v: &Value, pointer: &str, modality: Modality) -> Result<Embedding, ProviderError> {
        let values: Vec<f64> = v
            .pointer(pointer)
            .and_then(Value::as_array)
            .ok_or_else(|| ProviderError::ParseFailure(format!("no embedding at {pointer}")))?
            .iter()
            .map(|x| x.as_f64().ok_or_else(|| ProviderError::ParseFailure("non-numeric embedding".into())))
            .collect::<Result<_, _>>()?;
        Embedding::normalized(&values, modality).ok_or_else(|| ProviderError::ParseFailure("zero embedding".into()))
    }

    fn detect(&self, image: &RgbImage, vocabulary: &[String]) -> Result<Vec<Detection>, ProviderError> {
        #[derive(Deserialize)]
        struct Raw {
            label: String,
            #[serde(rename = "box")]
            rect: [u32; 4],
            #[serde(default)]
            mask_rle: Option<Vec<(u32, u32)>>,
            score: f64,
        }
        let v = self.post(
            "detect",
            json!({"model": self.cfg.models.detect, "image": png_base64(image), "vocabulary": vocabulary}),
        )?;
        let raw: Vec<Raw> = serde_json::from_value(v.get("detections").cloned().unwrap_or(Value::Null))
            .map_err(|e| ProviderError::ParseFailure(format!("detections: {e}")))?;
        let vocab = normalize_tags(vocabulary);
        let (w, h) = image.dimensions();
        Ok(raw
            .into_iter()
            .filter(|d| vocab.contains(&d.label.trim().to_lowercase()))
            .map(|d| {
                let rect = PixelRect { x: d.rect[0], y: d.rect[1], w: d.rect[2], h: d.rect[3] }.clip(w, h);
                let mask = match d.mask_rle {
                    Some(runs) => PixelMask { width: w, height: h, runs }.intersect_rect(rect),
                    None => PixelMask::from_rect(w, h, rect),
                };
                Detection {
                    label: d.label.trim().to_lowercase(),
                    rect,
                    mask,
                    score: d.score.clamp(0.0, 1.0),
                }
            })
            .collect())
    }
}

fn context_lines(context: &[ContextItem]) -> String {
    context
        .iter()
        .map(|c| format!("[{}] ({:?}, {:.3}) {}", c.id, c.role, c.score, c.text))
        .collect::<Vec<_>>()
        .join("\n")
}

impl Provider for HttpProvider {
    fn id(&self) -> String {
        let m = &self.cfg.models;
        format!(
            "http-1:{}:{}:{}:{}:{}",
            m.chat, m.vision, m.embed_text, m.embed_image, m.detect
        )
    }

    fn call(&self, request: &Request<'_>) -> Result<Response, ProviderError> {
        request.validate()?;
        let m = &self.cfg.models;
        Ok(match *request {
            Request::TagFrame { image } => {
                #[derive(Deserialize)]
                struct Tags {
                    object_tags: Vec<String>,
                    functional_tags: Vec<String>,
                }
                let t: Tags = extract_json(&self.chat(&m.vision, TAG_FRAME, Some(image))?)?;
                Response::Tags(TagResult::normalized(&t.object_tags, &t.functional_tags))
            }
            Request::Detect { image, vocabulary } => Response::Detections(self.detect(image, vocabulary)?),
            Request::EmbedText { text } => {
                let v = self.post("embeddings", json!({"model": m.embed_text, "input": text}))?;
                Response::Embedding(Self::vector(&v, "/data/0/embedding", Modality::Text)?)
            }
            Request::EmbedImage { image, crop } => {
                let crop = crop.map(|c| [c.x, c.y, c.w, c.h]);
                let v = self.post(
                    "embeddings/image",
                    json!({"model": m.embed_image, "image": png_base64(image), "crop": crop}),
                )?;
                Response::Embedding(Self::vector(&v, "/embedding", Modality::Image)?)
            }
            Request::DescribeFrame { image, labels } => {
                let prompt = render(DESCRIBE_FRAME, &[("objects", &labels.join(", "))]);
                Response::Text(self.chat(&m.vision, &prompt, Some(image))?.trim().to_string())
            }
            Request::Summarize { texts, level } => {
                let template = match level {
                    Level::Room => SUMMARIZE_ROOM,
                    Level::Floor => SUMMARIZE_FLOOR,
                };
                let prompt = render(template, &[("texts", &texts.join("\n"))]);
                Response::Text(self.chat(&m.chat, &prompt, None)?.trim().to_string())
            }
            Request::ParseQuery { query } => {
                let p: ParsedQuery = extract_json(&self.chat(&m.chat, &render(PARSE_QUERY, &[("query", query)]), None)?)?;
                if p.target.trim().is_empty() {
                    return Err(ProviderError::ParseFailure("empty target".into()));
                }
                Response::Parsed(p)
            }
            Request::Decompose { query } => {
                let h: HierQuery =
                    extract_json(&self.chat(&m.chat, &render(DECOMPOSE_QUERY, &[("query", query)]), None)?)?;
                if h.object.trim().is_empty() {
                    return Err(ProviderError::ParseFailure("empty object".into()));
                }
                Response::Hierarchical(h)
            }
            Request::Answer { query, context } => {
                let prompt = render(ANSWER, &[("context", &context_lines(context)), ("query", query)]);
                Response::Text(self.chat(&m.chat, &prompt, None)?.trim().to_string())
            }
        })
    }
}
