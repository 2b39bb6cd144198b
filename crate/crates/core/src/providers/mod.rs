//! Perception and language services behind one request/response trait.
//!
//! A provider implements [`Provider::call`]; the typed helpers on
//! [`ProviderExt`] build the request and unpack the response. Wrappers for
//! caching and retries ([`CachedProvider`], [`Resilient`]) only need to
//! forward `call`.

mod cache;
mod http;
mod mock;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::{CachedProvider, CallCounts, CallStats, Resilient};
pub use http::{HttpProvider, Models, ProvidersToml};
pub use mock::{
    decode_fixture_id, embed_tokens, encode_fixture_id, parse_hierarchical_rules, parse_query_rules,
    token_dim, FixtureDetection, FixtureFrame, FixtureQuery, FixtureTable, MockProvider, EMBED_DIM,
};

#[derive(Debug, Clone, Error, PartialEq, Serialize, Deserialize)]
pub enum ProviderError {
    #[error("provider returned status {status}: {message}")]
    Status {
        status: u16,
        retryable: bool,
        message: String,
    },
    #[error("provider call timed out")]
    Timeout,
    #[error("provider output did not parse: {0}")]
    ParseFailure(String),
    #[error("invalid provider input: {0}")]
    InvalidInput(String),
    #[error("provider transport error: {0}")]
    Transport(String),
}

impl ProviderError {
    pub fn retryable(&self) -> bool {
        match self {
            ProviderError::Status { retryable, .. } => *retryable,
            ProviderError::Timeout | ProviderError::Transport(_) => true,
            _ => false,
        }
    }

    /// Status-code mapping used by HTTP providers.
    pub fn from_status(status: u16, message: impl Into<String>) -> Self {
        ProviderError::Status {
            status,
            retryable: status == 429 || status == 408 || status >= 500,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagResult {
    pub object_tags: Vec<String>,
    pub functional_tags: Vec<String>,
}

impl TagResult {
    /// Lowercases, trims, drops empties and duplicates (first occurrence wins).
    pub fn normalized(object_tags: &[String], functional_tags: &[String]) -> Self {
        TagResult {
            object_tags: normalize_tags(object_tags),
            functional_tags: normalize_tags(functional_tags),
        }
    }
}

pub fn normalize_tags(tags: &[String]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for t in tags {
        let t = t.trim().to_lowercase();
        if !t.is_empty() && !out.contains(&t) {
            out.push(t);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelRect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl PixelRect {
    pub fn contains(&self, u: u32, v: u32) -> bool {
        u >= self.x && v >= self.y && u < self.x + self.w && v < self.y + self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x as f64 + self.w as f64 / 2.0, self.y as f64 + self.h as f64 / 2.0)
    }

    pub fn contains_point(&self, u: f64, v: f64) -> bool {
        u >= self.x as f64 && v >= self.y as f64 && u <= (self.x + self.w) as f64 && v <= (self.y + self.h) as f64
    }

    pub fn clip(&self, width: u32, height: u32) -> PixelRect {
        let x = self.x.min(width);
        let y = self.y.min(height);
        PixelRect {
            x,
            y,
            w: self.w.min(width - x),
            h: self.h.min(height - y),
        }
    }
}

/// Binary pixel mask over a full image, run-length encoded in row-major order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelMask {
    pub width: u32,
    pub height: u32,
    /// `(start, len)` runs over `v * width + u`.
    pub runs: Vec<(u32, u32)>,
}

impl PixelMask {
    pub fn empty(width: u32, height: u32) -> Self {
        PixelMask {
            width,
            height,
            runs: Vec::new(),
        }
    }

    pub fn full(width: u32, height: u32) -> Self {
        Self::from_rect(width, height, PixelRect { x: 0, y: 0, w: width, h: height })
    }

    pub fn from_rect(width: u32, height: u32, rect: PixelRect) -> Self {
        let r = rect.clip(width, height);
        let mut runs: Vec<(u32, u32)> = Vec::new();
        if r.w > 0 {
            for v in r.y..r.y + r.h {
                let start = v * width + r.x;
                match runs.last_mut() {
                    Some((s, l)) if *s + *l == start => *l += r.w,
                    _ => runs.push((start, r.w)),
                }
            }
        }
        PixelMask { width, height, runs }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut runs: Vec<(u32, u32)> = Vec::new();
        for v in 0..height {
            for u in 0..width {
                if f(u, v) {
                    let idx = v * width + u;
                    match runs.last_mut() {
                        Some((s, l)) if *s + *l == idx => *l += 1,
                        _ => runs.push((idx, 1)),
                    }
                }
            }
        }
        PixelMask { width, height, runs }
    }

    pub fn count(&self) -> usize {
        self.runs.iter().map(|r| r.1 as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.runs.iter().all(|r| r.1 == 0)
    }

    pub fn contains(&self, u: u32, v: u32) -> bool {
        if u >= self.width || v >= self.height {
            return false;
        }
        let idx = v * self.width + u;
        let i = self.runs.partition_point(|r| r.0 <= idx);
        i > 0 && idx < self.runs[i - 1].0 + self.runs[i - 1].1
    }

    /// Pixel coordinates in row-major order.
    pub fn pixels(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let w = self.width;
        self.runs
            .iter()
            .flat_map(move |&(s, l)| (s..s + l).map(move |i| (i % w, i / w)))
    }

    pub fn bbox(&self) -> Option<PixelRect> {
        let mut it = self.pixels();
        let (u0, v0) = it.next()?;
        let (mut x0, mut y0, mut x1, mut y1) = (u0, v0, u0, v0);
        for (u, v) in it {
            x0 = x0.min(u);
            x1 = x1.max(u);
            y0 = y0.min(v);
            y1 = y1.max(v);
        }
        Some(PixelRect {
            x: x0,
            y: y0,
            w: x1 - x0 + 1,
            h: y1 - y0 + 1,
        })
    }

    /// Mean pixel position using pixel centers.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let n = self.count();
        if n == 0 {
            return None;
        }
        let (mut su, mut sv) = (0.0, 0.0);
        for (u, v) in self.pixels() {
            su += u as f64 + 0.5;
            sv += v as f64 + 0.5;
        }
        Some((su / n as f64, sv / n as f64))
    }

    pub fn intersect_rect(&self, rect: PixelRect) -> PixelMask {
        let r = rect.clip(self.width, self.height);
        let mut out = Vec::new();
        for &(s, l) in &self.runs {
            // Runs may span rows; split per row.
            let mut i = s;
            let end = s + l;
            while i < end {
                let v = i / self.width;
                let row_end = ((v + 1) * self.width).min(end);
                let (u_a, u_b) = (i % self.width, (row_end - 1) % self.width + 1);
                if v >= r.y && v < r.y + r.h {
                    let a = u_a.max(r.x);
                    let b = u_b.min(r.x + r.w);
                    if a < b {
                        let start = v * self.width + a;
                        match out.last_mut() {
                            Some((ps, pl)) if *ps + *pl == start => *pl += b - a,
                            _ => out.push((start, b - a)),
                        }
                    }
                }
                i = row_end;
            }
        }
        PixelMask {
            width: self.width,
            height: self.height,
            runs: out,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: String,
    #[serde(rename = "box")]
    pub rect: PixelRect,
    pub mask: PixelMask,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub vector: Vec<f32>,
    pub modality: Modality,
}

impl Embedding {
    /// L2-normalizes in f64; an all-zero input yields `None`.
    pub fn normalized(values: &[f64], modality: Modality) -> Option<Self> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return None;
        }
        Some(Embedding {
            vector: values.iter().map(|v| (v / norm) as f32).collect(),
            modality,
        })
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        dot(&self.vector, &other.vector)
    }
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Room,
    Floor,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedQuery {
    pub target: String,
    pub anchors: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HierQuery {
    pub floor: Option<String>,
    pub room: Option<String>,
    pub object: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextRole {
    Target,
    Anchor,
    Keyframe,
    Path,
}

/// One retrieved item handed to [`Request::Answer`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextItem {
    pub id: String,
    pub role: ContextRole,
    pub text: String,
    pub score: f64,
}

#[derive(Debug, Clone, Copy)]
pub enum Request<'a> {
    TagFrame { image: &'a RgbImage },
    Detect { image: &'a RgbImage, vocabulary: &'a [String] },
    EmbedText { text: &'a str },
    EmbedImage { image: &'a RgbImage, crop: Option<PixelRect> },
    DescribeFrame { image: &'a RgbImage, labels: &'a [String] },
    Summarize { texts: &'a [String], level: Level },
    ParseQuery { query: &'a str },
    Decompose { query: &'a str },
    Answer { query: &'a str, context: &'a [ContextItem] },
}

impl Request<'_> {
    pub fn kind(&self) -> &'static str {
        match self {
            Request::TagFrame { .. } => "tag_frame",
            Request::Detect { .. } => "detect",
            Request::EmbedText { .. } => "embed_text",
            Request::EmbedImage { .. } => "embed_image",
            Request::DescribeFrame { .. } => "describe_frame",
            Request::Summarize { .. } => "summarize",
            Request::ParseQuery { .. } => "parse_query",
            Request::Decompose { .. } => "decompose_hierarchical",
            Request::Answer { .. } => "answer",
        }
    }

    /// Rejects inputs every provider must refuse.
    pub fn validate(&self) -> Result<(), ProviderError> {
        let bad = |m: &str| Err(ProviderError::InvalidInput(m.to_string()));
        match self {
            Request::Detect { vocabulary, .. } if vocabulary.is_empty() => bad("detect needs a non-empty vocabulary"),
            Request::EmbedText { text } if text.trim().is_empty() => bad("embed_text needs non-empty text"),
            Request::Summarize { texts, .. } if texts.is_empty() => bad("summarize needs at least one text"),
            Request::ParseQuery { query } | Request::Decompose { query } | Request::Answer { query, .. }
                if query.trim().is_empty() =>
            {
                bad("query is empty")
            }
            Request::TagFrame { image }
            | Request::Detect { image, .. }
            | Request::EmbedImage { image, .. }
            | Request::DescribeFrame { image, .. }
                if image.width() == 0 || image.height() == 0 =>
            {
                bad("image is empty")
            }
            _ => Ok(()),
        }
    }

    /// Content hash identifying the request for caching.
    pub fn cache_key(&self, provider_id: &str) -> String {
        let mut h = crate::util::KeyHasher::new("keysg-provider-v1");
        h.field(provider_id.as_bytes()).field(self.kind().as_bytes());
        let image = |h: &mut crate::util::KeyHasher, img: &RgbImage| {
            h.field(&img.width().to_le_bytes())
                .field(&img.height().to_le_bytes())
                .field(img.as_raw());
        };
        let strings = |h: &mut crate::util::KeyHasher, list: &[String]| {
            h.field(&(list.len() as u64).to_le_bytes());
            for s in list {
                h.field(s.as_bytes());
            }
        };
        match self {
            Request::TagFrame { image: img } => image(&mut h, img),
            Request::Detect { image: img, vocabulary } => {
                image(&mut h, img);
                strings(&mut h, vocabulary);
            }
            Request::EmbedText { text } => {
                h.field(text.as_bytes());
            }
            Request::EmbedImage { image: img, crop } => {
                image(&mut h, img);
                h.field(serde_json::to_string(crop).expect("rect").as_bytes());
            }
            Request::DescribeFrame { image: img, labels } => {
                image(&mut h, img);
                strings(&mut h, labels);
            }
            Request::Summarize { texts, level } => {
                strings(&mut h, texts);
                h.field(serde_json::to_string(level).expect("level").as_bytes());
            }
            Request::ParseQuery { query } | Request::Decompose { query } => {
                h.field(query.as_bytes());
            }
            Request::Answer { query, context } => {
                h.field(query.as_bytes());
                h.field(serde_json::to_string(context).expect("context").as_bytes());
            }
        }
        h.finish()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "snake_case")]
pub enum Response {
    Tags(TagResult),
    Detections(Vec<Detection>),
    Embedding(Embedding),
    Text(String),
    Parsed(ParsedQuery),
    Hierarchical(HierQuery),
}

pub trait Provider: Send + Sync {
    /// Stable identifier including a version, recorded in graph metadata
    /// and mixed into cache keys.
    fn id(&self) -> String;

    fn call(&self, request: &Request<'_>) -> Result<Response, ProviderError>;
}

impl<P: Provider + ?Sized> Provider for Box<P> {
    fn id(&self) -> String {
        (**self).id()
    }
    fn call(&self, request: &Request<'_>) -> Result<Response, ProviderError> {
        (**self).call(request)
    }
}

impl<P: Provider + ?Sized> Provider for std::sync::Arc<P> {
    fn id(&self) -> String {
        (**self).id()
    }
    fn call(&self, request: &Request<'_>) -> Result<Response, ProviderError> {
        (**self).call(request)
    }
}

fn unexpected(kind: &str, got: Response) -> ProviderError {
    ProviderError::ParseFailure(format!("{kind}: unexpected response {got:?}"))
}

macro_rules! typed {
    ($name:ident ( $($arg:ident : $ty:ty),* ) -> $out:ty, $req:expr, $variant:ident) => {
        fn $name(&self, $($arg: $ty),*) -> Result<$out, ProviderError> {
            let req = $req;
            match self.call(&req)? {
                Response::$variant(v) => Ok(v),
                other => Err(unexpected(req.kind(), other)),
            }
        }
    };
}

/// Typed helpers over [`Provider::call`].
pub trait ProviderExt: Provider {
    typed!(tag_frame(image: &RgbImage) -> TagResult, Request::TagFrame { image }, Tags);
    typed!(detect(image: &RgbImage, vocabulary: &[String]) -> Vec<Detection>,
        Request::Detect { image, vocabulary }, Detections);
    typed!(embed_text(text: &str) -> Embedding, Request::EmbedText { text }, Embedding);
    typed!(embed_image(image: &RgbImage, crop: Option<PixelRect>) -> Embedding,
        Request::EmbedImage { image, crop }, Embedding);
    typed!(describe_frame(image: &RgbImage, labels: &[String]) -> String,
        Request::DescribeFrame { image, labels }, Text);
    typed!(summarize(texts: &[String], level: Level) -> String, Request::Summarize { texts, level }, Text);
    typed!(parse_query(query: &str) -> ParsedQuery, Request::ParseQuery { query }, Parsed);
    typed!(decompose_hierarchical(query: &str) -> HierQuery, Request::Decompose { query }, Hierarchical);
    typed!(answer(query: &str, context: &[ContextItem]) -> String, Request::Answer { query, context }, Text);
}

impl<P: Provider + ?Sized> ProviderExt for P {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn status_mapping() {
        assert!(ProviderError::from_status(429, "slow down").retryable());
        assert!(ProviderError::from_status(503, "").retryable());
        assert!(!ProviderError::from_status(400, "").retryable());
        assert!(!ProviderError::ParseFailure("x".into()).retryable());
    }

    #[test]
    fn tags_are_normalized() {
        let t = TagResult::normalized(
            &["Mug".into(), " mug ".into(), "".into(), "Table".into()],
            &["Knob".into()],
        );
        assert_eq!(t.object_tags, vec!["mug", "table"]);
        assert_eq!(t.functional_tags, vec!["knob"]);
    }

    #[test]
    fn mask_geometry() {
        let m = PixelMask::from_rect(10, 8, PixelRect { x: 2, y: 3, w: 4, h: 2 });
        assert_eq!(m.count(), 8);
        assert!(m.contains(2, 3) && m.contains(5, 4) && !m.contains(6, 4));
        assert_eq!(m.bbox(), Some(PixelRect { x: 2, y: 3, w: 4, h: 2 }));
        assert_eq!(m.centroid(), Some((4.0, 4.0)));
        let same = PixelMask::from_fn(10, 8, |u, v| (2..6).contains(&u) && (3..5).contains(&v));
        assert_eq!(same, m);
        let cut = m.intersect_rect(PixelRect { x: 4, y: 0, w: 10, h: 4 });
        assert_eq!(cut.pixels().collect::<Vec<_>>(), vec![(4, 3), (5, 3)]);
    }

    #[test]
    fn full_mask_is_one_run() {
        let m = PixelMask::full(4, 3);
        assert_eq!(m.runs, vec![(0, 12)]);
        let cut = m.intersect_rect(PixelRect { x: 1, y: 1, w: 2, h: 2 });
        assert_eq!(cut.pixels().collect::<Vec<_>>(), vec![(1, 1), (2, 1), (1, 2), (2, 2)]);
    }

    #[test]
    fn cache_keys_separate_inputs() {
        let a = Request::EmbedText { text: "mug" }.cache_key("p");
        let b = Request::EmbedText { text: "mug" }.cache_key("q");
        let c = Request::ParseQuery { query: "mug" }.cache_key("p");
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, Request::EmbedText { text: "mug" }.cache_key("p"));
    }
}
