//! Deterministic offline provider backed by a fixture table.
//!
//! Frames are matched to fixture entries through an id stamped into the
//! first pixel row of the colour image (see [`encode_fixture_id`]).

use std::collections::BTreeMap;
use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::{
    normalize_tags, ContextItem, ContextRole, Detection, Embedding, HierQuery, Level, Modality, ParsedQuery,
    PixelMask, PixelRect, Provider, ProviderError, Request, Response, TagResult,
};
use crate::util::tokenize;

pub const EMBED_DIM: usize = 256;
const MAGIC: [u8; 3] = *b"KSG";

/// FNV-1a over the token bytes, folded onto the embedding dimensions.
pub fn token_dim(token: &str) -> usize {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in token.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    (h % EMBED_DIM as u64) as usize
}

/// Normalized bag-of-tokens vector; `None` when the text has no tokens.
pub fn embed_tokens(text: &str) -> Option<Embedding> {
    let mut counts = vec![0.0f64; EMBED_DIM];
    for t in tokenize(text) {
        counts[token_dim(&t)] += 1.0;
    }
    Embedding::normalized(&counts, Modality::Text)
}

/// Colour histogram (8 x 8 x 4 bins) of a region, for images with no fixture.
fn histogram_embedding(image: &RgbImage, crop: Option<PixelRect>) -> Embedding {
    let r = crop
        .unwrap_or(PixelRect { x: 0, y: 0, w: image.width(), h: image.height() })
        .clip(image.width(), image.height());
    let mut bins = vec![0.0f64; EMBED_DIM];
    // Row 0 may carry the fixture stamp; skip it.
    for v in r.y.max(1)..r.y + r.h {
        for u in r.x..r.x + r.w {
            let p = image.get_pixel(u, v).0;
            let b = (p[0] as usize >> 5) * 32 + (p[1] as usize >> 5) * 4 + (p[2] as usize >> 6);
            bins[b] += 1.0;
        }
    }
    let mut e = Embedding::normalized(&bins, Modality::Image).unwrap_or_else(|| {
        let mut v = vec![0.0; EMBED_DIM];
        v[0] = 1.0;
        Embedding::normalized(&v, Modality::Image).expect("unit")
    });
    e.modality = Modality::Image;
    e
}

/// Writes `id` into row 0: pixel 0 holds a magic marker, pixel 1 the byte
/// length, then three bytes per pixel.
pub fn encode_fixture_id(image: &mut RgbImage, id: &str) {
    let bytes = id.as_bytes();
    assert!(bytes.len() <= 255, "fixture id too long");
    let needed = 2 + bytes.len().div_ceil(3);
    assert!(image.width() as usize >= needed, "image too narrow for fixture id");
    image.put_pixel(0, 0, image::Rgb(MAGIC));
    image.put_pixel(1, 0, image::Rgb([bytes.len() as u8, 0, 0]));
    for (i, chunk) in bytes.chunks(3).enumerate() {
        let mut px = [0u8; 3];
        px[..chunk.len()].copy_from_slice(chunk);
        image.put_pixel(2 + i as u32, 0, image::Rgb(px));
    }
}

pub fn decode_fixture_id(image: &RgbImage) -> Option<String> {
    if image.width() < 2 || image.height() == 0 || image.get_pixel(0, 0).0 != MAGIC {
        return None;
    }
    let len = image.get_pixel(1, 0).0[0] as usize;
    if (image.width() as usize) < 2 + len.div_ceil(3) {
        return None;
    }
    let mut bytes = Vec::with_capacity(len);
    for i in 0..len.div_ceil(3) {
        bytes.extend_from_slice(&image.get_pixel(2 + i as u32, 0).0);
    }
    bytes.truncate(len);
    String::from_utf8(bytes).ok()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FixtureDetection {
    pub label: String,
    #[serde(rename = "box")]
    pub rect: PixelRect,
    /// Explicit mask runs over the full image; defaults to the whole box.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Vec<(u32, u32)>>,
    #[serde(default = "one")]
    pub score: f64,
    /// Text embedded for crops of this detection; defaults to the label.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FixtureFrame {
    #[serde(default)]
    pub object_tags: Vec<String>,
    #[serde(default)]
    pub functional_tags: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    #[serde(default)]
    pub detections: Vec<FixtureDetection>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureQuery {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    #[serde(default)]
    pub anchors: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub floor: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub room: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FixtureTable {
    #[serde(default)]
    pub frames: BTreeMap<String, FixtureFrame>,
    /// Keyed by the lowercased, trimmed query text.
    #[serde(default)]
    pub queries: BTreeMap<String, FixtureQuery>,
}

impl FixtureTable {
    pub fn load(path: &Path) -> Result<Self, ProviderError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ProviderError::InvalidInput(format!("fixture table {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| ProviderError::InvalidInput(format!("fixture table {}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("fixture table serializes")
    }

    /// Pairs of distinct tokens that share an embedding dimension.
    pub fn token_collisions<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Vec<(String, String)> {
        let mut seen: BTreeMap<usize, String> = BTreeMap::new();
        let mut out = Vec::new();
        let mut uniq: Vec<String> = tokens.into_iter().flat_map(tokenize).collect();
        uniq.sort();
        uniq.dedup();
        for t in uniq {
            match seen.get(&token_dim(&t)) {
                Some(prev) => out.push((prev.clone(), t)),
                None => {
                    seen.insert(token_dim(&t), t);
                }
            }
        }
        out
    }
}

/// Offline provider. Pure function of its inputs and fixture table.
#[derive(Debug, Clone, Default)]
pub struct MockProvider {
    table: FixtureTable,
    /// Request kinds that fail with a retryable 503, for outage drills.
    fail_kinds: Vec<String>,
}

impl MockProvider {
    pub fn new(table: FixtureTable) -> Self {
        MockProvider {
            table,
            fail_kinds: Vec::new(),
        }
    }

    pub fn failing(mut self, kinds: &[&str]) -> Self {
        self.fail_kinds = kinds.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn table(&self) -> &FixtureTable {
        &self.table
    }

    fn frame(&self, image: &RgbImage) -> Option<&FixtureFrame> {
        decode_fixture_id(image).and_then(|id| self.table.frames.get(&id))
    }

    fn query(&self, q: &str) -> Option<&FixtureQuery> {
        self.table.queries.get(&q.trim().to_lowercase())
    }

    fn fixture_detections(&self, image: &RgbImage, vocabulary: &[String]) -> Vec<Detection> {
        let Some(frame) = self.frame(image) else {
            return Vec::new();
        };
        let vocab = normalize_tags(vocabulary);
        let (w, h) = image.dimensions();
        frame
            .detections
            .iter()
            .filter(|d| vocab.contains(&d.label.trim().to_lowercase()))
            .map(|d| {
                let rect = d.rect.clip(w, h);
                let mask = match &d.mask {
                    Some(runs) => PixelMask {
                        width: w,
                        height: h,
                        runs: runs.clone(),
                    }
                    .intersect_rect(rect),
                    None => PixelMask::from_rect(w, h, rect),
                };
                Detection {
                    label: d.label.trim().to_lowercase(),
                    rect,
                    mask,
                    score: d.score.clamp(0.0, 1.0),
                }
            })
            .collect()
    }

    fn fixture_image_embedding(&self, image: &RgbImage, crop: Option<PixelRect>) -> Embedding {
        let caption = self.frame(image).and_then(|frame| match crop {
            Some(c) => frame
                .detections
                .iter()
                .map(|d| (rect_iou(&d.rect, &c), d))
                .filter(|(iou, _)| *iou > 0.0)
                .fold(None::<(f64, &FixtureDetection)>, |best, cur| match best {
                    Some(b) if b.0 >= cur.0 => Some(b),
                    _ => Some(cur),
                })
                .map(|(_, d)| d.caption.clone().unwrap_or_else(|| d.label.clone())),
            None => frame.caption.clone().or_else(|| Some(frame.object_tags.join(" "))),
        });
        match caption.as_deref().and_then(embed_tokens) {
            Some(mut e) => {
                e.modality = Modality::Image;
                e
            }
            None => histogram_embedding(image, crop),
        }
    }
}

fn rect_iou(a: &PixelRect, b: &PixelRect) -> f64 {
    let x0 = a.x.max(b.x);
    let y0 = a.y.max(b.y);
    let x1 = (a.x + a.w).min(b.x + b.w);
    let y1 = (a.y + a.h).min(b.y + b.h);
    if x1 <= x0 || y1 <= y0 {
        return 0.0;
    }
    let inter = ((x1 - x0) as f64) * ((y1 - y0) as f64);
    inter / ((a.w * a.h) as f64 + (b.w * b.h) as f64 - inter)
}

const LEAD_PHRASES: &[&str] = &[
    "where is", "where's", "where are", "find", "show me", "locate", "can you find", "i am looking for", "look for",
];
const ARTICLES: &[&str] = &["the", "a", "an", "my", "some"];
const PREPOSITIONS: &[&str] = &[
    "in front of", "to the left of", "to the right of", "left of", "right of", "next to", "close to", "near",
    "beside", "behind", "under", "below", "above", "on", "in", "inside", "at", "by", "with",
];
const FLOOR_WORDS: &[&str] = &["floor", "level", "storey", "story", "basement", "attic"];

fn words(q: &str) -> Vec<String> {
    q.to_lowercase()
        .split(|c: char| c.is_whitespace() || matches!(c, '?' | '!' | '.' | ','))
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

fn starts_with_phrase(ws: &[String], at: usize, phrase: &str) -> usize {
    let p: Vec<&str> = phrase.split(' ').collect();
    if at + p.len() <= ws.len() && ws[at..at + p.len()].iter().zip(&p).all(|(a, b)| a == b) {
        p.len()
    } else {
        0
    }
}

fn strip_lead(ws: &[String]) -> &[String] {
    let mut ws = ws;
    for lead in LEAD_PHRASES {
        let n = starts_with_phrase(ws, 0, lead);
        if n > 0 {
            ws = &ws[n..];
            break;
        }
    }
    ws
}

fn strip_articles(ws: &[String]) -> String {
    let mut ws = ws;
    while let Some(first) = ws.first() {
        if ARTICLES.contains(&first.as_str()) {
            ws = &ws[1..];
        } else {
            break;
        }
    }
    ws.join(" ")
}

/// Splits at prepositions: `(head, [(preposition, phrase)])`.
fn split_prepositions(ws: &[String]) -> (Vec<String>, Vec<(String, Vec<String>)>) {
    let mut head = Vec::new();
    let mut tail: Vec<(String, Vec<String>)> = Vec::new();
    let mut i = 0;
    while i < ws.len() {
        let hit = PREPOSITIONS
            .iter()
            .map(|p| (starts_with_phrase(ws, i, p), *p))
            .filter(|(n, _)| *n > 0)
            .max_by_key(|(n, _)| *n);
        // A preposition in first position cannot split anything off.
        match hit {
            Some((n, p)) if i > 0 => {
                tail.push((p.to_string(), Vec::new()));
                i += n;
            }
            _ => {
                match tail.last_mut() {
                    Some((_, seg)) => seg.push(ws[i].clone()),
                    None => head.push(ws[i].clone()),
                }
                i += 1;
            }
        }
    }
    (head, tail)
}

/// Rule-based target/anchor split.
pub fn parse_query_rules(query: &str) -> Result<ParsedQuery, ProviderError> {
    let ws = words(query);
    let (head, tail) = split_prepositions(strip_lead(&ws));
    let target = strip_articles(&head);
    if target.is_empty() {
        return Err(ProviderError::ParseFailure(format!("no target in {query:?}")));
    }
    let mut anchors: Vec<String> = Vec::new();
    for (_, seg) in tail {
        let a = strip_articles(&seg);
        if !a.is_empty() && a != target && !anchors.contains(&a) {
            anchors.push(a);
        }
    }
    Ok(ParsedQuery { target, anchors })
}

/// Rule-based `[floor, room, object]` decomposition: a trailing phrase
/// naming a floor becomes the floor, the next containment phrase the room.
pub fn parse_hierarchical_rules(query: &str) -> Result<HierQuery, ProviderError> {
    let ws = words(query);
    let (head, tail) = split_prepositions(strip_lead(&ws));
    let object = strip_articles(&head);
    if object.is_empty() {
        return Err(ProviderError::ParseFailure(format!("no object in {query:?}")));
    }
    let mut floor = None;
    let mut room = None;
    for (prep, seg) in tail.iter().rev() {
        let phrase = strip_articles(seg);
        if phrase.is_empty() {
            continue;
        }
        let is_floor = seg.iter().any(|w| FLOOR_WORDS.contains(&w.as_str()));
        if is_floor && floor.is_none() && (prep == "on" || prep == "at" || prep == "in") {
            floor = Some(phrase);
        } else if room.is_none() && (prep == "in" || prep == "inside" || prep == "at") {
            room = Some(phrase);
        }
    }
    Ok(HierQuery { floor, room, object })
}

/// Room id of an object node id (`f0_r1_o3` -> `f0_r1`).
fn room_of(id: &str) -> Option<&str> {
    id.rsplit_once("_o").map(|(room, _)| room)
}

/// Picks one target object: first one sharing a room with the best anchor,
/// then one inside a path room, then the best-scoring one. Targets with
/// positive similarity are preferred throughout.
fn mock_answer(context: &[ContextItem]) -> String {
    let by_score = |a: &&ContextItem, b: &&ContextItem| b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id));
    let best_anchor = context
        .iter()
        .filter(|c| c.role == ContextRole::Anchor && c.score > 0.0)
        .min_by(by_score);
    let anchor_room = best_anchor.and_then(|a| room_of(&a.id));
    let on_path = |id: &str| {
        context
            .iter()
            .filter(|c| c.role == ContextRole::Path)
            .any(|c| id.starts_with(&format!("{}_", c.id)))
    };
    let pool: Vec<&ContextItem> = context
        .iter()
        .filter(|c| c.role == ContextRole::Target && c.score > 0.0)
        .collect();
    let pick = |filter: &dyn Fn(&ContextItem) -> bool| pool.iter().copied().filter(|c| filter(c)).min_by(by_score);
    let best = pick(&|c| anchor_room.is_some() && room_of(&c.id) == anchor_room)
        .or_else(|| pick(&|c| on_path(&c.id)))
        .or_else(|| pick(&|_| true));
    match best {
        Some(item) => format!("Best match [{}]: {}", item.id, item.text),
        None => "No matching object found.".to_string(),
    }
}

impl Provider for MockProvider {
    fn id(&self) -> String {
        "mock-1".to_string()
    }

    fn call(&self, request: &Request<'_>) -> Result<Response, ProviderError> {
        request.validate()?;
        if self.fail_kinds.iter().any(|k| k == request.kind()) {
            return Err(ProviderError::from_status(503, format!("mock outage for {}", request.kind())));
        }
        Ok(match *request {
            Request::TagFrame { image } => Response::Tags(
                self.frame(image)
                    .map(|f| TagResult::normalized(&f.object_tags, &f.functional_tags))
                    .unwrap_or_default(),
            ),
            Request::Detect { image, vocabulary } => Response::Detections(self.fixture_detections(image, vocabulary)),
            Request::EmbedText { text } => Response::Embedding(
                embed_tokens(text).ok_or_else(|| ProviderError::InvalidInput(format!("no tokens in {text:?}")))?,
            ),
            Request::EmbedImage { image, crop } => Response::Embedding(self.fixture_image_embedding(image, crop)),
            Request::DescribeFrame { labels, .. } => {
                let text = if labels.is_empty() {
                    "Frame shows:".to_string()
                } else {
                    format!("Frame shows: {}", labels.join(", "))
                };
                Response::Text(text)
            }
            Request::Summarize { texts, level } => {
                let prefix = match level {
                    Level::Room => "ROOM SUMMARY",
                    Level::Floor => "FLOOR SUMMARY",
                };
                Response::Text(format!("{prefix}: {}", texts.join(" | ")))
            }
            Request::ParseQuery { query } => Response::Parsed(match self.query(query) {
                Some(FixtureQuery { target: Some(t), anchors, .. }) => ParsedQuery {
                    target: t.clone(),
                    anchors: anchors.clone(),
                },
                _ => parse_query_rules(query)?,
            }),
            Request::Decompose { query } => Response::Hierarchical(match self.query(query) {
                Some(FixtureQuery { object: Some(o), floor, room, .. }) => HierQuery {
                    floor: floor.clone(),
                    room: room.clone(),
                    object: o.clone(),
                },
                _ => parse_hierarchical_rules(query)?,
            }),
            Request::Answer { context, .. } => Response::Text(mock_answer(context)),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::ProviderExt;

    fn kitchen() -> (MockProvider, RgbImage) {
        let mut table = FixtureTable::default();
        table.frames.insert(
            "kitchen_01".into(),
            FixtureFrame {
                object_tags: vec!["Mug".into(), "table".into(), "mug".into()],
                functional_tags: vec!["handle".into()],
                caption: Some("a kitchen counter".into()),
                detections: vec![
                    FixtureDetection {
                        label: "mug".into(),
                        rect: PixelRect { x: 10, y: 10, w: 8, h: 6 },
                        score: 0.9,
                        ..Default::default()
                    },
                    FixtureDetection {
                        label: "table".into(),
                        rect: PixelRect { x: 0, y: 20, w: 40, h: 10 },
                        score: 0.8,
                        ..Default::default()
                    },
                ],
            },
        );
        let mut img = RgbImage::from_pixel(40, 30, image::Rgb([90, 90, 90]));
        encode_fixture_id(&mut img, "kitchen_01");
        (MockProvider::new(table), img)
    }

    #[test]
    fn fixture_id_round_trip() {
        let mut img = RgbImage::new(16, 2);
        assert_eq!(decode_fixture_id(&img), None);
        encode_fixture_id(&mut img, "f_000123");
        assert_eq!(decode_fixture_id(&img).as_deref(), Some("f_000123"));
    }

    #[test]
    fn tags_and_detections_come_from_table() {
        let (mock, img) = kitchen();
        let tags = mock.tag_frame(&img).unwrap();
        assert_eq!(tags.object_tags, vec!["mug", "table"]);
        let dets = mock.detect(&img, &["mug".to_string()]).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].rect, PixelRect { x: 10, y: 10, w: 8, h: 6 });
        assert_eq!(dets[0].mask.count(), 48);
        assert!(mock.detect(&img, &["oven".to_string()]).unwrap().is_empty());
        assert!(matches!(mock.detect(&img, &[]), Err(ProviderError::InvalidInput(_))));

        let unknown = RgbImage::new(40, 30);
        assert_eq!(mock.tag_frame(&unknown).unwrap(), TagResult::default());
    }

    #[test]
    fn text_embedding_is_bag_of_words_cosine() {
        let mock = MockProvider::default();
        let a = mock.embed_text("mug").unwrap();
        assert_eq!(a, mock.embed_text("mug").unwrap());
        assert_eq!(a.dot(&mock.embed_text("mug mug").unwrap()), 1.0);
        let (x, y) = ("sofa", "toilet");
        assert_ne!(token_dim(x), token_dim(y));
        assert_eq!(mock.embed_text(x).unwrap().dot(&mock.embed_text(y).unwrap()), 0.0);
        // "mug table" vs "mug": one shared token over norms 1 and sqrt(2).
        let two = mock.embed_text("Mug, TABLE").unwrap();
        assert!((two.dot(&a) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-7);
        assert!(mock.embed_text("  ").is_err());
    }

    #[test]
    fn image_embedding_uses_captions() {
        let (mock, img) = kitchen();
        let crop = mock.embed_image(&img, Some(PixelRect { x: 9, y: 9, w: 9, h: 7 })).unwrap();
        assert!((crop.dot(&embed_tokens("mug").unwrap()) - 1.0).abs() < 1e-6);
        assert_eq!(crop.modality, Modality::Image);
        let whole = mock.embed_image(&img, None).unwrap();
        assert!((whole.dot(&embed_tokens("a kitchen counter").unwrap()) - 1.0).abs() < 1e-6);
        let plain = mock.embed_image(&RgbImage::new(4, 4), None).unwrap();
        let n: f64 = plain.vector.iter().map(|v| (*v as f64).powi(2)).sum();
        assert!((n - 1.0).abs() < 1e-6);
    }

    #[test]
    fn text_generation_formats() {
        let (mock, img) = kitchen();
        let labels = vec!["mug".to_string(), "table".to_string()];
        assert_eq!(mock.describe_frame(&img, &labels).unwrap(), "Frame shows: mug, table");
        assert_eq!(mock.describe_frame(&img, &[]).unwrap(), "Frame shows:");
        let texts = vec!["a".to_string(), "b".to_string()];
        assert_eq!(mock.summarize(&texts, Level::Room).unwrap(), "ROOM SUMMARY: a | b");
        assert_eq!(mock.summarize(&texts[..1], Level::Floor).unwrap(), "FLOOR SUMMARY: a");
    }

    #[test]
    fn query_rules() {
        let h = parse_hierarchical_rules("the toilet in the bathroom on the ground floor").unwrap();
        assert_eq!(h.floor.as_deref(), Some("ground floor"));
        assert_eq!(h.room.as_deref(), Some("bathroom"));
        assert_eq!(h.object, "toilet");

        let h = parse_hierarchical_rules("oven in the kitchen").unwrap();
        assert_eq!((h.floor, h.room.as_deref(), h.object.as_str()), (None, Some("kitchen"), "oven"));

        let p = parse_query_rules("mug").unwrap();
        assert_eq!(p, ParsedQuery { target: "mug".into(), anchors: vec![] });
        let p = parse_query_rules("Where is the coffee mug next to the sink?").unwrap();
        assert_eq!(p.target, "coffee mug");
        assert_eq!(p.anchors, vec!["sink"]);
        assert!(parse_query_rules("where is the ?").is_err());
    }

    #[test]
    fn query_table_overrides_rules() {
        let mut table = FixtureTable::default();
        table.queries.insert(
            "grab my drink".into(),
            FixtureQuery {
                target: Some("mug".into()),
                object: Some("mug".into()),
                room: Some("kitchen".into()),
                ..Default::default()
            },
        );
        let mock = MockProvider::new(table);
        assert_eq!(mock.parse_query("Grab my drink").unwrap().target, "mug");
        assert_eq!(mock.decompose_hierarchical("grab my drink").unwrap().room.as_deref(), Some("kitchen"));
    }

    #[test]
    fn answer_prefers_target_on_path() {
        let mock = MockProvider::default();
        let ctx = vec![
            ContextItem { id: "f0_r0_o1".into(), role: ContextRole::Target, text: "mug".into(), score: 0.9 },
            ContextItem { id: "f0_r1_o0".into(), role: ContextRole::Target, text: "mug".into(), score: 0.8 },
            ContextItem { id: "f0_r1".into(), role: ContextRole::Path, text: "kitchen".into(), score: 0.5 },
        ];
        let text = mock.answer("mug in kitchen", &ctx).unwrap();
        assert!(text.contains("[f0_r1_o0]"), "{text}");
        assert!(!mock.answer("x", &[]).unwrap().contains('['));
    }

    #[test]
    fn answer_prefers_anchor_room() {
        let mock = MockProvider::default();
        let ctx = vec![
            ContextItem { id: "f0_r0_o1".into(), role: ContextRole::Target, text: "chair".into(), score: 0.5 },
            ContextItem { id: "f0_r2_o0".into(), role: ContextRole::Target, text: "chair".into(), score: 0.5 },
            ContextItem { id: "f0_r0_o2".into(), role: ContextRole::Anchor, text: "table".into(), score: 0.0 },
            ContextItem { id: "f0_r2_o3".into(), role: ContextRole::Anchor, text: "desk".into(), score: 0.6 },
            ContextItem { id: "f0_r0".into(), role: ContextRole::Path, text: "kitchen".into(), score: 0.5 },
            ContextItem { id: "f0_r0_o4".into(), role: ContextRole::Target, text: "fridge".into(), score: 0.0 },
        ];
        let text = mock.answer("the chair next to the desk", &ctx).unwrap();
        assert!(text.contains("[f0_r2_o0]"), "{text}");
    }

    #[test]
    fn outage_drill() {
        let mock = MockProvider::default().failing(&["embed_text"]);
        let err = mock.embed_text("mug").unwrap_err();
        assert!(err.retryable());
    }
}
