//! Keyframe descriptions grounded in visible objects, then room and floor
//! summaries built bottom-up.

use rayon::prelude::*;

use crate::ingest::{Intrinsics, PosedFrame};
use crate::objects::{visible_objects, ObjectSegment};
use crate::providers::{Level, Provider, ProviderError, ProviderExt};

/// Summary stored for a room that has no keyframe descriptions.
pub const UNOBSERVED_ROOM: &str = "unobserved room";
/// Summary stored for a floor without rooms.
pub const EMPTY_FLOOR: &str = "floor without rooms";

#[derive(Debug, Clone, PartialEq)]
pub struct FrameDescription {
    pub frame: usize,
    /// `(object id, visible fraction)`, most visible first.
    pub visible: Vec<(usize, f64)>,
    /// Labels handed to the provider: distinct, in visibility order.
    pub labels: Vec<String>,
    pub text: Result<String, ProviderError>,
}

pub fn visible_labels(visible: &[(usize, f64)], objects: &[ObjectSegment]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for (id, _) in visible {
        if let Some(o) = objects.iter().find(|o| o.id == *id) {
            let l = o.label();
            if !l.is_empty() && !out.iter().any(|x| x == l) {
                out.push(l.to_string());
            }
        }
    }
    out
}

/// Describes each keyframe from its image and the objects visible in it.
/// Provider failures are kept per frame so the caller can skip and log them.
pub fn describe_keyframes(
    keyframes: &[&PosedFrame],
    objects: &[ObjectSegment],
    intr: &Intrinsics,
    theta_vis: f64,
    depth_tol: f64,
    provider: &dyn Provider,
) -> Vec<FrameDescription> {
    keyframes
        .par_iter()
        .map(|frame| {
            let visible = visible_objects(frame, objects, intr, theta_vis, depth_tol);
            let labels = visible_labels(&visible, objects);
            let text = provider.describe_frame(&frame.color, &labels);
            if let Err(e) = &text {
                log::warn!("describe_frame failed for frame {}: {e}", frame.index);
            }
            FrameDescription {
                frame: frame.index,
                visible,
                labels,
                text,
            }
        })
        .collect()
}

/// Summarizes `texts` at `level`; lists longer than `chunk_size` are
/// summarized chunk by chunk and the partial summaries reduced again.
pub fn map_reduce(
    texts: &[String],
    level: Level,
    chunk_size: usize,
    provider: &dyn Provider,
) -> Result<String, ProviderError> {
    assert!(chunk_size >= 2, "chunk_size must be at least 2");
    if texts.len() <= chunk_size {
        return provider.summarize(texts, level);
    }
    let partial = texts
        .par_chunks(chunk_size)
        .map(|c| provider.summarize(c, level))
        .collect::<Result<Vec<_>, _>>()?;
    map_reduce(&partial, level, chunk_size, provider)
}

pub fn summarize_room(descriptions: &[String], chunk_size: usize, provider: &dyn Provider) -> Result<String, ProviderError> {
    if descriptions.is_empty() {
        return Ok(UNOBSERVED_ROOM.to_string());
    }
    map_reduce(descriptions, Level::Room, chunk_size, provider)
}

pub fn summarize_floor(room_summaries: &[String], chunk_size: usize, provider: &dyn Provider) -> Result<String, ProviderError> {
    if room_summaries.is_empty() {
        return Ok(EMPTY_FLOOR.to_string());
    }
    map_reduce(room_summaries, Level::Floor, chunk_size, provider)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{DepthMap, Pose};
    use crate::objects::{merge_objects, Segment, View};
    use crate::providers::{MockProvider, PixelMask};
    use crate::ingest::PointCloud;
    use image::RgbImage;

    fn object(id: usize, label: &str, pts: Vec<[f32; 3]>) -> ObjectSegment {
        let seg = Segment {
            cloud: PointCloud::from_points(pts),
            view: View {
                frame: 0,
                mask: PixelMask::full(1, 1),
                score: 1.0,
                label: label.into(),
            },
        };
        let mut o = merge_objects(vec![seg], 0.3, 0.05).remove(0);
        o.id = id;
        o
    }

    fn frame(depth_mm: u16) -> (PosedFrame, Intrinsics) {
        let intr = Intrinsics::new(20.0, 20.0, 10.0, 8.0, 20, 16, 1000.0).unwrap();
        let f = PosedFrame {
            index: 3,
            color: RgbImage::new(20, 16),
            depth: DepthMap::new(20, 16, vec![depth_mm; 20 * 16]),
            pose: Pose::identity(),
        };
        (f, intr)
    }

    #[test]
    fn descriptions_list_visible_objects_only() {
        let (f, intr) = frame(2000);
        let objs = vec![
            object(0, "mug", vec![[0.0, 0.0, 1.0], [0.05, 0.0, 1.0]]),
            object(1, "table", vec![[0.1, 0.1, 2.0]]),
            object(2, "sofa", vec![[0.0, 0.0, 3.0]]),
        ];
        let d = describe_keyframes(&[&f], &objs, &intr, 0.25, 0.08, &MockProvider::default());
        assert_eq!(d[0].labels, vec!["mug", "table"]);
        assert_eq!(d[0].text.as_deref().unwrap(), "Frame shows: mug, table");

        let none = describe_keyframes(&[&f], &objs[2..], &intr, 0.25, 0.08, &MockProvider::default());
        assert!(none[0].labels.is_empty());
        assert!(none[0].text.is_ok());
    }

    #[test]
    fn room_and_floor_summaries() {
        let p = MockProvider::default();
        let ab = vec!["a".to_string(), "b".to_string()];
        assert_eq!(summarize_room(&ab, 32, &p).unwrap(), "ROOM SUMMARY: a | b");
        assert_eq!(summarize_room(&[], 32, &p).unwrap(), UNOBSERVED_ROOM);
        assert_eq!(summarize_floor(&["x".into()], 32, &p).unwrap(), "FLOOR SUMMARY: x");
        let thirty: Vec<String> = (0..30).map(|i| format!("d{i}")).collect();
        let s = summarize_room(&thirty, 32, &p).unwrap();
        assert_eq!(s, format!("ROOM SUMMARY: {}", thirty.join(" | ")));
    }

    #[test]
    fn long_lists_are_reduced() {
        let p = MockProvider::default();
        let texts: Vec<String> = (0..5).map(|i| format!("t{i}")).collect();
        let s = summarize_room(&texts, 2, &p).unwrap();
        // 5 -> 3 partials -> 2 partials -> 1
        assert_eq!(s.matches("ROOM SUMMARY").count(), 1 + 2 + 3);
        for t in &texts {
            assert!(s.contains(t.as_str()));
        }
    }
}
