//! 3D objects from 2D detections: lifting, incremental merging, view
//! scoring, functional elements and keyframe visibility.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{voxel_key, Intrinsics, PointCloud, PosedFrame, VoxelSet};
use crate::providers::{Detection, Embedding, PixelMask, Provider, ProviderError, ProviderExt};

#[derive(Debug, Error, PartialEq)]
pub enum ObjectError {
    #[error("segment has no valid 3D points")]
    EmptySegment,
    #[error("mask is empty")]
    EmptyMask,
    #[error("mask is {mask:?} but depth is {depth:?}")]
    MaskSize { mask: (u32, u32), depth: (u32, u32) },
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct View {
    pub frame: usize,
    pub mask: PixelMask,
    pub score: f64,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalElement {
    pub id: usize,
    pub parent: usize,
    pub label: String,
    pub cloud: PointCloud,
    pub source_view: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectSegment {
    pub id: usize,
    pub cloud: PointCloud,
    /// In frame order.
    pub views: Vec<View>,
    pub labels: BTreeMap<String, usize>,
    /// Position in `views` of the best view, once chosen.
    pub best_view: Option<usize>,
    pub embedding: Option<Embedding>,
    pub functional_elements: Vec<FunctionalElement>,
    voxels: VoxelSet,
}

impl ObjectSegment {
    fn found(id: usize, seg: Segment, voxel: f64) -> Self {
        let mut obj = ObjectSegment {
            id,
            cloud: PointCloud::new(),
            views: Vec::new(),
            labels: BTreeMap::new(),
            best_view: None,
            embedding: None,
            functional_elements: Vec::new(),
            voxels: VoxelSet::empty(voxel),
        };
        obj.absorb(seg);
        obj
    }

    /// Adds the segment's points in voxels not yet occupied, plus its view.
    fn absorb(&mut self, seg: Segment) {
        self.add_points(&seg.cloud);
        *self.labels.entry(seg.view.label.clone()).or_insert(0) += 1;
        let pos = self.views.partition_point(|v| v.frame <= seg.view.frame);
        self.views.insert(pos, seg.view);
    }

    fn add_points(&mut self, cloud: &PointCloud) {
        let with_colors = self.cloud.colors.is_some() || self.cloud.is_empty();
        let mut colors = if with_colors {
            self.cloud.colors.take()
        } else {
            None
        };
        for (i, p) in cloud.points.iter().enumerate() {
            if self.voxels.keys.insert(voxel_key(*p, self.voxels.voxel_size)) {
                self.cloud.points.push(*p);
                match (&mut colors, &cloud.colors) {
                    (Some(c), Some(src)) => c.push(src[i]),
                    (None, Some(src)) if self.cloud.points.len() == 1 => colors = Some(vec![src[i]]),
                    _ => colors = None,
                }
            }
        }
        self.cloud.colors = colors.filter(|c| c.len() == self.cloud.points.len());
    }

    fn merge_from(&mut self, other: ObjectSegment) {
        self.add_points(&other.cloud);
        for (l, n) in other.labels {
            *self.labels.entry(l).or_insert(0) += n;
        }
        for v in other.views {
            let pos = self.views.partition_point(|x| x.frame <= v.frame);
            self.views.insert(pos, v);
        }
    }

    pub fn voxels(&self) -> &VoxelSet {
        &self.voxels
    }

    /// Most frequent detection label; ties go to the lexicographically first.
    pub fn label(&self) -> &str {
        self.labels
            .iter()
            .fold(None::<(&String, usize)>, |best, (l, n)| match best {
                Some((_, bn)) if bn >= *n => best,
                _ => Some((l, *n)),
            })
            .map(|(l, _)| l.as_str())
            .unwrap_or("")
    }

    pub fn best(&self) -> Option<&View> {
        self.best_view.map(|i| &self.views[i])
    }
}

/// One lifted detection waiting to be merged.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub cloud: PointCloud,
    pub view: View,
}

/// Back-projects exactly the masked pixels that carry depth.
pub fn lift_mask(mask: &PixelMask, frame: &PosedFrame, intr: &Intrinsics) -> Result<PointCloud, ObjectError> {
    let depth = &frame.depth;
    if (mask.width, mask.height) != (depth.width, depth.height) {
        return Err(ObjectError::MaskSize {
            mask: (mask.width, mask.height),
            depth: (depth.width, depth.height),
        });
    }
    let scale = 1.0 / intr.depth_scale;
    let with_color = frame.color.dimensions() == (depth.width, depth.height);
    let mut points = Vec::new();
    let mut colors = Vec::new();
    for (u, v) in mask.pixels() {
        let raw = depth.raw(u, v);
        if raw == 0 {
            continue;
        }
        let pc = intr.unproject(u as f64, v as f64, raw as f64 * scale);
        let pw = frame.pose.camera_to_world(pc);
        points.push([pw[0] as f32, pw[1] as f32, pw[2] as f32]);
        if with_color {
            colors.push(frame.color.get_pixel(u, v).0);
        }
    }
    if points.is_empty() {
        return Err(ObjectError::EmptySegment);
    }
    Ok(PointCloud {
        points,
        colors: with_color.then_some(colors),
    })
}

pub fn lift_detection(det: &Detection, frame: &PosedFrame, intr: &Intrinsics) -> Result<Segment, ObjectError> {
    let cloud = lift_mask(&det.mask, frame, intr)?;
    let score = score_view(&det.mask, intr.width, intr.height)?;
    Ok(Segment {
        cloud,
        view: View {
            frame: frame.index,
            mask: det.mask.clone(),
            score,
            label: det.label.clone(),
        },
    })
}

/// `|vox(a) ∩ vox(b)| / min(|vox(a)|, |vox(b)|)`.
pub fn overlap_ratio(a: &PointCloud, b: &PointCloud, voxel: f64) -> Result<f64, ObjectError> {
    if a.is_empty() || b.is_empty() {
        return Err(ObjectError::EmptySegment);
    }
    let va = crate::ingest::to_voxels(a, voxel);
    let vb = crate::ingest::to_voxels(b, voxel);
    Ok(voxel_overlap(&va, &vb))
}

fn voxel_overlap(a: &VoxelSet, b: &VoxelSet) -> f64 {
    let denom = a.len().min(b.len());
    if denom == 0 {
        return 0.0;
    }
    a.intersection_count(b) as f64 / denom as f64
}

/// Greedy incremental merge in frame order, followed by a consolidation
/// pass that folds together objects that grew into each other.
pub fn merge_objects(segments: Vec<Segment>, threshold: f64, voxel: f64) -> Vec<ObjectSegment> {
    assert!(threshold > 0.0 && threshold <= 1.0, "threshold must be in (0, 1]");
    let mut segments = segments;
    segments.sort_by_key(|s| s.view.frame);
    let mut objects: Vec<ObjectSegment> = Vec::new();
    for seg in segments {
        if seg.cloud.is_empty() {
            continue;
        }
        let sv = crate::ingest::to_voxels(&seg.cloud, voxel);
        let mut best: Option<(usize, f64)> = None;
        for (i, obj) in objects.iter().enumerate() {
            let r = voxel_overlap(&sv, &obj.voxels);
            if r >= threshold && best.is_none_or(|(_, b)| r > b) {
                best = Some((i, r));
            }
        }
        match best {
            Some((i, _)) => objects[i].absorb(seg),
            None => {
                let id = objects.len();
                objects.push(ObjectSegment::found(id, seg, voxel));
            }
        }
    }
    'outer: loop {
        for i in 0..objects.len() {
            for j in i + 1..objects.len() {
                if voxel_overlap(&objects[i].voxels, &objects[j].voxels) >= threshold {
                    let other = objects.remove(j);
                    objects[i].merge_from(other);
                    continue 'outer;
                }
            }
        }
        break;
    }
    for (i, o) in objects.iter_mut().enumerate() {
        o.id = i;
    }
    objects
}

/// `(area / image area) × clamp(2 · d_edge / min(w, h), 0, 1)` with
/// `d_edge` the distance of the mask centroid to the nearest image edge.
pub fn score_view(mask: &PixelMask, width: u32, height: u32) -> Result<f64, ObjectError> {
    let (cu, cv) = mask.centroid().ok_or(ObjectError::EmptyMask)?;
    let (w, h) = (width as f64, height as f64);
    let area = mask.count() as f64 / (w * h);
    let d_edge = cu.min(w - cu).min(cv).min(h - cv);
    let boundary = (2.0 * d_edge / w.min(h)).clamp(0.0, 1.0);
    Ok((area * boundary).clamp(0.0, 1.0))
}

/// Index of the highest-scoring view; ties go to the earliest frame.
pub fn best_view_index(views: &[View]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in views.iter().enumerate() {
        match best {
            Some(b) if !(v.score > views[b].score || (v.score == views[b].score && v.frame < views[b].frame)) => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Picks the best view and embeds its mask-bounding-box crop.
pub fn attach_best_view<'a>(
    obj: &mut ObjectSegment,
    frame_of: impl Fn(usize) -> Option<&'a PosedFrame>,
    provider: &dyn Provider,
) -> Result<(), ObjectError> {
    let Some(i) = best_view_index(&obj.views) else {
        return Ok(());
    };
    let view = &obj.views[i];
    let frame = frame_of(view.frame).ok_or(ObjectError::EmptySegment)?;
    let embedding = provider.embed_image(&frame.color, view.mask.bbox())?;
    obj.best_view = Some(i);
    obj.embedding = Some(embedding);
    Ok(())
}

/// Detects `functional_tags` in the object's best view, keeping detections
/// centred inside the object's mask bounding box.
pub fn segment_functional_elements(
    obj: &ObjectSegment,
    functional_tags: &[String],
    frame: &PosedFrame,
    intr: &Intrinsics,
    provider: &dyn Provider,
) -> Result<Vec<FunctionalElement>, ObjectError> {
    if functional_tags.is_empty() {
        return Ok(Vec::new());
    }
    let Some(view) = obj.best() else {
        return Ok(Vec::new());
    };
    let Some(bbox) = view.mask.bbox() else {
        return Ok(Vec::new());
    };
    let mut out = Vec::new();
    for det in provider.detect(&frame.color, functional_tags)? {
        let (cu, cv) = det.rect.center();
        if !bbox.contains_point(cu, cv) {
            continue;
        }
        match lift_mask(&det.mask.intersect_rect(bbox), frame, intr) {
            Ok(cloud) => out.push(FunctionalElement {
                id: out.len(),
                parent: obj.id,
                label: det.label,
                cloud,
                source_view: frame.index,
            }),
            Err(ObjectError::EmptySegment) => {
                log::info!("functional element {:?} of object {} has no depth, skipped", det.label, obj.id);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Share of the object's points that the keyframe sees: in front of the
/// camera, inside the image, and not behind the observed surface by more
/// than `depth_tol`. Pixels with no depth reading do not occlude.
pub fn visible_fraction(
    cloud: &PointCloud,
    frame: &PosedFrame,
    intr: &Intrinsics,
    depth_tol: f64,
) -> Result<f64, ObjectError> {
    assert!(depth_tol > 0.0, "depth_tol must be positive");
    if cloud.is_empty() {
        return Err(ObjectError::EmptySegment);
    }
    let visible = cloud
        .points
        .iter()
        .filter(|p| {
            let pc = frame.pose.world_to_camera([p[0] as f64, p[1] as f64, p[2] as f64]);
            let Some((u, v)) = intr.project(pc) else {
                return false;
            };
            let (ui, vi) = (u.round(), v.round());
            if ui < 0.0 || vi < 0.0 || ui >= intr.width as f64 || vi >= intr.height as f64 {
                return false;
            }
            let raw = frame.depth.raw(ui as u32, vi as u32);
            if raw == 0 {
                return true;
            }
            let d = raw as f64 / intr.depth_scale;
            (pc[2] - d).abs() <= depth_tol || pc[2] < d
        })
        .count();
    Ok(visible as f64 / cloud.len() as f64)
}

/// `(object id, fraction)` with fraction ≥ `theta_vis`, most visible first.
pub fn visible_objects(
    frame: &PosedFrame,
    objects: &[ObjectSegment],
    intr: &Intrinsics,
    theta_vis: f64,
    depth_tol: f64,
) -> Vec<(usize, f64)> {
    assert!(theta_vis > 0.0 && theta_vis <= 1.0, "theta_vis must be in (0, 1]");
    let mut out: Vec<(usize, f64)> = objects
        .par_iter()
        .filter_map(|o| {
            let f = visible_fraction(&o.cloud, frame, intr, depth_tol).ok()?;
            (f >= theta_vis).then_some((o.id, f))
        })
        .collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{backproject, DepthMap, Pose};
    use crate::providers::PixelRect;
    use image::RgbImage;

    fn intr() -> Intrinsics {
        Intrinsics::new(20.0, 20.0, 10.0, 8.0, 20, 16, 1000.0).unwrap()
    }

    fn wall_frame(depth_mm: u16) -> PosedFrame {
        let mut data = vec![depth_mm; 20 * 16];
        data[5] = 0;
        PosedFrame {
            index: 0,
            pose: Pose::identity(),
            color: RgbImage::from_pixel(20, 16, image::Rgb([10, 20, 30])),
            depth: DepthMap::new(20, 16, data),
        }
    }

    fn cube(origin: [f32; 3], n: usize, step: f32) -> PointCloud {
        let mut pts = Vec::new();
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    pts.push([
                        origin[0] + i as f32 * step,
                        origin[1] + j as f32 * step,
                        origin[2] + k as f32 * step,
                    ]);
                }
            }
        }
        PointCloud::from_points(pts)
    }

    fn seg(cloud: PointCloud, frame: usize) -> Segment {
        Segment {
            cloud,
            view: View {
                frame,
                mask: PixelMask::full(4, 4),
                score: 0.5,
                label: "box".into(),
            },
        }
    }

    #[test]
    fn full_mask_lift_equals_backprojection() {
        let f = wall_frame(1500);
        let lifted = lift_mask(&PixelMask::full(20, 16), &f, &intr()).unwrap();
        assert_eq!(lifted, backproject(&f, &intr(), 1));
        assert_eq!(lift_mask(&PixelMask::empty(20, 16), &f, &intr()), Err(ObjectError::EmptySegment));
        let half = PixelMask::from_rect(20, 16, PixelRect { x: 0, y: 0, w: 10, h: 16 });
        // One of the 160 masked pixels has no depth.
        assert_eq!(lift_mask(&half, &f, &intr()).unwrap().len(), 159);
    }

    #[test]
    fn overlap_examples() {
        let a = cube([0.0; 3], 4, 0.1);
        assert_eq!(overlap_ratio(&a, &a, 0.05).unwrap(), 1.0);
        let far = cube([5.0, 0.0, 0.0], 4, 0.1);
        assert_eq!(overlap_ratio(&a, &far, 0.05).unwrap(), 0.0);
        let sub = PointCloud::from_points(a.points[..10].to_vec());
        assert_eq!(overlap_ratio(&sub, &a, 0.05).unwrap(), 1.0);
        assert_eq!(overlap_ratio(&PointCloud::new(), &a, 0.05), Err(ObjectError::EmptySegment));
    }

    #[test]
    fn merge_examples() {
        let a = cube([0.02; 3], 5, 0.1);
        let five: Vec<Segment> = (0..5).map(|f| seg(a.clone(), f)).collect();
        let objs = merge_objects(five, 0.3, 0.05);
        assert_eq!(objs.len(), 1);
        assert_eq!(objs[0].views.len(), 5);

        let b = cube([2.02, 0.02, 0.02], 5, 0.1);
        let objs = merge_objects(vec![seg(a.clone(), 0), seg(b, 1)], 0.3, 0.05);
        assert_eq!(objs.len(), 2);

        // Jitter by half a voxel so no two views cover exactly the same voxels.
        let jittered: Vec<Segment> = (0..3)
            .map(|f| seg(cube([0.02 + 0.05 * f as f32, 0.02, 0.02], 5, 0.1), f))
            .collect();
        assert_eq!(merge_objects(jittered, 1.0, 0.05).len(), 3);
    }

    #[test]
    fn consolidation_removes_mutual_overlap() {
        // A and C are disjoint; B bridges them and merges into A, which then
        // overlaps C heavily.
        let a = cube([0.02, 0.02, 0.02], 4, 0.1);
        let c = cube([0.52, 0.02, 0.02], 2, 0.1);
        let b = cube([0.22, 0.02, 0.02], 4, 0.1);
        let objs = merge_objects(vec![seg(a, 0), seg(c, 1), seg(b, 2)], 0.3, 0.05);
        for i in 0..objs.len() {
            for j in i + 1..objs.len() {
                assert!(voxel_overlap(objs[i].voxels(), objs[j].voxels()) < 0.3);
            }
        }
    }

    #[test]
    fn view_scores() {
        assert_eq!(score_view(&PixelMask::full(20, 16), 20, 16).unwrap(), 1.0);
        let corner = PixelMask::from_rect(20, 16, PixelRect { x: 0, y: 0, w: 1, h: 1 });
        assert!(score_view(&corner, 20, 16).unwrap() < 0.001);
        // Centred 20% of a 100x100 image versus an edge-hugging 40% band.
        let centred = PixelMask::from_rect(100, 100, PixelRect { x: 28, y: 28, w: 45, h: 44 });
        let edge = PixelMask::from_rect(100, 100, PixelRect { x: 0, y: 0, w: 100, h: 40 });
        let (sc, se) = (score_view(&centred, 100, 100).unwrap(), score_view(&edge, 100, 100).unwrap());
        // Centroid (50.5, 50): nearest edge 49.5 px away.
        assert!((sc - 0.198 * 0.99).abs() < 1e-12, "{sc}");
        assert!((se - 0.4 * 0.4).abs() < 1e-12, "{se}");
        assert!(sc > se);
        assert_eq!(score_view(&PixelMask::empty(4, 4), 4, 4), Err(ObjectError::EmptyMask));
    }

    #[test]
    fn best_view_ties_go_to_earlier_frame() {
        let v = |frame, score| View {
            frame,
            mask: PixelMask::full(2, 2),
            score,
            label: "x".into(),
        };
        assert_eq!(best_view_index(&[v(3, 0.3), v(5, 0.7)]), Some(1));
        assert_eq!(best_view_index(&[v(5, 0.5), v(3, 0.5)]), Some(1));
        assert_eq!(best_view_index(&[]), None);
    }

    #[test]
    fn visibility_examples() {
        let f = wall_frame(2000);
        let behind = cube([0.0, 0.0, -3.0], 3, 0.1);
        assert_eq!(visible_fraction(&behind, &f, &intr(), 0.08).unwrap(), 0.0);
        let own = backproject(&f, &intr(), 1);
        assert_eq!(visible_fraction(&own, &f, &intr(), 0.08).unwrap(), 1.0);
        let hidden = PointCloud::from_points(vec![[0.0, 0.0, 3.0], [0.0, 0.0, 1.0]]);
        assert_eq!(visible_fraction(&hidden, &f, &intr(), 0.08).unwrap(), 0.5);
    }
}
