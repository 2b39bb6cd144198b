//! Per-room keyframe selection.
//!
//! Frames are assigned to the room containing their camera center, filtered
//! by how much of what they see lies inside that room, embedded as
//! `(translation, w * quaternion)` pose features, standardized, clustered
//! with DBSCAN, and reduced to one medoid per cluster. Noise frames are kept
//! as singleton keyframes.

use std::collections::BTreeMap;

use nalgebra::Matrix3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hierseg::{point_in_polygon, room_volume_test, FloorSlab, RoomRegion};
use crate::ingest::{backproject, Intrinsics, Pose, PosedFrame, VoxelSet};

#[derive(Debug, Error, PartialEq)]
pub enum KeyframeError {
    #[error("room has no frames to select from")]
    EmptyRoom,
    #[error("bad pose: {0}")]
    BadPose(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KeyframeParams {
    /// Rotation weight applied to the quaternion part of the pose feature.
    pub w: f64,
    pub eta: f64,
    pub eps: f64,
    pub min_pts: usize,
    pub coverage_voxel: f64,
}

impl Default for KeyframeParams {
    fn default() -> Self {
        KeyframeParams {
            w: 1.0,
            eta: 0.5,
            eps: 0.8,
            min_pts: 3,
            coverage_voxel: 0.05,
        }
    }
}

/// `(floor index, room index)`.
pub type RoomKey = (usize, usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomFrameSets {
    /// Frames whose camera center lies in the room.
    pub assigned: Vec<usize>,
    /// Assigned frames that also pass the projection filter.
    pub dense: Vec<usize>,
    pub keyframes: Vec<usize>,
    pub eta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseFeature {
    pub frame: usize,
    pub vector: [f64; 7],
    pub w: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StandardizedFeatures {
    pub frames: Vec<usize>,
    pub rows: Vec<[f64; 7]>,
    pub mean: [f64; 7],
    pub std: [f64; 7],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterSet {
    /// Row positions into [`StandardizedFeatures::rows`].
    pub clusters: Vec<Vec<usize>>,
    pub noise: Vec<usize>,
    pub min_pts: usize,
}

/// Frame indices whose camera center passes [`room_volume_test`], per room.
/// Rooms are disjoint so a frame lands in at most one room.
pub fn assign_frames(
    frames: &[PosedFrame],
    rooms: &[RoomRegion],
    floors: &[FloorSlab],
) -> BTreeMap<RoomKey, Vec<usize>> {
    let mut out: BTreeMap<RoomKey, Vec<usize>> = rooms
        .iter()
        .map(|r| ((r.floor_index, r.index), Vec::new()))
        .collect();
    for f in frames {
        let t = f.pose.translation();
        let hit = rooms.iter().find(|room| {
            floors
                .iter()
                .find(|fl| fl.index == room.floor_index)
                .is_some_and(|fl| room_volume_test(t, room, fl))
        });
        if let Some(room) = hit {
            out.get_mut(&(room.floor_index, room.index))
                .expect("room registered")
                .push(f.index);
        }
    }
    out
}

/// Fraction of a frame's valid back-projected points whose `(x, y)` falls
/// inside `polygon`. Zero when the frame has no valid depth.
pub fn inside_ratio(frame: &PosedFrame, polygon: &[[f64; 2]], intr: &Intrinsics, stride: usize) -> f64 {
    let cloud = backproject(frame, intr, stride);
    if cloud.is_empty() {
        return 0.0;
    }
    let inside = cloud
        .points
        .iter()
        .filter(|p| point_in_polygon([p[0] as f64, p[1] as f64], polygon))
        .count();
    inside as f64 / cloud.len() as f64
}

/// Keeps frames whose inside-polygon ratio is at least `eta`.
pub fn filter_by_projection(
    dense: &[&PosedFrame],
    polygon: &[[f64; 2]],
    intr: &Intrinsics,
    eta: f64,
    stride: usize,
) -> Vec<usize> {
    assert!((0.0..=1.0).contains(&eta), "eta must be in [0, 1]");
    if eta == 0.0 {
        return dense.iter().map(|f| f.index).collect();
    }
    dense
        .par_iter()
        .filter(|f| inside_ratio(f, polygon, intr, stride) >= eta)
        .map(|f| f.index)
        .collect()
}

/// Unit quaternion `(w, x, y, z)` of a rotation matrix, sign-canonicalized
/// so the scalar part is non-negative (or, when it is zero, the first
/// non-zero vector component is positive).
pub fn canonical_quaternion(r: &Matrix3<f64>) -> [f64; 4] {
    let (m00, m11, m22) = (r[(0, 0)], r[(1, 1)], r[(2, 2)]);
    let trace = m00 + m11 + m22;
    let q = if trace > 0.0 {
        let s = (trace + 1.0).sqrt() * 2.0;
        [
            0.25 * s,
            (r[(2, 1)] - r[(1, 2)]) / s,
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(1, 0)] - r[(0, 1)]) / s,
        ]
    } else if m00 > m11 && m00 > m22 {
        let s = (1.0 + m00 - m11 - m22).sqrt() * 2.0;
        [
            (r[(2, 1)] - r[(1, 2)]) / s,
            0.25 * s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
        ]
    } else if m11 > m22 {
        let s = (1.0 + m11 - m00 - m22).sqrt() * 2.0;
        [
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            0.25 * s,
            (r[(1, 2)] + r[(2, 1)]) / s,
        ]
    } else {
        let s = (1.0 + m22 - m00 - m11).sqrt() * 2.0;
        [
            (r[(1, 0)] - r[(0, 1)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
            (r[(1, 2)] + r[(2, 1)]) / s,
            0.25 * s,
        ]
    };
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut q = q.map(|v| v / norm);
    const ZERO: f64 = 1e-12;
    let flip = if q[0].abs() > ZERO {
        q[0] < 0.0
    } else {
        q[1..].iter().find(|v| v.abs() > ZERO).is_some_and(|v| *v < 0.0)
    };
    if flip {
        q = q.map(|v| -v);
    }
    q
}

pub fn pose_features(frame: usize, pose: &Pose, w: f64) -> Result<PoseFeature, KeyframeError> {
    if !(w >= 0.0) {
        return Err(KeyframeError::BadPose(format!("rotation weight {w} must be >= 0")));
    }
    // Re-validate: poses may come from places other than the loader.
    let pose = Pose::from_matrix(*pose.matrix()).map_err(KeyframeError::BadPose)?;
    let t = pose.translation();
    let q = canonical_quaternion(&pose.rotation());
    Ok(PoseFeature {
        frame,
        vector: [t[0], t[1], t[2], w * q[0], w * q[1], w * q[2], w * q[3]],
        w,
    })
}

/// Population z-scores per dimension; near-constant dimensions pass through
/// centered with unit scale.
pub fn standardize(features: &[PoseFeature]) -> StandardizedFeatures {
    assert!(!features.is_empty(), "standardize needs at least one feature");
    let n = features.len() as f64;
    let mut mean = [0.0; 7];
    for f in features {
        for k in 0..7 {
            mean[k] += f.vector[k];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut std = [0.0; 7];
    for f in features {
        for k in 0..7 {
            std[k] += (f.vector[k] - mean[k]).powi(2);
        }
    }
    for s in std.iter_mut() {
        *s = (*s / n).sqrt();
        if *s < 1e-12 {
            *s = 1.0;
        }
    }
    let rows = features
        .iter()
        .map(|f| {
            let mut r = [0.0; 7];
            for k in 0..7 {
                r[k] = (f.vector[k] - mean[k]) / std[k];
            }
            r
        })
        .collect();
    StandardizedFeatures {
        frames: features.iter().map(|f| f.frame).collect(),
        rows,
        mean,
        std,
    }
}

#[inline]
pub fn euclidean(a: &[f64; 7], b: &[f64; 7]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// DBSCAN over standardized rows. Neighbourhoods are closed (`<= eps`) and
/// include the point itself. Rows are scanned in ascending order and a
/// border point joins the first cluster that reaches it.
pub fn dbscan(features: &StandardizedFeatures, eps: f64, min_pts: usize) -> ClusterSet {
    assert!(eps > 0.0 && min_pts >= 1, "eps > 0 and min_pts >= 1 required");
    let rows = &features.rows;
    let n = rows.len();
    let region = |i: usize| -> Vec<usize> {
        (0..n).filter(|&j| euclidean(&rows[i], &rows[j]) <= eps).collect()
    };
    let core: Vec<bool> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut count = 0;
            for j in 0..n {
                if euclidean(&rows[i], &rows[j]) <= eps {
                    count += 1;
                    if count >= min_pts {
                        return true;
                    }
                }
            }
            false
        })
        .collect();

    let mut label: Vec<Option<usize>> = vec![None; n];
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for i in 0..n {
        if label[i].is_some() || !core[i] {
            continue;
        }
        let cid = clusters.len();
        let mut members = vec![i];
        label[i] = Some(cid);
        let mut qi = 0;
        while qi < members.len() {
            let p = members[qi];
            qi += 1;
            if !core[p] {
                continue;
            }
            for q in region(p) {
                if label[q].is_none() {
                    label[q] = Some(cid);
                    members.push(q);
                }
            }
        }
        members.sort_unstable();
        clusters.push(members);
    }
    let noise = (0..n).filter(|&i| label[i].is_none()).collect();
    ClusterSet {
        clusters,
        noise,
        min_pts,
    }
}

/// Cluster member minimizing the summed Euclidean distance to all members.
/// Sums run in ascending frame order and exact ties go to the lowest frame
/// index, so the result does not depend on member order.
pub fn medoid(cluster: &[usize], features: &StandardizedFeatures) -> usize {
    assert!(!cluster.is_empty(), "medoid of an empty cluster");
    let mut members = cluster.to_vec();
    members.sort_by_key(|&r| (features.frames[r], r));
    let mut best = members[0];
    let mut best_sum = f64::INFINITY;
    for &j in &members {
        let mut sum = 0.0;
        for &t in &members {
            sum += euclidean(&features.rows[j], &features.rows[t]);
        }
        if sum < best_sum {
            best_sum = sum;
            best = j;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyframeSelection {
    /// Selected frame indices, ascending.
    pub keyframes: Vec<usize>,
    pub features: StandardizedFeatures,
    pub clusters: ClusterSet,
}

/// Medoid of each cluster plus every noise frame, from `(frame index, pose)` pairs.
pub fn select_keyframes(
    dense: &[(usize, Pose)],
    params: &KeyframeParams,
) -> Result<KeyframeSelection, KeyframeError> {
    if dense.is_empty() {
        return Err(KeyframeError::EmptyRoom);
    }
    let feats = dense
        .iter()
        .map(|(i, p)| pose_features(*i, p, params.w))
        .collect::<Result<Vec<_>, _>>()?;
    let features = standardize(&feats);
    let clusters = dbscan(&features, params.eps, params.min_pts);
    let mut keyframes: Vec<usize> = clusters
        .clusters
        .iter()
        .map(|c| features.frames[medoid(c, &features)])
        .chain(clusters.noise.iter().map(|&r| features.frames[r]))
        .collect();
    keyframes.sort_unstable();
    Ok(KeyframeSelection {
        keyframes,
        features,
        clusters,
    })
}

fn voxels_of(frames: &[&PosedFrame], intr: &Intrinsics, voxel: f64) -> VoxelSet {
    let sets: Vec<VoxelSet> = frames
        .par_iter()
        .map(|f| {
            let mut s = VoxelSet::empty(voxel);
            s.insert_cloud(&backproject(f, intr, 1));
            s
        })
        .collect();
    let mut all = VoxelSet::empty(voxel);
    for s in sets {
        all.keys.extend(s.keys);
    }
    all
}

/// Share of the dense frames' voxels that the keyframes also observe
/// (stride-1 back-projection, shared voxel origin).
pub fn coverage(
    keyframes: &[&PosedFrame],
    dense: &[&PosedFrame],
    intr: &Intrinsics,
    voxel_size: f64,
) -> Result<f64, KeyframeError> {
    assert!(voxel_size > 0.0, "voxel size must be positive");
    if dense.is_empty() {
        return Err(KeyframeError::EmptyRoom);
    }
    let dense_vox = voxels_of(dense, intr, voxel_size);
    if dense_vox.is_empty() {
        return Err(KeyframeError::EmptyRoom);
    }
    let key_vox = voxels_of(keyframes, intr, voxel_size);
    Ok(key_vox.intersection_count(&dense_vox) as f64 / dense_vox.len() as f64)
}
