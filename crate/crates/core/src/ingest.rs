//! Posed RGB-D input: loading, pinhole back-projection, and voxel fusion.
//!
//! All voxel math uses a global origin at `(0, 0, 0)` so voxel sets produced
//! by different stages can be intersected directly.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma, RgbImage};
use nalgebra::{Matrix3, Matrix4};
use rayon::prelude::*;
use rustc_hash::{FxHashMap, FxHashSet};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("missing file: {0}")]
    MissingFile(String),
    #[error("bad pose in {path}: {reason}")]
    BadPose { path: String, reason: String },
    #[error("bad intrinsics: {0}")]
    BadIntrinsics(String),
    #[error("no valid depth in any frame")]
    EmptyScene,
    #[error("image error in {path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// Raw depth units per meter.
    pub depth_scale: f64,
}

impl Intrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        depth_scale: f64,
    ) -> Result<Self, IngestError> {
        let intr = Intrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            depth_scale,
        };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx > 0.0
            && self.cx < self.width as f64
            && self.cy > 0.0
            && self.cy < self.height as f64
            && self.depth_scale > 0.0
            && [self.fx, self.fy, self.cx, self.cy, self.depth_scale]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(IngestError::BadIntrinsics(format!("{self:?}")))
        }
    }

    /// Parses the single-line `fx fy cx cy width height depth_scale` format.
    pub fn parse(line: &str) -> Result<Self, IngestError> {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 7 {
            return Err(IngestError::BadIntrinsics(format!(
                "expected 7 fields, got {}",
                parts.len()
            )));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| IngestError::BadIntrinsics(format!("not a number: {s}")))
        };
        let dim = |s: &str| {
            s.parse::<u32>()
                .map_err(|_| IngestError::BadIntrinsics(format!("not an image dimension: {s}")))
        };
        Intrinsics::new(
            num(parts[0])?,
            num(parts[1])?,
            num(parts[2])?,
            num(parts[3])?,
            dim(parts[4])?,
            dim(parts[5])?,
            num(parts[6])?,
        )
    }

    pub fn to_line(&self) -> String {
        format!(
            "{} {} {} {} {} {} {}",
            self.fx, self.fy, self.cx, self.cy, self.width, self.height, self.depth_scale
        )
    }

    /// Camera-frame point to continuous pixel coordinates. `None` when `z <= 0`.
    pub fn project(&self, p: [f64; 3]) -> Option<(f64, f64)> {
        if p[2] <= 0.0 {
            return None;
        }
        Some((
            self.fx * p[0] / p[2] + self.cx,
            self.fy * p[1] / p[2] + self.cy,
        ))
    }

    pub fn unproject(&self, u: f64, v: f64, depth_m: f64) -> [f64; 3] {
        [
            (u - self.cx) * depth_m / self.fx,
            (v - self.cy) * depth_m / self.fy,
            depth_m,
        ]
    }
}

/// Rigid camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose(Matrix4<f64>);

impl Pose {
    pub fn identity() -> Self {
        Pose(Matrix4::identity())
    }

    pub fn from_matrix(m: Matrix4<f64>) -> Result<Self, String> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err("non-finite entry".into());
        }
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(format!("bottom row {bottom:?} is not [0 0 0 1]"));
        }
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        let err = (r * r.transpose() - Matrix3::identity()).amax();
        if err >= 1e-5 {
            return Err(format!("rotation not orthonormal (max error {err:.2e})"));
        }
        let det = r.determinant();
        if det <= 0.0 {
            return Err(format!("rotation determinant {det:.4} is not +1"));
        }
        Ok(Pose(m))
    }

    pub fn from_rt(rotation: Matrix3<f64>, translation: [f64; 3]) -> Result<Self, String> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
        m[(0, 3)] = translation[0];
        m[(1, 3)] = translation[1];
        m[(2, 3)] = translation[2];
        Pose::from_matrix(m)
    }

    /// Row-major 16 values.
    pub fn from_row_major(v: &[f64]) -> Result<Self, String> {
        if v.len() != 16 {
            return Err(format!("expected 16 values, got {}", v.len()));
        }
        Pose::from_matrix(Matrix4::from_row_slice(v))
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = self.0[(r, c)];
            }
        }
        out
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.0
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.0.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> [f64; 3] {
        [self.0[(0, 3)], self.0[(1, 3)], self.0[(2, 3)]]
    }

    pub fn with_translation(&self, t: [f64; 3]) -> Pose {
        let mut m = self.0;
        m[(0, 3)] = t[0];
        m[(1, 3)] = t[1];
        m[(2, 3)] = t[2];
        Pose(m)
    }

    pub fn camera_to_world(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.0;
        [
            m[(0, 0)] * p[0] + m[(0, 1)] * p[1] + m[(0, 2)] * p[2] + m[(0, 3)],
            m[(1, 0)] * p[0] + m[(1, 1)] * p[1] + m[(1, 2)] * p[2] + m[(1, 3)],
            m[(2, 0)] * p[0] + m[(2, 1)] * p[1] + m[(2, 2)] * p[2] + m[(2, 3)],
        ]
    }

    /// `Rᵀ (p − t)`.
    pub fn world_to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.0;
        let d = [p[0] - m[(0, 3)], p[1] - m[(1, 3)], p[2] - m[(2, 3)]];
        [
            m[(0, 0)] * d[0] + m[(1, 0)] * d[1] + m[(2, 0)] * d[2],
            m[(0, 1)] * d[0] + m[(1, 1)] * d[1] + m[(2, 1)] * d[2],
            m[(0, 2)] * d[0] + m[(1, 2)] * d[1] + m[(2, 2)] * d[2],
        ]
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let vals: Result<Vec<f64>, _> = text.split_whitespace().map(str::parse::<f64>).collect();
        let vals = vals.map_err(|e| e.to_string())?;
        Pose::from_row_major(&vals)
    }

    pub fn to_text(&self) -> String {
        let v = self.to_row_major();
        v.chunks(4)
            .map(|row| {
                row.iter()
                    .map(|x| format!("{x}"))
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect::<Vec<_>>()
            .join("\n")
            + "\n"
    }
}

/// Depth map in raw sensor units; 0 marks invalid depth.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u16>,
}

impl DepthMap {
    pub fn new(width: u32, height: u32, data: Vec<u16>) -> Self {
        assert_eq!(data.len(), (width * height) as usize, "depth buffer size");
        DepthMap {
            width,
            height,
            data,
        }
    }

    pub fn zeros(width: u32, height: u32) -> Self {
        DepthMap::new(width, height, vec![0; (width * height) as usize])
    }

    #[inline]
    pub fn raw(&self, u: u32, v: u32) -> u16 {
        self.data[(v * self.width + u) as usize]
    }

    pub fn to_image(&self) -> ImageBuffer<Luma<u16>, Vec<u16>> {
        ImageBuffer::from_raw(self.width, self.height, self.data.clone()).expect("sized buffer")
    }
}

#[derive(Debug, Clone)]
pub struct PosedFrame {
    pub index: usize,
    pub pose: Pose,
    pub color: RgbImage,
    pub depth: DepthMap,
}

#[derive(Debug, Clone)]
pub struct Sequence {
    pub root: Option<PathBuf>,
    pub intrinsics: Intrinsics,
    pub frames: Vec<PosedFrame>,
}

impl Sequence {
    pub fn frame(&self, index: usize) -> Option<&PosedFrame> {
        self.frames
            .binary_search_by_key(&index, |f| f.index)
            .ok()
            .map(|i| &self.frames[i])
    }
}

pub fn color_path(root: &Path, index: usize) -> PathBuf {
    root.join("color").join(format!("{index:06}.png"))
}

pub fn depth_path(root: &Path, index: usize) -> PathBuf {
    root.join("depth").join(format!("{index:06}.png"))
}

pub fn pose_path(root: &Path, index: usize) -> PathBuf {
    root.join("poses").join(format!("{index:06}.txt"))
}

fn list_indices(dir: &Path, ext: &str) -> Result<BTreeSet<usize>, IngestError> {
    if !dir.is_dir() {
        return Err(IngestError::MissingFile(dir.display().to_string()));
    }
    let mut out = BTreeSet::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some(ext) {
            continue;
        }
        if let Some(idx) = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse::<usize>().ok())
        {
            out.insert(idx);
        }
    }
    Ok(out)
}

/// Loads `<root>/intrinsics.txt` plus the `color/`, `depth/` and `poses/`
/// streams. Frames come back sorted by index.
pub fn load_sequence(root: &Path) -> Result<Sequence, IngestError> {
    let intr_path = root.join("intrinsics.txt");
    if !intr_path.is_file() {
        return Err(IngestError::MissingFile(intr_path.display().to_string()));
    }
    let intr_text = fs::read_to_string(&intr_path).map_err(io_err(&intr_path))?;
    let intrinsics = Intrinsics::parse(intr_text.lines().next().unwrap_or(""))?;

    let color = list_indices(&root.join("color"), "png")?;
    let depth = list_indices(&root.join("depth"), "png")?;
    let poses = list_indices(&root.join("poses"), "txt")?;
    let all: BTreeSet<usize> = color.union(&depth).chain(poses.iter()).copied().collect();
    for &i in &all {
        if !color.contains(&i) {
            return Err(IngestError::MissingFile(color_path(root, i).display().to_string()));
        }
        if !depth.contains(&i) {
            return Err(IngestError::MissingFile(depth_path(root, i).display().to_string()));
        }
        if !poses.contains(&i) {
            return Err(IngestError::MissingFile(pose_path(root, i).display().to_string()));
        }
    }

    let indices: Vec<usize> = all.into_iter().collect();
    let frames = indices
        .par_iter()
        .map(|&i| load_frame(root, i, &intrinsics))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Sequence {
        root: Some(root.to_path_buf()),
        intrinsics,
        frames,
    })
}

fn load_frame(root: &Path, index: usize, intr: &Intrinsics) -> Result<PosedFrame, IngestError> {
    let pp = pose_path(root, index);
    let text = fs::read_to_string(&pp).map_err(io_err(&pp))?;
    let pose = Pose::parse(&text).map_err(|reason| IngestError::BadPose {
        path: pp.display().to_string(),
        reason,
    })?;

    let cp = color_path(root, index);
    let color = image::open(&cp)
        .map_err(|source| IngestError::Image {
            path: cp.display().to_string(),
            source,
        })?
        .into_rgb8();

    let dp = depth_path(root, index);
    let depth_img = image::open(&dp).map_err(|source| IngestError::Image {
        path: dp.display().to_string(),
        source,
    })?;
    let depth = match depth_img {
        DynamicImage::ImageLuma16(buf) => {
            let (w, h) = buf.dimensions();
            DepthMap::new(w, h, buf.into_raw())
        }
        other => {
            return Err(IngestError::BadIntrinsics(format!(
                "{}: depth must be 16-bit grayscale, got {:?}",
                dp.display(),
                other.color()
            )))
        }
    };

    if depth.width != intr.width || depth.height != intr.height {
        return Err(IngestError::BadIntrinsics(format!(
            "{}: depth is {}x{}, intrinsics say {}x{}",
            dp.display(),
            depth.width,
            depth.height,
            intr.width,
            intr.height
        )));
    }
    if color.dimensions() != (intr.width, intr.height) {
        return Err(IngestError::BadIntrinsics(format!(
            "{}: color is {:?}, intrinsics say {}x{}",
            cp.display(),
            color.dimensions(),
            intr.width,
            intr.height
        )));
    }
    Ok(PosedFrame {
        index,
        pose,
        color,
        depth,
    })
}

/// Writes a sequence in the on-disk input layout.
pub fn write_sequence(root: &Path, intr: &Intrinsics, frames: &[PosedFrame]) -> Result<(), IngestError> {
    for sub in ["color", "depth", "poses"] {
        let d = root.join(sub);
        fs::create_dir_all(&d).map_err(io_err(&d))?;
    }
    let ip = root.join("intrinsics.txt");
    fs::write(&ip, intr.to_line() + "\n").map_err(io_err(&ip))?;
    frames.par_iter().try_for_each(|f| {
        let pp = pose_path(root, f.index);
        fs::write(&pp, f.pose.to_text()).map_err(io_err(&pp))?;
        let cp = color_path(root, f.index);
        f.color.save(&cp).map_err(|source| IngestError::Image {
            path: cp.display().to_string(),
            source,
        })?;
        let dp = depth_path(root, f.index);
        f.depth.to_image().save(&dp).map_err(|source| IngestError::Image {
            path: dp.display().to_string(),
            source,
        })
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f32; 3]>,
    pub colors: Option<Vec<[u8; 3]>>,
}

impl PointCloud {
    pub fn new() -> Self {
        PointCloud::default()
    }

    pub fn from_points(points: Vec<[f32; 3]>) -> Self {
        PointCloud {
            points,
            colors: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Option<[f64; 3]> {
        if self.points.is_empty() {
            return None;
        }
        let mut s = [0.0f64; 3];
        for p in &self.points {
            for k in 0..3 {
                s[k] += p[k] as f64;
            }
        }
        let n = self.points.len() as f64;
        Some([s[0] / n, s[1] / n, s[2] / n])
    }

    /// Axis-aligned bounds `(min, max)`.
    pub fn bounds(&self) -> Option<([f64; 3], [f64; 3])> {
        let first = self.points.first()?;
        let mut lo = first.map(|v| v as f64);
        let mut hi = lo;
        for p in &self.points {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k] as f64);
                hi[k] = hi[k].max(p[k] as f64);
            }
        }
        Some((lo, hi))
    }

    /// Keeps the points selected by `keep`, preserving colors.
    pub fn filter(&self, mut keep: impl FnMut(&[f32; 3]) -> bool) -> PointCloud {
        let mut points = Vec::new();
        let mut colors = self.colors.as_ref().map(|_| Vec::new());
        for (i, p) in self.points.iter().enumerate() {
            if keep(p) {
                points.push(*p);
                if let (Some(out), Some(src)) = (colors.as_mut(), self.colors.as_ref()) {
                    out.push(src[i]);
                }
            }
        }
        PointCloud { points, colors }
    }

    pub fn extend(&mut self, other: &PointCloud) {
        match (&mut self.colors, &other.colors) {
            (Some(a), Some(b)) => a.extend_from_slice(b),
            (Some(_), None) | (None, Some(_)) if self.points.is_empty() => {
                self.colors = other.colors.clone();
            }
            (a, _) => *a = None,
        }
        self.points.extend_from_slice(&other.points);
    }
}

#[inline]
pub fn voxel_key(p: [f32; 3], voxel_size: f64) -> [i32; 3] {
    [
        (p[0] as f64 / voxel_size).floor() as i32,
        (p[1] as f64 / voxel_size).floor() as i32,
        (p[2] as f64 / voxel_size).floor() as i32,
    ]
}

/// Occupied voxel indices under the shared `(0, 0, 0)` origin.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelSet {
    pub voxel_size: f64,
    pub origin: [f64; 3],
    pub keys: FxHashSet<[i32; 3]>,
}

impl VoxelSet {
    pub fn empty(voxel_size: f64) -> Self {
        assert!(voxel_size > 0.0, "voxel_size must be positive");
        VoxelSet {
            voxel_size,
            origin: [0.0; 3],
            keys: FxHashSet::default(),
        }
    }

    pub fn insert_cloud(&mut self, cloud: &PointCloud) {
        for p in &cloud.points {
            self.keys.insert(voxel_key(*p, self.voxel_size));
        }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn intersection_count(&self, other: &VoxelSet) -> usize {
        debug_assert_eq!(self.voxel_size, other.voxel_size);
        let (small, large) = if self.len() <= other.len() {
            (self, other)
        } else {
            (other, self)
        };
        small.keys.iter().filter(|k| large.keys.contains(*k)).count()
    }

    pub fn union_count(&self, other: &VoxelSet) -> usize {
        self.len() + other.len() - self.intersection_count(other)
    }

    pub fn sorted_keys(&self) -> Vec<[i32; 3]> {
        let mut keys: Vec<_> = self.keys.iter().copied().collect();
        keys.sort_unstable();
        keys
    }
}

pub fn to_voxels(cloud: &PointCloud, voxel_size: f64) -> VoxelSet {
    let mut set = VoxelSet::empty(voxel_size);
    set.insert_cloud(cloud);
    set
}

const FIXED_SCALE: f64 = 1e6;

/// Exact integer accumulator so voxel centroids do not depend on the order
/// points arrive in.
#[derive(Debug, Clone, Copy, Default)]
struct VoxelAccum {
    sum: [i64; 3],
    color: [u64; 3],
    n: u64,
}

type AccumMap = FxHashMap<[i32; 3], VoxelAccum>;

fn accumulate(map: &mut AccumMap, cloud: &PointCloud, voxel_size: f64) {
    for (i, p) in cloud.points.iter().enumerate() {
        let acc = map.entry(voxel_key(*p, voxel_size)).or_default();
        for k in 0..3 {
            acc.sum[k] += (p[k] as f64 * FIXED_SCALE).round() as i64;
        }
        if let Some(c) = &cloud.colors {
            for k in 0..3 {
                acc.color[k] += c[i][k] as u64;
            }
        }
        acc.n += 1;
    }
}

fn merge_accum(mut a: AccumMap, b: AccumMap) -> AccumMap {
    if a.len() < b.len() {
        return merge_accum(b, a);
    }
    for (k, v) in b {
        let e = a.entry(k).or_default();
        for i in 0..3 {
            e.sum[i] += v.sum[i];
            e.color[i] += v.color[i];
        }
        e.n += v.n;
    }
    a
}

fn accum_to_cloud(map: AccumMap, voxel_size: f64, with_colors: bool) -> PointCloud {
    let mut entries: Vec<_> = map.into_iter().collect();
    entries.sort_unstable_by_key(|(k, _)| *k);
    let mut points = Vec::with_capacity(entries.len());
    let mut colors = Vec::with_capacity(if with_colors { entries.len() } else { 0 });
    for (key, acc) in entries {
        let n = acc.n as f64;
        let mut p = [0f32; 3];
        for k in 0..3 {
            p[k] = (acc.sum[k] as f64 / n / FIXED_SCALE) as f32;
        }
        // Rounding can push the centroid of a boundary-hugging voxel into
        // its neighbour; the representative must stay in its own voxel.
        if voxel_key(p, voxel_size) != key {
            for k in 0..3 {
                let lo = key[k] as f64 * voxel_size;
                let hi = (key[k] + 1) as f64 * voxel_size;
                let mut v = (p[k] as f64).clamp(lo, hi) as f32;
                while ((v as f64) / voxel_size).floor() as i32 > key[k] {
                    v = next_down(v);
                }
                while (((v as f64) / voxel_size).floor() as i32) < key[k] {
                    v = next_up(v);
                }
                p[k] = v;
            }
        }
        points.push(p);
        if with_colors {
            colors.push([
                (acc.color[0] as f64 / n).round() as u8,
                (acc.color[1] as f64 / n).round() as u8,
                (acc.color[2] as f64 / n).round() as u8,
            ]);
        }
    }
    PointCloud {
        points,
        colors: with_colors.then_some(colors),
    }
}

fn next_up(v: f32) -> f32 {
    if v == 0.0 {
        return f32::from_bits(1);
    }
    let b = v.to_bits();
    f32::from_bits(if v > 0.0 { b + 1 } else { b - 1 })
}

fn next_down(v: f32) -> f32 {
    -next_up(-v)
}

/// One centroid per occupied voxel, sorted by voxel key.
pub fn voxel_downsample(cloud: &PointCloud, voxel_size: f64) -> PointCloud {
    assert!(voxel_size > 0.0, "voxel_size must be positive");
    let mut map = AccumMap::default();
    accumulate(&mut map, cloud, voxel_size);
    accum_to_cloud(map, voxel_size, cloud.colors.is_some())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackprojectOptions {
    pub stride: usize,
    /// Depths beyond this many meters are dropped.
    pub max_depth: Option<f64>,
}

impl Default for BackprojectOptions {
    fn default() -> Self {
        BackprojectOptions {
            stride: 4,
            max_depth: None,
        }
    }
}

/// Back-projects every `stride`-th pixel with non-zero depth into world space.
pub fn backproject(frame: &PosedFrame, intr: &Intrinsics, stride: usize) -> PointCloud {
    backproject_with(
        frame,
        intr,
        BackprojectOptions {
            stride,
            max_depth: None,
        },
    )
}

pub fn backproject_with(frame: &PosedFrame, intr: &Intrinsics, opts: BackprojectOptions) -> PointCloud {
    assert!(opts.stride >= 1, "stride must be >= 1");
    let depth = &frame.depth;
    let with_color = frame.color.dimensions() == (depth.width, depth.height);
    let scale = 1.0 / intr.depth_scale;
    let mut points = Vec::new();
    let mut colors = Vec::new();
    for v in (0..depth.height).step_by(opts.stride) {
        for u in (0..depth.width).step_by(opts.stride) {
            let raw = depth.raw(u, v);
            if raw == 0 {
                continue;
            }
            let d = raw as f64 * scale;
            if opts.max_depth.is_some_and(|m| d > m) {
                continue;
            }
            let pc = intr.unproject(u as f64, v as f64, d);
            let pw = frame.pose.camera_to_world(pc);
            points.push([pw[0] as f32, pw[1] as f32, pw[2] as f32]);
            if with_color {
                colors.push(frame.color.get_pixel(u, v).0);
            }
        }
    }
    PointCloud {
        points,
        colors: with_color.then_some(colors),
    }
}

/// Union of all frame back-projections, downsampled to voxel centroids.
/// The result does not depend on frame order or thread count.
pub fn fuse_scene(
    frames: &[PosedFrame],
    intr: &Intrinsics,
    voxel_size: f64,
    opts: BackprojectOptions,
) -> Result<PointCloud, IngestError> {
    assert!(voxel_size > 0.0, "voxel_size must be positive");
    let with_colors = frames
        .iter()
        .all(|f| f.color.dimensions() == (f.depth.width, f.depth.height));
    let map = frames
        .par_iter()
        .map(|f| {
            let mut m = AccumMap::default();
            accumulate(&mut m, &backproject_with(f, intr, opts), voxel_size);
            m
        })
        .reduce(AccumMap::default, merge_accum);
    if map.is_empty() {
        return Err(IngestError::EmptyScene);
    }
    Ok(accum_to_cloud(map, voxel_size, with_colors))
}
