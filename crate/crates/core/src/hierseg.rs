//! Floor and room segmentation of the fused scene cloud.
//!
//! Floors come from dominant peaks of a height histogram. Rooms come from a
//! bird's-eye-view occupancy histogram: low-count cells inside the floor
//! footprint are free space, the distance transform of free space is
//! smoothed, its regional maxima seed a watershed, and undersized basins are
//! folded into their best-connected neighbour.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::PointCloud;

#[derive(Debug, Error, PartialEq)]
pub enum HierSegError {
    #[error("scene cloud is empty")]
    EmptyScene,
    #[error("no free space: every cell of the floor grid looks like a wall")]
    NoFreeSpace,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FloorParams {
    pub bin: f64,
    pub peak_frac: f64,
    pub min_floor_height: f64,
}

impl Default for FloorParams {
    fn default() -> Self {
        FloorParams {
            bin: 0.10,
            peak_frac: 0.3,
            min_floor_height: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoomParams {
    pub cell: f64,
    pub wall_frac: f64,
    pub min_room_area: f64,
    /// Gaussian sigma in cells applied to the distance map before marker search.
    pub smooth_sigma: f64,
    /// Adjacent basins merge when the distance value where they meet is at
    /// least this fraction of the lower basin peak. Values above 1 disable it.
    pub saddle_ratio: f64,
}

impl Default for RoomParams {
    fn default() -> Self {
        RoomParams {
            cell: 0.05,
            wall_frac: 0.4,
            min_room_area: 2.0,
            smooth_sigma: 2.0,
            saddle_ratio: 0.7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FloorSlab {
    pub index: usize,
    pub z_min: f64,
    pub z_max: f64,
    pub cloud: PointCloud,
}

impl FloorSlab {
    pub fn contains_z(&self, z: f64) -> bool {
        z >= self.z_min && z < self.z_max
    }
}

/// Height-histogram floor detection. Every input point lands in exactly one
/// slab; slabs are ascending and non-overlapping.
pub fn detect_floors(cloud: &PointCloud, params: &FloorParams) -> Result<Vec<FloorSlab>, HierSegError> {
    if cloud.is_empty() {
        return Err(HierSegError::EmptyScene);
    }
    let bin = params.bin;
    let bin_of = |z: f64| (z / bin).floor() as i64;
    let (lo, hi) = cloud.bounds().ok_or(HierSegError::EmptyScene)?;
    let first = bin_of(lo[2]);
    let n_bins = (bin_of(hi[2]) - first + 1) as usize;
    let mut counts = vec![0usize; n_bins];
    for p in &cloud.points {
        counts[(bin_of(p[2] as f64) - first) as usize] += 1;
    }
    let max = *counts.iter().max().unwrap_or(&0);
    let thresh = params.peak_frac * max as f64;

    // Local maxima; on a plateau the first bin stands for it.
    let mut peaks: Vec<usize> = (0..n_bins)
        .filter(|&i| {
            let c = counts[i];
            let left_ok = i == 0 || c > counts[i - 1];
            let mut j = i + 1;
            while j < n_bins && counts[j] == c {
                j += 1;
            }
            let right_ok = j == n_bins || c > counts[j];
            c > 0 && left_ok && right_ok && c as f64 >= thresh
        })
        .collect();

    peaks.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let center = |i: usize| (first + i as i64) as f64 * bin + 0.5 * bin;
    let mut kept: Vec<f64> = Vec::new();
    for i in peaks {
        let z = center(i);
        if kept.iter().all(|k| (k - z).abs() >= params.min_floor_height) {
            kept.push(z);
        }
    }
    kept.sort_by(f64::total_cmp);

    let top = next_up(hi[2]);
    let mut bounds: Vec<f64> = kept.iter().map(|z| z - bin).collect();
    bounds[0] = bounds[0].min(lo[2]);
    bounds.push(top);

    let mut slabs: Vec<FloorSlab> = (0..kept.len())
        .map(|i| FloorSlab {
            index: i,
            z_min: bounds[i],
            z_max: bounds[i + 1],
            cloud: PointCloud {
                points: Vec::new(),
                colors: cloud.colors.as_ref().map(|_| Vec::new()),
            },
        })
        .collect();
    for (k, p) in cloud.points.iter().enumerate() {
        let z = p[2] as f64;
        let i = bounds[1..].partition_point(|b| *b <= z).min(slabs.len() - 1);
        slabs[i].cloud.points.push(*p);
        if let (Some(dst), Some(src)) = (slabs[i].cloud.colors.as_mut(), cloud.colors.as_ref()) {
            dst.push(src[k]);
        }
    }
    Ok(slabs)
}

fn next_up(v: f64) -> f64 {
    if v == 0.0 {
        return f64::from_bits(1);
    }
    let b = v.to_bits();
    f64::from_bits(if v > 0.0 { b + 1 } else { b - 1 })
}

/// Placement of a regular 2D grid in world `(x, y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub cell_size: f64,
    pub origin: [f64; 2],
    pub width: usize,
    pub height: usize,
}

impl GridGeometry {
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let c = ((x - self.origin[0]) / self.cell_size).floor();
        let r = ((y - self.origin[1]) / self.cell_size).floor();
        if c < 0.0 || r < 0.0 || c >= self.width as f64 || r >= self.height as f64 {
            return None;
        }
        Some((c as usize, r as usize))
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_center(&self, col: usize, row: usize) -> [f64; 2] {
        [
            self.origin[0] + (col as f64 + 0.5) * self.cell_size,
            self.origin[1] + (row as f64 + 0.5) * self.cell_size,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid2D {
    pub geometry: GridGeometry,
    /// Row-major, `values[row * width + col]`.
    pub values: Vec<f64>,
}

impl Grid2D {
    pub fn new(geometry: GridGeometry) -> Self {
        Grid2D {
            values: vec![0.0; geometry.len()],
            geometry,
        }
    }

    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.values[row * self.geometry.width + col]
    }

    pub fn set(&mut self, col: usize, row: usize, v: f64) {
        let w = self.geometry.width;
        self.values[row * w + col] = v;
    }
}

/// Point counts per `(x, y)` cell, anchored at the floor's minimum corner.
pub fn bev_histogram(floor: &FloorSlab, cell: f64) -> Grid2D {
    assert!(cell > 0.0, "cell size must be positive");
    let Some((lo, hi)) = floor.cloud.bounds() else {
        return Grid2D::new(GridGeometry {
            cell_size: cell,
            origin: [0.0, 0.0],
            width: 0,
            height: 0,
        });
    };
    let width = ((hi[0] - lo[0]) / cell).floor() as usize + 1;
    let height = ((hi[1] - lo[1]) / cell).floor() as usize + 1;
    let mut grid = Grid2D::new(GridGeometry {
        cell_size: cell,
        origin: [lo[0], lo[1]],
        width,
        height,
    });
    for p in &floor.cloud.points {
        if let Some((c, r)) = grid.geometry.cell_of(p[0] as f64, p[1] as f64) {
            grid.values[r * width + c] += 1.0;
        }
    }
    grid
}

/// Run-length encoded set of grid cells (runs over row-major indices).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellMask {
    pub runs: Vec<(u32, u32)>,
}

impl CellMask {
    pub fn from_flags(flags: impl IntoIterator<Item = bool>) -> Self {
        let mut runs = Vec::new();
        let mut start: Option<u32> = None;
        let mut idx = 0u32;
        for f in flags {
            match (f, start) {
                (true, None) => start = Some(idx),
                (false, Some(s)) => {
                    runs.push((s, idx - s));
                    start = None;
                }
                _ => {}
            }
            idx += 1;
        }
        if let Some(s) = start {
            runs.push((s, idx - s));
        }
        CellMask { runs }
    }

    pub fn count(&self) -> usize {
        self.runs.iter().map(|r| r.1 as usize).sum()
    }

    pub fn contains(&self, idx: usize) -> bool {
        let i = self.runs.partition_point(|r| (r.0 as usize) <= idx);
        i > 0 && {
            let (s, l) = self.runs[i - 1];
            idx < (s + l) as usize
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.runs
            .iter()
            .flat_map(|&(s, l)| (s as usize)..(s as usize + l as usize))
    }

    pub fn to_flags(&self, len: usize) -> Vec<bool> {
        let mut out = vec![false; len];
        for i in self.iter() {
            out[i] = true;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoomRegion {
    pub index: usize,
    pub floor_index: usize,
    pub grid: GridGeometry,
    /// Free-space cells labeled with this room.
    pub mask: CellMask,
    /// Outer boundary in meters, counter-clockwise. Encloses the room's
    /// free space together with the wall cells nearest to it.
    pub polygon: Vec<[f64; 2]>,
    pub cloud: PointCloud,
}

impl RoomRegion {
    pub fn area(&self) -> f64 {
        polygon_area(&self.polygon).abs()
    }

    pub fn polygon_centroid(&self) -> [f64; 2] {
        polygon_centroid(&self.polygon)
    }
}

/// Labels produced by [`segment_rooms`] over one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RoomLabels {
    pub geometry: GridGeometry,
    /// Room label per cell over free space, `-1` elsewhere.
    pub labels: Vec<i32>,
    /// Free space plus the wall cells closest to each room.
    pub footprint: Vec<i32>,
    pub free: Vec<bool>,
    pub rooms: usize,
}

impl RoomLabels {
    pub fn mask(&self, room: usize) -> CellMask {
        CellMask::from_flags(self.labels.iter().map(|&l| l == room as i32))
    }

    pub fn footprint_mask(&self, room: usize) -> CellMask {
        CellMask::from_flags(self.footprint.iter().map(|&l| l == room as i32))
    }
}

const N4: [(isize, isize); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];
const N8: [(isize, isize); 8] = [
    (1, 0),
    (-1, 0),
    (0, 1),
    (0, -1),
    (1, 1),
    (1, -1),
    (-1, 1),
    (-1, -1),
];

fn neighbors<'a>(
    g: &'a GridGeometry,
    idx: usize,
    offsets: &'a [(isize, isize)],
) -> impl Iterator<Item = usize> + 'a {
    let (c, r) = ((idx % g.width) as isize, (idx / g.width) as isize);
    offsets.iter().filter_map(move |(dc, dr)| {
        let (nc, nr) = (c + dc, r + dr);
        (nc >= 0 && nr >= 0 && (nc as usize) < g.width && (nr as usize) < g.height)
            .then(|| nr as usize * g.width + nc as usize)
    })
}

/// Occupied cells plus every empty cell enclosed by them.
fn occupied_hull(grid: &Grid2D) -> Vec<bool> {
    let g = &grid.geometry;
    let mut outside = vec![false; g.len()];
    let mut queue = VecDeque::new();
    for idx in 0..g.len() {
        let (c, r) = (idx % g.width, idx / g.width);
        let border = c == 0 || r == 0 || c + 1 == g.width || r + 1 == g.height;
        if border && grid.values[idx] <= 0.0 {
            outside[idx] = true;
            queue.push_back(idx);
        }
    }
    while let Some(idx) = queue.pop_front() {
        for n in neighbors(g, idx, &N4) {
            if !outside[n] && grid.values[n] <= 0.0 {
                outside[n] = true;
                queue.push_back(n);
            }
        }
    }
    outside.into_iter().map(|o| !o).collect()
}

fn percentile_nearest_rank(values: &mut [f64], pct: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let rank = ((pct / 100.0) * values.len() as f64).ceil() as usize;
    values[rank.clamp(1, values.len()) - 1]
}

/// Exact squared Euclidean distance transform, 1D pass (Felzenszwalb & Huttenlocher).
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0 and the new parabola dominates from -inf.
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Euclidean distance (in cells) from each free cell to the nearest
/// non-free cell; cells beyond the grid border count as non-free.
pub fn distance_transform(free: &[bool], width: usize, height: usize) -> Vec<f64> {
    // Pad by one so the grid border acts as an obstacle.
    let (pw, ph) = (width + 2, height + 2);
    let big = ((pw * pw + ph * ph) as f64) * 4.0;
    let mut f = vec![0f64; pw * ph];
    for r in 0..height {
        for c in 0..width {
            if free[r * width + c] {
                f[(r + 1) * pw + c + 1] = big;
            }
        }
    }
    let mut tmp = vec![0f64; pw.max(ph)];
    let mut col = vec![0f64; ph];
    for c in 0..pw {
        for r in 0..ph {
            col[r] = f[r * pw + c];
        }
        edt_1d(&col, &mut tmp[..ph]);
        for r in 0..ph {
            f[r * pw + c] = tmp[r];
        }
    }
    let mut row = vec![0f64; pw];
    for r in 0..ph {
        row.copy_from_slice(&f[r * pw..(r + 1) * pw]);
        edt_1d(&row, &mut tmp[..pw]);
        f[r * pw..(r + 1) * pw].copy_from_slice(&tmp[..pw]);
    }
    let mut out = vec![0f64; width * height];
    for r in 0..height {
        for c in 0..width {
            out[r * width + c] = f[(r + 1) * pw + c + 1].sqrt();
        }
    }
    out
}

/// Separable Gaussian blur with clamp-to-edge borders.
pub fn gaussian_smooth(values: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return values.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.into_iter().map(|k| k / norm).collect();
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0f64; values.len()];
    for r in 0..height {
        for c in 0..width {
            let mut s = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let cc = clamp(c as isize + k as isize - radius, width);
                s += w * values[r * width + cc];
            }
            tmp[r * width + c] = s;
        }
    }
    let mut out = vec![0f64; values.len()];
    for r in 0..height {
        for c in 0..width {
            let mut s = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let rr = clamp(r as isize + k as isize - radius, height);
                s += w * tmp[rr * width + c];
            }
            out[r * width + c] = s;
        }
    }
    out
}

/// Plateaus of `values` over `free` cells with no strictly higher 8-neighbour.
/// Sorted by (value desc, first cell row-major).
fn regional_maxima(values: &[f64], free: &[bool], g: &GridGeometry) -> Vec<Vec<usize>> {
    let max_abs = values.iter().fold(0f64, |m, v| m.max(v.abs()));
    let tol = 1e-9 * max_abs.max(1.0);
    let mut seen = vec![false; values.len()];
    let mut out: Vec<(f64, Vec<usize>)> = Vec::new();
    for start in 0..values.len() {
        if !free[start] || seen[start] {
            continue;
        }
        let v = values[start];
        let mut plateau = vec![start];
        let mut is_max = true;
        seen[start] = true;
        let mut qi = 0;
        while qi < plateau.len() {
            let idx = plateau[qi];
            qi += 1;
            for n in neighbors(g, idx, &N8) {
                if !free[n] {
                    continue;
                }
                if values[n] > v + tol {
                    is_max = false;
                } else if (values[n] - v).abs() <= tol && !seen[n] {
                    seen[n] = true;
                    plateau.push(n);
                }
            }
        }
        if is_max {
            plateau.sort_unstable();
            out.push((v, plateau));
        }
    }
    out.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1[0].cmp(&b.1[0])));
    out.into_iter().map(|(_, p)| p).collect()
}

#[derive(PartialEq)]
struct OrdF64(f64);
impl Eq for OrdF64 {}
impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}
impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Marker-based flooding of `-values` over `free` cells (4-connected).
fn watershed(values: &[f64], free: &[bool], g: &GridGeometry, markers: &[Vec<usize>]) -> Vec<i32> {
    let mut labels = vec![-1i32; values.len()];
    // Max-heap: highest distance first, then lowest cell index, then earliest push.
    let mut heap: BinaryHeap<(OrdF64, Reverse<usize>, Reverse<u64>, i32)> = BinaryHeap::new();
    let mut seq = 0u64;
    for (m, cells) in markers.iter().enumerate() {
        for &c in cells {
            labels[c] = m as i32;
        }
    }
    for (m, cells) in markers.iter().enumerate() {
        for &c in cells {
            for n in neighbors(g, c, &N4) {
                if free[n] && labels[n] < 0 {
                    heap.push((OrdF64(values[n]), Reverse(n), Reverse(seq), m as i32));
                    seq += 1;
                }
            }
        }
    }
    while let Some((_, Reverse(idx), _, label)) = heap.pop() {
        if labels[idx] >= 0 {
            continue;
        }
        labels[idx] = label;
        for n in neighbors(g, idx, &N4) {
            if free[n] && labels[n] < 0 {
                heap.push((OrdF64(values[n]), Reverse(n), Reverse(seq), label));
                seq += 1;
            }
        }
    }
    labels
}

/// Merges adjacent basins separated by no real narrowing: the pass saddle
/// (highest `min(value)` over 4-adjacent cell pairs) is at least `ratio`
/// times the lower of the two peaks. Highest ratio first, lowest labels on ties.
fn merge_shallow_basins(labels: &mut [i32], values: &[f64], g: &GridGeometry, ratio: f64) {
    loop {
        let mut peak: BTreeMap<i32, f64> = BTreeMap::new();
        let mut saddle: BTreeMap<(i32, i32), f64> = BTreeMap::new();
        for idx in 0..labels.len() {
            let a = labels[idx];
            if a < 0 {
                continue;
            }
            let p = peak.entry(a).or_insert(f64::NEG_INFINITY);
            *p = p.max(values[idx]);
            for n in neighbors(g, idx, &N4) {
                let b = labels[n];
                if b > a {
                    let s = saddle.entry((a, b)).or_insert(f64::NEG_INFINITY);
                    *s = s.max(values[idx].min(values[n]));
                }
            }
        }
        let best = saddle
            .iter()
            .filter_map(|(&(a, b), &s)| {
                let low = peak[&a].min(peak[&b]);
                (low > 0.0 && s >= ratio * low).then_some((s / low, a, b))
            })
            .max_by(|x, y| x.0.total_cmp(&y.0).then(y.1.cmp(&x.1)).then(y.2.cmp(&x.2)));
        let Some((_, keep, gone)) = best else {
            return;
        };
        for l in labels.iter_mut() {
            if *l == gone {
                *l = keep;
            }
        }
    }
}

/// Folds regions smaller than `min_cells` into the 4-adjacent neighbour with
/// the longest shared boundary. Isolated undersized regions are dropped.
fn merge_small_regions(labels: &mut [i32], g: &GridGeometry, min_cells: f64) {
    loop {
        let mut sizes: BTreeMap<i32, usize> = BTreeMap::new();
        for &l in labels.iter() {
            if l >= 0 {
                *sizes.entry(l).or_default() += 1;
            }
        }
        let Some((&small, _)) = sizes
            .iter()
            .filter(|(_, &n)| (n as f64) < min_cells)
            .min_by(|a, b| a.1.cmp(b.1).then(a.0.cmp(b.0)))
        else {
            return;
        };
        let mut shared: BTreeMap<i32, usize> = BTreeMap::new();
        for idx in 0..labels.len() {
            if labels[idx] != small {
                continue;
            }
            for n in neighbors(g, idx, &N4) {
                let l = labels[n];
                if l >= 0 && l != small {
                    *shared.entry(l).or_default() += 1;
                }
            }
        }
        let target = shared
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(&l, _)| l)
            .unwrap_or(-1);
        for l in labels.iter_mut() {
            if *l == small {
                *l = target;
            }
        }
    }
}

/// Watershed room segmentation of a bird's-eye-view count grid.
pub fn segment_rooms(grid: &Grid2D, params: &RoomParams) -> Result<RoomLabels, HierSegError> {
    let g = grid.geometry;
    if g.is_empty() {
        return Err(HierSegError::NoFreeSpace);
    }
    let hull = occupied_hull(grid);
    let mut occupied: Vec<f64> = grid.values.iter().copied().filter(|v| *v > 0.0).collect();
    if occupied.is_empty() {
        return Err(HierSegError::NoFreeSpace);
    }
    let norm = percentile_nearest_rank(&mut occupied, 95.0);
    let wall_thresh = params.wall_frac * norm;
    let free: Vec<bool> = (0..g.len())
        .map(|i| hull[i] && grid.values[i] < wall_thresh)
        .collect();
    if !free.iter().any(|f| *f) {
        return Err(HierSegError::NoFreeSpace);
    }

    let dist = distance_transform(&free, g.width, g.height);
    let smooth = gaussian_smooth(&dist, g.width, g.height, params.smooth_sigma);
    let markers = regional_maxima(&smooth, &free, &g);
    let mut labels = watershed(&smooth, &free, &g, &markers);
    merge_shallow_basins(&mut labels, &smooth, &g, params.saddle_ratio);
    let min_cells = params.min_room_area / (g.cell_size * g.cell_size);
    merge_small_regions(&mut labels, &g, min_cells);

    // Renumber by first cell in row-major order.
    let mut remap: BTreeMap<i32, i32> = BTreeMap::new();
    let mut next = 0;
    for &l in &labels {
        if l >= 0 && !remap.contains_key(&l) {
            remap.insert(l, next);
            next += 1;
        }
    }
    for l in labels.iter_mut() {
        if *l >= 0 {
            *l = remap[l];
        }
    }
    if next == 0 {
        return Err(HierSegError::NoFreeSpace);
    }

    // Hand wall cells inside the hull to the nearest room (multi-source BFS).
    let mut footprint = labels.clone();
    let mut queue: VecDeque<usize> = (0..g.len()).filter(|&i| labels[i] >= 0).collect();
    while let Some(idx) = queue.pop_front() {
        for n in neighbors(&g, idx, &N4) {
            if footprint[n] < 0 && hull[n] && !free[n] {
                footprint[n] = footprint[idx];
                queue.push_back(n);
            }
        }
    }

    Ok(RoomLabels {
        geometry: g,
        labels,
        footprint,
        free,
        rooms: next as usize,
    })
}

/// Full room extraction for one floor: histogram, watershed, polygons and
/// member clouds.
pub fn rooms_for_floor(floor: &FloorSlab, params: &RoomParams) -> Result<Vec<RoomRegion>, HierSegError> {
    if floor.cloud.is_empty() {
        return Err(HierSegError::EmptyScene);
    }
    let grid = bev_histogram(floor, params.cell);
    let labels = segment_rooms(&grid, params)?;
    Ok(regions_from_labels(floor, &labels))
}

pub fn regions_from_labels(floor: &FloorSlab, labels: &RoomLabels) -> Vec<RoomRegion> {
    let g = labels.geometry;
    let mut clouds: Vec<PointCloud> = (0..labels.rooms)
        .map(|_| PointCloud {
            points: Vec::new(),
            colors: floor.cloud.colors.as_ref().map(|_| Vec::new()),
        })
        .collect();
    for (k, p) in floor.cloud.points.iter().enumerate() {
        if let Some((c, r)) = g.cell_of(p[0] as f64, p[1] as f64) {
            let l = labels.footprint[r * g.width + c];
            if l >= 0 {
                let cloud = &mut clouds[l as usize];
                cloud.points.push(*p);
                if let (Some(dst), Some(src)) = (cloud.colors.as_mut(), floor.cloud.colors.as_ref()) {
                    dst.push(src[k]);
                }
            }
        }
    }
    clouds
        .into_iter()
        .enumerate()
        .map(|(i, cloud)| {
            let fp: Vec<bool> = labels.footprint.iter().map(|&l| l == i as i32).collect();
            RoomRegion {
                index: i,
                floor_index: floor.index,
                grid: g,
                mask: labels.mask(i),
                polygon: mask_outline(&fp, &g),
                cloud,
            }
        })
        .collect()
}

/// Outer boundary of a cell mask as a counter-clockwise polygon in meters.
/// Diagonal-only contacts are treated as separate components; the loop with
/// the largest area wins.
pub fn mask_outline(mask: &[bool], g: &GridGeometry) -> Vec<[f64; 2]> {
    let inside = |c: isize, r: isize| {
        c >= 0 && r >= 0 && (c as usize) < g.width && (r as usize) < g.height && mask[r as usize * g.width + c as usize]
    };
    // Directed edges with the region on the left, vertices in grid units.
    let mut out_edges: BTreeMap<(isize, isize), Vec<(isize, isize)>> = BTreeMap::new();
    for idx in 0..mask.len() {
        if !mask[idx] {
            continue;
        }
        let (c, r) = ((idx % g.width) as isize, (idx / g.width) as isize);
        let mut add = |a: (isize, isize), b: (isize, isize)| out_edges.entry(a).or_default().push(b);
        if !inside(c, r - 1) {
            add((c, r), (c + 1, r));
        }
        if !inside(c + 1, r) {
            add((c + 1, r), (c + 1, r + 1));
        }
        if !inside(c, r + 1) {
            add((c + 1, r + 1), (c, r + 1));
        }
        if !inside(c - 1, r) {
            add((c, r + 1), (c, r));
        }
    }
    let mut best: Vec<(isize, isize)> = Vec::new();
    let mut best_area = 0.0;
    while let Some((&start, _)) = out_edges.iter().find(|(_, v)| !v.is_empty()) {
        let mut loop_pts = vec![start];
        let mut cur = start;
        let mut dir: Option<(isize, isize)> = None;
        loop {
            let outs = out_edges.get_mut(&cur).expect("boundary is closed");
            let pick = if outs.len() == 1 {
                0
            } else {
                // Prefer the left turn relative to the incoming direction.
                let d = dir.unwrap_or((1, 0));
                let left = (-d.1, d.0);
                outs.iter()
                    .position(|&n| (n.0 - cur.0, n.1 - cur.1) == left)
                    .unwrap_or(0)
            };
            let next = outs.remove(pick);
            dir = Some((next.0 - cur.0, next.1 - cur.1));
            cur = next;
            if cur == start {
                break;
            }
            loop_pts.push(cur);
        }
        let pts: Vec<[f64; 2]> = loop_pts.iter().map(|p| [p.0 as f64, p.1 as f64]).collect();
        let area = polygon_area(&pts);
        if area > best_area {
            best_area = area;
            best = loop_pts;
        }
    }
    simplify_collinear(&best)
        .into_iter()
        .map(|(c, r)| {
            [
                g.origin[0] + c as f64 * g.cell_size,
                g.origin[1] + r as f64 * g.cell_size,
            ]
        })
        .collect()
}

fn simplify_collinear(pts: &[(isize, isize)]) -> Vec<(isize, isize)> {
    let n = pts.len();
    if n < 3 {
        return pts.to_vec();
    }
    (0..n)
        .filter(|&i| {
            let a = pts[(i + n - 1) % n];
            let b = pts[i];
            let c = pts[(i + 1) % n];
            (b.0 - a.0) * (c.1 - b.1) - (b.1 - a.1) * (c.0 - b.0) != 0
        })
        .map(|i| pts[i])
        .collect()
}

/// Signed shoelace area; positive for counter-clockwise.
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
        / 2.0
}

pub fn polygon_centroid(poly: &[[f64; 2]]) -> [f64; 2] {
    let a = polygon_area(poly);
    let n = poly.len();
    if a.abs() < 1e-12 {
        let s = poly.iter().fold([0.0, 0.0], |s, p| [s[0] + p[0], s[1] + p[1]]);
        return [s[0] / n.max(1) as f64, s[1] / n.max(1) as f64];
    }
    let mut c = [0.0, 0.0];
    for i in 0..n {
        let (p, q) = (poly[i], poly[(i + 1) % n]);
        let cross = p[0] * q[1] - q[0] * p[1];
        c[0] += (p[0] + q[0]) * cross;
        c[1] += (p[1] + q[1]) * cross;
    }
    [c[0] / (6.0 * a), c[1] / (6.0 * a)]
}

/// Even-odd point-in-polygon; points on the boundary count as inside.
pub fn point_in_polygon(p: [f64; 2], poly: &[[f64; 2]]) -> bool {
    let n = poly.len();
    if n < 3 {
        return false;
    }
    let mut inside = false;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        if on_segment(p, a, b) {
            return true;
        }
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
            if p[0] < x {
                inside = !inside;
            }
        }
    }
    inside
}

fn on_segment(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> bool {
    let cross = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
    let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
    if cross.abs() > 1e-9 * len.max(1.0) {
        return false;
    }
    p[0] >= a[0].min(b[0]) - 1e-12
        && p[0] <= a[0].max(b[0]) + 1e-12
        && p[1] >= a[1].min(b[1]) - 1e-12
        && p[1] <= a[1].max(b[1]) + 1e-12
}

/// Distance from `p` to the polygon boundary (0 when inside).
pub fn polygon_distance(p: [f64; 2], poly: &[[f64; 2]]) -> f64 {
    if point_in_polygon(p, poly) {
        return 0.0;
    }
    let n = poly.len();
    (0..n)
        .map(|i| segment_distance(p, poly[i], poly[(i + 1) % n]))
        .fold(f64::INFINITY, f64::min)
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let d = [ap[0] - t * ab[0], ap[1] - t * ab[1]];
    (d[0] * d[0] + d[1] * d[1]).sqrt()
}

/// True iff `point` lies inside the room polygon and within the floor slab.
pub fn room_volume_test(point: [f64; 3], room: &RoomRegion, floor: &FloorSlab) -> bool {
    floor.contains_z(point[2]) && point_in_polygon([point[0], point[1]], &room.polygon)
}
