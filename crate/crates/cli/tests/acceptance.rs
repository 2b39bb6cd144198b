//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest
//! harness so the lines are always printed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use keysg_core::evalharness::{grounding_accuracy, recall_at_k, semantic_seg_metrics, Candidate};
use keysg_core::hierseg::{detect_floors, rooms_for_floor, FloorParams, RoomParams};
use keysg_core::ingest::{fuse_scene, BackprojectOptions};
use keysg_core::keyframes::{
    assign_frames, coverage, filter_by_projection, medoid, select_keyframes, StandardizedFeatures,
};
use keysg_core::objects::{merge_objects, visible_fraction, visible_objects, Segment, View};
use keysg_core::providers::{FixtureTable, MockProvider, PixelMask};
use keysg_core::ragindex::{build_index, chunk_graph, retrieve_hierarchical, Chunk, Mode, Store, StoreKind};
use keysg_core::synth::{self, Scene, SynthBox};
use keysg_core::{Config, Intrinsics, PointCloud, PosedFrame, SceneGraph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}

// 1 ------------------------------------------------------------------------

fn keyframe_compression() -> Outcome {
    let start = Instant::now();
    let traj = synth::room_trajectory(2000, 11);
    let intr = &traj.intrinsics;
    let cfg = Config::default();
    let cloud = fuse_scene(&traj.frames, intr, cfg.ingest.voxel_size, BackprojectOptions::default()).map_err(|e| e.to_string())?;
    let floors = detect_floors(&cloud, &cfg.floors).map_err(|e| e.to_string())?;
    ensure(floors.len() == 1, || format!("{} floors", floors.len()))?;
    let rooms = rooms_for_floor(&floors[0], &cfg.rooms).map_err(|e| e.to_string())?;
    ensure(rooms.len() == 1, || format!("{} rooms", rooms.len()))?;
    let assigned = assign_frames(&traj.frames, &rooms, &floors);
    let ids = assigned.get(&(0, 0)).cloned().unwrap_or_default();
    let p = &cfg.keyframes;
    let all: Vec<_> = ids.iter().map(|&i| &traj.frames[i]).collect();
    let dense = filter_by_projection(&all, &rooms[0].polygon, intr, p.eta, 4);
    let pairs: Vec<_> = dense.iter().map(|&i| (i, traj.frames[i].pose)).collect();
    let sel = select_keyframes(&pairs, p).map_err(|e| e.to_string())?;
    let kf: Vec<_> = sel.keyframes.iter().map(|&i| &traj.frames[i]).collect();
    let df: Vec<_> = dense.iter().map(|&i| &traj.frames[i]).collect();
    let cov = coverage(&kf, &df, intr, 0.05).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let ratio = sel.keyframes.len() as f64 / traj.frames.len() as f64;
    let detail = format!(
        "{} of {} frames ({:.2}%), coverage {cov:.4}, {secs:.1} s",
        sel.keyframes.len(),
        traj.frames.len(),
        ratio * 100.0
    );
    ensure(ratio <= 0.05 && cov >= 0.95 && secs < 60.0, || detail.clone())?;
    Ok(detail)
}

// 2 ------------------------------------------------------------------------

fn medoid_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut with_ties = 0;
    for case in 0..200 {
        let n = rng.random_range(1..=200usize);
        let mut rows: Vec<[f64; 7]> = Vec::with_capacity(n);
        for _ in 0..n {
            if !rows.is_empty() && rng.random_bool(0.2) {
                let j = rng.random_range(0..rows.len());
                rows.push(rows[j]);
            } else {
                rows.push(std::array::from_fn(|_| rng.random_range(-3.0..3.0)));
            }
        }
        // Symmetric placements make several members tie exactly.
        if case % 4 == 0 {
            rows = (0..n)
                .map(|i| {
                    let mut r = [0.0; 7];
                    r[i % 7] = if i % 2 == 0 { 1.0 } else { -1.0 };
                    r
                })
                .collect();
        }
        let mut frames: Vec<usize> = (0..n).map(|i| i * 3 + 5).collect();
        for i in (1..n).rev() {
            frames.swap(i, rng.random_range(0..=i));
        }
        let feats = StandardizedFeatures {
            frames: frames.clone(),
            rows: rows.clone(),
            mean: [0.0; 7],
            std: [1.0; 7],
        };
        let mut members: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            members.swap(i, rng.random_range(0..=i));
        }
        let got = medoid(&members, &feats);

        // Brute force in frame order: argmin of summed distances, first wins.
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&r| frames[r]);
        let dist = |a: &[f64; 7], b: &[f64; 7]| {
            let mut s = 0.0;
            for k in 0..7 {
                s += (a[k] - b[k]) * (a[k] - b[k]);
            }
            s.sqrt()
        };
        let sums: Vec<f64> = order
            .iter()
            .map(|&j| {
                let mut s = 0.0;
                for &t in &order {
                    s += dist(&rows[j], &rows[t]);
                }
                s
            })
            .collect();
        let best = sums.iter().cloned().fold(f64::INFINITY, f64::min);
        if sums.iter().filter(|&&s| s == best).count() > 1 {
            with_ties += 1;
        }
        let want = order[sums.iter().position(|&s| s == best).expect("non-empty")];
        ensure(got == want, || format!("case {case}: medoid row {got}, oracle row {want}"))?;
    }
    ensure(with_ties > 0, || "no tie cases generated".into())?;
    Ok(format!("200/200 clusters agree ({with_ties} with tied minima)"))
}

// 3 ------------------------------------------------------------------------

fn oracle_visible(cloud: &PointCloud, frame: &PosedFrame, intr: &Intrinsics, tol: f64) -> f64 {
    let m = frame.pose.to_row_major();
    let mut seen = 0usize;
    for p in &cloud.points {
        let d = [p[0] as f64 - m[3], p[1] as f64 - m[7], p[2] as f64 - m[11]];
        // Inverse rotation is the transpose: column i of R dotted with d.
        let x = m[0] * d[0] + m[4] * d[1] + m[8] * d[2];
        let y = m[1] * d[0] + m[5] * d[1] + m[9] * d[2];
        let z = m[2] * d[0] + m[6] * d[1] + m[10] * d[2];
        if z <= 0.0 {
            continue;
        }
        let u = (intr.fx * x / z + intr.cx).round();
        let v = (intr.fy * y / z + intr.cy).round();
        if u < 0.0 || v < 0.0 || u >= intr.width as f64 || v >= intr.height as f64 {
            continue;
        }
        let raw = frame.depth.data[v as usize * intr.width as usize + u as usize];
        if raw == 0 {
            seen += 1;
            continue;
        }
        let surface = raw as f64 / intr.depth_scale;
        if z < surface || (z - surface).abs() <= tol {
            seen += 1;
        }
    }
    seen as f64 / cloud.points.len() as f64
}

fn visibility_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let intr = Intrinsics::new(48.0, 48.0, 31.5, 23.5, 64, 48, 1000.0).map_err(|e| e.to_string())?;
    let mut boxes = synth::shell(0.0, 0.0, 6.0, 5.0, 2.5, 0.1);
    for _ in 0..8 {
        let min = [rng.random_range(0.3..5.0), rng.random_range(0.3..4.0), 0.0];
        let size = [rng.random_range(0.2..1.0), rng.random_range(0.2..1.0), rng.random_range(0.2..1.5)];
        boxes.push(SynthBox::structure(min, [min[0] + size[0], min[1] + size[1], size[2]], [120, 90, 60]));
    }
    let scene = Scene { boxes };
    let objects: Vec<PointCloud> = (0..20)
        .map(|_| {
            let c = [rng.random_range(0.5..5.5), rng.random_range(0.5..4.5), rng.random_range(0.1..2.0)];
            let pts = (0..rng.random_range(20..200))
                .map(|_| {
                    [
                        (c[0] + rng.random_range(-0.4..0.4)) as f32,
                        (c[1] + rng.random_range(-0.4..0.4)) as f32,
                        (c[2] + rng.random_range(-0.4..0.4)) as f32,
                    ]
                })
                .collect();
            PointCloud::from_points(pts)
        })
        .collect();
    let tol = Config::default().objects.depth_tol;
    let mut compared = 0;
    for f in 0..50 {
        let pos = [rng.random_range(0.5..5.5), rng.random_range(0.5..4.5), rng.random_range(0.8..1.8)];
        let pose = synth::look_pose(pos, rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(-0.6..0.2));
        let r = scene.render(&pose, &intr);
        let frame = PosedFrame {
            index: f,
            pose,
            color: r.color,
            depth: r.depth,
        };
        for (o, cloud) in objects.iter().enumerate() {
            let got = visible_fraction(cloud, &frame, &intr, tol).map_err(|e| e.to_string())?;
            let want = oracle_visible(cloud, &frame, &intr, tol);
            ensure(got.to_bits() == want.to_bits(), || format!("frame {f} object {o}: {got} vs {want}"))?;
            compared += 1;
        }
    }
    let fx = synth::occlusion_fixture();
    let segment = |cloud: &PointCloud, label: &str| Segment {
        cloud: cloud.clone(),
        view: View {
            frame: 0,
            mask: PixelMask::empty(fx.intrinsics.width, fx.intrinsics.height),
            score: 0.0,
            label: label.into(),
        },
    };
    let objs = merge_objects(vec![segment(&fx.front, "front"), segment(&fx.hidden, "hidden")], 0.9, 0.02);
    ensure(objs.len() == 2, || format!("{} merged objects", objs.len()))?;
    let vis = visible_objects(&fx.frame, &objs, &fx.intrinsics, 0.25, tol);
    let seen: Vec<&str> = vis.iter().map(|(id, _)| objs.iter().find(|o| o.id == *id).expect("id").labels.keys().next().expect("label").as_str()).collect();
    ensure(seen == ["front"], || format!("visible at 0.25: {seen:?}"))?;
    Ok(format!("{compared} frame-object pairs bit-exact; occluded object hidden"))
}

// 4 ------------------------------------------------------------------------

fn segmentation_fixtures() -> Outcome {
    let (cloud, truth) = synth::two_floor_cloud(1);
    let floors = detect_floors(&cloud, &FloorParams::default()).map_err(|e| e.to_string())?;
    ensure(floors.len() == 2, || format!("{} floors", floors.len()))?;
    let err = (floors[1].z_min - truth).abs();
    ensure(err <= 0.1, || format!("boundary off by {err:.3} m"))?;

    let plan = synth::two_room_plan(2);
    let floors = detect_floors(&plan.cloud, &FloorParams::default()).map_err(|e| e.to_string())?;
    let rooms = rooms_for_floor(&floors[0], &RoomParams::default()).map_err(|e| e.to_string())?;
    ensure(rooms.len() == 2, || format!("{} rooms", rooms.len()))?;
    // Wall cells belong to neither room in the generator, so cells within
    // 0.15 m of a wall line are left out of the truth.
    let near_wall = |x: f64, y: f64| {
        x < 0.15 || y < 0.15 || x > plan.width - 0.15 || y > plan.depth - 0.15 || (x - plan.divider_x).abs() < 0.15
    };
    let mut ious = Vec::new();
    for room in &rooms {
        let g = room.grid;
        let c = room.polygon_centroid();
        let label = plan.label(c[0], c[1]).ok_or("room centroid outside the plan")?;
        let (mut inter, mut union) = (0usize, 0usize);
        for idx in 0..g.len() {
            let [x, y] = g.cell_center(idx % g.width, idx / g.width);
            let t = !near_wall(x, y) && plan.label(x, y) == Some(label);
            let p = room.mask.contains(idx);
            inter += usize::from(t && p);
            union += usize::from(t || p);
        }
        ious.push(inter as f64 / union as f64);
    }
    ensure(ious.iter().all(|&i| i >= 0.9), || format!("room IoU {ious:?}"))?;
    Ok(format!("boundary error {err:.3} m; room IoU {:.3}, {:.3}", ious[0], ious[1]))
}

// 5 ------------------------------------------------------------------------

fn retrieval_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let unit = |rng: &mut ChaCha8Rng| {
        let v: Vec<f32> = (0..256).map(|_| rng.random_range(-1.0..1.0f32)).collect();
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        v.into_iter().map(|x| x / n).collect::<Vec<f32>>()
    };
    let mut vectors: Vec<Vec<f32>> = (0..1000).map(|_| unit(&mut rng)).collect();
    // Duplicates under different ids force score ties.
    for i in 0..50 {
        vectors[900 + i] = vectors[i * 3].clone();
    }
    let ids: Vec<String> = (0..1000).map(|i| format!("c{:04}", (i * 7919) % 1000)).collect();
    let rows = vectors
        .iter()
        .zip(&ids)
        .map(|(v, id)| {
            let chunk = Chunk {
                id: id.clone(),
                kind: StoreKind::Object,
                node: id.clone(),
                frame: None,
                text: String::new(),
            };
            (chunk, v.clone())
        })
        .collect();
    let store = Store::from_rows(StoreKind::Object, rows).map_err(|e| e.to_string())?;
    let mut queries: Vec<Vec<f32>> = (0..20).map(|_| unit(&mut rng)).collect();
    queries.push(vectors[0].clone());
    for (qi, q) in queries.iter().enumerate() {
        let scores: Vec<f64> = vectors
            .iter()
            .map(|v| v.iter().zip(q).fold(0.0, |s, (a, b)| s + *a as f64 * *b as f64))
            .collect();
        for k in [1, 5, 10] {
            let got = store.topk(q, k).map_err(|e| e.to_string())?;
            let mut taken = vec![false; vectors.len()];
            for (rank, hit) in got.iter().enumerate() {
                let mut best: Option<usize> = None;
                for i in 0..vectors.len() {
                    if taken[i] {
                        continue;
                    }
                    best = match best {
                        Some(b) if scores[b] > scores[i] || (scores[b] == scores[i] && ids[b] < ids[i]) => Some(b),
                        _ => Some(i),
                    };
                }
                let b = best.expect("rows left");
                taken[b] = true;
                ensure(hit.id == ids[b] && hit.score == scores[b], || {
                    format!("query {qi} k {k} rank {rank}: {} {} vs {} {}", hit.id, hit.score, ids[b], scores[b])
                })?;
            }
            ensure(got.len() == k, || format!("query {qi}: {} hits for k {k}", got.len()))?;
        }
    }
    Ok(format!("{} queries x k in {{1, 5, 10}} match the full scan", queries.len()))
}

// 6 ------------------------------------------------------------------------

fn hierarchical_descent() -> Outcome {
    let graph = synth::planted_graph(synth::PLANTED_LAYOUT);
    let queries = synth::planted_queries(synth::PLANTED_LAYOUT);
    let provider = MockProvider::new(FixtureTable::default());
    let chunks = chunk_graph(&graph).map_err(|e| e.to_string())?;
    let index = build_index(&chunks, &graph, &provider, &|_| None).map_err(|e| e.to_string())?;
    let beam = Config::default().rag.beam_width;
    let mut acc = BTreeMap::new();
    for mode in [Mode::Parsed, Mode::Raw] {
        let mut correct = 0;
        for (q, want) in &queries {
            let r = retrieve_hierarchical(q, &graph, &index, mode, beam, &provider).map_err(|e| e.to_string())?;
            if r.hits.first().is_some_and(|h| &h.node == want) {
                correct += 1;
            }
            let rooms = r.trace.levels.iter().find(|l| l.level == StoreKind::Room).ok_or("no room level")?;
            let objects = r.trace.levels.iter().find(|l| l.level == StoreKind::Object).ok_or("no object level")?;
            let mut parents: Vec<String> = objects
                .candidates
                .iter()
                .map(|h| graph.parent(&h.node).ok().flatten().unwrap_or_default())
                .collect();
            parents.sort();
            parents.dedup();
            ensure(parents.len() <= 1 && parents.iter().all(|p| rooms.selected.contains(p)), || {
                format!("{q:?} ({mode:?}): objects compared across rooms {parents:?}")
            })?;
        }
        acc.insert(format!("{mode:?}"), correct as f64 / queries.len() as f64);
    }
    let (parsed, raw) = (acc["Parsed"], acc["Raw"]);
    let detail = format!(
        "{} queries: parsed {:.0}%, raw {:.0}%, no cross-room comparisons",
        queries.len(),
        parsed * 100.0,
        raw * 100.0
    );
    ensure(parsed >= 0.95 && raw >= 0.90, || detail.clone())?;
    Ok(detail)
}

// 7 ------------------------------------------------------------------------

fn metric_correctness() -> Outcome {
    // 3 classes over 10 points; one miss (None) and one a→c confusion.
    let gt: Vec<String> = ["a", "a", "a", "a", "b", "b", "b", "c", "c", "c"].map(String::from).to_vec();
    let pred: Vec<Option<String>> = [Some("a"), Some("a"), Some("a"), Some("b"), Some("b"), Some("b"), None, Some("c"), Some("a"), Some("c")]
        .map(|p| p.map(String::from))
        .to_vec();
    let m = semantic_seg_metrics(&pred, &gt).map_err(|e| e.to_string())?;
    // a: tp 3, support 4, fp 1; b: tp 2, support 3, fp 1; c: tp 2, support 3, fp 0.
    let expect = [("a", 3.0 / 4.0, 3.0 / 5.0), ("b", 2.0 / 3.0, 2.0 / 4.0), ("c", 2.0 / 3.0, 2.0 / 3.0)];
    for (c, recall, iou) in expect {
        let s = &m.classes[c];
        ensure(close(s.recall, recall) && close(s.iou, iou), || format!("class {c}: {s:?}"))?;
    }
    ensure(close(m.m_acc, 25.0 / 36.0), || format!("mAcc {}", m.m_acc))?;
    ensure(close(m.f_miou, 0.59), || format!("f-mIoU {}", m.f_miou))?;

    let items = vec![
        vec![Candidate { rank: 1, iou: 0.3 }],
        vec![Candidate { rank: 3, iou: 0.5 }, Candidate { rank: 1, iou: 0.05 }],
    ];
    for (k, thr, want) in [(1, 0.0, 1.0), (1, 0.1, 0.5), (5, 0.1, 1.0), (1, 0.25, 0.5), (5, 0.25, 1.0), (5, 0.4, 0.5), (2, 0.4, 0.0)] {
        let got = recall_at_k(&items, k, thr).map_err(|e| e.to_string())?;
        ensure(got == want, || format!("R@{k} IoU≥{thr}: {got} vs {want}"))?;
    }

    let ious = [0.5, 0.05, 0.0, 0.1, 0.3, 0.09, 0.2, 0.0, 0.8, 0.0];
    let cases: Vec<(f64, Vec<String>)> = ious
        .iter()
        .enumerate()
        .map(|(i, &iou)| {
            let mut f = Vec::new();
            if i < 4 {
                f.push("room".to_string());
            }
            if [0, 4, 5].contains(&i) {
                f.push("spatial".to_string());
            }
            (iou, f)
        })
        .collect();
    let g = grounding_accuracy(&cases, 0.1).map_err(|e| e.to_string())?;
    ensure(g.correct == 5 && g.queries == 10 && g.accuracy == 0.5, || format!("{g:?}"))?;
    let room = &g.categories["room"];
    ensure(room.with == Some(0.5) && room.with_count == 4 && room.without == Some(0.5) && room.without_count == 6, || {
        format!("room split {room:?}")
    })?;
    let spatial = &g.categories["spatial"];
    ensure(
        spatial.with.is_some_and(|x| close(x, 2.0 / 3.0)) && spatial.without.is_some_and(|x| close(x, 3.0 / 7.0)),
        || format!("spatial split {spatial:?}"),
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..500 {
        let items: Vec<Vec<Candidate>> = (0..rng.random_range(1..30))
            .map(|_| {
                (0..rng.random_range(0..6))
                    .map(|_| Candidate {
                        rank: rng.random_range(1..20),
                        iou: rng.random_range(0.0..1.0),
                    })
                    .collect()
            })
            .collect();
        let thr = [0.0, 0.1, 0.25, 0.5, 0.9];
        for w in thr.windows(2) {
            for k in 1..20 {
                let (a, b) = (recall_at_k(&items, k, w[0]).unwrap(), recall_at_k(&items, k, w[1]).unwrap());
                let next = recall_at_k(&items, k + 1, w[0]).unwrap();
                ensure(b <= a && a <= next, || format!("case {case}: k {k} thr {w:?}"))?;
            }
        }
    }
    Ok("seg, recall and grounding fixtures match; recall monotone over 500 random inputs".into())
}

// 8 and 10 -----------------------------------------------------------------

fn keysg(args: &[&str]) -> Result<std::process::Output, String> {
    Command::new(env!("CARGO_BIN_EXE_keysg"))
        .args(args)
        .env_remove("KEYSG_MOCK_FAIL")
        .env_remove("KEYSG_CACHE_DIR")
        .output()
        .map_err(|e| e.to_string())
}

fn build(input: &Path, out: &Path) -> Result<(), String> {
    let o = keysg(&["build", "--mock", "--jobs", "8", "--input", path(input), "--out", path(out)])?;
    ensure(o.status.success(), || format!("build exited {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr)))
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn output_files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else if matches!(p.extension().and_then(|x| x.to_str()), Some("json" | "kpc" | "jsonl" | "vec")) {
                out.push(p.strip_prefix(dir).expect("under dir").to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn determinism(input: &Path, scratch: &Path) -> Outcome {
    let (a, b) = (scratch.join("a"), scratch.join("b"));
    build(input, &a)?;
    build(input, &b)?;
    let (fa, fb) = (output_files(&a), output_files(&b));
    ensure(fa == fb, || "different file sets".into())?;
    for f in &fa {
        let same = std::fs::read(a.join(f)).ok() == std::fs::read(b.join(f)).ok();
        ensure(same, || format!("{} differs", f.display()))?;
    }
    let kinds = ["graph.json", ".kpc", ".jsonl", ".vec"];
    for k in kinds {
        ensure(fa.iter().any(|f| f.to_string_lossy().ends_with(k)), || format!("no {k} output"))?;
    }
    Ok(format!("{} files byte-identical across two runs", fa.len()))
}

fn round_trip() -> Outcome {
    let g = synth::random_graph(500, 9);
    let n = g.objects().count();
    ensure(n == 500, || format!("{n} objects"))?;
    let json = g.to_json();
    let sidecars: BTreeMap<String, Vec<u8>> = g.sidecars().into_iter().collect();
    let back = SceneGraph::from_json(&json, |p| sidecars.get(p).cloned()).map_err(|e| e.to_string())?;
    ensure(back.to_json() == json, || "graph.json bytes differ".into())?;
    let again: BTreeMap<String, Vec<u8>> = back.sidecars().into_iter().collect();
    ensure(again == sidecars, || "sidecar bytes differ".into())?;
    Ok(format!("500 objects, {} bytes of json and {} sidecars re-serialize identically", json.len(), sidecars.len()))
}

fn end_to_end(fx: &synth::FixtureScene, input: &Path, scratch: &Path) -> Outcome {
    let start = Instant::now();
    let out = scratch.join("e2e");
    build(input, &out)?;
    let graph = SceneGraph::load(&out).map_err(|e| e.to_string())?;
    let rooms = graph.rooms().count();
    let objects: Vec<_> = graph.objects().collect();
    let elements: usize = objects.iter().map(|o| o.elements.len()).sum();
    ensure(rooms == 3 && objects.len() == 12 && elements == 4, || {
        format!("{rooms} rooms, {} objects, {elements} elements", objects.len())
    })?;
    let mut correct = 0;
    let mut wrong = Vec::new();
    for q in &fx.queries {
        let o = keysg(&["query", "--mock", "--json", "--graph", path(&out), &q.query])?;
        let answer: serde_json::Value = serde_json::from_slice(&o.stdout).map_err(|e| format!("{:?}: {e}", q.query))?;
        let id = answer["node_ids"][0].as_str().unwrap_or_default();
        let planted = &fx.objects[q.object];
        let ok = o.status.success()
            && objects.iter().any(|n| n.id == id && n.label == planted.label && planted.contains(n.centroid, 0.05));
        if ok {
            correct += 1;
        } else {
            wrong.push(format!("{:?} -> {id:?}", q.query));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = format!("{correct}/{} queries grounded, {secs:.1} s", fx.queries.len());
    ensure(correct == fx.queries.len() && secs < 120.0, || format!("{detail}; wrong: {}", wrong.join(", ")))?;
    Ok(detail)
}

fn main() {
    let scratch = tempfile::tempdir().expect("temp dir");
    let fx = synth::fixture_scene(6);
    let input = scratch.path().join("input");
    fx.write(&input).expect("write fixture scene");

    let criteria: Vec<Criterion> = vec![
        ("1 keyframe compression", Box::new(keyframe_compression)),
        ("2 medoid oracle", Box::new(medoid_oracle)),
        ("3 visibility oracle", Box::new(visibility_oracle)),
        ("4 segmentation fixtures", Box::new(segmentation_fixtures)),
        ("5 retrieval exactness", Box::new(retrieval_exactness)),
        ("6 hierarchical descent", Box::new(hierarchical_descent)),
        ("7 metric correctness", Box::new(metric_correctness)),
        ("8 determinism", Box::new(|| determinism(&input, scratch.path()))),
        ("9 round-trip", Box::new(round_trip)),
        ("10 end-to-end mock pipeline", Box::new(|| end_to_end(&fx, &input, scratch.path()))),
    ];
    let mut failed = 0;
    for (name, run) in &criteria {
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        match result {
            Ok(detail) => println!("PASS  criterion {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  criterion {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
