//! `keysg`: build, query, inspect, evaluate and serve scene graphs.
//!
//! Exit codes: 0 success, 1 fatal error, 2 partial build (some provider
//! calls failed), 3 answer could not be grounded, 64 usage error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use image::{Rgb, RgbImage};
use keysg_core::evalharness::{self, GroundTruth, Task};
use keysg_core::ingest::load_sequence;
use keysg_core::pipeline::{self, BuildStatus};
use keysg_core::providers::{CachedProvider, FixtureTable, HttpProvider, MockProvider, ProvidersToml, Resilient};
use keysg_core::ragindex::{self, ChunkIndex, Mode};
use keysg_core::{synth, Config, Provider, SceneGraph};
use serde::Deserialize;

const EXIT_FATAL: u8 = 1;
const EXIT_PARTIAL: u8 = 2;
const EXIT_UNGROUNDED: u8 = 3;
const EXIT_USAGE: u8 = 64;

const FIXTURES: &str = "mock_fixtures.json";

#[derive(Parser)]
#[command(name = "keysg", version, about = "Hierarchical keyframe-augmented 3D scene graphs")]
struct Cli {
    /// Worker threads (default: logical cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Use the deterministic offline provider (also KEYSG_MOCK=1).
    #[arg(long, global = true)]
    mock: bool,
    /// Live provider settings.
    #[arg(long, global = true, default_value = "providers.toml")]
    providers: PathBuf,
    /// Mock fixture table; defaults to mock_fixtures.json next to the data.
    #[arg(long, global = true)]
    fixtures: Option<PathBuf>,
    /// More logging (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a scene graph and retrieval index from a posed RGB-D sequence.
    Build {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Drop depth readings beyond this range in meters.
        #[arg(long)]
        max_depth: Option<f64>,
        /// Override a config value, e.g. `--set keyframes.eps=0.6`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Answer a natural-language query against a built graph.
    Query {
        #[arg(long)]
        graph: PathBuf,
        query: String,
        #[arg(long, default_value = "parsed")]
        mode: Mode,
        /// Print the answer with its retrieval trace as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Print graph statistics, render room masks or list keyframes.
    Inspect {
        #[arg(long)]
        graph: PathBuf,
        /// Write a room label image (one per floor: `<stem>_f<i>.png` when several).
        #[arg(long)]
        rooms: Option<PathBuf>,
        /// Room id whose keyframes and coverage to print.
        #[arg(long)]
        keyframes: Option<String>,
    },
    /// Score a graph against ground truth.
    Eval {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        task: Task,
        /// Metrics JSON destination; the table goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve `POST /query {"q": ...}` over HTTP.
    Serve {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
    /// Write a synthetic input sequence.
    #[command(hide = true)]
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Frames per camera station.
        #[arg(long, default_value_t = 6)]
        per_station: usize,
    },
}

/// Error carrying the stage it came from.
struct Staged {
    stage: String,
    error: anyhow::Error,
    code: u8,
}

fn staged(stage: &str) -> impl Fn(anyhow::Error) -> Staged + '_ {
    move |error| Staged {
        stage: stage.to_string(),
        error,
        code: EXIT_FATAL,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(s) => {
            // Most library errors already embed their source in the message.
            let mut msg = s.error.to_string();
            for cause in s.error.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error [{}]: {msg}", s.stage);
            ExitCode::from(s.code)
        }
    }
}

fn run(cli: &Cli) -> Result<u8, Staged> {
    match &cli.command {
        Command::Build {
            input,
            out,
            config,
            max_depth,
            overrides,
        } => build(cli, input, out, config.as_deref(), *max_depth, overrides),
        Command::Query { graph, query: q, mode, json } => query(cli, graph, q, *mode, *json),
        Command::Inspect { graph, rooms, keyframes } => inspect(graph, rooms.as_deref(), keyframes.as_deref()),
        Command::Eval { graph, gt, task, out } => eval(cli, graph, gt, *task, out.as_deref()),
        Command::Serve { graph, addr } => serve(cli, graph, addr),
        Command::Synth { out, per_station } => {
            synth::fixture_scene(*per_station)
                .write(out)
                .map_err(|e| staged("synth")(e.into()))?;
            Ok(0)
        }
    }
}

fn use_mock(cli: &Cli) -> bool {
    cli.mock || std::env::var("KEYSG_MOCK").is_ok_and(|v| !v.is_empty() && v != "0")
}

/// Mock or live provider behind the retry limiter. Live calls are also cached on disk.
fn provider(cli: &Cli, config: &Config, data_dir: &Path, cache_default: &Path) -> anyhow::Result<Arc<dyn Provider>> {
    let p = &config.providers;
    let backoff = Duration::from_millis(p.backoff_ms);
    if use_mock(cli) {
        let path = cli.fixtures.clone().unwrap_or_else(|| data_dir.join(FIXTURES));
        let table = if path.exists() {
            FixtureTable::load(&path).with_context(|| format!("loading {}", path.display()))?
        } else {
            FixtureTable::default()
        };
        let mut mock = MockProvider::new(table);
        if let Ok(kinds) = std::env::var("KEYSG_MOCK_FAIL") {
            let kinds: Vec<&str> = kinds.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
            mock = mock.failing(&kinds);
        }
        Ok(Arc::new(Resilient::new(mock, p.max_in_flight, p.retries, backoff)))
    } else {
        let mut cfg = ProvidersToml::load(&cli.providers)
            .with_context(|| "live provider needs providers.toml (or pass --mock)".to_string())?;
        cfg.timeout_ms = p.timeout_ms.min(cfg.timeout_ms);
        let inner = Resilient::new(HttpProvider::new(cfg), p.max_in_flight, p.retries, backoff);
        Ok(Arc::new(CachedProvider::from_env(inner, cache_default)))
    }
}

fn load_config(path: Option<&Path>, max_depth: Option<f64>, overrides: &[String]) -> anyhow::Result<Config> {
    let base = match path {
        Some(p) => Config::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => Config::default(),
    };
    let mut value = toml::Value::try_from(&base).context("encoding config")?;
    for o in overrides {
        let (key, raw) = o.split_once('=').ok_or_else(|| anyhow!("override {o:?} is not KEY=VALUE"))?;
        let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .map(|mut t| t.remove("v").expect("parsed key"))
            .unwrap_or_else(|_| toml::Value::String(raw.to_string()));
        let mut slot = &mut value;
        for part in key.split('.') {
            slot = slot
                .get_mut(part)
                .ok_or_else(|| anyhow!("unknown config key {key:?}"))?;
        }
        *slot = parsed;
    }
    let mut cfg: Config = value.try_into().context("applying overrides")?;
    if let Some(m) = max_depth {
        cfg.ingest.max_depth = m;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn build(
    cli: &Cli,
    input: &Path,
    out: &Path,
    config: Option<&Path>,
    max_depth: Option<f64>,
    overrides: &[String],
) -> Result<u8, Staged> {
    let cfg = load_config(config, max_depth, overrides).map_err(staged("config"))?;
    let seq = load_sequence(input).map_err(|e| staged("ingest")(e.into()))?;
    let provider = provider(cli, &cfg, input, &out.join(".cache")).map_err(staged("providers"))?;
    let result = pipeline::build(&seq, &cfg, provider.as_ref()).map_err(|e| Staged {
        stage: e.stage().to_string(),
        error: e.into(),
        code: EXIT_FATAL,
    })?;
    pipeline::write_outputs(&result, out).map_err(|e| staged("write")(e.into()))?;
    if use_mock(cli) {
        let src = cli.fixtures.clone().unwrap_or_else(|| input.join(FIXTURES));
        if src.exists() {
            std::fs::copy(&src, out.join(FIXTURES)).map_err(|e| staged("write")(e.into()))?;
        }
    }
    let l = &result.log;
    println!(
        "{}: {} floors, {} rooms, {} keyframes, {} objects, {} elements ({} skipped)",
        match l.status {
            BuildStatus::Ok => "ok",
            BuildStatus::Partial => "partial",
        },
        l.floors,
        l.rooms,
        l.keyframes,
        l.objects,
        l.elements,
        l.skipped.len()
    );
    Ok(match l.status {
        BuildStatus::Ok => 0,
        BuildStatus::Partial => EXIT_PARTIAL,
    })
}

struct Loaded {
    graph: SceneGraph,
    index: ChunkIndex,
    config: Config,
    provider: Arc<dyn Provider>,
}

fn load_graph(cli: &Cli, dir: &Path) -> Result<Loaded, Staged> {
    let graph = SceneGraph::load(dir).map_err(|e| staged("graph")(e.into()))?;
    let index = ChunkIndex::load(&dir.join("index")).map_err(|e| staged("ragindex")(e.into()))?;
    let config = graph.metadata().config.clone();
    let provider = provider(cli, &config, dir, &dir.join(".cache")).map_err(staged("providers"))?;
    Ok(Loaded {
        graph,
        index,
        config,
        provider,
    })
}

fn query(cli: &Cli, dir: &Path, q: &str, mode: Mode, json: bool) -> Result<u8, Staged> {
    let l = load_graph(cli, dir)?;
    let a = ragindex::answer(q, &l.graph, &l.index, mode, &l.config.rag, l.provider.as_ref())
        .map_err(|e| staged("query")(e.into()))?;
    if json {
        println!("{}", serde_json::to_string_pretty(&a).expect("answer serializes"));
    } else {
        println!("{}", a.text);
        println!("nodes: {}", a.node_ids.join(", "));
        if let Some(w) = &a.warning {
            eprintln!("warning: {w}");
        }
    }
    Ok(if a.warning.is_some() { EXIT_UNGROUNDED } else { 0 })
}

const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
];

/// Room masks of one floor painted on their shared grid, north up.
fn room_image(floor: &keysg_core::graph::FloorNode) -> Option<RgbImage> {
    let g = floor.rooms.first()?.grid;
    let mut img = RgbImage::from_pixel(g.width as u32, g.height as u32, Rgb([40, 40, 40]));
    for r in &floor.rooms {
        let color = Rgb(PALETTE[r.index % PALETTE.len()]);
        for idx in r.mask.iter() {
            let (c, row) = (idx % g.width, idx / g.width);
            img.put_pixel(c as u32, (g.height - 1 - row) as u32, color);
        }
    }
    Some(img)
}

fn inspect(dir: &Path, rooms: Option<&Path>, keyframes: Option<&str>) -> Result<u8, Staged> {
    let graph = SceneGraph::load(dir).map_err(|e| staged("graph")(e.into()))?;
    if let Some(path) = rooms {
        let floors = graph.floors();
        for f in floors {
            let Some(img) = room_image(f) else { continue };
            let target = if floors.len() == 1 {
                path.to_path_buf()
            } else {
                let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("rooms");
                path.with_file_name(format!("{stem}_f{}.png", f.index))
            };
            img.save(&target).map_err(|e| staged("inspect")(e.into()))?;
            println!("{}", target.display());
        }
    }
    if let Some(id) = keyframes {
        let room = graph
            .rooms()
            .find(|r| r.id == id)
            .ok_or_else(|| staged("inspect")(anyhow!("no room {id:?}")))?;
        let out = serde_json::json!({
            "room": room.id,
            "dense_frames": room.dense_frames.len(),
            "keyframes": room.keyframes.iter().map(|k| k.frame).collect::<Vec<_>>(),
            "coverage": room.coverage,
        });
        println!("{}", serde_json::to_string_pretty(&out).expect("json"));
    }
    if rooms.is_none() && keyframes.is_none() {
        let floors: Vec<_> = graph
            .floors()
            .iter()
            .map(|f| {
                serde_json::json!({
                    "id": f.id,
                    "z": [f.z_min, f.z_max],
                    "rooms": f.rooms.iter().map(|r| serde_json::json!({
                        "id": r.id,
                        "area": r.area,
                        "keyframes": r.keyframes.len(),
                        "coverage": r.coverage,
                        "objects": r.objects.iter().map(|o| format!("{} {}", o.id, o.label)).collect::<Vec<_>>(),
                    })).collect::<Vec<_>>(),
                })
            })
            .collect();
        let out = serde_json::json!({
            "nodes": graph.node_count(),
            "keyframes": graph.keyframe_count(),
            "provider": graph.metadata().provider,
            "floors": floors,
        });
        println!("{}", serde_json::to_string_pretty(&out).expect("json"));
    }
    Ok(0)
}

fn eval(cli: &Cli, dir: &Path, gt_path: &Path, task: Task, out: Option<&Path>) -> Result<u8, Staged> {
    let l = load_graph(cli, dir)?;
    let gt = GroundTruth::load(gt_path).map_err(|e| staged("eval")(e.into()))?;
    let voxel = l.config.eval.voxel;
    let p = l.provider.as_ref();
    let report = match task {
        Task::Seg => evalharness::eval_seg(&l.graph, &gt, voxel, p),
        Task::Func => evalharness::eval_func(&l.graph, &gt, voxel, p),
        Task::Retrieval => evalharness::eval_retrieval(&l.graph, &l.index, &gt, voxel, p),
        Task::Grounding => evalharness::eval_grounding(&l.graph, &l.index, &gt, &l.config, p),
    }
    .map_err(|e| staged("eval")(e.into()))?;
    print!("{}", report.table);
    if let Some(path) = out {
        let body = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
        std::fs::write(path, body).map_err(|e| staged("eval")(e.into()))?;
    }
    Ok(0)
}

#[derive(Deserialize)]
struct QueryBody {
    q: String,
    #[serde(default)]
    mode: Option<Mode>,
}

fn serve(cli: &Cli, dir: &Path, addr: &str) -> Result<u8, Staged> {
    use axum::extract::State;
    use axum::http::StatusCode;
    use axum::routing::post;
    use axum::Json;

    let state = Arc::new(load_graph(cli, dir)?);
    async fn handle(
        State(s): State<Arc<Loaded>>,
        Json(body): Json<QueryBody>,
    ) -> Result<Json<serde_json::Value>, (StatusCode, String)> {
        let mode = body.mode.unwrap_or(Mode::Parsed);
        let task = tokio::task::spawn_blocking(move || {
            ragindex::answer(&body.q, &s.graph, &s.index, mode, &s.config.rag, s.provider.as_ref())
        });
        match task.await {
            Ok(Ok(a)) => Ok(Json(serde_json::json!({
                "text": a.text,
                "node_ids": a.node_ids,
                "warning": a.warning,
                "trace": a.trace,
            }))),
            Ok(Err(e)) => Err((StatusCode::UNPROCESSABLE_ENTITY, e.to_string())),
            Err(e) => Err((StatusCode::INTERNAL_SERVER_ERROR, e.to_string())),
        }
    }
    let app = axum::Router::new().route("/query", post(handle)).with_state(state);
    let rt = tokio::runtime::Runtime::new().map_err(|e| staged("serve")(e.into()))?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, app).await
    })
    .map_err(|e| staged("serve")(e.into()))?;
    Ok(0)
}
