//! Command implementations and the HTTP router behind the `clipsam` binary.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use clipsam::checkpoint::{load_checkpoint, save_checkpoint};
use clipsam::data::{generate_synthetic_dataset, load_collection, make_split, GeneratorConfig};
use clipsam::evaluation::{dump_predictions, evaluate};
use clipsam::service::{RunConfig, SegmentRequest, Segmenter, ServiceError};
use clipsam::training::{parameter_report, train, PromptConfig, TrainConfig};
use clipsam::{Error, ModelConfig, PromptMode};

/// Process exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => 2,
        Error::NanLoss { .. } => 3,
        Error::VersionMismatch { .. } | Error::Load(_) => 4,
        _ => 1,
    }
}

pub type CmdResult<T = ()> = Result<T, Error>;

/// Trains from a run config; returns the run directory.
pub fn cmd_train(config: &Path, seed: Option<u64>) -> CmdResult<PathBuf> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let out = cfg.output_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let cfg_path = out.join("config.json");
    std::fs::write(&cfg_path, cfg.to_json()?).map_err(|e| Error::io(&cfg_path, e))?;

    let train_set = load_collection(&cfg.train_data)?;
    let val_set = match &cfg.val_data {
        Some(p) => load_collection(p)?,
        None => Vec::new(),
    };
    let log_path = out.join("metrics.jsonl");
    let mut lines = String::new();
    let mut write_err = None;
    let outcome = train(&cfg.model, &cfg.train, &train_set, &val_set, |rec| {
        let line = serde_json::to_string(rec).expect("epoch record serializes");
        println!("{line}");
        lines.push_str(&line);
        lines.push('\n');
        if let Err(e) = std::fs::write(&log_path, &lines) {
            write_err.get_or_insert(Error::io(&log_path, e));
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    let extra = serde_json::json!({
        "train": cfg.train,
        "best_epoch": outcome.best_epoch,
        "best_val_miou": outcome.best_val_miou,
    });
    save_checkpoint(&out.join("best.safetensors"), &outcome.model, extra)?;
    tracing::info!(dir = %out.display(), best_epoch = outcome.best_epoch, "training finished");
    Ok(out)
}

pub struct EvalArgs<'a> {
    pub checkpoint: &'a Path,
    pub split: &'a Path,
    pub mode: Option<PromptMode>,
    pub seed: Option<u64>,
    pub out: Option<&'a Path>,
    pub dump: Option<&'a Path>,
}

/// Evaluates a checkpoint; returns the path of the written record.
pub fn cmd_eval(args: &EvalArgs) -> CmdResult<PathBuf> {
    let (model, manifest) = load_checkpoint(args.checkpoint)?;
    let stored: Option<TrainConfig> = manifest.extra.get("train").and_then(|v| serde_json::from_value(v.clone()).ok());
    let stored = stored.unwrap_or_default();
    let mode = args.mode.unwrap_or(stored.mode);
    let mut cfg = stored.eval_config();
    cfg.seed = args.seed.unwrap_or(0);
    let samples = load_collection(args.split)?;
    let out = evaluate(&model, &samples, mode, &cfg)?;
    let mut sources = std::collections::BTreeMap::<String, usize>::new();
    for p in &out.predictions {
        *sources.entry(format!("{:?}", p.source)).or_default() += 1;
    }
    tracing::info!(%mode, ?sources, "prompt sources");
    print!("{}", out.record.summary_table());
    println!("  point sources: {sources:?}");
    let path = match args.out {
        Some(p) => p.to_path_buf(),
        None => args.checkpoint.with_file_name(format!("metrics_{mode}.json")),
    };
    std::fs::write(&path, serde_json::to_string_pretty(&out.record)?).map_err(|e| Error::io(&path, e))?;
    if let Some(dir) = args.dump {
        dump_predictions(dir, &out.predictions)?;
    }
    Ok(path)
}

/// Prints (and optionally writes) the parameter table of a run config or a preset.
pub fn cmd_report_params(config: Option<&Path>, preset: &str, out: Option<&Path>) -> CmdResult<String> {
    let (model, train) = match config {
        Some(p) => {
            let cfg = RunConfig::load(p)?;
            (cfg.model, cfg.train)
        }
        None => {
            let model = match preset {
                "toy" => ModelConfig::toy(),
                "vit-b" | "vit_b" => ModelConfig::vit_b(),
                other => return Err(Error::config("preset", format!("unknown preset '{other}' (toy, vit-b)"))),
            };
            (model, TrainConfig::default())
        }
    };
    let report = parameter_report(&model, &train)?;
    if let Some(p) = out {
        std::fs::write(p, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(p, e))?;
    }
    Ok(report.table())
}

pub struct GenerateArgs {
    pub out: PathBuf,
    pub n_train: usize,
    pub n_val: usize,
    pub classes: Vec<String>,
    pub size: usize,
    pub camouflage: bool,
    pub seed: u64,
    pub fractions: Vec<f64>,
}

/// Writes `train/` and `val/` datasets and nested label-fraction splits of `train/` under `splits/`.
pub fn cmd_generate_data(args: &GenerateArgs) -> CmdResult<()> {
    let classes: Vec<&str> = args.classes.iter().map(String::as_str).collect();
    let train_cfg = GeneratorConfig::new(args.n_train, &classes, args.size, args.camouflage, args.seed);
    let val_seed = clipsam::rng::derive_seed(args.seed, "val");
    let val_cfg = GeneratorConfig::new(args.n_val, &classes, args.size, args.camouflage, val_seed);
    let train = generate_synthetic_dataset(&args.out.join("train"), &train_cfg)?;
    generate_synthetic_dataset(&args.out.join("val"), &val_cfg)?;
    let splits = args.out.join("splits");
    std::fs::create_dir_all(&splits).map_err(|e| Error::io(&splits, e))?;
    for &f in &args.fractions {
        let split = make_split(&train, f, args.seed)?;
        let path = splits.join(format!("train_{f}.json"));
        split.save(&path)?;
        println!("{}: {} samples", path.display(), split.ids.len());
    }
    Ok(())
}

pub fn load_segmenter(checkpoint: &Path, prompt: PromptConfig) -> CmdResult<Segmenter> {
    let (model, _) = load_checkpoint(checkpoint)?;
    let id = format!(
        "clipsam-{}/{}",
        env!("CARGO_PKG_VERSION"),
        checkpoint.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
    );
    Segmenter::new(model, id, prompt)
}

struct ApiError(ServiceError);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.0.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self.0)).into_response()
    }
}

async fn segment(
    State(seg): State<Arc<Segmenter>>,
    body: Result<Json<SegmentRequest>, JsonRejection>,
) -> Result<Response, ApiError> {
    let Json(req) = body.map_err(|e| ApiError(ServiceError { status: 400, error: e.body_text(), vocabulary: None }))?;
    let res = tokio::task::spawn_blocking(move || seg.handle_segment(&req))
        .await
        .map_err(|e| ApiError(ServiceError { status: 500, error: e.to_string(), vocabulary: None }))?;
    res.map(|r| Json(r).into_response()).map_err(ApiError)
}

pub fn router(seg: Arc<Segmenter>) -> Router {
    Router::new()
        .route("/segment", post(segment))
        .route("/classes", get(|State(s): State<Arc<Segmenter>>| async move { Json(s.classes()) }))
        .route("/health", get(|State(s): State<Arc<Segmenter>>| async move { Json(s.health()) }))
        .with_state(seg)
}

pub async fn serve(seg: Segmenter, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    tracing::info!(addr = %listener.local_addr()?, "serving");
    axum::serve(listener, router(Arc::new(seg)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
