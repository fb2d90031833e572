use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;

use partsight_core::assistant::{run_scenario, Inference, Scenario, Services, SessionManager};
use partsight_core::barrefine::{refine_dataset, RefinementConfig};
use partsight_core::corruptions::{build_corrupted_set, CorruptionProfile, Registry};
use partsight_core::detorch::{
    detect_sliced, detect_tta, read_jsonl, write_jsonl, Detection, DetectionRecord, DetectorProvider,
    ExternalDetector, FusionParams, MockDetector, MockNoise, SliceConfig, TtaConfig,
};
use partsight_core::evalmetrics::{evaluate, DatasetLayout};
use partsight_core::fsutil;
use partsight_core::geometry::{BoundingBox, PixelImage};
use partsight_core::knowledge::{build_index, load_knowledge_base, HashingEmbedder, KnowledgeIndex};
use partsight_core::labels::{read_class_list, read_labels};
use partsight_core::synthgen::{generate_dataset, CompositionConfig, GenerateRequest};
use partsight_core::{Error, Exec};

use crate::meta::RunMetadata;
use crate::*;

#[derive(Debug)]
pub enum CliError {
    Input(String),
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => EXIT_INPUT,
            CliError::Internal(_) => EXIT_INTERNAL,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(m) | CliError::Internal(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        if e.is_input_error() {
            CliError::Input(e.to_string())
        } else {
            CliError::Internal(e.to_string())
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

pub fn run(command: Command, exec: Exec) -> CliResult {
    match command {
        Command::Synth(SynthCommand::Generate(a)) => synth_generate(a, exec),
        Command::Corrupt(CorruptCommand::Apply(a)) => corrupt_apply(a, exec),
        Command::Bar(BarCommand::Refine(a)) => bar_refine(a, exec),
        Command::Detect(DetectCommand::Run(a)) => detect_run(a, exec),
        Command::Eval(EvalCommand::Run(a)) => eval_run(a, exec),
        Command::Kb(KbCommand::Index(a)) => kb_index(a, exec),
        Command::Kb(KbCommand::Query(a)) => kb_query(a, exec),
        Command::Serve(a) => serve(a, exec),
        Command::Session(SessionCommand::Simulate(a)) => session_simulate(a, exec),
    }
}

fn read_config<T: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> CliResult<T> {
    Ok(match path {
        Some(p) => fsutil::read_json(p)?,
        None => T::default(),
    })
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config serializes")
}

/// `dir/images` when present, otherwise `dir`.
fn image_dir(dir: &Path) -> PathBuf {
    let nested = dir.join("images");
    if nested.is_dir() {
        nested
    } else {
        dir.to_path_buf()
    }
}

fn synth_generate(a: SynthArgs, exec: Exec) -> CliResult {
    let config: CompositionConfig = read_config(a.config.as_deref())?;
    let req = GenerateRequest {
        background_dir: a.backgrounds.clone(),
        mask_dir: a.masks.clone(),
        config: config.clone(),
        count: a.count,
        split: a.split.clone(),
        seed: a.seed,
        out_dir: a.out.clone(),
        exec,
    };
    let mut meta = RunMetadata::new(
        "synth generate",
        Some(a.seed),
        exec.is_parallel(),
        json!({ "composition": to_value(&config), "count": a.count, "split": a.split }),
    );
    meta.input("masks", &a.masks)?;
    meta.input("backgrounds", &a.backgrounds)?;
    let manifest = generate_dataset(&req)?;
    meta.output("out", &a.out)?;
    meta.emit(Some(&a.out))?;
    println!(
        "wrote {} images ({} classes, {} dropped instances) to {}",
        manifest.image_count,
        manifest.classes.len(),
        manifest.dropped_instances,
        a.out.display()
    );
    Ok(())
}

fn corrupt_apply(a: CorruptArgs, exec: Exec) -> CliResult {
    let profile = match &a.config {
        Some(p) => CorruptionProfile::load(p)?,
        None => CorruptionProfile::default_profile(),
    };
    let mut meta = RunMetadata::new("corrupt apply", Some(a.seed), exec.is_parallel(), to_value(&profile));
    meta.input("images", &a.images)?;
    let summary = build_corrupted_set(&a.images, &profile.specs, a.seed, &a.out, &Registry::default(), exec)?;
    meta.output("out", &a.out)?;
    meta.emit(Some(&a.out))?;
    println!(
        "wrote {} images ({} clean x {} variants incl. clean) to {}",
        summary.total_images,
        summary.source_images,
        summary.spec_count + 1,
        a.out.display()
    );
    Ok(())
}

fn bar_refine(a: BarArgs, exec: Exec) -> CliResult {
    let mut config: RefinementConfig = read_config(a.config.as_deref())?;
    if let Some(t) = a.threshold {
        config.threshold = t;
    }
    let records = read_jsonl(&a.detections)?;
    let classes = a.classes.as_deref().map(read_class_list).transpose()?;
    let images = image_dir(&a.images);
    let mut meta = RunMetadata::new("bar refine", None, exec.is_parallel(), to_value(&config));
    meta.input("images", &images)?;
    meta.input("detections", &a.detections)?;
    let m = refine_dataset(&images, &records, classes.as_deref(), &config, &a.out, exec)?;
    meta.output("out", &a.out)?;
    meta.emit(Some(&a.out))?;
    println!(
        "refined {} of {} images ({} skipped), {} pseudo-labels, to {}",
        m.images_out,
        m.images_in,
        m.skipped,
        m.pseudo_labels,
        a.out.display()
    );
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    pub mock: MockNoise,
    pub min_visibility: f64,
    pub tta: TtaConfig,
    pub slice: SliceConfig,
    pub fusion_iou: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            mock: MockNoise::default(),
            min_visibility: 0.5,
            tta: TtaConfig::default(),
            slice: SliceConfig::default(),
            fusion_iou: 0.5,
        }
    }
}

fn inference_for(tta: bool, slice: bool, cfg: &DetectConfig) -> CliResult<Inference> {
    match (tta, slice) {
        (true, true) => Err(CliError::Input("--tta and --slice are exclusive".into())),
        (true, false) => Ok(Inference::Tta(cfg.tta.clone())),
        (false, true) => Ok(Inference::Sliced(cfg.slice)),
        (false, false) => Ok(Inference::Plain),
    }
}

fn run_inference(
    provider: &dyn DetectorProvider,
    image: &PixelImage,
    inference: &Inference,
    fusion: FusionParams,
    exec: Exec,
) -> partsight_core::Result<Vec<Detection>> {
    match inference {
        Inference::Plain => provider.detect(image),
        Inference::Tta(c) => detect_tta(provider, image, c, fusion, exec),
        Inference::Sliced(c) => detect_sliced(provider, image, c, fusion, exec),
    }
}

fn mock_truth(
    image: &Path,
    labels: &Path,
    classes: &[String],
    w: u32,
    h: u32,
) -> partsight_core::Result<Vec<(String, BoundingBox)>> {
    let path = labels.join(format!("{}.txt", fsutil::file_stem(image)));
    if !path.is_file() {
        return Ok(Vec::new());
    }
    read_labels(&path)?
        .iter()
        .map(|l| {
            let name = classes.get(l.class_index).cloned().ok_or_else(|| {
                Error::InvalidInput(format!("{}: class index {} unknown", path.display(), l.class_index))
            })?;
            Ok((name, l.to_box(w, h)?))
        })
        .collect()
}

fn detect_run(a: DetectArgs, exec: Exec) -> CliResult {
    let cfg: DetectConfig = read_config(a.config.as_deref())?;
    let inference = inference_for(a.tta, a.slice, &cfg)?;
    let fusion = FusionParams {
        iou_threshold: cfg.fusion_iou,
    };
    let images_dir = image_dir(&a.images);
    let images = fsutil::list_images(&images_dir)?;
    if images.is_empty() {
        return Err(CliError::Input(format!("no images under {}", images_dir.display())));
    }
    let mut meta = RunMetadata::new(
        "detect run",
        Some(a.seed),
        exec.is_parallel(),
        json!({
            "provider": format!("{:?}", a.provider).to_lowercase(),
            "command": a.command,
            "inference": match &inference {
                Inference::Plain => json!("plain"),
                Inference::Tta(c) => json!({ "tta": c }),
                Inference::Sliced(c) => json!({ "slice": c }),
            },
            "detect": to_value(&cfg),
        }),
    );
    meta.input("images", &images_dir)?;

    let per_image: Vec<Vec<Detection>> = match a.provider {
        ProviderKind::Mock => {
            let labels = match &a.labels {
                Some(l) => l.clone(),
                None => DatasetLayout::locate(images_dir.parent().unwrap_or(Path::new(".")))
                    .map(|l| l.labels)
                    .map_err(|_| {
                        CliError::Input("mock provider needs --labels or a labels/ directory next to images/".into())
                    })?,
            };
            let class_file = a
                .classes
                .clone()
                .or_else(|| {
                    [labels.join("classes.txt"), labels.parent().unwrap_or(Path::new(".")).join("classes.txt")]
                        .into_iter()
                        .find(|p| p.is_file())
                })
                .ok_or_else(|| CliError::Input("mock provider needs a class list (--classes)".into()))?;
            let classes = read_class_list(&class_file)?;
            meta.input("labels", &labels)?;
            let mut base = MockDetector::new(cfg.mock.clone(), a.seed)?;
            base.min_visibility = cfg.min_visibility;
            exec.try_map_range(images.len(), |i| {
                let img = PixelImage::load(&images[i])?;
                let truth = mock_truth(&images[i], &labels, &classes, img.width(), img.height())?;
                let mut mock = base.clone();
                mock.register(&img, truth);
                run_inference(&mock, &img, &inference, fusion, Exec::Sequential)
            })?
        }
        ProviderKind::External => {
            let cmd = a
                .command
                .as_deref()
                .ok_or_else(|| CliError::Input("external provider needs --command".into()))?;
            let ext = ExternalDetector::from_command_line(cmd)?;
            exec.try_map_range(images.len(), |i| match inference {
                Inference::Plain => {
                    let img = PixelImage::load(&images[i])?;
                    let (w, h) = (img.width(), img.height());
                    Ok(ext
                        .detect_path(&images[i])?
                        .into_iter()
                        .map(|mut d| {
                            d.bbox = d.bbox.clip(w as f64, h as f64);
                            d
                        })
                        .collect())
                }
                _ => run_inference(&ext, &PixelImage::load(&images[i])?, &inference, fusion, Exec::Sequential),
            })?
        }
    };
    let records: Vec<DetectionRecord> = images
        .iter()
        .zip(&per_image)
        .flat_map(|(p, dets)| {
            let id = fsutil::file_stem(p);
            dets.iter().map(move |d| DetectionRecord::new(id.clone(), d))
        })
        .collect();
    let mut buf = Vec::new();
    write_jsonl(&mut buf, &records).map_err(|e| CliError::Internal(e.to_string()))?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fsutil::create_dir_all(parent)?;
    }
    fsutil::write(&a.out, buf)?;
    meta.output("out", &a.out)?;
    meta.emit(Some(&a.out))?;
    println!("wrote {} detections for {} images to {}", records.len(), images.len(), a.out.display());
    Ok(())
}

fn eval_run(a: EvalArgs, exec: Exec) -> CliResult {
    let classes = a.classes.as_deref().map(read_class_list).transpose()?;
    let mut meta = RunMetadata::new("eval run", None, exec.is_parallel(), json!({ "confidence": a.conf }));
    meta.input("preds", &a.preds)?;
    meta.input("labels", &a.labels)?;
    let report = evaluate(&a.preds, &a.labels, classes.as_deref(), a.conf, exec)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fsutil::create_dir_all(parent)?;
    }
    fsutil::write_json(&a.out, &report)?;
    meta.output("out", &a.out)?;
    meta.emit(Some(&a.out))?;
    print!("{}", report.to_table());
    if report.unknown_prediction_records > 0 {
        eprintln!(
            "warning: {} prediction records for {} unknown images were ignored",
            report.unknown_prediction_records,
            report.unknown_prediction_images.len()
        );
    }
    Ok(())
}

fn kb_index(a: KbIndexArgs, exec: Exec) -> CliResult {
    let entries = load_knowledge_base(&a.kb)?;
    let embedder = HashingEmbedder::new(a.dim)?;
    let mut meta = RunMetadata::new("kb index", None, exec.is_parallel(), json!({ "dim": a.dim }));
    meta.input("kb", &a.kb)?;
    let index = build_index(&entries, &embedder, exec)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fsutil::create_dir_all(parent)?;
    }
    index.save(&a.out)?;
    meta.output("out", &a.out)?;
    meta.emit(Some(&a.out))?;
    println!("indexed {} entries (dim {}) to {}", entries.len(), a.dim, a.out.display());
    Ok(())
}

fn load_index(path: &Path) -> CliResult<(KnowledgeIndex, HashingEmbedder)> {
    let index = KnowledgeIndex::load(path)?;
    let embedder = HashingEmbedder::new(index.embedder.dim)?;
    index.check_embedder(&embedder)?;
    Ok((index, embedder))
}

fn kb_query(a: KbQueryArgs, exec: Exec) -> CliResult {
    let (index, embedder) = load_index(&a.index)?;
    let mut meta = RunMetadata::new(
        "kb query",
        None,
        exec.is_parallel(),
        json!({ "text": a.text, "top": a.top }),
    );
    meta.input("index", &a.index)?;
    let hits = index.query(&embedder, &a.text, a.top, exec)?;
    let mut lines = String::new();
    for (rank, h) in hits.iter().enumerate() {
        let mut v = to_value(h);
        v["rank"] = json!(rank + 1);
        lines.push_str(&serde_json::to_string(&v).expect("hit serializes"));
        lines.push('\n');
    }
    print!("{lines}");
    if let Some(out) = &a.out {
        fsutil::write(out, &lines)?;
        meta.output("out", out)?;
    }
    meta.emit(a.out.as_deref())?;
    Ok(())
}

fn serve(a: ServeArgs, exec: Exec) -> CliResult {
    let cfg: DetectConfig = read_config(a.config.as_deref())?;
    let mut services = Services::default();
    services.inference = inference_for(a.tta, a.slice, &cfg)?;
    services.exec = exec;
    if let Some(p) = &a.index {
        let (index, embedder) = load_index(p)?;
        services.embedder = Arc::new(embedder);
        services.swap_knowledge(index);
    }
    if let Some(cmd) = &a.detector_command {
        services.provider = Some(Arc::new(ExternalDetector::from_command_line(cmd)?));
    }
    let mut meta = RunMetadata::new(
        "serve",
        None,
        exec.is_parallel(),
        json!({ "addr": a.addr, "detector_command": a.detector_command, "detect": to_value(&cfg) }),
    );
    if let Some(p) = &a.index {
        meta.input("index", p)?;
    }
    meta.emit(None)?;
    let manager = Arc::new(SessionManager::new(services));
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Internal(e.to_string()))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&a.addr)
            .await
            .map_err(|e| CliError::Input(format!("cannot bind {}: {e}", a.addr)))?;
        let addr = listener.local_addr().map_err(|e| CliError::Internal(e.to_string()))?;
        eprintln!("listening on http://{addr}");
        partsight_server::serve(listener, manager)
            .await
            .map_err(|e| CliError::Internal(e.to_string()))
    })
}

fn session_simulate(a: SimulateArgs, exec: Exec) -> CliResult {
    let scenario = Scenario::load(&a.scenario)?;
    let base = a.scenario.parent().unwrap_or(Path::new("."));
    let mut meta = RunMetadata::new(
        "session simulate",
        Some(scenario.mock.seed),
        exec.is_parallel(),
        json!({ "scenario": scenario.name, "session": to_value(&scenario.config) }),
    );
    meta.input("scenario", &a.scenario)?;
    let transcript = run_scenario(&scenario, base, exec)?;
    let bytes = transcript.to_bytes();
    match &a.out {
        Some(out) => {
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fsutil::create_dir_all(parent)?;
            }
            fsutil::write(out, &bytes)?;
            meta.output("out", out)?;
        }
        None => {
            use std::io::Write;
            std::io::stdout()
                .write_all(&bytes)
                .map_err(|e| CliError::Internal(e.to_string()))?;
        }
    }
    meta.emit(a.out.as_deref())?;
    Ok(())
}
