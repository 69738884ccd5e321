//! The subcommand implementations behind the `v2x` binary.
//!
//! Each command is a thin orchestration layer: argument structs parsed by
//! clap, config resolution, dataset IO from this crate, and the actual
//! work delegated to the core library. Every command is deterministic for
//! a fixed config and seed, so reruns reproduce their output files.

use anyhow::{anyhow, bail, Context, Result};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use v2x_core::comms::{perturb_pose, LocalizationNoiseConfig};
use v2x_core::detection::{decode_and_nms, Detection, DetectionHead};
use v2x_core::evaluation::{
    average_precision, occupancy_stats, pr_curve, region_filter, region_filter_detections,
    CommSummary, DomainReport, EvalReport,
};
use v2x_core::geometry::{Box3, Pose3};
use v2x_core::nn::{decode_params, encode_params, ParamStore};
use v2x_core::perception::{run_pipeline, AgentFrameInput, PipelineConfig, PipelineModel};
use v2x_core::scene::{build_scenario, Scenario};
use v2x_core::sensing::{lidar_pose, raycast_lidar, raycast_radar, CloudFrame, PointCloud};
use v2x_core::training::{train, TrainConfig, TrainSample};
use v2x_core::weather::{apply_fog, apply_snow};

use crate::config::ExperimentConfig;
use crate::dataset::{
    self, agent_dir, import_dataset, list_scenarios, scenario_dir, AgentCalib, FrameLabel,
    FrameRecord, Splits,
};
use crate::pcd::{read_pcd_as, write_pcd};
use crate::plot::Chart;
use crate::report;

const SALT_LIDAR: u64 = 0x4c49;
const SALT_RADAR: u64 = 0x5241;
const SALT_WEATHER: u64 = 0x5745;
const SALT_MODEL: u64 = 0x4d4f;
const SALT_HEAD: u64 = 0x4845;
const SALT_DOMAIN: u64 = 0x444f;
const SALT_PIPELINE: u64 = 0x5049;
const SALT_POSE: u64 = 0x504f;

/// SplitMix64-style seed mixer so nested loops get decorrelated streams.
fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn frame_key(scenario: usize, frame: usize, agent: usize) -> u64 {
    ((scenario as u64) << 40) | ((frame as u64) << 12) | agent as u64
}

/// Loads the experiment config: an explicit `--config` wins, then an
/// `experiment.yaml` sitting in one of the given roots, then defaults.
pub fn resolve_config(flag: Option<&Path>, roots: &[&Path]) -> Result<ExperimentConfig> {
    if let Some(p) = flag {
        return ExperimentConfig::load(p);
    }
    for root in roots {
        let p = root.join("experiment.yaml");
        if p.exists() {
            return ExperimentConfig::load(&p);
        }
    }
    Ok(ExperimentConfig::default())
}

fn write_yaml<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let doc = serde_yaml::to_string(value).context("encoding yaml")?;
    std::fs::write(path, doc).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn read_yaml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let doc = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    serde_yaml::from_str(&doc).with_context(|| format!("parsing {}", path.display()))
}

/// Re-expresses a world-frame box in a sensor frame. Exact for the poses
/// this workbench produces, whose rotation is yaw-only.
pub fn box_to_frame(b: &Box3, sensor: &Pose3) -> Box3 {
    Box3::new(sensor.inverse_transform_point(b.center), b.size, b.yaw - sensor.yaw)
}

// ---------------------------------------------------------------------------
// scenegen

/// Generates procedural scenarios and the train/test split.
#[derive(Debug, clap::Args)]
pub struct ScenegenArgs {
    /// Dataset root to create.
    #[arg(long)]
    pub out: PathBuf,
    /// Experiment config; defaults apply when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the number of scenarios from the config.
    #[arg(long)]
    pub scenarios: Option<usize>,
    /// Overrides the base seed from the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn scenegen(args: &ScenegenArgs) -> Result<()> {
    let mut cfg = resolve_config(args.config.as_deref(), &[])?;
    if let Some(n) = args.scenarios {
        cfg.scenarios = n;
        cfg.train_scenarios = cfg.train_scenarios.min(n.saturating_sub(1)).max(1.min(n - 1));
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let mut names = Vec::new();
    for i in 0..cfg.scenarios {
        let scn = build_scenario(&cfg.scenario, cfg.seed.wrapping_add(i as u64))?;
        let dir = scenario_dir(&args.out, i);
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        write_yaml(&scn, &dir.join("scene.yaml"))?;
        names.push(dir.file_name().unwrap().to_string_lossy().into_owned());
        println!(
            "{}: {} agents, {} actors, {} frames",
            names.last().unwrap(),
            scn.agents.len(),
            scn.actors.len(),
            scn.n_frames
        );
    }
    let splits = Splits {
        train: names[..cfg.train_scenarios.min(names.len())].to_vec(),
        test: names[cfg.train_scenarios.min(names.len())..].to_vec(),
    };
    dataset::write_splits(&args.out, &splits)?;
    cfg.save(&args.out.join("experiment.yaml"))?;
    println!(
        "wrote {} scenarios to {} ({} train, {} test)",
        names.len(),
        args.out.display(),
        splits.train.len(),
        splits.test.len()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// sense

/// Renders LiDAR and radar frames for every scenario in a dataset.
#[derive(Debug, clap::Args)]
pub struct SenseArgs {
    /// Dataset root holding `scenario_*/scene.yaml`.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

pub fn sense(args: &SenseArgs) -> Result<()> {
    let cfg = resolve_config(args.config.as_deref(), &[&args.dataset])?;
    let names = list_scenarios(&args.dataset)?;
    if names.is_empty() {
        bail!("no scenario_* directories under {}", args.dataset.display());
    }
    for (si, name) in names.iter().enumerate() {
        let dir = args.dataset.join(name);
        let scn: Scenario = read_yaml(&dir.join("scene.yaml"))?;
        for (a, spec) in scn.agents.iter().enumerate() {
            let adir = agent_dir(&dir, a);
            std::fs::create_dir_all(&adir)
                .with_context(|| format!("creating {}", adir.display()))?;
            dataset::write_calib(
                &adir,
                &AgentCalib {
                    role: spec.role,
                    lidar_mount: spec.lidar_mount,
                    radar_mount: spec.radar_mount,
                },
            )?;
        }
        for f in 0..scn.n_frames {
            let frame = scn.frame_ground_truth(f);
            for a in 0..scn.agents.len() {
                let lidar = raycast_lidar(
                    &scn,
                    &frame,
                    a,
                    &cfg.lidar,
                    mix(cfg.seed, frame_key(si, f, a) ^ SALT_LIDAR),
                )?;
                let radar = raycast_radar(
                    &scn,
                    &frame,
                    a,
                    &cfg.radar,
                    mix(cfg.seed, frame_key(si, f, a) ^ SALT_RADAR),
                )?;
                let pose = lidar_pose(&scn, &frame, a);
                let boxes: Vec<Box3> =
                    frame.actors.iter().map(|act| box_to_frame(&act.bbox, &pose)).collect();
                let label = FrameLabel {
                    index: f,
                    lidar_pose: pose,
                    lidar_height: pose.position.z,
                    boxes,
                };
                dataset::write_frame(&agent_dir(&dir, a), f, &lidar, &radar, &label)?;
            }
        }
        println!("{name}: {} frames x {} agents", scn.n_frames, scn.agents.len());
    }
    dataset::write_weather_tag(&args.dataset, "normal")?;
    Ok(())
}

// ---------------------------------------------------------------------------
// corrupt

/// Rewrites a clear-weather dataset under a weather model. Only LiDAR
/// clouds change; radar, labels, and calibration are copied byte for byte.
#[derive(Debug, clap::Args)]
pub struct CorruptArgs {
    /// Clear-weather dataset root to read.
    #[arg(long)]
    pub input: PathBuf,
    /// Corrupted dataset root to create.
    #[arg(long)]
    pub out: PathBuf,
    /// Weather domain: `fog` or `snow`.
    #[arg(long)]
    pub weather: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn sorted_agent_dirs(scenario: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(scenario)
        .with_context(|| format!("reading {}", scenario.display()))?
    {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(idx) = name.strip_prefix("agent_").and_then(|s| s.parse::<usize>().ok()) {
            out.push((idx, entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in
        std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))?
    {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(ext) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn copy_into(src: &Path, dst_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dst_dir)
        .with_context(|| format!("creating {}", dst_dir.display()))?;
    let dst = dst_dir.join(src.file_name().unwrap());
    std::fs::copy(src, &dst)
        .with_context(|| format!("copying {} to {}", src.display(), dst.display()))?;
    Ok(())
}

pub fn corrupt(args: &CorruptArgs) -> Result<()> {
    if args.weather != "fog" && args.weather != "snow" {
        bail!("unknown weather domain {:?}; expected fog or snow", args.weather);
    }
    let cfg = resolve_config(args.config.as_deref(), &[&args.input])?;
    let seed = args.seed.unwrap_or(cfg.seed);
    let names = list_scenarios(&args.input)?;
    if names.is_empty() {
        bail!("no scenario_* directories under {}", args.input.display());
    }
    let mut clouds = 0usize;
    for (si, name) in names.iter().enumerate() {
        let in_dir = args.input.join(name);
        let out_dir = args.out.join(name);
        for (agent, adir) in sorted_agent_dirs(&in_dir)? {
            let out_adir = out_dir.join(format!("agent_{agent}"));
            std::fs::create_dir_all(out_adir.join("lidar"))
                .with_context(|| format!("creating {}", out_adir.display()))?;
            copy_into(&adir.join("calib.yaml"), &out_adir)?;
            for sub in ["radar", "labels"] {
                for file in sorted_files(&adir.join(sub), if sub == "radar" { "pcd" } else { "yaml" })? {
                    copy_into(&file, &out_adir.join(sub))?;
                }
            }
            for (f, file) in sorted_files(&adir.join("lidar"), "pcd")?.iter().enumerate() {
                let cloud = read_pcd_as(file, v2x_core::sensing::Modality::Lidar)?;
                let s = mix(seed, frame_key(si, f, agent) ^ SALT_WEATHER);
                let corrupted = match args.weather.as_str() {
                    "fog" => apply_fog(&cloud, &cfg.fog, s)?,
                    _ => apply_snow(&cloud, &cfg.snow, s)?,
                };
                write_pcd(&corrupted, &out_adir.join("lidar").join(file.file_name().unwrap()))?;
                clouds += 1;
            }
        }
        let scene = in_dir.join("scene.yaml");
        if scene.exists() {
            copy_into(&scene, &out_dir)?;
        }
    }
    let splits = args.input.join("splits.yaml");
    if splits.exists() {
        copy_into(&splits, &args.out)?;
    }
    let experiment = args.input.join("experiment.yaml");
    if experiment.exists() {
        copy_into(&experiment, &args.out)?;
    }
    dataset::write_weather_tag(&args.out, &args.weather)?;
    println!(
        "corrupted {clouds} lidar clouds under {} weather into {}",
        args.weather,
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// model persistence shared by train and eval

/// Everything needed to rebuild a trained model: the architecture config
/// and the seed its parameters were first drawn with. The weights live
/// next to it in `params.bin`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ModelManifest {
    pub pipeline: PipelineConfig,
    pub build_seed: u64,
}

fn build_model(
    pipeline: &PipelineConfig,
    build_seed: u64,
) -> Result<(PipelineModel, DetectionHead, ParamStore)> {
    let mut store = ParamStore::new();
    let model = PipelineModel::build(&mut store, pipeline, mix(build_seed, SALT_MODEL))?;
    let head = DetectionHead::build(
        &mut store,
        pipeline.grid.channels,
        "head",
        mix(build_seed, SALT_HEAD),
    )?;
    Ok((model, head, store))
}

pub fn save_model(dir: &Path, manifest: &ModelManifest, store: &ParamStore) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_yaml(manifest, &dir.join("model.yaml"))?;
    std::fs::write(dir.join("params.bin"), encode_params(store))
        .with_context(|| format!("writing {}", dir.join("params.bin").display()))?;
    Ok(())
}

pub fn load_model(dir: &Path) -> Result<(ModelManifest, PipelineModel, DetectionHead, ParamStore)> {
    let manifest: ModelManifest = read_yaml(&dir.join("model.yaml"))?;
    let (model, head, mut store) = build_model(&manifest.pipeline, manifest.build_seed)?;
    let bytes = std::fs::read(dir.join("params.bin"))
        .with_context(|| format!("reading {}", dir.join("params.bin").display()))?;
    let loaded = decode_params(&bytes)?;
    if loaded.len() != store.len() {
        bail!(
            "checkpoint holds {} parameters but the architecture declares {}",
            loaded.len(),
            store.len()
        );
    }
    for (name, tensor) in loaded.iter() {
        let id = store.id(name).map_err(|_| anyhow!("checkpoint parameter {name:?} is unknown"))?;
        if store.get(id).shape() != tensor.shape() {
            bail!("checkpoint parameter {name:?} has the wrong shape");
        }
        *store.get_mut(id) = tensor.clone();
    }
    Ok((manifest, model, head, store))
}

// ---------------------------------------------------------------------------
// train

/// Trains the fusion pipeline and detector on the train split.
#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    /// Clear-weather dataset root.
    #[arg(long)]
    pub data: PathBuf,
    /// Fog-corrupted copy of the same dataset, required when the weather
    /// mix includes `fog`.
    #[arg(long)]
    pub fog: Option<PathBuf>,
    /// Snow-corrupted copy, required when the mix includes `snow`.
    #[arg(long)]
    pub snow: Option<PathBuf>,
    /// Output directory for the model and training curves.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

fn to_inputs(rec: &FrameRecord) -> Vec<AgentFrameInput> {
    rec.agents
        .iter()
        .map(|a| AgentFrameInput {
            agent: a.agent,
            lidar: a.lidar.clone(),
            radar: a.radar.clone(),
            lidar_height: a.lidar_height,
            reported_pose: a.lidar_pose,
        })
        .collect()
}

fn split_names(root: &Path, split: &str) -> Result<Option<Vec<String>>> {
    if !root.join("splits.yaml").exists() {
        return Ok(None);
    }
    let splits = dataset::read_splits(root)?;
    let names = match split {
        "train" => splits.train,
        "test" => splits.test,
        "all" => return Ok(None),
        other => bail!("unknown split {other:?}; expected train, test, or all"),
    };
    if names.is_empty() {
        return Ok(None);
    }
    Ok(Some(names))
}

pub fn train_cmd(args: &TrainArgs) -> Result<()> {
    let mut cfg = resolve_config(args.config.as_deref(), &[&args.data])?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    cfg.validate()?;

    let names = split_names(&args.data, "train")?;
    let normal = import_dataset(&args.data, names.as_deref())?;
    if normal.is_empty() {
        bail!("train split of {} holds no frames", args.data.display());
    }
    let mut corrupted: BTreeMap<String, Vec<FrameRecord>> = BTreeMap::new();
    for domain in &cfg.train.weather_mix {
        if domain == "normal" {
            continue;
        }
        let root = match domain.as_str() {
            "fog" => args.fog.as_ref().ok_or_else(|| {
                anyhow!("weather mix includes fog; pass --fog with the corrupted root")
            })?,
            "snow" => args.snow.as_ref().ok_or_else(|| {
                anyhow!("weather mix includes snow; pass --snow with the corrupted root")
            })?,
            other => bail!("unknown weather domain {other:?} in the mix"),
        };
        let recs = import_dataset(root, names.as_deref())?;
        if recs.len() != normal.len() {
            bail!(
                "{domain} root {} holds {} frames but the clear root holds {}",
                root.display(),
                recs.len(),
                normal.len()
            );
        }
        corrupted.insert(domain.clone(), recs);
    }

    let mut samples = Vec::with_capacity(normal.len());
    let mut domain_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, clear) in normal.iter().enumerate() {
        let pick = mix(cfg.seed, (i as u64) ^ SALT_DOMAIN) as usize % cfg.train.weather_mix.len();
        let domain = cfg.train.weather_mix[pick].as_str();
        *domain_counts.entry(domain).or_default() += 1;
        let (inputs, clean) = match corrupted.get(domain) {
            Some(recs) => (to_inputs(&recs[i]), Some(to_inputs(clear))),
            None => (to_inputs(clear), None),
        };
        samples.push(TrainSample { inputs, clean, gt: clear.agents[0].boxes.clone() });
    }
    let mix_desc: Vec<String> =
        domain_counts.iter().map(|(d, n)| format!("{n} {d}")).collect();
    println!("training on {} frames ({})", samples.len(), mix_desc.join(", "));

    let build_seed = mix(cfg.seed, SALT_PIPELINE);
    let (model, head, mut store) = build_model(&cfg.pipeline, build_seed)?;
    let train_cfg = TrainConfig {
        epochs: cfg.train.epochs,
        adam: cfg.train.adam(),
        detection: cfg.train.detection.clone(),
        denoising: cfg.train.denoising.clone(),
        seed: cfg.seed,
    };
    let stats = train(&samples, &cfg.pipeline, &train_cfg, &model, &head, &mut store)?;

    save_model(&args.out, &ModelManifest { pipeline: cfg.pipeline.clone(), build_seed }, &store)?;
    report::write_loss_curve(&stats, &args.out.join("loss_curve.csv"))?;
    let epochs: Vec<f64> = stats.iter().map(|s| s.epoch as f64).collect();
    let pick = |f: fn(&v2x_core::training::EpochStats) -> f64| -> Vec<(f64, f64)> {
        epochs.iter().copied().zip(stats.iter().map(f)).collect()
    };
    let mut chart = Chart::new("Training loss", "epoch", "loss")
        .with_series("total", pick(|s| s.total))
        .with_series("cls", pick(|s| s.cls))
        .with_series("loc", pick(|s| s.loc));
    if stats.iter().any(|s| s.denoising != 0.0) {
        chart = chart.with_series("denoising", pick(|s| s.denoising));
    }
    chart.write_both(&args.out, "loss")?;
    let last = stats.last().unwrap();
    println!(
        "epoch {}: total {:.4} (cls {:.4}, loc {:.4}, denoising {:.4})",
        last.epoch, last.total, last.cls, last.loc, last.denoising
    );
    println!("model written to {}", args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

/// Evaluates a trained model over one or more weather domains.
#[derive(Debug, clap::Args)]
pub struct EvalArgs {
    /// Directory holding `model.yaml` and `params.bin`.
    #[arg(long)]
    pub model: PathBuf,
    /// Domain datasets as `name=dir`, repeatable.
    #[arg(long = "domain", value_name = "NAME=DIR")]
    pub domains: Vec<String>,
    /// Output directory for reports and plots.
    #[arg(long)]
    pub out: PathBuf,
    /// Std of synthetic peer localization error, meters.
    #[arg(long, default_value_t = 0.0)]
    pub pose_noise: f64,
    /// Which split of each domain root to score.
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

fn parse_domains(args: &[String]) -> Result<Vec<(String, PathBuf)>> {
    if args.is_empty() {
        bail!("pass at least one --domain name=dir");
    }
    args.iter()
        .map(|d| {
            let (name, dir) = d
                .split_once('=')
                .ok_or_else(|| anyhow!("malformed --domain {d:?}; expected name=dir"))?;
            if name.is_empty() || dir.is_empty() {
                bail!("malformed --domain {d:?}; expected name=dir");
            }
            Ok((name.to_string(), PathBuf::from(dir)))
        })
        .collect()
}

/// Applies synthetic localization error to every peer's reported pose.
/// The ego keeps its true pose: its own frame is the reference the fused
/// grid lives in, so only relative error matters.
fn noisy_inputs(rec: &FrameRecord, std: f64, seed: u64) -> Result<Vec<AgentFrameInput>> {
    let mut inputs = to_inputs(rec);
    if std > 0.0 {
        let noise = LocalizationNoiseConfig {
            xy_std: std,
            vehicle_alt_std: 0.0,
            rsu_alt_std: 0.0,
            heading_std_deg: 0.0,
            speed_std: 0.0,
        };
        for (k, input) in inputs.iter_mut().enumerate().skip(1) {
            input.reported_pose = perturb_pose(
                &input.reported_pose,
                &noise,
                rec.agents[k].role,
                mix(seed, k as u64 ^ SALT_POSE),
            )?;
        }
    }
    Ok(inputs)
}

struct DomainEval {
    report: DomainReport,
    pr: Vec<v2x_core::evaluation::PrPoint>,
    detections: Vec<(usize, Vec<Detection>)>,
}

fn eval_domain(
    name: &str,
    recs: &[FrameRecord],
    cfg: &ExperimentConfig,
    pipeline: &PipelineConfig,
    model: &PipelineModel,
    head: &DetectionHead,
    store: &ParamStore,
    pose_noise: f64,
    comm: &mut Vec<(usize, v2x_core::comms::CommReport)>,
    ref_iou: f64,
) -> Result<DomainEval> {
    let mut det_frames = Vec::with_capacity(recs.len());
    let mut gt_frames = Vec::with_capacity(recs.len());
    let mut detections = Vec::with_capacity(recs.len());
    for (i, rec) in recs.iter().enumerate() {
        let inputs = noisy_inputs(rec, pose_noise, mix(cfg.seed, frame_key(0, i, 0)))?;
        let out = run_pipeline(&inputs, pipeline, model, store, mix(cfg.seed, i as u64))?;
        let (score, reg) = head.forward(store, &out.fused.data)?;
        let dets = decode_and_nms(
            score.output(),
            reg.output(),
            &pipeline.grid,
            cfg.eval.score_thresh,
            cfg.eval.nms_iou,
        )?;
        let dets = region_filter_detections(&dets, &cfg.eval.region);
        let gts = region_filter(&rec.agents[0].boxes, &cfg.eval.region);
        comm.push((comm.len(), out.report));
        detections.push((i, dets.clone()));
        det_frames.push(dets);
        gt_frames.push(gts);
    }
    let mut ap = Vec::with_capacity(cfg.eval.ious.len());
    for &iou in &cfg.eval.ious {
        ap.push(average_precision(&det_frames, &gt_frames, iou)?);
    }
    let pr = pr_curve(&det_frames, &gt_frames, ref_iou)?;
    Ok(DomainEval {
        report: DomainReport {
            domain: name.to_string(),
            ap,
            frames: recs.len(),
            gt_boxes: gt_frames.iter().map(|g| g.len()).sum(),
            detections: det_frames.iter().map(|d| d.len()).sum(),
        },
        pr,
        detections,
    })
}

pub fn eval_cmd(args: &EvalArgs) -> Result<()> {
    let domains = parse_domains(&args.domains)?;
    let cfg = resolve_config(args.config.as_deref(), &[domains[0].1.as_path()])?;
    let (manifest, model, head, store) = load_model(&args.model)?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;

    // PR curves are reported at the configured IoU closest to 0.5.
    let ref_iou = cfg
        .eval
        .ious
        .iter()
        .copied()
        .min_by(|a, b| (a - 0.5).abs().total_cmp(&(b - 0.5).abs()))
        .ok_or_else(|| anyhow!("eval.ious is empty"))?;

    let mut comm = Vec::new();
    let mut reports = Vec::new();
    let mut pr_chart = Chart::new(&format!("Precision vs recall (IoU {ref_iou})"), "recall", "precision");
    let mut ap_chart = Chart::new("Average precision vs IoU", "IoU threshold", "AP");
    for (name, root) in &domains {
        let split = split_names(root, &args.split)?;
        let recs = import_dataset(root, split.as_deref())?;
        if recs.is_empty() {
            bail!("{} split of {} holds no frames", args.split, root.display());
        }
        let result = eval_domain(
            name,
            &recs,
            &cfg,
            &manifest.pipeline,
            &model,
            &head,
            &store,
            args.pose_noise,
            &mut comm,
            ref_iou,
        )?;
        let aps: Vec<String> = cfg
            .eval
            .ious
            .iter()
            .zip(&result.report.ap)
            .map(|(iou, ap)| format!("AP@{iou:.2} {ap:.3}"))
            .collect();
        println!(
            "{name}: {} ({} frames, {} gt, {} detections)",
            aps.join(" | "),
            result.report.frames,
            result.report.gt_boxes,
            result.report.detections
        );
        report::write_pr_curve(&result.pr, &args.out.join(format!("pr_{name}.csv")))?;
        report::write_detections(
            &result.detections,
            &args.out.join(format!("detections_{name}.jsonl")),
        )?;
        pr_chart = pr_chart.with_series(
            name,
            result.pr.iter().map(|p| (p.recall, p.precision)).collect(),
        );
        ap_chart = ap_chart.with_series(
            name,
            cfg.eval.ious.iter().copied().zip(result.report.ap.iter().copied()).collect(),
        );
        reports.push(result.report);
    }

    let n = comm.len().max(1) as f64;
    let summary = CommSummary {
        mean_elements: comm.iter().map(|(_, r)| r.total_elements as f64).sum::<f64>() / n,
        mean_volume_log2: comm.iter().map(|(_, r)| r.total_volume_log2).sum::<f64>() / n,
        mean_latency_ms: comm.iter().map(|(_, r)| r.total_latency_ms).sum::<f64>() / n,
    };
    let eval_report = EvalReport {
        ious: cfg.eval.ious.clone(),
        domains: reports,
        comm: Some(summary),
    };
    report::write_eval_report(&eval_report, &args.out)?;
    report::write_comm_table(&comm, &args.out)?;
    pr_chart.write_both(&args.out, "pr")?;
    ap_chart.write_both(&args.out, "ap")?;
    println!("reports written to {}", args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// stats

/// Radar occupancy of ground-truth boxes, ego-only vs cooperative.
#[derive(Debug, clap::Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "all")]
    pub split: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

pub fn stats_cmd(args: &StatsArgs) -> Result<()> {
    let cfg = resolve_config(args.config.as_deref(), &[&args.data])?;
    let names = split_names(&args.data, &args.split)?;
    let recs = import_dataset(&args.data, names.as_deref())?;
    if recs.is_empty() {
        bail!("{} holds no frames", args.data.display());
    }
    let mut frames = Vec::with_capacity(recs.len());
    for rec in &recs {
        let ego_pose = rec.agents[0].lidar_pose;
        let clouds: Vec<PointCloud> = rec
            .agents
            .iter()
            .map(|a| {
                let rel = ego_pose.inverse().compose(&a.lidar_pose);
                a.radar.transformed(&rel, CloudFrame::Ego)
            })
            .collect();
        frames.push((clouds, rec.agents[0].boxes.clone()));
    }
    let ego = occupancy_stats(&frames, &cfg.stats.bin_edges, false)?;
    let coop = occupancy_stats(&frames, &cfg.stats.bin_edges, true)?;

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    report::write_occupancy(&ego, &coop, &args.out)?;
    let series = |bins: &[v2x_core::evaluation::OccupancyBin]| -> Vec<(f64, f64)> {
        bins.iter().map(|b| (0.5 * (b.range[0] + b.range[1]), b.rate())).collect()
    };
    Chart::new("Radar occupancy by range", "range to box center (m)", "occupied fraction")
        .with_series("ego only", series(&ego))
        .with_series("cooperative", series(&coop))
        .write_both(&args.out, "occupancy")?;
    for (label, bins) in [("ego", &ego), ("coop", &coop)] {
        let desc: Vec<String> = bins
            .iter()
            .map(|b| format!("{:.0}-{:.0}m {:.2}", b.range[0], b.range[1], b.rate()))
            .collect();
        println!("{label}: {}", desc.join(", "));
    }
    println!("occupancy stats written to {}", args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// comm-report

/// Communication cost accounting over a dataset, frame by frame.
#[derive(Debug, clap::Args)]
pub struct CommReportArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Optional trained model directory; a freshly initialized model is
    /// used when absent (element counts only depend on cell occupancy).
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

pub fn comm_report_cmd(args: &CommReportArgs) -> Result<()> {
    let cfg = resolve_config(args.config.as_deref(), &[&args.data])?;
    let (pipeline, model, head, store) = match &args.model {
        Some(dir) => {
            let (manifest, model, head, store) = load_model(dir)?;
            (manifest.pipeline, model, head, store)
        }
        None => {
            let (model, head, store) = build_model(&cfg.pipeline, mix(cfg.seed, SALT_PIPELINE))?;
            (cfg.pipeline.clone(), model, head, store)
        }
    };
    let _ = head;
    let names = split_names(&args.data, &args.split)?;
    let recs = import_dataset(&args.data, names.as_deref())?;
    if recs.is_empty() {
        bail!("{} split of {} holds no frames", args.split, args.data.display());
    }
    let mut comm = Vec::with_capacity(recs.len());
    for (i, rec) in recs.iter().enumerate() {
        let out = run_pipeline(&to_inputs(rec), &pipeline, &model, &store, mix(cfg.seed, i as u64))?;
        comm.push((i, out.report));
    }
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    report::write_comm_table(&comm, &args.out)?;
    let n = comm.len() as f64;
    println!(
        "{} frames: mean {:.0} elements, volume {:.2} log2(4-byte units), latency {:.2} ms",
        comm.len(),
        comm.iter().map(|(_, r)| r.total_elements as f64).sum::<f64>() / n,
        comm.iter().map(|(_, r)| r.total_volume_log2).sum::<f64>() / n,
        comm.iter().map(|(_, r)| r.total_latency_ms).sum::<f64>() / n
    );
    println!("comm tables written to {}", args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// plot

/// Re-renders a report CSV as SVG and PNG charts.
#[derive(Debug, clap::Args)]
pub struct PlotArgs {
    /// CSV produced by train, eval, or stats.
    #[arg(long)]
    pub input: PathBuf,
    /// What the CSV holds: `loss`, `pr`, `occupancy`, or `ap`.
    #[arg(long)]
    pub kind: String,
    #[arg(long)]
    pub out: PathBuf,
}

fn csv_columns(path: &Path, wanted: &[&str]) -> Result<Vec<Vec<String>>> {
    let mut reader = csv::Reader::from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let headers = reader.headers()?.clone();
    let idx: Vec<usize> = wanted
        .iter()
        .map(|name| {
            headers
                .iter()
                .position(|h| h == *name)
                .ok_or_else(|| anyhow!("{} has no column {name:?}", path.display()))
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        rows.push(idx.iter().map(|&i| record[i].to_string()).collect());
    }
    Ok(rows)
}

fn f64_cell(s: &str) -> Result<f64> {
    s.parse::<f64>().map_err(|_| anyhow!("non-numeric csv cell {s:?}"))
}

pub fn plot_cmd(args: &PlotArgs) -> Result<()> {
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let chart = match args.kind.as_str() {
        "loss" => {
            let rows = csv_columns(&args.input, &["epoch", "total", "cls", "loc", "denoising"])?;
            let col = |k: usize| -> Result<Vec<(f64, f64)>> {
                rows.iter().map(|r| Ok((f64_cell(&r[0])?, f64_cell(&r[k])?))).collect()
            };
            Chart::new("Training loss", "epoch", "loss")
                .with_series("total", col(1)?)
                .with_series("cls", col(2)?)
                .with_series("loc", col(3)?)
                .with_series("denoising", col(4)?)
        }
        "pr" => {
            let rows = csv_columns(&args.input, &["recall", "precision"])?;
            let pts = rows
                .iter()
                .map(|r| Ok((f64_cell(&r[0])?, f64_cell(&r[1])?)))
                .collect::<Result<Vec<_>>>()?;
            Chart::new("Precision vs recall", "recall", "precision").with_series("precision", pts)
        }
        "occupancy" => {
            let rows = csv_columns(&args.input, &["mode", "bin_lo", "bin_hi", "rate"])?;
            let mut modes: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
            for r in &rows {
                let mid = 0.5 * (f64_cell(&r[1])? + f64_cell(&r[2])?);
                modes.entry(r[0].clone()).or_default().push((mid, f64_cell(&r[3])?));
            }
            let mut chart =
                Chart::new("Radar occupancy by range", "range to box center (m)", "occupied fraction");
            for (mode, pts) in modes {
                chart = chart.with_series(&mode, pts);
            }
            chart
        }
        "ap" => {
            let rows = csv_columns(&args.input, &["domain", "iou", "ap"])?;
            let mut domains: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
            for r in &rows {
                domains.entry(r[0].clone()).or_default().push((f64_cell(&r[1])?, f64_cell(&r[2])?));
            }
            let mut chart = Chart::new("Average precision vs IoU", "IoU threshold", "AP");
            for (domain, pts) in domains {
                chart = chart.with_series(&domain, pts);
            }
            chart
        }
        other => bail!("unknown plot kind {other:?}; expected loss, pr, occupancy, or ap"),
    };
    let stem = args.kind.clone();
    chart.write_both(&args.out, &stem)?;
    println!("wrote {}/{stem}.svg and .png", args.out.display());
    Ok(())
}
