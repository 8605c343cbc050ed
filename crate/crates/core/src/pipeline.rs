//! The experiment commands: dataset synthesis, staged training, evaluation,
//! ablations and map export. Each command is a pure function of its config,
//! inputs and seed.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Stage};
use crate::config::ExperimentConfig;
use crate::encoders::{encode_audio, encode_visual, train_stage1, AvPair, EncoderParams};
use crate::error::{IerError, Result};
use crate::evaluate::{evaluate, single_class, EvalConfig, Evaluation};
use crate::identifier::{train_identifier, StepParams};
use crate::metrics::{cluster_to_category, MetricsReport};
use crate::numerics::FeatureGrid;
use crate::prototypes::build_prototypes;
use crate::referrer::{infer_all, train_stage2, Model, ReferrerConfig, ThresholdMode};
use crate::tensor_io::{map_to_tensor, read_tensor, write_pgm, write_tensor, Tensor};
use crate::world::{generate_dataset, make_class_table, Dataset, SceneSpec, ScenePair};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_FORMAT: &str = "ier-dataset";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Single,
    Unconstrained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub id: String,
    pub split: Split,
    /// Tensor file paths relative to the dataset directory.
    pub visual: String,
    pub audio: String,
    pub labels: Vec<u8>,
    pub scene: SceneSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub k_true: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub c_in: usize,
    pub a_in: usize,
    pub items: Vec<ManifestItem>,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| IerError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| IerError::io(path, e))
}

fn item_id(split: Split, index: usize) -> String {
    match split {
        Split::Single => format!("s{index:05}"),
        Split::Unconstrained => format!("u{index:05}"),
    }
}

/// Generates the dataset described by `config` in memory.
pub fn synthesize(config: &ExperimentConfig) -> Result<Dataset> {
    config.validate()?;
    let table = make_class_table(config.k_true, config.c_in, config.a_in, config.table_seed())?;
    generate_dataset(&table, &config.world(), config.scene_seed(), config.n_single, config.n_unconstrained)
}

/// Writes the manifest and one visual and one audio tensor per scene.
pub fn cmd_synth(config: &ExperimentConfig, out_dir: &Path) -> Result<Manifest> {
    let data = synthesize(config)?;
    let tensors = out_dir.join("tensors");
    create_dir(&tensors)?;
    let mut items = Vec::with_capacity(data.single.len() + data.unconstrained.len());
    for (split, scenes) in [(Split::Single, &data.single), (Split::Unconstrained, &data.unconstrained)] {
        for (i, scene) in scenes.iter().enumerate() {
            let id = item_id(split, i);
            let visual = format!("tensors/{id}.visual.iert");
            let audio = format!("tensors/{id}.audio.iert");
            let g = &scene.visual;
            write_tensor(out_dir.join(&visual), &Tensor::from_f64(vec![g.height, g.width, g.channels], &g.data)?)?;
            write_tensor(out_dir.join(&audio), &Tensor::from_f64(vec![scene.audio.len()], &scene.audio)?)?;
            items.push(ManifestItem {
                id,
                split,
                visual,
                audio,
                labels: scene.labels.clone(),
                scene: scene.spec.clone(),
            });
        }
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.to_string(),
        version: 1,
        config_hash: hex(&config.hash()),
        k_true: config.k_true,
        grid_h: config.grid_h,
        grid_w: config.grid_w,
        c_in: config.c_in,
        a_in: config.a_in,
        items,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| IerError::Format(e.to_string()))?;
    write_text(&out_dir.join(MANIFEST_FILE), &text)?;
    info!("wrote {} scenes to {}", manifest.items.len(), out_dir.display());
    Ok(manifest)
}

/// Reads a dataset written by [`cmd_synth`].
pub fn load_dataset(dir: &Path) -> Result<(Manifest, Dataset)> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| IerError::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| IerError::Format(format!("{}: {e}", path.display())))?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(IerError::Format(format!("{} is not a dataset manifest", path.display())));
    }
    let mut data = Dataset {
        single: Vec::new(),
        unconstrained: Vec::new(),
    };
    for item in &manifest.items {
        let v = read_tensor(dir.join(&item.visual))?;
        let a = read_tensor(dir.join(&item.audio))?;
        if v.dims != [manifest.grid_h, manifest.grid_w, manifest.c_in] || a.dims != [manifest.a_in] {
            return Err(IerError::Format(format!("tensors of {} do not match the manifest", item.id)));
        }
        let scene = ScenePair {
            visual: FeatureGrid::new(manifest.grid_h, manifest.grid_w, manifest.c_in, v.to_f64())?,
            audio: a.to_f64(),
            labels: item.labels.clone(),
            spec: item.scene.clone(),
        };
        match item.split {
            Split::Single => data.single.push(scene),
            Split::Unconstrained => data.unconstrained.push(scene),
        }
    }
    Ok((manifest, data))
}

fn check_dataset_dims(config: &ExperimentConfig, manifest: &Manifest) -> Result<()> {
    if (manifest.k_true, manifest.c_in, manifest.a_in) != (config.k_true, config.c_in, config.a_in) {
        return Err(IerError::usage(format!(
            "dataset has k_true={}, c_in={}, a_in={} but the config expects {}, {}, {}",
            manifest.k_true, manifest.c_in, manifest.a_in, config.k_true, config.c_in, config.a_in
        )));
    }
    Ok(())
}

fn check_model_dims(config: &ExperimentConfig, encoders: &EncoderParams, manifest: &Manifest) -> Result<()> {
    if encoders.visual.input_dim() != manifest.c_in || encoders.audio_mid.input_dim() != manifest.a_in {
        return Err(IerError::usage(format!(
            "checkpoint expects c_in={}, a_in={} but the dataset has {}, {}",
            encoders.visual.input_dim(),
            encoders.audio_mid.input_dim(),
            manifest.c_in,
            manifest.a_in
        )));
    }
    if manifest.k_true != config.k_true {
        return Err(IerError::usage("dataset and config disagree on the class count"));
    }
    Ok(())
}

fn pairs(scenes: &[ScenePair]) -> Vec<AvPair<'_>> {
    scenes.iter().map(|s| (&s.visual, s.audio.as_slice())).collect()
}

/// One line of a training log. `p` and `m` are only set while training the
/// identifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub loss: f64,
    pub p: Option<f64>,
    pub m: Option<usize>,
}

/// Runs one training stage on an in-memory dataset.
pub fn train_stage(
    config: &ExperimentConfig,
    data: &Dataset,
    stage: Stage,
    previous: Option<&Checkpoint>,
) -> Result<(Checkpoint, Vec<LogRow>)> {
    config.validate()?;
    let hash = config.hash();
    match stage {
        Stage::Stage1 => {
            if data.single.is_empty() {
                return Err(IerError::usage("stage 1 needs single-source scenes"));
            }
            let init = EncoderParams::random(config.c_in, config.a_in, config.embed_dim, config.mid_dim, config.init_seed());
            let (params, losses) = train_stage1(&init, &pairs(&data.single), &config.stage1())?;
            let log = losses
                .iter()
                .enumerate()
                .map(|(epoch, &loss)| LogRow { epoch, loss, p: None, m: None })
                .collect();
            Ok((Checkpoint::from_encoders(hash, &params), log))
        }
        Stage::Identifier => {
            let previous = previous
                .filter(|c| c.stage == Stage::Stage1)
                .ok_or_else(|| IerError::usage("identifier training needs a stage-1 checkpoint"))?;
            if data.single.len() < config.k {
                return Err(IerError::usage("fewer single-source scenes than pseudo-classes"));
            }
            let encoders = previous.encoders()?;
            let visual = data
                .single
                .iter()
                .map(|s| encode_visual(&encoders, &s.visual))
                .collect::<Result<Vec<_>>>()?;
            let audio = data
                .single
                .iter()
                .map(|s| encode_audio(&encoders, &s.audio).map(|(a, _)| a))
                .collect::<Result<Vec<_>>>()?;
            let prototypes = build_prototypes(&visual, &audio, config.k, config.kmeans_seed(), config.kmeans_iters)?;
            let truth = data.single.iter().map(single_class).collect::<Result<Vec<_>>>()?;
            let clusters = cluster_to_category(&prototypes.assignments, &truth, config.k)?;
            let steps = StepParams::zeros(config.k, config.embed_dim, config.mid_dim);
            let out = train_identifier(&encoders, &steps, &pairs(&data.single), &prototypes, &config.identifier())?;
            let model = Model {
                encoders: out.params,
                steps: out.steps,
                prototypes: out.prototypes,
            };
            let log = out
                .log
                .iter()
                .map(|l| LogRow {
                    epoch: l.epoch,
                    loss: l.loss,
                    p: Some(l.mix_probability),
                    m: Some(l.order),
                })
                .collect();
            Ok((Checkpoint::from_model(hash, Stage::Identifier, &model, &clusters)?, log))
        }
        Stage::Stage2 => {
            let previous = previous
                .filter(|c| c.stage >= Stage::Identifier)
                .ok_or_else(|| IerError::usage("stage 2 needs an identifier checkpoint"))?;
            if data.unconstrained.is_empty() {
                return Err(IerError::usage("stage 2 needs unconstrained scenes"));
            }
            let model = previous.model()?;
            let clusters = previous.clusters()?;
            let (model, losses) = train_stage2(&model, &config.referrer()?, &pairs(&data.unconstrained), &config.stage2())?;
            let log = losses
                .iter()
                .enumerate()
                .map(|(epoch, &loss)| LogRow { epoch, loss, p: None, m: None })
                .collect();
            Ok((Checkpoint::from_model(hash, Stage::Stage2, &model, &clusters)?, log))
        }
    }
}

pub fn write_log(path: &Path, log: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for row in log {
        w.serialize(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| IerError::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> IerError {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => IerError::io(path, io),
            _ => unreachable!(),
        }
    } else {
        IerError::Format(format!("{}: {e}", path.display()))
    }
}

/// Trains one stage from files and writes the checkpoint and its CSV log
/// (`<checkpoint>.log.csv`).
pub fn cmd_train(
    config: &ExperimentConfig,
    dataset_dir: &Path,
    stage: Stage,
    previous: Option<&Path>,
    out: &Path,
) -> Result<Vec<LogRow>> {
    let previous = previous.map(Checkpoint::load).transpose()?;
    let (manifest, data) = load_dataset(dataset_dir)?;
    check_dataset_dims(config, &manifest)?;
    if let Some(p) = &previous {
        check_model_dims(config, &p.encoders()?, &manifest)?;
    }
    let (checkpoint, log) = train_stage(config, &data, stage, previous.as_ref())?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    checkpoint.save(out)?;
    write_log(&log_path(out), &log)?;
    info!("{} finished: {} epochs, final loss {:?}", stage.name(), log.len(), log.last().map(|r| r.loss));
    Ok(log)
}

pub fn log_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".log.csv");
    checkpoint.with_file_name(name)
}

/// Evaluates a model on an in-memory dataset.
pub fn evaluate_model(
    config: &ExperimentConfig,
    referrer: &ReferrerConfig,
    eval: &EvalConfig,
    model: &Model,
    clusters: &[usize],
    data: &Dataset,
) -> Result<Evaluation> {
    evaluate(model, referrer, eval, &data.single, &data.unconstrained, clusters, config.k_true)
}

/// Writes `report.json` and `per_sample.csv` to `out_dir`.
pub fn cmd_eval(config: &ExperimentConfig, checkpoint: &Path, dataset_dir: &Path, out_dir: &Path) -> Result<MetricsReport> {
    let ck = Checkpoint::load(checkpoint)?;
    let model = ck.model()?;
    let (manifest, data) = load_dataset(dataset_dir)?;
    check_model_dims(config, &model.encoders, &manifest)?;
    let result = evaluate_model(config, &config.referrer()?, &config.eval(), &model, &ck.clusters()?, &data)?;
    create_dir(out_dir)?;
    let json = serde_json::to_string_pretty(&result.report).map_err(|e| IerError::Format(e.to_string()))?;
    write_text(&out_dir.join("report.json"), &json)?;

    let path = out_dir.join("per_sample.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
    let mut header = vec!["sample_id".to_string(), "ciou".to_string()];
    header.extend((0..config.k_true).map(|t| format!("iou_{t}")));
    w.write_record(&header).map_err(|e| csv_error(&path, e))?;
    for (i, s) in result.scene_scores.iter().enumerate() {
        let mut record = vec![item_id(Split::Unconstrained, i), s.ciou.to_string()];
        record.extend(s.per_class.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()));
        w.write_record(&record).map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| IerError::io(&path, e))?;
    Ok(result.report)
}

/// Which ablation groups to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationToggles {
    /// The four silent/off-screen filter combinations.
    pub filters: bool,
    /// Distinguishing steps on, and replaced by zero.
    pub identifier: bool,
    /// The five threshold modes.
    pub threshold: bool,
}

impl Default for AblationToggles {
    fn default() -> Self {
        AblationToggles {
            filters: true,
            identifier: true,
            threshold: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub group: String,
    pub silent_filter: bool,
    pub offscreen_filter: bool,
    pub identifier: bool,
    pub threshold_mode: u8,
    pub iou_05: f64,
    pub auc: f64,
    pub ciou_03: f64,
    pub nmi: f64,
    pub precision: f64,
    pub recall: f64,
    pub map: f64,
}

struct Variant {
    group: &'static str,
    referrer: ReferrerConfig,
    identifier: bool,
}

fn variants(config: &ExperimentConfig, toggles: &AblationToggles) -> Result<Vec<Variant>> {
    let base = config.referrer()?;
    let mut out = Vec::new();
    if toggles.filters {
        for (silent_filter, offscreen_filter) in [(true, true), (true, false), (false, true), (false, false)] {
            out.push(Variant {
                group: "filters",
                referrer: ReferrerConfig {
                    silent_filter,
                    offscreen_filter,
                    ..base
                },
                identifier: true,
            });
        }
    }
    if toggles.identifier {
        for identifier in [true, false] {
            out.push(Variant {
                group: "identifier",
                referrer: base,
                identifier,
            });
        }
    }
    if toggles.threshold {
        for mode in 1..=5 {
            out.push(Variant {
                group: "threshold",
                referrer: ReferrerConfig {
                    threshold: ThresholdMode::from_index(mode, config.threshold_value)?,
                    ..base
                },
                identifier: true,
            });
        }
    }
    Ok(out)
}

/// One metrics row per variant. From an identifier checkpoint every variant
/// trains its own stage 2 before evaluation; from a stage-2 checkpoint the
/// variants only change inference.
pub fn run_ablation(
    config: &ExperimentConfig,
    checkpoint: &Checkpoint,
    train: &Dataset,
    test: &Dataset,
    toggles: &AblationToggles,
) -> Result<Vec<AblationRow>> {
    let base = checkpoint.model()?;
    let clusters = checkpoint.clusters()?;
    let mut rows = Vec::new();
    for v in variants(config, toggles)? {
        let mut model = base.clone();
        if !v.identifier {
            model.steps = StepParams::zeros(model.k(), model.encoders.embed_dim(), model.encoders.mid_dim());
        }
        if checkpoint.stage == Stage::Identifier {
            if train.unconstrained.is_empty() {
                return Err(IerError::usage("ablation from an identifier checkpoint needs unconstrained scenes"));
            }
            model = train_stage2(&model, &v.referrer, &pairs(&train.unconstrained), &config.stage2())?.0;
        }
        let r = evaluate_model(config, &v.referrer, &config.eval(), &model, &clusters, test)?.report;
        info!("ablation {} s={} o={} id={} mode={}: ciou_03 {:.3}", v.group, v.referrer.silent_filter, v.referrer.offscreen_filter, v.identifier, v.referrer.threshold.index(), r.ciou_03);
        rows.push(AblationRow {
            group: v.group.to_string(),
            silent_filter: v.referrer.silent_filter,
            offscreen_filter: v.referrer.offscreen_filter,
            identifier: v.identifier,
            threshold_mode: v.referrer.threshold.index(),
            iou_05: r.iou_05,
            auc: r.auc,
            ciou_03: r.ciou_03,
            nmi: r.nmi,
            precision: r.precision,
            recall: r.recall,
            map: r.map,
        });
    }
    Ok(rows)
}

/// Ablation from files; `train_dir` supplies stage-2 training scenes when the
/// checkpoint predates stage 2 and defaults to the evaluation dataset.
pub fn cmd_ablate(
    config: &ExperimentConfig,
    checkpoint: &Path,
    dataset_dir: &Path,
    train_dir: Option<&Path>,
    toggles: &AblationToggles,
    out: &Path,
) -> Result<Vec<AblationRow>> {
    let ck = Checkpoint::load(checkpoint)?;
    let (manifest, test) = load_dataset(dataset_dir)?;
    check_model_dims(config, &ck.encoders()?, &manifest)?;
    let train = match train_dir {
        Some(dir) => {
            let (m, d) = load_dataset(dir)?;
            check_model_dims(config, &ck.encoders()?, &m)?;
            d
        }
        None => test.clone(),
    };
    let rows = run_ablation(config, &ck, &train, &test, toggles)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let mut w = csv::Writer::from_path(out).map_err(|e| csv_error(out, e))?;
    for row in &rows {
        w.serialize(row).map_err(|e| csv_error(out, e))?;
    }
    w.flush().map_err(|e| IerError::io(out, e))?;
    Ok(rows)
}

/// Writes the AVMap of every pseudo-class of every unconstrained scene as a
/// raw tensor plus a PGM preview. Returns the number of files written.
pub fn cmd_export_maps(
    config: &ExperimentConfig,
    checkpoint: &Path,
    dataset_dir: &Path,
    out_dir: &Path,
    limit: Option<usize>,
) -> Result<usize> {
    let ck = Checkpoint::load(checkpoint)?;
    let model = ck.model()?;
    let (manifest, data) = load_dataset(dataset_dir)?;
    check_model_dims(config, &model.encoders, &manifest)?;
    let n = limit.unwrap_or(data.unconstrained.len()).min(data.unconstrained.len());
    let scenes = &data.unconstrained[..n];
    let inferences = infer_all(&model, &config.referrer()?, &pairs(scenes), config.batch)?;
    create_dir(out_dir)?;
    let mut written = 0;
    for (i, inf) in inferences.iter().enumerate() {
        let id = item_id(Split::Unconstrained, i);
        for (k, map) in inf.av_maps.iter().enumerate() {
            let stem = out_dir.join(format!("{id}_k{k:02}"));
            write_tensor(stem.with_extension("iert"), &map_to_tensor(map)?)?;
            write_pgm(stem.with_extension("pgm"), map)?;
            written += 2;
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_path_appends_suffix() {
        assert_eq!(log_path(Path::new("out/s1.ckpt")), PathBuf::from("out/s1.ckpt.log.csv"));
    }

    #[test]
    fn hex_encoding() {
        assert_eq!(hex(&[0, 15, 255]), "000fff");
    }

    #[test]
    fn ablation_row_counts() {
        let c = ExperimentConfig::default();
        assert_eq!(variants(&c, &AblationToggles::default()).unwrap().len(), 11);
        let only = AblationToggles {
            filters: true,
            identifier: false,
            threshold: false,
        };
        assert_eq!(variants(&c, &only).unwrap().len(), 4);
    }
}
