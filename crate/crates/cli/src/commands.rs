use std::path::{Path, PathBuf};

use bitstain_core::data::{
    generate_phantom, load_labels, load_rgb8, load_volume, preprocess_volume, save_labels,
    save_volume, LabelVolume, LoadedVolume, PhantomSpec, PreprocessConfig, Volume,
};
use bitstain_core::eval::{evaluate_pair, DetectorConfig, EvalOptions, FeatureSet, Hd95Mode, HematoxylinDetector};
use bitstain_core::losses::LossReport;
use bitstain_core::trainer::{
    continue_training, load_backbone, pretrain_backbone, save_backbone, stain_volume,
    train_with_backbone, StainConfig, Stainer, TrainConfig, TrainData, TrainRun, TrainState,
    LOSS_LOG, PRETRAIN_LOG,
};
use serde::{Deserialize, Serialize};

use crate::config::resolve;
use crate::error::{CliError, Result};
use crate::rundir::RunDir;
use crate::{Command, ConfigArgs, DataArgs};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Segmenter applied when the prediction is an RGB volume.
    pub detector: DetectorConfig,
    pub hd95_mode: Hd95Mode,
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingInput(path.to_path_buf()))
    }
}

fn with_seed(cfg: &ConfigArgs, seed: Option<u64>) -> Vec<String> {
    let mut o = cfg.overrides.clone();
    if let Some(s) = seed {
        o.push(format!("seed={s}"));
    }
    o
}

pub fn run(root: &Path, command: Command) -> Result<()> {
    let name = match &command {
        Command::Synth { .. } => "synth",
        Command::Preprocess { .. } => "preprocess",
        Command::Pretrain { .. } => "pretrain",
        Command::Train { .. } => "train",
        Command::Stain { .. } => "stain",
        Command::Eval { .. } => "eval",
    };
    // Validate inputs and configs before any output directory is created.
    let job = prepare(command)?;
    let mut run = RunDir::create(root, name)?;
    let result = job.execute(&mut run);
    run.finish(result.is_ok())?;
    result
}

enum Job {
    Synth(PhantomSpec),
    Preprocess(PreprocessConfig, PathBuf),
    Pretrain(TrainConfig, DataArgs),
    Train {
        config: TrainConfig,
        data: DataArgs,
        backbone: Option<PathBuf>,
    },
    Resume(PathBuf, DataArgs),
    Stain(StainConfig, PathBuf, PathBuf),
    Eval {
        config: EvalConfig,
        pred: PathBuf,
        gt: PathBuf,
        feats: Option<(PathBuf, PathBuf)>,
    },
}

fn check_data(d: &DataArgs) -> Result<()> {
    d.bit.iter().chain(&d.he).try_for_each(|p| require(p))
}

fn prepare(command: Command) -> Result<Job> {
    Ok(match command {
        Command::Synth { cfg, seed } => Job::Synth(resolve(cfg.config.as_deref(), &with_seed(&cfg, seed))?),
        Command::Preprocess { cfg, input } => {
            require(&input)?;
            Job::Preprocess(resolve(cfg.config.as_deref(), &cfg.overrides)?, input)
        }
        Command::Pretrain { cfg, data, seed } => {
            check_data(&data)?;
            let config: TrainConfig = resolve(cfg.config.as_deref(), &with_seed(&cfg, seed))?;
            config.validate()?;
            Job::Pretrain(config, data)
        }
        Command::Train {
            cfg,
            data,
            seed,
            backbone,
            resume,
        } => {
            check_data(&data)?;
            if let Some(ckpt) = resume {
                if cfg.config.is_some() || !cfg.overrides.is_empty() || seed.is_some() {
                    return Err(CliError::Usage(
                        "--resume continues with the checkpoint's own config; drop --config, --override and --seed".into(),
                    ));
                }
                require(&ckpt)?;
                Job::Resume(ckpt, data)
            } else {
                if let Some(b) = &backbone {
                    require(b)?;
                }
                let config: TrainConfig = resolve(cfg.config.as_deref(), &with_seed(&cfg, seed))?;
                config.validate()?;
                Job::Train { config, data, backbone }
            }
        }
        Command::Stain { cfg, checkpoint, input } => {
            require(&checkpoint)?;
            require(&input)?;
            Job::Stain(resolve(cfg.config.as_deref(), &cfg.overrides)?, checkpoint, input)
        }
        Command::Eval {
            cfg,
            pred,
            gt,
            feats_pred,
            feats_real,
        } => {
            require(&pred)?;
            require(&gt)?;
            let feats = feats_pred.zip(feats_real);
            if let Some((a, b)) = &feats {
                require(a)?;
                require(b)?;
            }
            Job::Eval {
                config: resolve(cfg.config.as_deref(), &cfg.overrides)?,
                pred,
                gt,
                feats,
            }
        }
    })
}

/// Preprocessed three-channel BIT volume from a raw or already stacked one.
fn bit_volume(dir: &Path) -> Result<Volume<u8>> {
    let pre = PreprocessConfig::default();
    Ok(match load_volume(dir)? {
        LoadedVolume::Gray8(v) => preprocess_volume(&v, &pre)?,
        LoadedVolume::Gray16(v) => preprocess_volume(&v, &pre)?,
        LoadedVolume::Rgb8(v) => v,
    })
}

fn load_data(d: &DataArgs, tile: usize) -> Result<TrainData> {
    let bit = d.bit.iter().map(|p| bit_volume(p)).collect::<Result<Vec<_>>>()?;
    let he = d
        .he
        .iter()
        .map(|p| load_rgb8(p).map_err(CliError::from))
        .collect::<Result<Vec<_>>>()?;
    let data = TrainData::from_volumes(&bit, &he, tile, d.stride.unwrap_or(tile))?;
    log::info!("{} BIT and {} H&E tiles of {tile}x{tile}", data.bit.len(), data.he.len());
    Ok(data)
}

fn log_epoch(epoch: u64, reports: &[LossReport]) {
    let n = reports.len().max(1) as f64;
    let mean = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    log::info!(
        "epoch {epoch}: total {:.4} cycle {:.4} msc {:.4} style {:.4} adversarial {:.4}",
        mean(|r| r.total),
        mean(LossReport::cycle),
        mean(|r| r.msc_total),
        mean(|r| r.style),
        mean(LossReport::adversarial),
    );
}

fn report_run(run: &mut RunDir, result: &TrainRun) {
    run.add_output(LOSS_LOG);
    for c in &result.checkpoints {
        if let Ok(rel) = c.strip_prefix(&run.path) {
            run.add_output(rel.display().to_string());
        }
    }
    log::info!(
        "finished at epoch {} after {} steps ({} per epoch)",
        result.state.epoch,
        result.state.step,
        result.steps_per_epoch
    );
}

impl Job {
    fn execute(self, run: &mut RunDir) -> Result<()> {
        match self {
            Job::Synth(spec) => {
                run.record_config(&spec)?;
                let ph = generate_phantom(&spec)?;
                save_volume(&ph.bit, run.join("bit"))?;
                save_volume(&ph.he, run.join("he"))?;
                save_labels(&ph.labels, run.join("labels"))?;
                for o in ["bit", "he", "labels"] {
                    run.add_output(o);
                }
                log::info!("{} nuclei in a {:?} volume", ph.nuclei.len(), spec.volume_dims);
            }
            Job::Preprocess(cfg, input) => {
                run.record_config(&cfg)?;
                let out = match load_volume(&input)? {
                    LoadedVolume::Gray8(v) => preprocess_volume(&v, &cfg)?,
                    LoadedVolume::Gray16(v) => preprocess_volume(&v, &cfg)?,
                    LoadedVolume::Rgb8(_) => {
                        return Err(CliError::Usage(format!(
                            "{} is already a three-channel volume",
                            input.display()
                        )))
                    }
                };
                save_volume(&out, run.join("preprocessed"))?;
                run.add_output("preprocessed");
            }
            Job::Pretrain(cfg, data) => {
                run.record_config(&cfg)?;
                let tiles = load_data(&data, cfg.generator.input_size)?;
                let (backbone, losses) = pretrain_backbone(&cfg, &tiles)?;
                let log_path = run.join(PRETRAIN_LOG);
                let lines: String = losses
                    .iter()
                    .enumerate()
                    .map(|(i, l)| format!("{}\n", serde_json::json!({ "step": i, "mae": l })))
                    .collect();
                std::fs::write(&log_path, lines).map_err(|e| CliError::io(&log_path, e))?;
                save_backbone(&backbone, run.join("backbone.ckpt"))?;
                run.add_output(PRETRAIN_LOG);
                run.add_output("backbone.ckpt");
                if let Some(last) = losses.last() {
                    log::info!("{} pretraining steps, final masked loss {last:.5}", losses.len());
                }
            }
            Job::Train { config, data, backbone } => {
                run.record_config(&config)?;
                let tiles = load_data(&data, config.generator.input_size)?;
                let backbone = backbone.map(load_backbone).transpose()?;
                let mut hook = log_epoch;
                let result = train_with_backbone(config, &tiles, backbone.as_ref(), Some(&run.path), Some(&mut hook))?;
                report_run(run, &result);
            }
            Job::Resume(ckpt, data) => {
                let state = TrainState::load(&ckpt)?;
                run.record_config(&state.config)?;
                log::info!("resuming {} at epoch {}", ckpt.display(), state.epoch);
                let tiles = load_data(&data, state.config.generator.input_size)?;
                let mut hook = log_epoch;
                let result = continue_training(state, &tiles, Some(&run.path), None, Some(&mut hook))?;
                report_run(run, &result);
            }
            Job::Stain(cfg, ckpt, input) => {
                run.record_config(&cfg)?;
                let stainer = Stainer::load(&ckpt)?;
                let out = match load_volume(&input)? {
                    LoadedVolume::Gray8(v) => stain_volume(&stainer, &v, &cfg)?,
                    LoadedVolume::Gray16(v) => stain_volume(&stainer, &v, &cfg)?,
                    LoadedVolume::Rgb8(_) => {
                        return Err(CliError::Usage(format!(
                            "{} is RGB; staining expects a raw grayscale BIT volume",
                            input.display()
                        )))
                    }
                };
                save_volume(&out, run.join("stained"))?;
                run.add_output("stained");
            }
            Job::Eval { config, pred, gt, feats } => {
                run.record_config(&config)?;
                let gt_labels = load_labels(&gt)?;
                let pred_labels: LabelVolume = match load_volume(&pred)? {
                    LoadedVolume::Rgb8(v) => {
                        let labels = HematoxylinDetector::new(config.detector.clone())?.segment(&v)?;
                        save_labels(&labels, run.join("pred_labels"))?;
                        run.add_output("pred_labels");
                        labels
                    }
                    LoadedVolume::Gray8(v) => v.map(u32::from),
                    LoadedVolume::Gray16(v) => v.map(u32::from),
                };
                let feats = feats
                    .map(|(a, b)| Ok::<_, CliError>((FeatureSet::load_csv(a)?, FeatureSet::load_csv(b)?)))
                    .transpose()?;
                let opts = EvalOptions {
                    hd95_mode: config.hd95_mode,
                };
                let report = evaluate_pair(&pred_labels, &gt_labels, feats.as_ref().map(|(a, b)| (a, b)), &opts)
                    .with_ids(pred.display().to_string(), gt.display().to_string());
                let path = run.join("metrics.json");
                std::fs::write(&path, report.to_json()).map_err(|e| CliError::io(&path, e))?;
                run.add_output("metrics.json");
                print!("{report}");
            }
        }
        Ok(())
    }
}
