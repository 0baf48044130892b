use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use bitstain_tensor::{Adam, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::state::TrainState;
use super::step::train_step;
use crate::container::Container;
use crate::data::{bit_tiles, he_tiles, Volume};
use crate::error::{Error, Result};
use crate::losses::{ChannelSubset, LossReport};
use crate::net::{mae_pretrain_step, Generator};

pub const LOSS_LOG: &str = "loss_log.jsonl";
pub const PRETRAIN_LOG: &str = "pretrain_log.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";

const SPLIT_STREAM: u64 = 1;
const EPOCH_STREAM: u64 = 1 << 20;
const PRETRAIN_STREAM: u64 = 1 << 21;

/// Unpaired training tiles, each `[3, S, S]` in `[-1, 1]`.
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub bit: Vec<Tensor>,
    pub he: Vec<Tensor>,
}

impl TrainData {
    /// Tiles preprocessed BIT volumes and RGB H&E volumes into training data.
    pub fn from_volumes(bit: &[Volume<u8>], he: &[Volume<u8>], tile: usize, stride: usize) -> Result<Self> {
        let mut data = Self::default();
        for (id, v) in bit.iter().enumerate() {
            data.bit.extend(bit_tiles(v, id as u32, tile, stride)?.iter().map(|t| t.to_tensor()));
        }
        for (id, v) in he.iter().enumerate() {
            data.he.extend(he_tiles(v, id as u32, tile, stride)?.iter().map(|t| t.to_tensor()));
        }
        Ok(data)
    }
}

/// Seeded train/held-out partition of one domain's tile indices.
pub fn split_indices(n: usize, fraction: f64, seed: u64, domain: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SPLIT_STREAM + domain);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    let take = ((fraction * n as f64).floor() as usize).clamp(1.min(n), n);
    let held = idx.split_off(take);
    (idx, held)
}

/// Visiting order of `n` training tiles in `epoch`; a pure function of its
/// arguments so that resumed runs see the same order.
pub fn epoch_order(n: usize, seed: u64, epoch: u64, domain: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(EPOCH_STREAM + 2 * epoch + domain);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

fn batch(tiles: &[Tensor], picks: &[usize]) -> Result<Tensor> {
    let parts: Vec<Tensor> = picks.iter().map(|&i| tiles[i].clone()).collect();
    Ok(Tensor::stack(&parts)?)
}

/// Result of a training call.
#[derive(Debug)]
pub struct TrainRun {
    pub state: TrainState,
    /// Reports of the adversarial steps run by this call.
    pub reports: Vec<LossReport>,
    pub pretrain_losses: Vec<f64>,
    /// Checkpoints written by this call, one per epoch.
    pub checkpoints: Vec<PathBuf>,
    pub steps_per_epoch: usize,
}

struct Plan {
    bit: Vec<usize>,
    he: Vec<usize>,
    steps_per_epoch: usize,
}

fn plan(cfg: &TrainConfig, data: &TrainData) -> Result<Plan> {
    if data.bit.is_empty() || data.he.is_empty() {
        return Err(Error::Config(format!(
            "empty dataset: {} BIT and {} H&E tiles",
            data.bit.len(),
            data.he.len()
        )));
    }
    let s = cfg.generator.input_size;
    for (name, tiles) in [("BIT", &data.bit), ("H&E", &data.he)] {
        if let Some(t) = tiles.iter().find(|t| t.shape() != [3, s, s]) {
            return Err(Error::Shape(format!(
                "{name} tile of shape {:?}, expected [3, {s}, {s}]",
                t.shape()
            )));
        }
    }
    let (bit, _) = split_indices(data.bit.len(), cfg.train_fraction, cfg.seed, 0);
    let (he, _) = split_indices(data.he.len(), cfg.train_fraction, cfg.seed, 1);
    let steps_per_epoch = bit.len().min(he.len()) / cfg.batch_size;
    if steps_per_epoch == 0 {
        return Err(Error::Config(format!(
            "{} BIT / {} H&E training tiles cannot fill a batch of {}",
            bit.len(),
            he.len(),
            cfg.batch_size
        )));
    }
    Ok(Plan {
        bit,
        he,
        steps_per_epoch,
    })
}

fn append_lines<T: serde::Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for item in items {
        let line = serde_json::to_string(item).map_err(|e| Error::Config(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn checkpoint_path(out_dir: &Path, epoch: u64) -> PathBuf {
    out_dir.join(CHECKPOINT_DIR).join(format!("epoch_{epoch:04}.ckpt"))
}

/// Joint masked-autoencoder pretraining on the union of both domains'
/// training tiles. Returns the pretrained backbone and its per-step losses.
pub fn pretrain_backbone(cfg: &TrainConfig, data: &TrainData) -> Result<(Generator, Vec<f64>)> {
    cfg.validate()?;
    let plan = plan(cfg, data)?;
    let mut backbone = Generator::new(cfg.generator.clone())?;
    let pool: Vec<&Tensor> = plan
        .bit
        .iter()
        .map(|&i| &data.bit[i])
        .chain(plan.he.iter().map(|&i| &data.he[i]))
        .collect();
    let steps = pool.len() / cfg.pretrain_batch_size;
    if steps == 0 {
        return Err(Error::Config(format!(
            "{} tiles cannot fill a pretraining batch of {}",
            pool.len(),
            cfg.pretrain_batch_size
        )));
    }
    let mut adam = Adam::new(cfg.adam(), backbone.params());
    let mut mask_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    mask_rng.set_stream(PRETRAIN_STREAM);
    let mut losses = Vec::with_capacity(steps * cfg.pretrain_epochs as usize);
    for epoch in 0..cfg.pretrain_epochs {
        let order = epoch_order(pool.len(), cfg.seed, epoch, PRETRAIN_STREAM);
        for chunk in order.chunks_exact(cfg.pretrain_batch_size) {
            let parts: Vec<Tensor> = chunk.iter().map(|&i| pool[i].clone()).collect();
            let b = Tensor::stack(&parts)?;
            losses.push(mae_pretrain_step(&mut backbone, &mut adam, &b, cfg.mask_ratio, &mut mask_rng)?);
        }
    }
    Ok((backbone, losses))
}

/// Copies a pretrained backbone into both generators.
pub fn init_from_backbone(state: &mut TrainState, backbone: &Generator) -> Result<()> {
    if backbone.config().input_size != state.config.generator.input_size
        || !backbone.config().features_compatible(&state.config.generator)
    {
        return Err(Error::Config("backbone architecture differs from the training config".into()));
    }
    for (name, value) in backbone.params().iter() {
        state.g_b2h.params_mut().set(name, value.clone())?;
        state.g_h2b.params_mut().set(name, value.clone())?;
    }
    Ok(())
}

/// Per-epoch callback: `(completed epoch, that epoch's reports)`.
pub type EpochHook<'a> = &'a mut dyn FnMut(u64, &[LossReport]);

const BACKBONE_KIND: &str = "backbone";

/// Writes a pretrained backbone as a container.
pub fn save_backbone(backbone: &Generator, path: impl AsRef<Path>) -> Result<()> {
    let mut c = Container::new();
    c.put_meta("kind", &BACKBONE_KIND)?;
    c.put_meta("generator", backbone.config())?;
    c.put_params("backbone", backbone.params());
    c.save(path)
}

pub fn load_backbone(path: impl AsRef<Path>) -> Result<Generator> {
    let c = Container::load(path)?;
    let kind: String = c.require_meta("kind")?;
    if kind != BACKBONE_KIND {
        return Err(Error::Config(format!("container holds `{kind}`, not a pretrained backbone")));
    }
    let mut g = Generator::new(c.require_meta("generator")?)?;
    c.load_params("backbone", g.params_mut())?;
    Ok(g)
}

/// Optimization steps per adversarial epoch for this config and dataset.
pub fn steps_per_epoch(config: &TrainConfig, data: &TrainData) -> Result<usize> {
    Ok(plan(config, data)?.steps_per_epoch)
}

/// Fresh state with its fusion schedule sized for `data`.
pub fn planned_state(config: TrainConfig, data: &TrainData) -> Result<TrainState> {
    let mut state = TrainState::new(config)?;
    let p = plan(&state.config, data)?;
    state.total_steps = (p.steps_per_epoch as u64 * state.config.epochs).max(1);
    Ok(state)
}

/// Runs pretraining (if configured) and all adversarial epochs from scratch.
pub fn train(
    config: TrainConfig,
    data: &TrainData,
    out_dir: Option<&Path>,
    hook: Option<EpochHook<'_>>,
) -> Result<TrainRun> {
    train_with_backbone(config, data, None, out_dir, hook)
}

/// Like [`train`], but a supplied backbone replaces the pretraining stage.
pub fn train_with_backbone(
    config: TrainConfig,
    data: &TrainData,
    backbone: Option<&Generator>,
    out_dir: Option<&Path>,
    hook: Option<EpochHook<'_>>,
) -> Result<TrainRun> {
    let mut state = planned_state(config, data)?;
    let mut pretrain_losses = Vec::new();
    if let Some(b) = backbone {
        init_from_backbone(&mut state, b)?;
    } else if state.config.pretrain_epochs > 0 {
        let (b, losses) = pretrain_backbone(&state.config, data)?;
        init_from_backbone(&mut state, &b)?;
        pretrain_losses = losses;
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        if !pretrain_losses.is_empty() {
            let rows: Vec<serde_json::Value> = pretrain_losses
                .iter()
                .enumerate()
                .map(|(i, l)| serde_json::json!({ "step": i, "mae": l }))
                .collect();
            append_lines(&dir.join(PRETRAIN_LOG), &rows)?;
        }
    }
    let mut run = continue_training(state, data, out_dir, None, hook)?;
    run.pretrain_losses = pretrain_losses;
    Ok(run)
}

/// Continues a (possibly restored) state up to `until_epoch` (default: the
/// configured epoch count), writing a checkpoint after every epoch.
pub fn continue_training(
    mut state: TrainState,
    data: &TrainData,
    out_dir: Option<&Path>,
    until_epoch: Option<u64>,
    mut hook: Option<EpochHook<'_>>,
) -> Result<TrainRun> {
    let p = plan(&state.config, data)?;
    let expected = (p.steps_per_epoch as u64 * state.config.epochs).max(1);
    if state.total_steps != expected {
        return Err(Error::State(format!(
            "state was planned for {} steps but this dataset gives {expected}",
            state.total_steps
        )));
    }
    let subset = ChannelSubset::new(&state.config.channel_subset, &state.config.generator)?;
    let last = until_epoch.unwrap_or(state.config.epochs).min(state.config.epochs);
    if let Some(dir) = out_dir {
        let ck = dir.join(CHECKPOINT_DIR);
        fs::create_dir_all(&ck).map_err(|e| Error::io(&ck, e))?;
    }
    let bs = state.config.batch_size;
    let seed = state.config.seed;
    let mut reports = Vec::new();
    let mut checkpoints = Vec::new();
    while state.epoch < last {
        let epoch = state.epoch;
        let ob = epoch_order(p.bit.len(), seed, epoch, 0);
        let oh = epoch_order(p.he.len(), seed, epoch, 1);
        let mut epoch_reports = Vec::with_capacity(p.steps_per_epoch);
        for s in 0..p.steps_per_epoch {
            let pick = |order: &[usize], pool: &[usize]| -> Vec<usize> {
                order[s * bs..(s + 1) * bs].iter().map(|&i| pool[i]).collect()
            };
            let x = batch(&data.bit, &pick(&ob, &p.bit))?;
            let y = batch(&data.he, &pick(&oh, &p.he))?;
            epoch_reports.push(train_step(&mut state, &x, &y, &subset)?);
        }
        state.epoch += 1;
        if let Some(dir) = out_dir {
            append_lines(&dir.join(LOSS_LOG), &epoch_reports)?;
            let path = checkpoint_path(dir, state.epoch);
            state.save(&path)?;
            checkpoints.push(path);
        }
        if let Some(h) = hook.as_mut() {
            h(state.epoch, &epoch_reports);
        }
        reports.extend(epoch_reports);
    }
    Ok(TrainRun {
        state,
        reports,
        pretrain_losses: Vec::new(),
        checkpoints,
        steps_per_epoch: p.steps_per_epoch,
    })
}

/// Reads a JSON-lines loss log.
pub fn read_loss_log(path: &Path) -> Result<Vec<LossReport>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}
