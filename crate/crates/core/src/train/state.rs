//! On-disk form of a training run: best and last checkpoints, loop state and
//! optimizer moments.

use super::{Optimizer, PlateauScheduler, TrainOutcome, TrainState};
use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::raster::KeyValues;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::path::Path;

const STATE_FILE: &str = "state.txt";
const MOMENTS_FILE: &str = "optimizer.bin";
const HISTORY_FILE: &str = "history.tsv";

pub fn save_outcome(outcome: &TrainOutcome, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_checkpoint(&outcome.best, &outcome.best_meta, &dir.join("best"))?;
    let last_meta = CheckpointMeta { epoch: outcome.state.epoch, step: outcome.state.step, ..Default::default() };
    save_checkpoint(&outcome.last, &last_meta, &dir.join("last"))?;
    let s = &outcome.state;
    let mut kv = KeyValues::default();
    kv.push("epoch", s.epoch);
    kv.push("step", s.step);
    kv.push("best_val", format!("{:?}", s.best_val));
    kv.push("best_epoch", s.best_epoch);
    kv.push("rng_seed", hex::encode(s.rng.get_seed()));
    kv.push("rng_stream", s.rng.get_stream());
    kv.push("rng_word_pos", s.rng.get_word_pos());
    kv.push("sched_factor", format!("{:?}", s.scheduler.factor));
    kv.push("sched_patience", s.scheduler.patience);
    kv.push("sched_min_delta", format!("{:?}", s.scheduler.min_delta));
    kv.push("sched_best", format!("{:?}", s.scheduler.best));
    kv.push("sched_bad_epochs", s.scheduler.bad_epochs);
    match &s.optimizer {
        Optimizer::Adam { lr, weight_decay, t, .. } => {
            kv.push("opt", "adam");
            kv.push("opt_lr", format!("{lr:?}"));
            kv.push("opt_weight_decay", format!("{weight_decay:?}"));
            kv.push("opt_t", t);
        }
        Optimizer::RmsProp { lr, weight_decay, alpha, momentum, .. } => {
            kv.push("opt", "rmsprop");
            kv.push("opt_lr", format!("{lr:?}"));
            kv.push("opt_weight_decay", format!("{weight_decay:?}"));
            kv.push("opt_alpha", format!("{alpha:?}"));
            kv.push("opt_momentum", format!("{momentum:?}"));
        }
    }
    kv.write(&dir.join(STATE_FILE))?;
    let slots = s.optimizer.state_slots();
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&(slots.len() as u32).to_le_bytes());
    for slot in slots {
        bytes.extend_from_slice(&(slot.len() as u32).to_le_bytes());
        for v in slot {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let p = dir.join(MOMENTS_FILE);
    fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
    s.history.write(&dir.join(HISTORY_FILE))
}

pub fn load_outcome(dir: &Path) -> Result<TrainOutcome> {
    let (best, best_meta) = load_checkpoint(&dir.join("best"), None)?;
    let (last, _) = load_checkpoint(&dir.join("last"), Some(&best.config))?;
    let sp = dir.join(STATE_FILE);
    let kv = KeyValues::read(&sp)?;
    let seed_hex = kv.require("rng_seed", &sp)?;
    let seed: [u8; 32] = hex::decode(seed_hex)
        .ok()
        .and_then(|v| v.try_into().ok())
        .ok_or_else(|| Error::format(&sp, "bad rng_seed"))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(kv.parse("rng_stream", &sp)?);
    rng.set_word_pos(kv.parse("rng_word_pos", &sp)?);
    let lr: f64 = kv.parse("opt_lr", &sp)?;
    let wd: f32 = kv.parse("opt_weight_decay", &sp)?;
    let mut optimizer = match kv.require("opt", &sp)? {
        "adam" => {
            let mut o = Optimizer::adam(&last, lr, wd as f64);
            if let Optimizer::Adam { t, weight_decay, .. } = &mut o {
                *t = kv.parse("opt_t", &sp)?;
                *weight_decay = wd;
            }
            o
        }
        "rmsprop" => {
            let alpha: f32 = kv.parse("opt_alpha", &sp)?;
            let momentum: f32 = kv.parse("opt_momentum", &sp)?;
            let mut o = Optimizer::rmsprop(&last, lr, wd as f64, 0.0, super::RmsReading::Smoothing);
            if let Optimizer::RmsProp { alpha: a, momentum: m, weight_decay, buf, sq, .. } = &mut o {
                *a = alpha;
                *m = momentum;
                *weight_decay = wd;
                if momentum > 0.0 {
                    *buf = sq.clone();
                }
            }
            o
        }
        other => return Err(Error::format(&sp, format!("unknown optimizer `{other}`"))),
    };
    let mp = dir.join(MOMENTS_FILE);
    let bytes = fs::read(&mp).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Missing(mp.clone()),
        _ => Error::io(&mp, e),
    })?;
    let mut pos = 0usize;
    let mut word = || -> Result<u32> {
        let b = bytes.get(pos..pos + 4).ok_or_else(|| Error::format(&mp, "truncated optimizer state"))?;
        pos += 4;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    };
    let count = word()? as usize;
    let mut slots = optimizer.state_slots_mut();
    if slots.len() != count {
        return Err(Error::format(&mp, "optimizer slot count does not match model"));
    }
    for slot in slots.iter_mut() {
        let len = word()? as usize;
        let mut v = Vec::with_capacity(len);
        for _ in 0..len {
            v.push(f32::from_bits(word()?));
        }
        **slot = v;
    }
    let scheduler = PlateauScheduler {
        factor: kv.parse("sched_factor", &sp)?,
        patience: kv.parse("sched_patience", &sp)?,
        min_delta: kv.parse("sched_min_delta", &sp)?,
        best: kv.parse("sched_best", &sp)?,
        bad_epochs: kv.parse("sched_bad_epochs", &sp)?,
    };
    let state = TrainState {
        epoch: kv.parse("epoch", &sp)?,
        step: kv.parse("step", &sp)?,
        best_val: kv.parse("best_val", &sp)?,
        best_epoch: kv.parse("best_epoch", &sp)?,
        rng,
        optimizer,
        scheduler,
        history: MetricsReport::read(&dir.join(HISTORY_FILE))?,
    };
    Ok(TrainOutcome { best, best_meta, last, state })
}
