//! Training, inference and label export on files.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use granedge_core::backbone::FeatureProvider;
use granedge_core::data::{stream_seed, Sample};
use granedge_core::granularity::LabelLadder;
use granedge_core::train::{infer_maps, InferRequest, StepLog, Trainer};
use granedge_core::{Image, Map};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::render_config;
use crate::error::{io_err, load_err, Error, Result};
use crate::pngio::{write_map, write_mask};

pub const LOG_FILE: &str = "train.jsonl";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const LAST_GOOD_CHECKPOINT: &str = "last_good.ckpt";

pub fn epoch_checkpoint(epoch: u64) -> String {
    format!("epoch_{epoch:03}.ckpt")
}

/// Train until `trainer.config.epochs` epochs are done.
///
/// Writes `config.cfg`, appends one JSON line per step to `train.jsonl`
/// and saves a checkpoint after every epoch. A non-finite loss stops the
/// run; the parameters from before the failing step go to
/// `last_good.ckpt`.
pub fn train(
    trainer: &mut Trainer,
    samples: &[Sample],
    provider: &dyn FeatureProvider,
    out_dir: &Path,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Vec<StepLog>> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let cfg_path = out_dir.join("config.cfg");
    fs::write(&cfg_path, render_config(&trainer.config)).map_err(io_err(&cfg_path))?;
    let log_path = out_dir.join(LOG_FILE);
    let file = fs::OpenOptions::new().create(true).append(true).open(&log_path).map_err(io_err(&log_path))?;
    let mut log = BufWriter::new(file);
    let mut all = Vec::new();
    while trainer.epoch < trainer.config.epochs {
        let mut write_err = None;
        let res = trainer.run_epoch_with(samples, provider, &mut |l| {
            all.push(*l);
            on_step(l);
            let line = serde_json::to_string(l).expect("step log serializes");
            if let Err(e) = writeln!(log, "{line}") {
                write_err.get_or_insert(e);
            }
        });
        log.flush().map_err(io_err(&log_path))?;
        if let Some(e) = write_err {
            return Err(io_err(&log_path)(e));
        }
        match res {
            Ok(()) => {
                checkpoint::save(trainer, &out_dir.join(epoch_checkpoint(trainer.epoch)))?;
                checkpoint::save(trainer, &out_dir.join(LAST_CHECKPOINT))?;
            }
            Err(granedge_core::Error::NonFinite(msg)) => {
                let p = out_dir.join(LAST_GOOD_CHECKPOINT);
                checkpoint::save(trainer, &p)?;
                return Err(Error::Core(granedge_core::Error::NonFinite(format!(
                    "{msg}; parameters from step {} saved to {}",
                    trainer.step,
                    p.display()
                ))));
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(all)
}

/// Read a `train.jsonl` log.
pub fn read_log(path: &Path) -> Result<Vec<StepLog>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

/// Named output maps of one image.
pub fn infer_image(
    trainer: &Trainer,
    provider: &dyn FeatureProvider,
    image: &Image,
    request: InferRequest,
) -> Result<Vec<(String, Map)>> {
    if let InferRequest::Alpha(a) = request {
        if !(0.0..=1.0).contains(&a) {
            return Err(granedge_core::Error::Input(format!("granularity {a} outside [0, 1]")).into());
        }
    }
    if !trainer.multi_granularity() && request != InferRequest::Final {
        return Err(infer_maps_err());
    }
    let bundle = provider.extract(image)?;
    let maps = trainer.stn.predict(&bundle)?;
    Ok(infer_maps(&maps, request, trainer.multi_granularity())?)
}

fn infer_maps_err() -> Error {
    granedge_core::Error::Input("this network was trained without granularity outputs; only the final map is available".into())
        .into()
}

/// Output file for `id` and a suffix from [`infer_maps`].
pub fn output_name(id: &str, suffix: &str) -> String {
    if suffix.is_empty() {
        format!("{id}.png")
    } else {
        format!("{id}_{suffix}.png")
    }
}

/// Write the outputs of one image; returns the written paths.
pub fn write_outputs(out_dir: &Path, id: &str, maps: &[(String, Map)]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    maps.iter()
        .map(|(suffix, m)| {
            let p = out_dir.join(output_name(id, suffix));
            write_map(m, &p)?;
            Ok(p)
        })
        .collect()
}

/// Ladder and consensus PNGs in `<out_dir>/<id>/`.
pub fn build_labels(samples: &[Sample], zeta: f64, seed: u64, out_dir: &Path) -> Result<()> {
    for (i, s) in samples.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, 0, i as u64));
        let l = LabelLadder::build(&s.annotations, zeta, &mut rng).map_err(|e| load_err!("entry `{}`: {e}", s.id))?;
        let dir = out_dir.join(&s.id);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        write_mask(&l.coarse, &dir.join("coarse.png"))?;
        write_mask(&l.medium, &dir.join("medium.png"))?;
        write_mask(&l.fine, &dir.join("fine.png"))?;
        write_mask(&l.consensus, &dir.join("consensus.png"))?;
        write_map(&l.soft_consensus, &dir.join("soft_consensus.png"))?;
    }
    Ok(())
}
