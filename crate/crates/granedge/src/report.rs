//! Parallel benchmark runs and report files.

use std::fmt::Write as _;
use std::path::Path;

use granedge_core::eval::{best_match_from_counts, image_counts, report_from_counts, EvalConfig, EvalReport};
use granedge_core::granularity::{candidate_suffix, AnnotationSet};
use granedge_core::Map;
use rayon::prelude::*;

use crate::dataset::load_annotation_dirs;
use crate::error::{io_err, load_err, Result};
use crate::features::write_atomic;
use crate::pngio::read_map;

/// [`granedge_core::eval::evaluate`] with images spread over the rayon
/// pool. Per-image counts are integers reduced in image order, so the
/// report does not depend on the worker count.
pub fn par_evaluate(preds: &[Map], gts: &[AnnotationSet], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    if preds.len() != gts.len() {
        return Err(load_err!("{} predictions for {} ground-truth sets", preds.len(), gts.len()));
    }
    let counts = preds.par_iter().zip(gts).map(|(p, g)| image_counts(p, g, cfg)).collect::<Result<Vec<_>, _>>()?;
    Ok(report_from_counts(&counts, &cfg.threshold_values())?)
}

/// Parallel best-match evaluation over `M` candidates per image.
pub fn par_best_match(candidates: &[Vec<Map>], gts: &[AnnotationSet], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    if candidates.len() != gts.len() {
        return Err(load_err!("{} candidate sets for {} ground-truth sets", candidates.len(), gts.len()));
    }
    let counts = candidates
        .par_iter()
        .zip(gts)
        .map(|(maps, g)| maps.iter().map(|m| image_counts(m, g, cfg)).collect::<Result<Vec<_>, _>>())
        .collect::<Result<Vec<_>, _>>()?;
    Ok(best_match_from_counts(&counts, &cfg.threshold_values())?)
}

/// Serialized report with the settings that produced it.
#[derive(serde::Serialize, serde::Deserialize, Debug, Clone, PartialEq)]
pub struct ReportFile {
    pub config: EvalConfig,
    pub images: Vec<String>,
    pub candidates: usize,
    pub report: EvalReport,
}

pub fn write_report_json(file: &ReportFile, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(file)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// `threshold,precision,recall,f` rows.
pub fn pr_csv(report: &EvalReport) -> String {
    let mut s = String::from("threshold,precision,recall,f\n");
    for i in 0..report.thresholds.len() {
        writeln!(s, "{},{},{},{}", report.thresholds[i], report.precision[i], report.recall[i], report.f[i]).expect("string write");
    }
    s
}

/// Image ids, candidate maps per image and annotations per image.
pub type EvalSet = (Vec<String>, Vec<Vec<Map>>, Vec<AnnotationSet>);

/// Load predictions `<pred_dir>/<id>.png` (or `<id>_aKK.png` for
/// `candidates > 0`) for every `<gt_dir>/<id>/` annotation set.
pub fn load_eval_set(pred_dir: &Path, gt_dir: &Path, candidates: usize) -> Result<EvalSet> {
    if !pred_dir.is_dir() {
        return Err(io_err(pred_dir)(std::io::Error::new(std::io::ErrorKind::NotFound, "prediction directory not found")));
    }
    let gts = load_annotation_dirs(gt_dir)?;
    if gts.is_empty() {
        return Err(load_err!("no annotation directories in {}", gt_dir.display()));
    }
    let mut ids = Vec::new();
    let mut preds = Vec::new();
    let mut sets = Vec::new();
    for (id, ann) in gts {
        let names: Vec<String> = if candidates == 0 {
            vec![format!("{id}.png")]
        } else {
            (0..candidates).map(|k| format!("{id}_{}.png", candidate_suffix(k))).collect()
        };
        let maps = names
            .iter()
            .map(|n| {
                let p = pred_dir.join(n);
                if !p.is_file() {
                    return Err(load_err!("entry `{id}`: missing prediction {}", p.display()));
                }
                read_map(&p)
            })
            .collect::<Result<Vec<_>>>()?;
        if maps.iter().any(|m| m.size() != ann.size()) {
            return Err(load_err!("entry `{id}`: prediction is {:?}, annotations are {:?}", maps[0].size(), ann.size()));
        }
        ids.push(id);
        preds.push(maps);
        sets.push(ann);
    }
    Ok((ids, preds, sets))
}
