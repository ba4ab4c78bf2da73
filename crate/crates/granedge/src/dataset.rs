//! Dataset manifests and the on-disk directory layout.
//!
//! A manifest has one record per line: the image path followed by one or
//! more annotation paths, separated by tabs. Relative paths resolve
//! against the manifest's directory. Blank lines and lines starting with
//! `#` are skipped; a line `@split train|val|test` sets the split.
//!
//! The directory layout is `images/<id>.png` with one annotation per
//! annotator in `annotations/<id>/<k>.png`.

use std::fs;
use std::path::{Path, PathBuf};

use granedge_core::data::Sample;
use granedge_core::granularity::AnnotationSet;

use crate::error::{io_err, load_err, Result};
use crate::pngio::{read_image, read_mask, write_image, write_mask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// File stem of the image.
    pub id: String,
    pub image: PathBuf,
    pub annotations: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    pub split: Split,
    pub entries: Vec<ManifestEntry>,
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Parse manifest text; `base` resolves relative paths.
pub fn parse_manifest(text: &str, base: &Path) -> Result<DatasetManifest> {
    let mut m = DatasetManifest::default();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        let lineno = n + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(rest) = line.strip_prefix("@split") {
            m.split = Split::parse(rest.trim()).ok_or_else(|| load_err!("line {lineno}: unknown split `{}`", rest.trim()))?;
            continue;
        }
        let mut fields = line.split('\t').map(str::trim).filter(|f| !f.is_empty());
        let image = base.join(fields.next().expect("non-blank line"));
        let id = stem(&image);
        let annotations: Vec<PathBuf> = fields.map(|f| base.join(f)).collect();
        if annotations.is_empty() {
            return Err(load_err!("line {lineno}: entry `{id}` has no annotations"));
        }
        m.entries.push(ManifestEntry { id, image, annotations });
    }
    Ok(m)
}

/// Read, parse and check that every referenced file exists.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let m = parse_manifest(&text, base)?;
    for e in &m.entries {
        for p in std::iter::once(&e.image).chain(&e.annotations) {
            if !p.is_file() {
                return Err(load_err!("entry `{}`: missing file {}", e.id, p.display()));
            }
        }
    }
    Ok(m)
}

/// Annotation files sorted by numeric stem, then by name.
fn annotation_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort_by_key(|p| (stem(p).parse::<u64>().unwrap_or(u64::MAX), p.clone()));
    Ok(files)
}

/// Manifest of a layout directory, sorted by id.
pub fn scan_layout(root: &Path) -> Result<DatasetManifest> {
    let images = root.join("images");
    let mut paths: Vec<PathBuf> = fs::read_dir(&images)
        .map_err(io_err(&images))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    let mut m = DatasetManifest::default();
    for image in paths {
        let id = stem(&image);
        let dir = root.join("annotations").join(&id);
        if !dir.is_dir() {
            return Err(load_err!("entry `{id}`: missing annotation directory {}", dir.display()));
        }
        let annotations = annotation_files(&dir)?;
        if annotations.is_empty() {
            return Err(load_err!("entry `{id}` has no annotations"));
        }
        m.entries.push(ManifestEntry { id, image, annotations });
    }
    Ok(m)
}

/// A manifest file or a layout directory.
pub fn open_dataset(path: &Path) -> Result<DatasetManifest> {
    if path.is_dir() {
        scan_layout(path)
    } else {
        load_manifest(path)
    }
}

pub fn load_sample(e: &ManifestEntry) -> Result<Sample> {
    let ctx = |err: crate::Error| load_err!("entry `{}`: {err}", e.id);
    let image = read_image(&e.image).map_err(ctx)?;
    let masks = e.annotations.iter().map(|p| read_mask(p)).collect::<Result<Vec<_>>>().map_err(ctx)?;
    let ann = AnnotationSet::new(masks).map_err(|err| ctx(err.into()))?;
    Sample::new(e.id.clone(), image, ann).map_err(|err| ctx(err.into()))
}

pub fn load_samples(m: &DatasetManifest) -> Result<Vec<Sample>> {
    m.entries.iter().map(load_sample).collect()
}

/// Annotation sets of every `<id>/` subdirectory of `dir`, sorted by id.
pub fn load_annotation_dirs(dir: &Path) -> Result<Vec<(String, AnnotationSet)>> {
    let mut subdirs: Vec<PathBuf> =
        fs::read_dir(dir).map_err(io_err(dir))?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    subdirs.sort();
    subdirs
        .into_iter()
        .map(|d| {
            let id = d.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let masks = annotation_files(&d)?.iter().map(|p| read_mask(p)).collect::<Result<Vec<_>>>()?;
            let ann = AnnotationSet::new(masks).map_err(|err| load_err!("entry `{id}`: {err}"))?;
            Ok((id, ann))
        })
        .collect()
}

/// Write samples in the directory layout.
pub fn write_layout(root: &Path, samples: &[Sample]) -> Result<()> {
    let images = root.join("images");
    fs::create_dir_all(&images).map_err(io_err(&images))?;
    for s in samples {
        write_image(&s.image, &images.join(format!("{}.png", s.id)))?;
        let dir = root.join("annotations").join(&s.id);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        for (k, m) in s.annotations.labels().iter().enumerate() {
            write_mask(m, &dir.join(format!("{k}.png")))?;
        }
    }
    Ok(())
}
