//! Feature bundle files, the on-disk feature cache and the adapter for
//! features exported from a pretrained model.
//!
//! A `.feat` file is little-endian throughout:
//!
//! ```text
//! magic "GRANFEAT" | version u32 | kind u32 | grid_side u32
//! source_h u32 | source_w u32 | frame_side u32
//! 3 × tensor: ndim u32, dims u32 × ndim, f32 × prod(dims)
//!     (shallow features, image embedding, mask embeddings)
//! mask count u32 | then count × source_h × source_w bytes, 0 or 1
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use granedge_core::backbone::{FeatureBundle, FeatureProvider, ProviderConfig, ProviderKind, ToyBackbone};
use granedge_core::{Image, Mask, Tensor};
use sha2::{Digest, Sha256};

use crate::error::{io_err, load_err, Error, Result};

pub const MAGIC: &[u8; 8] = b"GRANFEAT";
pub const VERSION: u32 = 1;
/// Environment variable naming the feature cache directory.
pub const CACHE_ENV: &str = "GRANEDGE_CACHE_DIR";

/// Header fields of a `.feat` file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatHeader {
    pub kind: ProviderKind,
    pub grid_side: usize,
}

fn kind_code(k: ProviderKind) -> u32 {
    match k {
        ProviderKind::PretrainedAdapter => 0,
        ProviderKind::Toy => 1,
    }
}

pub(crate) struct Writer(pub Vec<u8>);

impl Writer {
    pub fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&u32::try_from(v).expect("value fits in u32").to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f32s(&mut self, v: &[f64]) {
        for &x in v {
            self.0.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    pub fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len());
        self.0.extend_from_slice(b);
    }
    pub fn tensor(&mut self, t: &Tensor) {
        self.u32(t.shape().len());
        for &d in t.shape() {
            self.u32(d);
        }
        self.f32s(t.data());
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| load_err!("truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    pub fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    pub fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| load_err!("tensor too large"))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect())
    }
    pub fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()?;
        self.take(n)
    }
    pub fn tensor(&mut self) -> Result<Tensor> {
        let nd = self.u32()?;
        if nd > 8 {
            return Err(load_err!("tensor rank {nd} is not supported"));
        }
        let shape = (0..nd).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| load_err!("tensor too large"))?;
        Ok(Tensor::from_vec(&shape, self.f32s(n)?)?)
    }
    pub fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(load_err!("{} trailing bytes", self.buf.len() - self.pos));
        }
        Ok(())
    }
}

pub fn encode_bundle(b: &FeatureBundle, header: FeatHeader) -> Vec<u8> {
    let mut w = Writer(MAGIC.to_vec());
    w.u32(VERSION as usize);
    w.u32(kind_code(header.kind) as usize);
    w.u32(header.grid_side);
    w.u32(b.source_size.0);
    w.u32(b.source_size.1);
    w.u32(b.frame_side);
    for t in [&b.shallow_features, &b.image_embedding, &b.mask_embeddings] {
        w.tensor(t);
    }
    w.u32(b.object_masks.len());
    for m in &b.object_masks {
        w.0.extend(m.data().iter().map(|&v| v as u8));
    }
    w.0
}

pub fn decode_bundle(buf: &[u8]) -> Result<(FeatHeader, FeatureBundle)> {
    let mut r = Reader::new(buf);
    if r.take(8)? != MAGIC {
        return Err(load_err!("not a feature file"));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(load_err!("feature file version {version}, expected {VERSION}"));
    }
    let kind = match r.u32()? {
        0 => ProviderKind::PretrainedAdapter,
        1 => ProviderKind::Toy,
        k => return Err(load_err!("unknown provider code {k}")),
    };
    let grid_side = r.u32()?;
    let source_size = (r.u32()?, r.u32()?);
    let frame_side = r.u32()?;
    let shallow_features = r.tensor()?;
    let image_embedding = r.tensor()?;
    let mask_embeddings = r.tensor()?;
    let count = r.u32()?;
    let (h, w) = source_size;
    let object_masks = (0..count)
        .map(|_| {
            let raw = r.take(h * w)?;
            Ok(Mask::from_vec(h, w, raw.iter().map(|&v| v != 0).collect())?)
        })
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    let bundle = FeatureBundle { shallow_features, image_embedding, mask_embeddings, object_masks, source_size, frame_side };
    bundle.validate()?;
    Ok((FeatHeader { kind, grid_side }, bundle))
}

pub fn read_bundle(path: &Path) -> Result<(FeatHeader, FeatureBundle)> {
    let buf = fs::read(path).map_err(io_err(path))?;
    decode_bundle(&buf).map_err(|e| load_err!("{}: {e}", path.display()))
}

/// Write `bytes` to `path` through a temporary file in the same directory,
/// so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e.error })?;
    Ok(())
}

/// Hex SHA-256 prefix of an image's size and 8-bit pixel values.
pub fn image_hash(img: &Image) -> String {
    let mut h = Sha256::new();
    let (rows, cols) = img.size();
    h.update((rows as u64).to_le_bytes());
    h.update((cols as u64).to_le_bytes());
    h.update(img.data().iter().map(|&v| crate::pngio::quantize(v)).collect::<Vec<u8>>());
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

fn core_load(e: Error) -> granedge_core::Error {
    match e {
        Error::Core(c) => c,
        other => granedge_core::Error::Load(other.to_string()),
    }
}

/// Disk cache in front of another provider.
///
/// Every bundle passes through the file encoding, so results are the same
/// whether the cache is cold or warm.
pub struct CachedProvider {
    inner: Box<dyn FeatureProvider>,
    dir: PathBuf,
    calls: AtomicUsize,
}

impl CachedProvider {
    pub fn new(inner: Box<dyn FeatureProvider>, dir: impl Into<PathBuf>) -> Self {
        Self { inner, dir: dir.into(), calls: AtomicUsize::new(0) }
    }

    /// Number of times the wrapped provider ran.
    pub fn provider_calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn path_for(&self, img: &Image) -> PathBuf {
        let kind = self.inner.kind().as_str();
        let g = self.inner.grid_side();
        let digest = self.inner.state_digest();
        self.dir.join(format!("{}_{kind}_g{g}_{digest:016x}.feat", image_hash(img)))
    }

    fn header(&self) -> FeatHeader {
        FeatHeader { kind: self.inner.kind(), grid_side: self.inner.grid_side() }
    }
}

impl FeatureProvider for CachedProvider {
    fn kind(&self) -> ProviderKind {
        self.inner.kind()
    }

    fn grid_side(&self) -> usize {
        self.inner.grid_side()
    }

    fn extract(&self, image: &Image) -> granedge_core::Result<FeatureBundle> {
        let path = self.path_for(image);
        if let Ok((h, b)) = read_bundle(&path) {
            if h == self.header() && b.source_size == image.size() {
                return Ok(b);
            }
        }
        self.calls.fetch_add(1, Ordering::SeqCst);
        let bundle = self.inner.extract(image)?;
        let bytes = encode_bundle(&bundle, self.header());
        write_atomic(&path, &bytes).map_err(core_load)?;
        decode_bundle(&bytes).map(|(_, b)| b).map_err(core_load)
    }

    fn frozen_parameter_count(&self) -> usize {
        self.inner.frozen_parameter_count()
    }

    fn state_digest(&self) -> u64 {
        self.inner.state_digest()
    }
}

/// Features exported from a pretrained segmentation model.
///
/// The export directory holds `adapter.txt` (`key=value` lines with at
/// least `parameters` and `grid_side`, optionally `hook`) and one
/// `<image hash>.feat` file per image. Mask embeddings are whatever the
/// exporter recorded under `hook`.
#[derive(Clone, Debug)]
pub struct PretrainedAdapter {
    dir: PathBuf,
    grid_side: usize,
    parameters: usize,
    meta: BTreeMap<String, String>,
    digest: u64,
}

impl PretrainedAdapter {
    pub fn open(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("adapter.txt");
        let text = fs::read_to_string(&meta_path)
            .map_err(|e| load_err!("pretrained export {}: cannot read adapter.txt: {e}", dir.display()))?;
        let meta = crate::config::parse_pairs(&text)?.into_iter().collect::<BTreeMap<_, _>>();
        let get = |k: &str| -> Result<usize> {
            meta.get(k)
                .ok_or_else(|| load_err!("{}: missing `{k}`", meta_path.display()))?
                .parse()
                .map_err(|_| load_err!("{}: `{k}` is not an integer", meta_path.display()))
        };
        let grid_side = get("grid_side")?;
        let parameters = get("parameters")?;
        let digest = u64::from_le_bytes(Sha256::digest(text.as_bytes())[..8].try_into().expect("8 bytes"));
        Ok(Self { dir: dir.to_path_buf(), grid_side, parameters, meta, digest })
    }

    /// Free-form metadata from `adapter.txt`.
    pub fn meta(&self) -> &BTreeMap<String, String> {
        &self.meta
    }

    pub fn path_for(&self, img: &Image) -> PathBuf {
        self.dir.join(format!("{}.feat", image_hash(img)))
    }
}

impl FeatureProvider for PretrainedAdapter {
    fn kind(&self) -> ProviderKind {
        ProviderKind::PretrainedAdapter
    }

    fn grid_side(&self) -> usize {
        self.grid_side
    }

    fn extract(&self, image: &Image) -> granedge_core::Result<FeatureBundle> {
        let path = self.path_for(image);
        if !path.is_file() {
            return Err(granedge_core::Error::Load(format!("no exported features for this image ({})", path.display())));
        }
        let (h, b) = read_bundle(&path).map_err(core_load)?;
        if h.grid_side != self.grid_side || b.prompts() != self.grid_side * self.grid_side {
            return Err(granedge_core::Error::Load(format!(
                "{}: exported with grid {} and {} prompts, expected grid {}",
                path.display(),
                h.grid_side,
                b.prompts(),
                self.grid_side
            )));
        }
        if b.source_size != image.size() {
            return Err(granedge_core::Error::Load(format!("{}: exported for a different image size", path.display())));
        }
        Ok(b)
    }

    fn frozen_parameter_count(&self) -> usize {
        self.parameters
    }

    fn state_digest(&self) -> u64 {
        self.digest
    }
}

/// Build the configured provider, optionally behind a disk cache.
pub fn open_provider(cfg: &ProviderConfig, cache_dir: Option<&Path>) -> Result<Box<dyn FeatureProvider>> {
    cfg.validate()?;
    let inner: Box<dyn FeatureProvider> = match cfg.kind {
        ProviderKind::Toy => Box::new(ToyBackbone::from_config(cfg)?),
        ProviderKind::PretrainedAdapter => {
            let p = cfg.checkpoint_path.as_deref().expect("validated");
            let a = PretrainedAdapter::open(Path::new(p))?;
            if a.grid_side() != cfg.grid_side {
                return Err(load_err!("export grid {} does not match configured grid {}", a.grid_side(), cfg.grid_side));
            }
            Box::new(a)
        }
    };
    Ok(match cache_dir {
        Some(d) => Box::new(CachedProvider::new(inner, d)),
        None => inner,
    })
}
