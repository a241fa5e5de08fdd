//! On-disk datasets: a `path,id,camera,view,split` manifest CSV next to
//! image files holding a one-line text header and little-endian `f32` data.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use transreid_core::numcore::Tensor;
use transreid_core::synthdata::{SampleMeta, Split};

pub const IMAGE_MAGIC: &str = "TRIMG";

/// Images in `[H, W, C]` layout aligned with their metas.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedData {
    pub images: Vec<Tensor>,
    pub metas: Vec<SampleMeta>,
}

impl LoadedData {
    pub fn dims(&self) -> Option<(usize, usize, usize)> {
        self.images.first().map(|t| (t.shape()[0], t.shape()[1], t.shape()[2]))
    }

    pub fn num_cameras(&self) -> usize {
        self.metas.iter().map(|m| m.camera + 1).max().unwrap_or(0)
    }

    pub fn num_views(&self) -> usize {
        self.metas.iter().filter_map(|m| m.view).map(|v| v + 1).max().unwrap_or(0)
    }

    pub fn ids(&self, split: Split) -> BTreeSet<usize> {
        self.metas.iter().filter(|m| m.split == split).map(|m| m.identity).collect()
    }

    /// Query and gallery share identities; train identities are disjoint.
    pub fn check_splits(&self) -> Result<()> {
        let (train, query, gallery) = (self.ids(Split::Train), self.ids(Split::Query), self.ids(Split::Gallery));
        ensure!(query == gallery, "query and gallery identity sets differ");
        ensure!(train.is_disjoint(&query), "train identities overlap the eval identities");
        Ok(())
    }
}

pub fn write_image(path: &Path, img: &Tensor) -> Result<()> {
    let &[h, w, c] = img.shape() else {
        bail!("image tensor must be [H, W, C], got {:?}", img.shape());
    };
    let mut buf = format!("{IMAGE_MAGIC} f32 {h} {w} {c}\n").into_bytes();
    buf.reserve(img.len() * 4);
    for v in img.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).with_context(|| format!("writing image {}", path.display()))
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    let file = fs::File::open(path).with_context(|| format!("opening image {}", path.display()))?;
    let mut reader = BufReader::new(file);
    let mut header = String::new();
    reader.read_line(&mut header).with_context(|| format!("reading header of {}", path.display()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let [IMAGE_MAGIC, "f32", h, w, c] = fields.as_slice() else {
        bail!("{}: bad image header {:?}", path.display(), header.trim_end());
    };
    let shape = [h.parse::<usize>()?, w.parse::<usize>()?, c.parse::<usize>()?];
    let n = shape.iter().product::<usize>();
    let mut bytes = Vec::with_capacity(n * 4);
    reader.read_to_end(&mut bytes)?;
    ensure!(bytes.len() == n * 4, "{}: expected {} payload bytes, found {}", path.display(), n * 4, bytes.len());
    let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    Ok(Tensor::new(&shape, data)?)
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    path: String,
    id: usize,
    camera: usize,
    view: Option<usize>,
    split: String,
}

/// Writes `images/NNNNN.bin` files and `manifest.csv` under `dir`.
pub fn write_dataset(dir: &Path, data: &LoadedData) -> Result<PathBuf> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).with_context(|| format!("creating {}", img_dir.display()))?;
    let manifest = dir.join("manifest.csv");
    let mut out = csv::Writer::from_path(&manifest).with_context(|| format!("creating {}", manifest.display()))?;
    for (i, (img, meta)) in data.images.iter().zip(&data.metas).enumerate() {
        let rel = format!("images/{i:05}.bin");
        write_image(&dir.join(&rel), img)?;
        out.serialize(ManifestRow { path: rel, id: meta.identity, camera: meta.camera, view: meta.view, split: meta.split.as_str().into() })?;
    }
    out.flush().with_context(|| format!("writing {}", manifest.display()))?;
    Ok(manifest)
}

/// Loads a manifest; image paths resolve against the manifest's directory.
pub fn read_manifest(manifest: &Path) -> Result<LoadedData> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut reader = csv::Reader::from_path(manifest).with_context(|| format!("opening manifest {}", manifest.display()))?;
    let mut data = LoadedData { images: Vec::new(), metas: Vec::new() };
    for (line, row) in reader.deserialize::<ManifestRow>().enumerate() {
        let row = row.with_context(|| format!("{}: row {}", manifest.display(), line + 2))?;
        let split = Split::parse(&row.split).with_context(|| format!("{}: row {}", manifest.display(), line + 2))?;
        let img = read_image(&base.join(&row.path))?;
        if let Some(dims) = data.dims() {
            ensure!(img.shape() == [dims.0, dims.1, dims.2], "{}: image {} is {:?}, expected {:?}", manifest.display(), row.path, img.shape(), dims);
        }
        data.images.push(img);
        data.metas.push(SampleMeta { identity: row.id, camera: row.camera, view: row.view, split });
    }
    ensure!(!data.images.is_empty(), "{}: manifest lists no images", manifest.display());
    data.check_splits().with_context(|| format!("checking {}", manifest.display()))?;
    Ok(data)
}

/// Streams every file under `dir` into a SHA-256 per relative path.
pub fn hash_tree(dir: &Path) -> Result<Vec<(String, String)>> {
    use sha2::{Digest, Sha256};
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).with_context(|| format!("listing {}", d.display()))? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let mut hasher = Sha256::new();
                hasher.write_all(&fs::read(&path)?)?;
                let rel = path.strip_prefix(dir).unwrap_or(&path).to_string_lossy().into_owned();
                out.push((rel, hex::encode(hasher.finalize())));
            }
        }
    }
    out.sort();
    Ok(out)
}
