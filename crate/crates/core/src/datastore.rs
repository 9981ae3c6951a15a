//! On-disk dataset: PNG images, class-index masks, keypoint sidecars and a
//! JSON-lines manifest.
//!
//! ```text
//! root/
//!   manifest.jsonl
//!   profiles/<name>.json
//!   images/<id>_std.png
//!   images/<id>_uv_<exposure>.png
//!   labels/<id>_mask.png
//!   labels/<id>_kp.json
//! ```
//!
//! Every file is written to a temporary sibling, synced and renamed into
//! place. The manifest is rewritten the same way after all of a sample's files
//! exist, so a record never points at a missing or truncated file.

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use image::{ExtendedColorType, ImageEncoder, ImageFormat};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::model::{BinaryMask, CalibrationProfile, ImageRgb, Keypoint, LabelSet, Mask, ModelError, PairedSample, TimingRecord};

pub const MANIFEST: &str = "manifest.jsonl";

#[derive(Debug, Error)]
pub enum DatastoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("manifest line {line}: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("sample {0:?} already exists")]
    DuplicateId(String),
    #[error("no sample {0:?} in manifest")]
    UnknownSample(String),
    #[error("records with missing files: {}", format_missing(.0))]
    MissingFiles(Vec<MissingFiles>),
    #[error("invalid name {0:?}")]
    InvalidName(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MissingFiles {
    pub id: String,
    pub paths: Vec<String>,
}

fn format_missing(m: &[MissingFiles]) -> String {
    m.iter().map(|r| format!("{} [{}]", r.id, r.paths.join(", "))).collect::<Vec<_>>().join("; ")
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatastoreError + '_ {
    move |source| DatastoreError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UvEntry {
    pub exposure: f64,
    pub path: String,
}

/// One manifest line. Paths are relative to the dataset root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub std: String,
    pub uv: Vec<UvEntry>,
    pub profile: String,
    pub t_capture: f64,
    pub t_label: f64,
    /// Seconds since the Unix epoch.
    pub created_at: f64,
    /// Present only for labeled samples.
    #[serde(default)]
    pub mask: Option<String>,
    #[serde(default)]
    pub keypoints: Option<String>,
    #[serde(default)]
    pub t_std_at: f64,
    #[serde(default)]
    pub t_uv_at: f64,
}

impl ManifestRecord {
    pub fn files(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.std.as_str())
            .chain(self.uv.iter().map(|u| u.path.as_str()))
            .chain(self.mask.as_deref())
            .chain(self.keypoints.as_deref())
    }

    pub fn is_labeled(&self) -> bool {
        self.mask.is_some()
    }
}

fn valid_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.')) && !s.starts_with('.')
}

/// Called at every commit point with a name like `images/a_std.png:synced`.
/// Returning an error aborts the write there, as if the process had died.
pub type FaultHook = Box<dyn FnMut(&str) -> io::Result<()> + Send>;

pub fn encode_png_rgb(img: &ImageRgb) -> Result<Vec<u8>, image::ImageError> {
    let flat: Vec<u8> = img.pixels().iter().flatten().copied().collect();
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out).write_image(&flat, img.width() as u32, img.height() as u32, ExtendedColorType::Rgb8)?;
    Ok(out)
}

pub fn decode_png_rgb(bytes: &[u8]) -> Result<ImageRgb, DatastoreError> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|source| DatastoreError::Image { path: PathBuf::new(), source })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let pixels = img.into_raw().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    Ok(ImageRgb::from_pixels(w as usize, h as usize, pixels)?)
}

pub fn encode_png_mask(mask: &Mask) -> Result<Vec<u8>, image::ImageError> {
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out).write_image(
        mask.classes(),
        mask.width() as u32,
        mask.height() as u32,
        ExtendedColorType::L8,
    )?;
    Ok(out)
}

pub fn decode_png_mask(bytes: &[u8]) -> Result<Mask, DatastoreError> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|source| DatastoreError::Image { path: PathBuf::new(), source })?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Mask::new(w as usize, h as usize, img.into_raw())?)
}

fn read_file(path: &Path) -> Result<Vec<u8>, DatastoreError> {
    fs::read(path).map_err(io_err(path))
}

fn with_path(e: DatastoreError, path: &Path) -> DatastoreError {
    match e {
        DatastoreError::Image { source, .. } => DatastoreError::Image { path: path.to_path_buf(), source },
        other => other,
    }
}

fn now_seconds() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// Single writer for one dataset root.
pub struct DatasetWriter {
    root: PathBuf,
    ids: HashSet<String>,
    hook: Option<FaultHook>,
}

impl std::fmt::Debug for DatasetWriter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DatasetWriter").field("root", &self.root).field("samples", &self.ids.len()).finish()
    }
}

impl DatasetWriter {
    /// Creates the layout if needed and loads existing ids.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, DatastoreError> {
        let root = root.into();
        for dir in ["images", "labels", "profiles"] {
            let p = root.join(dir);
            fs::create_dir_all(&p).map_err(io_err(&p))?;
        }
        let ids = read_manifest(&root)?.into_iter().map(|r| r.id).collect();
        Ok(Self { root, ids, hook: None })
    }

    pub fn with_hook(mut self, hook: FaultHook) -> Self {
        self.hook = Some(hook);
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn point(&mut self, name: &str) -> io::Result<()> {
        match self.hook.as_mut() {
            Some(h) => h(name),
            None => Ok(()),
        }
    }

    fn write_atomic(&mut self, rel: &str, bytes: &[u8]) -> Result<(), DatastoreError> {
        let path = self.root.join(rel);
        let tmp = path.with_file_name(format!(".{}.tmp", path.file_name().and_then(|n| n.to_str()).unwrap_or("file")));
        let fail = |source| DatastoreError::Io { path: path.clone(), source };
        self.point(&format!("{rel}:open")).map_err(fail)?;
        let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
        let half = bytes.len() / 2;
        f.write_all(&bytes[..half]).map_err(io_err(&tmp))?;
        self.point(&format!("{rel}:partial")).map_err(fail)?;
        f.write_all(&bytes[half..]).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
        drop(f);
        self.point(&format!("{rel}:synced")).map_err(fail)?;
        fs::rename(&tmp, &path).map_err(io_err(&path))?;
        self.point(&format!("{rel}:renamed")).map_err(fail)?;
        Ok(())
    }

    pub fn save_profile(&mut self, profile: &CalibrationProfile) -> Result<(), DatastoreError> {
        profile.validate()?;
        let rel = format!("profiles/{}.json", profile.name);
        let bytes = serde_json::to_vec_pretty(profile).expect("profiles serialize");
        self.write_atomic(&rel, &bytes)
    }

    /// Stores the sample's files, then appends its manifest line.
    pub fn write_sample(&mut self, sample: &PairedSample, profile_name: &str) -> Result<ManifestRecord, DatastoreError> {
        sample.validate()?;
        let id = &sample.sample_id;
        if self.ids.contains(id) {
            return Err(DatastoreError::DuplicateId(id.clone()));
        }
        let png = |img: &ImageRgb, rel: &str| {
            encode_png_rgb(img).map_err(|source| DatastoreError::Image { path: rel.into(), source })
        };
        let std_rel = format!("images/{id}_std.png");
        self.write_atomic(&std_rel, &png(&sample.std_image, &std_rel)?)?;
        let mut uv = Vec::new();
        for (exposure, img) in &sample.uv_images {
            let rel = format!("images/{id}_uv_{exposure}.png");
            self.write_atomic(&rel, &png(img, &rel)?)?;
            uv.push(UvEntry { exposure: *exposure, path: rel });
        }
        let (mut mask, mut keypoints) = (None, None);
        if let Some(labels) = &sample.labels {
            let rel = format!("labels/{id}_mask.png");
            let bytes = encode_png_mask(&labels.mask).map_err(|source| DatastoreError::Image { path: rel.clone().into(), source })?;
            self.write_atomic(&rel, &bytes)?;
            mask = Some(rel);
            let rel = format!("labels/{id}_kp.json");
            self.write_atomic(&rel, &serde_json::to_vec(&labels.keypoints).expect("keypoints serialize"))?;
            keypoints = Some(rel);
        }
        let t = &sample.timing;
        let record = ManifestRecord {
            id: id.clone(),
            std: std_rel,
            uv,
            profile: profile_name.to_string(),
            t_capture: t.capture_seconds,
            t_label: t.label_seconds,
            created_at: now_seconds(),
            mask,
            keypoints,
            t_std_at: t.std_captured_at,
            t_uv_at: t.uv_captured_at,
        };
        let manifest = self.root.join(MANIFEST);
        let mut bytes = match fs::read(&manifest) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(io_err(&manifest)(e)),
        };
        if !bytes.is_empty() && !bytes.ends_with(b"\n") {
            bytes.push(b'\n');
        }
        bytes.extend(serde_json::to_vec(&record).expect("records serialize"));
        bytes.push(b'\n');
        self.write_atomic(MANIFEST, &bytes)?;
        self.ids.insert(id.clone());
        Ok(record)
    }
}

/// Opens `root` and writes one sample.
pub fn write_sample(root: &Path, sample: &PairedSample, profile_name: &str) -> Result<ManifestRecord, DatastoreError> {
    DatasetWriter::open(root)?.write_sample(sample, profile_name)
}

fn read_manifest(root: &Path) -> Result<Vec<ManifestRecord>, DatastoreError> {
    let path = root.join(MANIFEST);
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(&path)(e)),
    };
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord =
            serde_json::from_str(line).map_err(|e| DatastoreError::MalformedLine { line: i + 1, message: e.to_string() })?;
        if !seen.insert(rec.id.clone()) {
            return Err(DatastoreError::MalformedLine { line: i + 1, message: format!("duplicate id {:?}", rec.id) });
        }
        out.push(rec);
    }
    Ok(out)
}

/// Validated manifest. Samples are loaded on demand.
#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    records: Vec<ManifestRecord>,
}

/// Reads and validates the manifest under `root`. A missing manifest is an
/// empty dataset.
pub fn read_dataset(root: &Path) -> Result<Dataset, DatastoreError> {
    let records = read_manifest(root)?;
    let missing: Vec<MissingFiles> = records
        .iter()
        .filter_map(|r| {
            let paths: Vec<String> = r.files().filter(|p| !root.join(p).is_file()).map(str::to_string).collect();
            (!paths.is_empty()).then(|| MissingFiles { id: r.id.clone(), paths })
        })
        .collect();
    if !missing.is_empty() {
        return Err(DatastoreError::MissingFiles(missing));
    }
    Ok(Dataset { root: root.to_path_buf(), records })
}

impl Dataset {
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn records(&self) -> &[ManifestRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn record(&self, id: &str) -> Option<&ManifestRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    fn load_rgb(&self, rel: &str) -> Result<ImageRgb, DatastoreError> {
        let path = self.root.join(rel);
        decode_png_rgb(&read_file(&path)?).map_err(|e| with_path(e, &path))
    }

    pub fn load_labels(&self, rec: &ManifestRecord) -> Result<Option<LabelSet>, DatastoreError> {
        let (Some(mask_rel), Some(kp_rel)) = (&rec.mask, &rec.keypoints) else { return Ok(None) };
        let path = self.root.join(mask_rel);
        let mask = decode_png_mask(&read_file(&path)?).map_err(|e| with_path(e, &path))?;
        let path = self.root.join(kp_rel);
        let keypoints: Vec<Keypoint> =
            serde_json::from_slice(&read_file(&path)?).map_err(|source| DatastoreError::Json { path, source })?;
        Ok(Some(LabelSet { mask, keypoints }))
    }

    pub fn load_sample(&self, id: &str) -> Result<PairedSample, DatastoreError> {
        let rec = self.record(id).ok_or_else(|| DatastoreError::UnknownSample(id.to_string()))?;
        let std_image = self.load_rgb(&rec.std)?;
        let uv_images = rec.uv.iter().map(|u| Ok((u.exposure, self.load_rgb(&u.path)?))).collect::<Result<_, DatastoreError>>()?;
        let labels = self.load_labels(rec)?;
        let timing = TimingRecord {
            capture_seconds: rec.t_capture,
            label_seconds: rec.t_label,
            std_captured_at: rec.t_std_at,
            uv_captured_at: rec.t_uv_at,
        };
        Ok(PairedSample::new(rec.id.clone(), std_image, uv_images, labels, timing)?)
    }

    pub fn load_profile(&self, name: &str) -> Result<CalibrationProfile, DatastoreError> {
        load_profile(&self.root, name)
    }
}

pub fn load_profile(root: &Path, name: &str) -> Result<CalibrationProfile, DatastoreError> {
    if !valid_name(name) {
        return Err(DatastoreError::InvalidName(name.to_string()));
    }
    let path = root.join("profiles").join(format!("{name}.json"));
    let profile: CalibrationProfile =
        serde_json::from_slice(&read_file(&path)?).map_err(|source| DatastoreError::Json { path, source })?;
    profile.validate()?;
    Ok(profile)
}

/// COCO run-length encoding of a binary mask: column-major, alternating runs
/// starting with background.
pub fn rle_encode(mask: &BinaryMask) -> Vec<u32> {
    let (w, h) = mask.dims();
    let mut counts = Vec::new();
    let (mut current, mut run) = (false, 0u32);
    for x in 0..w {
        for y in 0..h {
            let b = mask.get(x, y);
            if b != current {
                counts.push(run);
                current = b;
                run = 0;
            }
            run += 1;
        }
    }
    counts.push(run);
    counts
}

pub fn rle_decode(counts: &[u32], width: usize, height: usize) -> Result<BinaryMask, ModelError> {
    let total: u64 = counts.iter().map(|&c| c as u64).sum();
    if total != (width * height) as u64 {
        return Err(ModelError::BufferLength { width, height, actual: total as usize });
    }
    let mut column_major = Vec::with_capacity(width * height);
    for (i, &c) in counts.iter().enumerate() {
        column_major.extend(std::iter::repeat_n(i % 2 == 1, c as usize));
    }
    BinaryMask::from_fn(width, height, |x, y| column_major[x * height + y])
}

fn bbox_of(mask: &BinaryMask) -> [usize; 4] {
    let (w, h) = mask.dims();
    let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    [x0, y0, x1 - x0, y1 - y0]
}

/// Writes a COCO-style annotation file for every labeled sample in `root`.
/// Returns the number of images exported.
pub fn export_coco_like(root: &Path, out: &Path) -> Result<usize, DatastoreError> {
    let ds = read_dataset(root)?;
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    let mut categories = std::collections::BTreeMap::<u8, Value>::new();
    for rec in ds.records() {
        let Some(labels) = ds.load_labels(rec)? else {
            log::warn!("skipping unlabeled sample {}", rec.id);
            continue;
        };
        let profile = ds.load_profile(&rec.profile).ok();
        let image_id = images.len() + 1;
        let (w, h) = labels.mask.dims();
        images.push(json!({"id": image_id, "sample_id": rec.id, "file_name": rec.std, "width": w, "height": h}));
        let mut classes: Vec<u8> = labels.mask.classes().iter().copied().filter(|&c| c != 0).collect();
        classes.extend(labels.keypoints.iter().map(|k| k.class_id));
        classes.sort_unstable();
        classes.dedup();
        for c in &classes {
            categories.entry(*c).or_insert_with(|| {
                let spec = profile.as_ref().and_then(|p| p.class(*c));
                json!({
                    "id": c,
                    "name": spec.map_or_else(|| format!("class_{c}"), |s| s.name.clone()),
                    "keypoint_mode": spec.is_some_and(|s| s.keypoint_mode),
                })
            });
        }
        for &c in classes.iter() {
            let bin = labels.mask.binary(c);
            let area = bin.count();
            if area == 0 {
                continue;
            }
            annotations.push(json!({
                "id": annotations.len() + 1,
                "image_id": image_id,
                "category_id": c,
                "iscrowd": 1,
                "area": area,
                "bbox": bbox_of(&bin),
                "segmentation": {"size": [h, w], "counts": rle_encode(&bin)},
            }));
        }
        for kp in &labels.keypoints {
            annotations.push(json!({
                "id": annotations.len() + 1,
                "image_id": image_id,
                "category_id": kp.class_id,
                "area": kp.area,
                "keypoints": [kp.u, kp.v, 2],
                "num_keypoints": 1,
            }));
        }
    }
    let doc = json!({
        "images": images,
        "annotations": annotations,
        "categories": categories.into_values().collect::<Vec<_>>(),
    });
    let bytes = serde_json::to_vec_pretty(&doc).expect("json values serialize");
    fs::write(out, bytes).map_err(io_err(out))?;
    Ok(doc["images"].as_array().map_or(0, Vec::len))
}
