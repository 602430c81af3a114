//! MNIST ingest (IDX container), clean/corrupted task pools and bootstrap
//! resampling.

use std::fs;
use std::io::{self, Read};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

/// Stream name used for bootstrap draws.
pub const BOOTSTRAP_STREAM: &str = "bootstrap";

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    /// Row-major pixels scaled to `[0, 1]` (raw byte / 255).
    pub pixels: Vec<f64>,
    pub label: u8,
}

impl ImageSample {
    pub fn new(pixels: Vec<f64>, label: u8) -> Result<Self> {
        if label > 9 {
            return Err(Error::Consistency(format!("label {label} outside 0..=9")));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Consistency(format!("pixel value {p} outside [0, 1]")));
        }
        Ok(Self { pixels, label })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
}

impl SplitTag {
    fn file_stem(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Test => "t10k",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    samples: Vec<ImageSample>,
    split: SplitTag,
}

impl Dataset {
    pub fn new(samples: Vec<ImageSample>, split: SplitTag) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyDataset(format!("{split:?} split has no samples")));
        }
        Ok(Self { samples, split })
    }

    pub fn samples(&self) -> &[ImageSample] {
        &self.samples
    }

    pub fn split(&self) -> SplitTag {
        self.split
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.samples[0].pixels.len()
    }

    /// Number of samples per digit label.
    pub fn label_counts(&self) -> [usize; 10] {
        let mut counts = [0; 10];
        for s in &self.samples {
            counts[s.label as usize] += 1;
        }
        counts
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| truncated(path, "header"))
}

fn truncated(path: &Path, what: &str) -> Error {
    Error::io(
        path,
        io::Error::new(io::ErrorKind::UnexpectedEof, format!("truncated {what}")),
    )
}

/// Parse an IDX3 image file. Returns `(count, rows * cols, raw bytes)`.
fn parse_images(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = read_maybe_gz(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Format(format!(
            "{}: image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}",
            path.display()
        )));
    }
    let count = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let dim = rows * cols;
    let body = &bytes[16..];
    if body.len() < count * dim {
        return Err(truncated(path, "image payload"));
    }
    Ok((count, dim, body[..count * dim].to_vec()))
}

fn parse_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read_maybe_gz(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != LABEL_MAGIC {
        return Err(Error::Format(format!(
            "{}: label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}",
            path.display()
        )));
    }
    let count = be_u32(&bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(truncated(path, "label payload"));
    }
    Ok(body[..count].to_vec())
}

/// Load an IDX image/label file pair. Gzip-compressed files are detected by
/// their magic bytes and decoded transparently.
pub fn load_idx(images_path: &Path, labels_path: &Path, split: SplitTag) -> Result<Dataset> {
    let (count, dim, pixels) = parse_images(images_path)?;
    let labels = parse_labels(labels_path)?;
    if labels.len() != count {
        return Err(Error::Consistency(format!(
            "{} images but {} labels",
            count,
            labels.len()
        )));
    }
    let mut samples = Vec::with_capacity(count);
    for (chunk, &label) in pixels.chunks_exact(dim.max(1)).zip(&labels) {
        let px = chunk.iter().map(|&b| f64::from(b) / 255.0).collect();
        samples.push(ImageSample::new(px, label)?);
    }
    Dataset::new(samples, split)
}

/// Locate one canonical MNIST file in `dir`, accepting both the
/// `train-images-idx3-ubyte` and `train-images.idx3-ubyte` spellings, with or
/// without a `.gz` suffix.
pub fn find_mnist_file(dir: &Path, split: SplitTag, kind: &str) -> Result<PathBuf> {
    let (what, idx) = match kind {
        "images" => ("images", "idx3"),
        _ => ("labels", "idx1"),
    };
    let stem = split.file_stem();
    let candidates = [
        format!("{stem}-{what}-{idx}-ubyte"),
        format!("{stem}-{what}.{idx}-ubyte"),
    ];
    for name in &candidates {
        for suffix in ["", ".gz"] {
            let p = dir.join(format!("{name}{suffix}"));
            if p.is_file() {
                return Ok(p);
            }
        }
    }
    Err(Error::io(
        dir.join(&candidates[0]),
        io::Error::new(io::ErrorKind::NotFound, "MNIST file not found"),
    ))
}

pub fn load_mnist(dir: &Path, split: SplitTag) -> Result<Dataset> {
    let images = find_mnist_file(dir, split, "images")?;
    let labels = find_mnist_file(dir, split, "labels")?;
    load_idx(&images, &labels, split)
}

/// Clean/corrupted digit pools for one patching task.
#[derive(Debug, Clone)]
pub struct TaskPairSet {
    pub task_name: String,
    pub clean_digit: u8,
    pub corrupted_digit: u8,
    pub clean_pool: Vec<ImageSample>,
    pub corrupted_pool: Vec<ImageSample>,
}

pub fn build_pair_set(
    ds: &Dataset,
    clean_digit: u8,
    corrupted_digit: u8,
    task_name: &str,
) -> Result<TaskPairSet> {
    if clean_digit == corrupted_digit {
        return Err(Error::Config(format!(
            "clean and corrupted digit are both {clean_digit}"
        )));
    }
    let pool = |digit: u8| -> Result<Vec<ImageSample>> {
        let p: Vec<_> = ds
            .samples()
            .iter()
            .filter(|s| s.label == digit)
            .cloned()
            .collect();
        if p.is_empty() {
            return Err(Error::EmptyPool {
                task: task_name.to_string(),
                digit,
            });
        }
        Ok(p)
    };
    Ok(TaskPairSet {
        task_name: task_name.to_string(),
        clean_digit,
        corrupted_digit,
        clean_pool: pool(clean_digit)?,
        corrupted_pool: pool(corrupted_digit)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootstrapPlan {
    pub n_resamples: usize,
    pub sample_size: usize,
    pub seed: u64,
}

impl Default for BootstrapPlan {
    fn default() -> Self {
        Self {
            n_resamples: 50,
            sample_size: 500,
            seed: 0,
        }
    }
}

impl BootstrapPlan {
    pub fn new(n_resamples: usize, sample_size: usize, seed: u64) -> Result<Self> {
        let plan = Self {
            n_resamples,
            sample_size,
            seed,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_resamples < 1 {
            return Err(Error::Config("n_resamples must be at least 1".into()));
        }
        if self.sample_size < 2 {
            return Err(Error::Config("sample_size must be at least 2".into()));
        }
        Ok(())
    }

    fn stream(&self, resample_index: usize) -> SplitMix64 {
        assert!(
            resample_index < self.n_resamples,
            "resample index {resample_index} out of range ({} resamples)",
            self.n_resamples
        );
        SplitMix64::stream(self.seed, BOOTSTRAP_STREAM, resample_index as u64)
    }

    /// Draw one index list per pool, in pool order, from the single stream of
    /// `resample_index`.
    pub fn draw(&self, pool_sizes: &[usize], resample_index: usize) -> Vec<Vec<usize>> {
        let mut rng = self.stream(resample_index);
        pool_sizes
            .iter()
            .map(|&n| {
                assert!(n >= 1, "bootstrap pool must be nonempty");
                (0..self.sample_size)
                    .map(|_| rng.below(n as u64) as usize)
                    .collect()
            })
            .collect()
    }
}

/// `plan.sample_size` indices drawn uniformly with replacement from
/// `[0, pool_size)`.
pub fn bootstrap_resample(pool_size: usize, plan: &BootstrapPlan, resample_index: usize) -> Vec<usize> {
    plan.draw(&[pool_size], resample_index).pop().unwrap_or_default()
}

impl TaskPairSet {
    /// `(clean, corrupted)` pairs of resample `resample_index`: clean indices
    /// then corrupted indices are drawn from the same bootstrap stream and
    /// zipped position by position.
    pub fn resample_pairs(&self, plan: &BootstrapPlan, resample_index: usize) -> Vec<(&[f64], &[f64])> {
        let idx = plan.draw(&[self.clean_pool.len(), self.corrupted_pool.len()], resample_index);
        idx[0]
            .iter()
            .zip(&idx[1])
            .map(|(&c, &k)| {
                (
                    self.clean_pool[c].pixels.as_slice(),
                    self.corrupted_pool[k].pixels.as_slice(),
                )
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_idx(dir: &Path, images: &[&[u8]], labels: &[u8], dim: (u32, u32)) -> (PathBuf, PathBuf) {
        let ip = dir.join("img");
        let lp = dir.join("lbl");
        let mut f = fs::File::create(&ip).unwrap();
        f.write_all(&IMAGE_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&(images.len() as u32).to_be_bytes()).unwrap();
        f.write_all(&dim.0.to_be_bytes()).unwrap();
        f.write_all(&dim.1.to_be_bytes()).unwrap();
        for im in images {
            f.write_all(im).unwrap();
        }
        let mut f = fs::File::create(&lp).unwrap();
        f.write_all(&LABEL_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&(labels.len() as u32).to_be_bytes()).unwrap();
        f.write_all(labels).unwrap();
        (ip, lp)
    }

    #[test]
    fn parses_tiny_idx_pair() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx(dir.path(), &[&[0, 255, 51, 102], &[255, 0, 0, 0]], &[3, 8], (2, 2));
        let ds = load_idx(&ip, &lp, SplitTag::Test).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.samples()[0].pixels, vec![0.0, 1.0, 0.2, 0.4]);
        assert_eq!(ds.samples()[1].label, 8);
        assert_eq!(ds.split(), SplitTag::Test);
    }

    #[test]
    fn gzip_is_transparent() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx(dir.path(), &[&[1, 2, 3, 4]], &[7], (2, 2));
        let gz = dir.path().join("img.gz");
        let mut enc = flate2::write::GzEncoder::new(fs::File::create(&gz).unwrap(), flate2::Compression::default());
        enc.write_all(&fs::read(&ip).unwrap()).unwrap();
        enc.finish().unwrap();
        let a = load_idx(&ip, &lp, SplitTag::Train).unwrap();
        let b = load_idx(&gz, &lp, SplitTag::Train).unwrap();
        assert_eq!(a.samples(), b.samples());
    }

    #[test]
    fn empty_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx(dir.path(), &[], &[], (28, 28));
        assert_eq!(fs::metadata(&ip).unwrap().len(), 16);
        assert!(matches!(load_idx(&ip, &lp, SplitTag::Train), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn wrong_magic_count_mismatch_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let (_, lp) = write_idx(dir.path(), &[&[1, 2, 3, 4]], &[7], (2, 2));
        // labels file passed as images: magic mismatch
        assert!(matches!(load_idx(&lp, &lp, SplitTag::Train), Err(Error::Format(_))));

        let (ip2, lp2) = write_idx(dir.path(), &[&[1, 2, 3, 4], &[5, 6, 7, 8]], &[7], (2, 2));
        assert!(matches!(load_idx(&ip2, &lp2, SplitTag::Train), Err(Error::Consistency(_))));

        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx(dir.path(), &[&[1, 2, 3, 4]], &[7], (2, 2));
        let bytes = fs::read(&ip).unwrap();
        fs::write(&ip, &bytes[..bytes.len() - 1]).unwrap();
        match load_idx(&ip, &lp, SplitTag::Train) {
            Err(Error::Io { source, .. }) => assert_eq!(source.kind(), io::ErrorKind::UnexpectedEof),
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    fn toy_dataset() -> Dataset {
        let samples = [3u8, 8, 8, 1, 3, 8]
            .iter()
            .enumerate()
            .map(|(i, &l)| ImageSample::new(vec![i as f64 / 10.0], l).unwrap())
            .collect();
        Dataset::new(samples, SplitTag::Test).unwrap()
    }

    #[test]
    fn pair_set_keeps_dataset_order() {
        let ps = build_pair_set(&toy_dataset(), 8, 3, "circle").unwrap();
        let clean: Vec<f64> = ps.clean_pool.iter().map(|s| s.pixels[0]).collect();
        let corr: Vec<f64> = ps.corrupted_pool.iter().map(|s| s.pixels[0]).collect();
        assert_eq!(clean, vec![0.1, 0.2, 0.5]);
        assert_eq!(corr, vec![0.0, 0.4]);
    }

    #[test]
    fn pair_set_errors() {
        let ds = toy_dataset();
        assert!(matches!(build_pair_set(&ds, 7, 7, "x"), Err(Error::Config(_))));
        assert!(matches!(
            build_pair_set(&ds, 8, 4, "x"),
            Err(Error::EmptyPool { digit: 4, .. })
        ));
    }

    #[test]
    fn bootstrap_contracts() {
        let plan = BootstrapPlan { seed: 42, ..Default::default() };
        assert!(bootstrap_resample(1, &plan, 0).iter().all(|&i| i == 0));
        let a = bootstrap_resample(1000, &plan, 0);
        assert_eq!(a.len(), 500);
        assert!(a.iter().all(|&i| i < 1000));
        assert_eq!(a, bootstrap_resample(1000, &plan, 0));
        assert_ne!(a, bootstrap_resample(1000, &plan, 1));
    }

    #[test]
    fn plan_validation() {
        assert!(BootstrapPlan::new(0, 500, 1).is_err());
        assert!(BootstrapPlan::new(50, 1, 1).is_err());
        assert!(BootstrapPlan::new(1, 2, 1).is_ok());
    }

    #[test]
    fn with_replacement_frequencies_are_uniform() {
        // 200 resamples x 500 draws into a pool of 50: expected count 2000 per
        // index with binomial sd sqrt(n p (1-p)).
        let plan = BootstrapPlan::new(200, 500, 9).unwrap();
        let pool = 50;
        let mut counts = vec![0usize; pool];
        for r in 0..plan.n_resamples {
            for i in bootstrap_resample(pool, &plan, r) {
                counts[i] += 1;
            }
        }
        let n = (plan.n_resamples * plan.sample_size) as f64;
        let p = 1.0 / pool as f64;
        let expected = n * p;
        let sd = (n * p * (1.0 - p)).sqrt();
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // chi-square with 49 dof: mean 49, sd ~9.9
        assert!(chi2 < 49.0 + 3.0 * (2.0f64 * 49.0).sqrt(), "chi2 = {chi2}");
        let worst = counts.iter().map(|&c| (c as f64 - expected).abs() / sd).fold(0.0, f64::max);
        assert!(worst < 4.0, "worst deviation {worst} sd");
    }
}
