//! Domains, samples and batches.
//!
//! Images are stored channel-planar (`C×H×W`) with values in `[-1, 1]`.
//! PNG pixels map linearly: `v = 2·p/255 − 1`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Seeded random stream shared by every sampling path.
pub type Rng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform index in `0..bound` from exactly one `u64` draw (multiply-shift).
///
/// The bias is below `bound / 2^64`, which is irrelevant for dataset sizes, and the
/// fixed draw count keeps every consumer of the stream replayable.
pub fn uniform_index(rng: &mut Rng, bound: usize) -> usize {
    debug_assert!(bound > 0);
    ((rng.next_u64() as u128 * bound as u128) >> 64) as usize
}

/// In-place Fisher–Yates shuffle; consumes `len − 1` draws.
pub fn shuffle<T>(items: &mut [T], rng: &mut Rng) {
    for i in (1..items.len()).rev() {
        let j = uniform_index(rng, i + 1);
        items.swap(i, j);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape("image dimensions must be positive".into()));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Shape(format!("unsupported channel count {channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::length("image data", data.len(), height * width * channels));
        }
        if let Some(v) = data.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "pixel value {v} outside [-1, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Clamps `data` into `[-1, 1]` instead of rejecting it. NaN maps to 0.
    pub fn from_clamped(height: usize, width: usize, channels: usize, mut data: Vec<f64>) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) };
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let img = self.to_dynamic();
        let mut out = std::io::Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png)
            .map_err(|e| Error::InvalidArgument(format!("png encode: {e}")))?;
        Ok(out.into_inner())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.to_png_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    fn to_dynamic(&self) -> image::DynamicImage {
        let (h, w) = (self.height as u32, self.width as u32);
        let plane = self.height * self.width;
        let quantize = |v: f64| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8;
        if self.channels == 1 {
            let buf: Vec<u8> = self.data.iter().map(|&v| quantize(v)).collect();
            image::DynamicImage::ImageLuma8(image::GrayImage::from_raw(w, h, buf).expect("sized buffer"))
        } else {
            let mut buf = Vec::with_capacity(plane * 3);
            for i in 0..plane {
                for c in 0..3 {
                    buf.push(quantize(self.data[c * plane + i]));
                }
            }
            image::DynamicImage::ImageRgb8(image::RgbImage::from_raw(w, h, buf).expect("sized buffer"))
        }
    }
}

/// Maps an 8-bit pixel to `[-1, 1]`.
pub fn pixel_to_unit(p: u8) -> f64 {
    2.0 * p as f64 / 255.0 - 1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Alignment {
    Aligned,
    Unaligned,
}

impl Alignment {
    pub fn is_aligned(self) -> bool {
        matches!(self, Alignment::Aligned)
    }

    pub fn as_flag(self) -> u8 {
        match self {
            Alignment::Aligned => 1,
            Alignment::Unaligned => 0,
        }
    }
}

/// An ordered set of same-shaped images. Labels exist for evaluation only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainDataset {
    name: String,
    samples: Vec<ImageTensor>,
    names: Vec<String>,
    labels: Option<Vec<Alignment>>,
}

impl DomainDataset {
    pub fn new(
        name: impl Into<String>,
        samples: Vec<ImageTensor>,
        names: Vec<String>,
        labels: Option<Vec<Alignment>>,
    ) -> Result<Self> {
        if let Some(first) = samples.first() {
            if let Some(bad) = samples.iter().find(|s| s.shape() != first.shape()) {
                return Err(Error::Shape(format!(
                    "sample shape {:?} differs from {:?}",
                    bad.shape(),
                    first.shape()
                )));
            }
        }
        if names.len() != samples.len() {
            return Err(Error::length("sample names", names.len(), samples.len()));
        }
        if let Some(labels) = &labels {
            if labels.len() != samples.len() {
                return Err(Error::LabelCountMismatch {
                    labels: labels.len(),
                    samples: samples.len(),
                });
            }
        }
        Ok(Self {
            name: name.into(),
            samples,
            names,
            labels,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[ImageTensor] {
        &self.samples
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn labels(&self) -> Option<&[Alignment]> {
        self.labels.as_deref()
    }

    /// `(H, W, C)` of the samples, `None` for an empty dataset.
    pub fn shape(&self) -> Option<(usize, usize, usize)> {
        self.samples.first().map(ImageTensor::shape)
    }

    pub fn without_labels(&self) -> DomainDataset {
        DomainDataset {
            labels: None,
            ..self.clone()
        }
    }

    pub fn count_label(&self, label: Alignment) -> usize {
        self.labels
            .as_ref()
            .map_or(0, |l| l.iter().filter(|&&a| a == label).count())
    }

    /// Writes every sample as `<name>` (a `.png` suffix is added when missing) plus
    /// `labels.csv` when labels exist. The result loads back with [`load_dataset`].
    pub fn write_png_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut label_lines = String::new();
        for (i, (sample, name)) in self.samples.iter().zip(&self.names).enumerate() {
            let file = if name.ends_with(".png") {
                name.clone()
            } else {
                format!("{name}.png")
            };
            sample.save_png(&dir.join(&file))?;
            if let Some(labels) = &self.labels {
                label_lines.push_str(&format!("{file},{}\n", labels[i].as_flag()));
            }
        }
        if self.labels.is_some() {
            let path = dir.join("labels.csv");
            fs::write(&path, label_lines).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Loads every `*.png` in `directory` (lexicographic filename order), resized to
/// `resolution × resolution`.
pub fn load_dataset(directory: &Path, resolution: usize, labels_file: Option<&Path>) -> Result<DomainDataset> {
    if resolution < 4 {
        return Err(Error::InvalidArgument(format!("resolution {resolution} < 4")));
    }
    let files = png_files(directory)?;
    if files.is_empty() {
        return Err(Error::NoSamples(directory.to_path_buf()));
    }

    let mut samples = Vec::with_capacity(files.len());
    let mut names = Vec::with_capacity(files.len());
    let mut channels = None;
    for path in &files {
        let img = image::open(path).map_err(|e| Error::Decode {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        let c = *channels.get_or_insert(if img.color().has_color() { 3 } else { 1 });
        samples.push(decode_resized(&img, resolution, c)?);
        names.push(path.file_name().unwrap().to_string_lossy().into_owned());
    }

    let labels = match labels_file {
        Some(lf) => Some(read_labels(lf, &names)?),
        None => None,
    };
    let name = directory
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "domain".into());
    DomainDataset::new(name, samples, names, labels)
}

pub(crate) fn png_files(directory: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(directory).map_err(|e| Error::io(directory, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(directory, e))?.path();
        let is_png = path
            .extension()
            .is_some_and(|ext| ext.eq_ignore_ascii_case("png"));
        if path.is_file() && is_png {
            files.push(path);
        }
    }
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(files)
}

fn decode_resized(img: &image::DynamicImage, resolution: usize, channels: usize) -> Result<ImageTensor> {
    let r = resolution as u32;
    let resized = if img.width() == r && img.height() == r {
        img.clone()
    } else {
        img.resize_exact(r, r, image::imageops::FilterType::Triangle)
    };
    let plane = resolution * resolution;
    let mut data = vec![0.0; plane * channels];
    if channels == 1 {
        for (i, p) in resized.to_luma8().pixels().enumerate() {
            data[i] = pixel_to_unit(p.0[0]);
        }
    } else {
        for (i, p) in resized.to_rgb8().pixels().enumerate() {
            for c in 0..3 {
                data[c * plane + i] = pixel_to_unit(p.0[c]);
            }
        }
    }
    ImageTensor::new(resolution, resolution, channels, data)
}

/// Reads `<filename>,<0|1>` lines (1 = aligned) and orders them like `names`.
fn read_labels(path: &Path, names: &[String]) -> Result<Vec<Alignment>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::LabelsFile {
        path: path.to_path_buf(),
        reason,
    };
    let mut by_name = std::collections::HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (file, flag) = line
            .rsplit_once(',')
            .ok_or_else(|| bad(format!("line {}: expected `<filename>,<0|1>`", lineno + 1)))?;
        let label = match flag.trim() {
            "1" => Alignment::Aligned,
            "0" => Alignment::Unaligned,
            other => return Err(bad(format!("line {}: bad flag `{other}`", lineno + 1))),
        };
        by_name.insert(file.trim().to_string(), label);
    }
    if by_name.len() != names.len() {
        return Err(Error::LabelCountMismatch {
            labels: by_name.len(),
            samples: names.len(),
        });
    }
    names
        .iter()
        .map(|n| {
            by_name
                .get(n)
                .copied()
                .ok_or_else(|| bad(format!("no label for {n}")))
        })
        .collect()
}

/// Mixes `round(ratio·|aligned|)` contaminant samples into `aligned`.
///
/// Contaminants are drawn without replacement when enough exist, otherwise with
/// replacement; the combined order is shuffled with `seed`.
pub fn compose_unaligned(
    aligned: &DomainDataset,
    contaminant: &DomainDataset,
    ratio: f64,
    seed: u64,
) -> Result<DomainDataset> {
    if !(ratio >= 0.0 && ratio.is_finite()) {
        return Err(Error::InvalidArgument(format!("ratio {ratio} must be >= 0")));
    }
    if let (Some(a), Some(c)) = (aligned.shape(), contaminant.shape()) {
        if a != c {
            return Err(Error::Shape(format!(
                "aligned {a:?} vs contaminant {c:?}"
            )));
        }
    }
    let k = (ratio * aligned.len() as f64).round() as usize;
    if k > 0 && contaminant.is_empty() {
        return Err(Error::InvalidArgument("contaminant dataset is empty".into()));
    }

    let mut rng = rng_from_seed(seed);
    let picks: Vec<usize> = if k <= contaminant.len() {
        let mut idx: Vec<usize> = (0..contaminant.len()).collect();
        for i in 0..k {
            let j = i + uniform_index(&mut rng, idx.len() - i);
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx
    } else {
        (0..k).map(|_| uniform_index(&mut rng, contaminant.len())).collect()
    };

    let mut entries: Vec<(ImageTensor, String, Alignment)> = aligned
        .samples
        .iter()
        .zip(&aligned.names)
        .map(|(s, n)| (s.clone(), n.clone(), Alignment::Aligned))
        .collect();
    entries.extend(picks.iter().map(|&i| {
        (
            contaminant.samples[i].clone(),
            contaminant.names[i].clone(),
            Alignment::Unaligned,
        )
    }));
    shuffle(&mut entries, &mut rng);

    let mut samples = Vec::with_capacity(entries.len());
    let mut names = Vec::with_capacity(entries.len());
    let mut labels = Vec::with_capacity(entries.len());
    for (s, n, l) in entries {
        samples.push(s);
        names.push(n);
        labels.push(l);
    }
    DomainDataset::new(aligned.name.clone(), samples, names, Some(labels))
}

/// A batch of dataset positions with the corresponding images.
#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub tensors: Vec<ImageTensor>,
}

impl Batch {
    pub fn from_indices(samples: &[ImageTensor], indices: Vec<usize>) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= samples.len()) {
            return Err(Error::InvalidArgument(format!(
                "index {bad} out of range for {} samples",
                samples.len()
            )));
        }
        let tensors = indices.iter().map(|&i| samples[i].clone()).collect();
        Ok(Self { indices, tensors })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Draws `n ≥ 2` indices: without replacement when `|samples| ≥ n`, otherwise with
/// replacement. Consumes exactly `n` draws from `rng` in both cases.
pub fn sample_batch(samples: &[ImageTensor], n: usize, rng: &mut Rng) -> Result<Batch> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("batch size {n} < 2")));
    }
    if samples.is_empty() {
        return Err(Error::InvalidArgument("cannot sample from an empty dataset".into()));
    }
    let len = samples.len();
    let indices = if len >= n {
        // Partial Fisher–Yates over a lazily materialized identity permutation.
        let mut perm: Vec<usize> = (0..len).collect();
        for i in 0..n {
            let j = i + uniform_index(rng, len - i);
            perm.swap(i, j);
        }
        perm.truncate(n);
        perm
    } else {
        (0..n).map(|_| uniform_index(rng, len)).collect()
    };
    Batch::from_indices(samples, indices)
}

/// Without-replacement cycling through a dataset: one shuffled pass is consumed in
/// batch-sized chunks, then a fresh permutation is drawn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CyclingSampler {
    order: Vec<usize>,
    cursor: usize,
}

impl CyclingSampler {
    pub fn new(len: usize) -> Self {
        Self {
            order: (0..len).collect(),
            // Forces a shuffle on first use.
            cursor: len,
        }
    }

    pub fn next_indices(&mut self, n: usize, rng: &mut Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.cursor == self.order.len() {
                shuffle(&mut self.order, rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(v: f64, n: usize) -> DomainDataset {
        let samples = (0..n)
            .map(|_| ImageTensor::new(2, 2, 1, vec![v; 4]).unwrap())
            .collect();
        let names = (0..n).map(|i| format!("s{i}")).collect();
        DomainDataset::new("d", samples, names, None).unwrap()
    }

    #[test]
    fn pixel_mapping_endpoints() {
        assert_eq!(pixel_to_unit(255), 1.0);
        assert_eq!(pixel_to_unit(0), -1.0);
        assert!((pixel_to_unit(128) - (2.0 * 128.0 / 255.0 - 1.0)).abs() < 1e-15);
        assert!((pixel_to_unit(128) - 0.00392).abs() < 1e-5);
    }

    #[test]
    fn image_rejects_out_of_range() {
        assert!(ImageTensor::new(1, 1, 1, vec![1.5]).is_err());
        assert!(ImageTensor::new(1, 2, 1, vec![0.0]).is_err());
        assert!(ImageTensor::new(1, 1, 2, vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn compose_counts() {
        let a = flat(0.5, 100);
        let c = flat(-0.5, 50);
        let d = compose_unaligned(&a, &c, 0.3, 1).unwrap();
        assert_eq!(d.len(), 130);
        assert_eq!(d.count_label(Alignment::Unaligned), 30);

        let d0 = compose_unaligned(&a, &c, 0.0, 1).unwrap();
        assert_eq!(d0.len(), 100);
        assert_eq!(d0.count_label(Alignment::Aligned), 100);

        // more contaminants than available: drawn with replacement
        let d2 = compose_unaligned(&a, &c, 1.0, 1).unwrap();
        assert_eq!(d2.count_label(Alignment::Unaligned), 100);
    }

    #[test]
    fn compose_rejects_shape_mismatch() {
        let a = flat(0.5, 4);
        let c = DomainDataset::new(
            "c",
            vec![ImageTensor::new(3, 3, 1, vec![0.0; 9]).unwrap()],
            vec!["c0".into()],
            None,
        )
        .unwrap();
        assert!(matches!(compose_unaligned(&a, &c, 0.5, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn batch_sampling_is_replayable_and_exhaustive() {
        let d = flat(0.0, 20);
        let a = sample_batch(d.samples(), 7, &mut rng_from_seed(9)).unwrap();
        let b = sample_batch(d.samples(), 7, &mut rng_from_seed(9)).unwrap();
        assert_eq!(a.indices, b.indices);

        let mut full = sample_batch(d.samples(), 20, &mut rng_from_seed(3)).unwrap().indices;
        full.sort_unstable();
        assert_eq!(full, (0..20).collect::<Vec<_>>());

        assert!(sample_batch(d.samples(), 1, &mut rng_from_seed(0)).is_err());
    }

    #[test]
    fn batch_sampling_consumes_fixed_draws() {
        let d = flat(0.0, 5);
        for n in [2, 5, 9] {
            let mut r1 = rng_from_seed(4);
            sample_batch(d.samples(), n, &mut r1).unwrap();
            let mut r2 = rng_from_seed(4);
            for _ in 0..n {
                r2.next_u64();
            }
            assert_eq!(r1.next_u64(), r2.next_u64(), "n = {n}");
        }
    }

    #[test]
    fn cycling_sampler_covers_each_pass() {
        let mut s = CyclingSampler::new(10);
        let mut rng = rng_from_seed(1);
        let mut seen = s.next_indices(5, &mut rng);
        seen.extend(s.next_indices(5, &mut rng));
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }
}
