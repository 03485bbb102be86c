//! Datasets and their on-disk formats.
//!
//! * IDX: big-endian magic `0x00000803` (images, `[n, rows, cols]`) or
//!   `0x00000801` (labels), u32 extents, u8 payload.
//! * CIFAR binary: 3073-byte records, one label byte then R, G, B planes of 32×32.
//! * SNNF: magic `SNNF`, u32 rank, u32 extents, little-endian f32 payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, DsrError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Samples stacked along the leading axis. Static samples are `[C, H, W]`;
/// temporal samples are `[T, C, H, W]` frame sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Tensor,
    labels: Vec<usize>,
    classes: usize,
    split: Split,
    temporal: bool,
}

impl Dataset {
    pub fn new(samples: Tensor, labels: Vec<usize>, classes: usize, split: Split, temporal: bool) -> Result<Self> {
        let want = if temporal { 5 } else { 4 };
        if samples.rank() != want {
            bail!(
                Dimension,
                "{} samples must have rank {want} including the sample axis, got {:?}",
                if temporal { "temporal" } else { "static" },
                samples.shape()
            );
        }
        if samples.shape()[0] != labels.len() {
            bail!(Format, "{} samples but {} labels", samples.shape()[0], labels.len());
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            bail!(Input, "label {bad} outside [0, {classes})");
        }
        Ok(Self {
            samples,
            labels,
            classes,
            split,
            temporal,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn is_temporal(&self) -> bool {
        self.temporal
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    /// Shape of one time slice, `[C, H, W]`.
    pub fn frame_shape(&self) -> &[usize] {
        let s = self.samples.shape();
        if self.temporal {
            &s[2..]
        } else {
            &s[1..]
        }
    }

    fn sample_len(&self) -> usize {
        self.samples.numel() / self.len()
    }

    pub fn sample(&self, i: usize) -> Tensor {
        let len = self.sample_len();
        Tensor::new(
            self.samples.shape()[1..].to_vec(),
            self.samples.data()[i * len..(i + 1) * len].to_vec(),
        )
        .unwrap()
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// Overrides the class count; fails if a label falls outside it.
    pub fn with_classes(self, classes: usize) -> Result<Self> {
        Self::new(self.samples, self.labels, classes, self.split, self.temporal)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            bail!(Parameter, "empty subset");
        }
        let len = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                bail!(Input, "sample index {i} out of range");
            }
            data.extend_from_slice(&self.samples.data()[i * len..(i + 1) * len]);
            labels.push(self.labels[i]);
        }
        let mut shape = self.samples.shape().to_vec();
        shape[0] = indices.len();
        Self::new(
            Tensor::new(shape, data)?,
            labels,
            self.classes,
            self.split,
            self.temporal,
        )
    }

    /// Per-channel mean and standard deviation over every sample, frame and pixel.
    pub fn channel_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let fs = self.frame_shape();
        let (c, plane) = (fs[0], fs[1..].iter().product::<usize>());
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for (i, &v) in self.samples.data().iter().enumerate() {
            let ch = (i / plane) % c;
            sum[ch] += v;
            sq[ch] += v * v;
        }
        let count = (self.samples.numel() / c) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / count - m * m).max(0.0).sqrt())
            .collect();
        (mean, std)
    }

    /// Applies [`normalize`] to every frame.
    pub fn normalized(&self, mean: &[f64], std: &[f64]) -> Result<Self> {
        let fs = self.frame_shape().to_vec();
        let frame_len: usize = fs.iter().product();
        let mut data = Vec::with_capacity(self.samples.numel());
        for frame in self.samples.data().chunks_exact(frame_len) {
            let t = Tensor::new(fs.clone(), frame.to_vec())?;
            data.extend_from_slice(normalize(&t, mean, std)?.data());
        }
        Self::new(
            Tensor::new(self.samples.shape().to_vec(), data)?,
            self.labels.clone(),
            self.classes,
            self.split,
            self.temporal,
        )
    }

    /// Nearest-neighbour resize of every frame.
    pub fn resized(&self, height: usize, width: usize) -> Result<Self> {
        let fs = self.frame_shape().to_vec();
        let frame_len: usize = fs.iter().product();
        let mut data = Vec::new();
        for frame in self.samples.data().chunks_exact(frame_len) {
            let t = Tensor::new(fs.clone(), frame.to_vec())?;
            data.extend_from_slice(resize_nearest(&t, height, width)?.data());
        }
        let mut shape = self.samples.shape().to_vec();
        let r = shape.len();
        shape[r - 2] = height;
        shape[r - 1] = width;
        Self::new(
            Tensor::new(shape, data)?,
            self.labels.clone(),
            self.classes,
            self.split,
            self.temporal,
        )
    }

    /// Assembles `[N, B, C, H, W]` input frames for the given samples.
    /// Static images are repeated at every step; frame sequences are
    /// aligned with [`align_frames`]. Augmentation draws from `rng`.
    pub fn batch<R: Rng>(
        &self,
        indices: &[usize],
        n_steps: usize,
        augment_with: Option<(&AugmentConfig, &mut R)>,
    ) -> Result<(Tensor, Vec<usize>)> {
        if n_steps == 0 {
            bail!(Parameter, "need at least one time step");
        }
        if indices.is_empty() {
            bail!(Parameter, "empty batch");
        }
        let b = indices.len();
        let fs = self.frame_shape().to_vec();
        let frame_len: usize = fs.iter().product();
        let mut out = vec![0.0; n_steps * b * frame_len];
        let mut labels = Vec::with_capacity(b);
        let mut aug = augment_with;
        for (j, &i) in indices.iter().enumerate() {
            if i >= self.len() {
                bail!(Input, "sample index {i} out of range");
            }
            let mut x = self.sample(i);
            if let Some((cfg, rng)) = aug.as_mut() {
                x = augment(&x, cfg, *rng)?;
            }
            let frames = if self.temporal {
                align_frames(&x, n_steps)?
            } else {
                encode_static(&x, n_steps)?
            };
            for n in 0..n_steps {
                let src = &frames.data()[n * frame_len..(n + 1) * frame_len];
                out[(n * b + j) * frame_len..(n * b + j + 1) * frame_len].copy_from_slice(src);
            }
            labels.push(self.labels[i]);
        }
        let mut shape = vec![n_steps, b];
        shape.extend_from_slice(&fs);
        Ok((Tensor::new(shape, out)?, labels))
    }
}

/// Frames `[T, C, H, W]` of one event recording.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    frames: Tensor,
}

impl FrameSequence {
    pub fn new(frames: Tensor) -> Result<Self> {
        if frames.rank() != 4 {
            bail!(Format, "frame sequence must be [T, C, H, W], got {:?}", frames.shape());
        }
        if !frames.all_finite() {
            bail!(Format, "frame sequence contains non-finite values");
        }
        Ok(Self { frames })
    }

    pub fn frame_count(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], what: &'a str) -> Self {
        Self { bytes, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            bail!(Format, "{}: truncated at byte {}", self.what, self.pos);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32_be(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u32_le(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            bail!(Format, "{}: {} trailing bytes", self.what, self.bytes.len() - self.pos);
        }
        Ok(())
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| DsrError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = read(path)?;
    let what = path.display().to_string();
    let mut r = Reader::new(&bytes, &what);
    let magic = r.u32_be()?;
    if magic != 0x0000_0801 {
        bail!(Format, "{what}: bad IDX label magic {magic:#010x}");
    }
    let n = r.u32_be()? as usize;
    let labels = r.take(n)?.iter().map(|&b| b as usize).collect();
    r.finish()?;
    Ok(labels)
}

/// Reads an IDX image/label pair; pixels are scaled to `[0, 1]` and the
/// class count is one more than the largest label.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images_path = images_path.as_ref();
    let bytes = read(images_path)?;
    let what = images_path.display().to_string();
    let mut r = Reader::new(&bytes, &what);
    let magic = r.u32_be()?;
    if magic != 0x0000_0803 {
        bail!(Format, "{what}: bad IDX image magic {magic:#010x}");
    }
    let n = r.u32_be()? as usize;
    let h = r.u32_be()? as usize;
    let w = r.u32_be()? as usize;
    if n == 0 || h == 0 || w == 0 {
        bail!(Format, "{what}: empty image file");
    }
    let pixels: Vec<f64> = r.take(n * h * w)?.iter().map(|&p| p as f64 / 255.0).collect();
    r.finish()?;
    let labels = idx_labels(labels_path.as_ref())?;
    if labels.len() != n {
        bail!(Format, "{n} images but {} labels", labels.len());
    }
    let classes = labels.iter().max().unwrap() + 1;
    Dataset::new(
        Tensor::new(vec![n, 1, h, w], pixels)?,
        labels,
        classes,
        Split::Train,
        false,
    )
}

/// Writes an IDX image/label pair from raw bytes (`images` holds `n·h·w` pixels).
pub fn write_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    images: &[u8],
    h: usize,
    w: usize,
    labels: &[u8],
) -> Result<()> {
    let n = labels.len();
    if images.len() != n * h * w {
        bail!(Dimension, "{} pixels do not form {n} images of {h}x{w}", images.len());
    }
    let mut img = Vec::with_capacity(16 + images.len());
    for v in [0x0803u32, n as u32, h as u32, w as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend_from_slice(images);
    fs::write(images_path, img)?;
    let mut lab = Vec::with_capacity(8 + n);
    for v in [0x0801u32, n as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend_from_slice(labels);
    fs::write(labels_path, lab)?;
    Ok(())
}

const CIFAR_RECORD: usize = 3073;

/// Reads a CIFAR-10 binary batch file into `[n, 3, 32, 32]` samples.
pub fn load_cifar_binary(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = read(path)?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        bail!(
            Format,
            "{}: length {} is not a positive multiple of {CIFAR_RECORD}",
            path.display(),
            bytes.len()
        );
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut pixels = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&p| p as f64 / 255.0));
    }
    let classes = (labels.iter().max().unwrap() + 1).max(10);
    Dataset::new(
        Tensor::new(vec![n, 3, 32, 32], pixels)?,
        labels,
        classes,
        Split::Train,
        false,
    )
}

pub fn write_cifar_binary(path: impl AsRef<Path>, labels: &[u8], pixels: &[u8]) -> Result<()> {
    if pixels.len() != labels.len() * 3072 {
        bail!(Dimension, "{} pixel bytes for {} records", pixels.len(), labels.len());
    }
    let mut out = Vec::with_capacity(labels.len() * CIFAR_RECORD);
    for (l, px) in labels.iter().zip(pixels.chunks_exact(3072)) {
        out.push(*l);
        out.extend_from_slice(px);
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads an SNNF tensor of any rank.
pub fn read_snnf(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = read(path)?;
    let what = path.display().to_string();
    let mut r = Reader::new(&bytes, &what);
    if r.take(4)? != b"SNNF" {
        bail!(Format, "{what}: bad magic, expected SNNF");
    }
    let rank = r.u32_le()? as usize;
    if rank == 0 || rank > 8 {
        bail!(Format, "{what}: unsupported rank {rank}");
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = r.u32_le()? as usize;
        if d == 0 {
            bail!(Format, "{what}: zero extent");
        }
        shape.push(d);
    }
    let numel: usize = shape.iter().product();
    let payload = r.take(
        numel
            .checked_mul(4)
            .ok_or_else(|| DsrError::Format(format!("{what}: oversized")))?,
    )?;
    r.finish()?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(shape, data)
}

/// Writes `t` as SNNF; values are stored as f32.
pub fn write_snnf(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    f.write_all(b"SNNF")?;
    f.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        f.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        f.write_all(&(v as f32).to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

pub fn load_frames(path: impl AsRef<Path>) -> Result<FrameSequence> {
    FrameSequence::new(read_snnf(path)?)
}

/// Reads a rank-5 SNNF file `[S, T, C, H, W]` with an IDX label file.
pub fn load_frame_dataset(frames_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let frames = read_snnf(frames_path)?;
    if frames.rank() != 5 {
        bail!(
            Format,
            "frame dataset must be [S, T, C, H, W], got {:?}",
            frames.shape()
        );
    }
    if !frames.all_finite() {
        bail!(Format, "frame dataset contains non-finite values");
    }
    let labels = idx_labels(labels_path.as_ref())?;
    if labels.len() != frames.shape()[0] {
        bail!(Format, "{} sequences but {} labels", frames.shape()[0], labels.len());
    }
    let classes = labels.iter().max().unwrap() + 1;
    Dataset::new(frames, labels, classes, Split::Train, true)
}

/// Repeats `x` along a new leading time axis.
pub fn encode_static(x: &Tensor, n_steps: usize) -> Result<Tensor> {
    if n_steps == 0 {
        bail!(Parameter, "need at least one time step");
    }
    let mut shape = vec![n_steps];
    shape.extend_from_slice(x.shape());
    let mut data = Vec::with_capacity(n_steps * x.numel());
    for _ in 0..n_steps {
        data.extend_from_slice(x.data());
    }
    Tensor::new(shape, data)
}

/// Maps `T` recorded frames onto `N` steps: cycled when `T < N`, truncated when `T > N`.
pub fn align_frames(frames: &Tensor, n_steps: usize) -> Result<Tensor> {
    if n_steps == 0 {
        bail!(Parameter, "need at least one time step");
    }
    if frames.rank() < 2 {
        bail!(Dimension, "frames need a leading time axis");
    }
    let t = frames.shape()[0];
    let len = frames.numel() / t;
    let mut data = Vec::with_capacity(n_steps * len);
    for n in 0..n_steps {
        let k = n % t;
        data.extend_from_slice(&frames.data()[k * len..(k + 1) * len]);
    }
    let mut shape = frames.shape().to_vec();
    shape[0] = n_steps;
    Tensor::new(shape, data)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    /// Zero padding added on each side before the random crop.
    #[serde(default)]
    pub crop_pad: usize,
    #[serde(default)]
    pub hflip_prob: f64,
}

impl AugmentConfig {
    pub fn is_identity(&self) -> bool {
        self.crop_pad == 0 && self.hflip_prob == 0.0
    }
}

/// Shifts and optionally mirrors the trailing `[H, W]` planes of `x`. The same
/// offset and flip apply to every channel and frame.
pub fn augment<R: Rng + ?Sized>(x: &Tensor, cfg: &AugmentConfig, rng: &mut R) -> Result<Tensor> {
    if x.rank() < 2 {
        bail!(Dimension, "augment needs [..., H, W], got {:?}", x.shape());
    }
    if !(0.0..=1.0).contains(&cfg.hflip_prob) {
        bail!(Parameter, "flip probability must lie in [0, 1]");
    }
    if cfg.is_identity() {
        return Ok(x.clone());
    }
    let r = x.rank();
    let (h, w) = (x.shape()[r - 2], x.shape()[r - 1]);
    let pad = cfg.crop_pad as i64;
    let (dy, dx) = if pad > 0 {
        (
            rng.random_range(-pad..=pad) as isize,
            rng.random_range(-pad..=pad) as isize,
        )
    } else {
        (0, 0)
    };
    let flip = cfg.hflip_prob > 0.0 && rng.random::<f64>() < cfg.hflip_prob;
    Ok(shift_flip(x, dy, dx, flip, h, w))
}

/// Output pixel `(i, j)` reads input `(i + dy, j' + dx)` with `j'` mirrored when
/// `flip`; out-of-range reads are zero.
fn shift_flip(x: &Tensor, dy: isize, dx: isize, flip: bool, h: usize, w: usize) -> Tensor {
    let mut out = Tensor::zeros(x.shape());
    for (src, dst) in x.data().chunks_exact(h * w).zip(out.data_mut().chunks_exact_mut(h * w)) {
        for i in 0..h {
            let si = i as isize + dy;
            if si < 0 || si >= h as isize {
                continue;
            }
            for j in 0..w {
                let jj = if flip { w - 1 - j } else { j };
                let sj = jj as isize + dx;
                if sj < 0 || sj >= w as isize {
                    continue;
                }
                dst[i * w + j] = src[si as usize * w + sj as usize];
            }
        }
    }
    out
}

/// `(x − mean)/std` per channel of `x: [C, ...]`.
pub fn normalize(x: &Tensor, mean: &[f64], std: &[f64]) -> Result<Tensor> {
    let c = x.shape()[0];
    if mean.len() != c || std.len() != c {
        bail!(Dimension, "normalisation needs {c} channel statistics");
    }
    if let Some(s) = std.iter().find(|&&s| !(s > 0.0)) {
        bail!(Parameter, "channel std must be positive, got {s}");
    }
    let plane = x.numel() / c;
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let ch = i / plane;
        *v = (*v - mean[ch]) / std[ch];
    }
    Ok(out)
}

/// Nearest-neighbour resampling of the trailing `[H, W]` planes.
pub fn resize_nearest(x: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    if x.rank() < 2 || height == 0 || width == 0 {
        bail!(Dimension, "cannot resize {:?} to {height}x{width}", x.shape());
    }
    let r = x.rank();
    let (h, w) = (x.shape()[r - 2], x.shape()[r - 1]);
    let mut shape = x.shape().to_vec();
    shape[r - 2] = height;
    shape[r - 1] = width;
    let planes = x.numel() / (h * w);
    let mut data = Vec::with_capacity(planes * height * width);
    for p in x.data().chunks_exact(h * w) {
        for i in 0..height {
            let si = i * h / height;
            for j in 0..width {
                data.push(p[si * w + j * w / width]);
            }
        }
    }
    Tensor::new(shape, data)
}
