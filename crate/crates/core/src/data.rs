//! MNIST ingestion: IDX parsing, binarization and mini-batching.

use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const SIDE: usize = 28;
pub const PIXELS: usize = SIDE * SIDE;
pub const DEFAULT_BATCH: usize = 64;

/// Environment variable naming the directory that holds the IDX files.
pub const DATA_DIR_ENV: &str = "BINARYGAN_DATA_DIR";

const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];

/// Raw 8-bit images as stored in an IDX file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| {
            Error::Idx(format!(
                "truncated header: expected at least {} bytes, got {}",
                at + 4,
                bytes.len()
            ))
        })
}

/// Parse an IDX image file (optionally gzip-compressed).
pub fn parse_idx(bytes: &[u8]) -> Result<RawImages> {
    if bytes.starts_with(&GZIP_MAGIC) {
        let mut raw = Vec::new();
        GzDecoder::new(bytes)
            .read_to_end(&mut raw)
            .map_err(|e| Error::Idx(format!("gzip: {e}")))?;
        return parse_idx(&raw);
    }
    let magic = be_u32(bytes, 0)?;
    if magic != IMAGE_MAGIC {
        let hint = if magic == LABEL_MAGIC { " (this is a label file)" } else { "" };
        return Err(Error::Idx(format!(
            "wrong magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}{hint}"
        )));
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::Idx(format!("degenerate image size {rows}x{cols}")));
    }
    let expected = count * rows * cols;
    let payload = &bytes[16..];
    if payload.len() != expected {
        return Err(Error::Idx(format!(
            "{count} images of {rows}x{cols} need {expected} payload bytes, got {}",
            payload.len()
        )));
    }
    Ok(RawImages {
        count,
        rows,
        cols,
        pixels: payload.to_vec(),
    })
}

pub fn read_idx(path: &Path) -> Result<RawImages> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx(&bytes)
}

/// Serialize images as an uncompressed IDX file.
pub fn encode_idx(images: &RawImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [
        IMAGE_MAGIC,
        images.count as u32,
        images.rows as u32,
        images.cols as u32,
    ] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

/// Images with every pixel exactly 0.0 or 1.0. Labels are not kept.
#[derive(Clone, Debug, PartialEq)]
pub struct BinarizedDataset {
    rows: usize,
    cols: usize,
    values: Vec<f32>,
}

/// Nonzero intensities become one, zero stays zero.
pub fn binarize(raw: &RawImages) -> BinarizedDataset {
    BinarizedDataset {
        rows: raw.rows,
        cols: raw.cols,
        values: raw.pixels.iter().map(|&p| if p > 0 { 1.0 } else { 0.0 }).collect(),
    }
}

impl BinarizedDataset {
    pub fn len(&self) -> usize {
        self.values.len() / self.pixels_per_image()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn pixels_per_image(&self) -> usize {
        self.rows * self.cols
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.pixels_per_image();
        &self.values[i * n..(i + 1) * n]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// The first `n` images.
    pub fn truncate(mut self, n: usize) -> Self {
        let keep = n.min(self.len()) * self.pixels_per_image();
        self.values.truncate(keep);
        self
    }

    pub fn require_mnist_dims(&self) -> Result<()> {
        if (self.rows, self.cols) != (SIDE, SIDE) {
            return Err(Error::Idx(format!(
                "expected {SIDE}x{SIDE} images, got {}x{}",
                self.rows, self.cols
            )));
        }
        Ok(())
    }

    /// Mean of each pixel across the dataset.
    pub fn pixel_means(&self) -> Vec<f64> {
        let n = self.pixels_per_image();
        let mut sums = vec![0.0; n];
        for img in self.values.chunks(n) {
            for (s, &v) in sums.iter_mut().zip(img) {
                *s += v as f64;
            }
        }
        sums.iter().map(|s| s / self.len() as f64).collect()
    }
}

/// How a batch is shaped for the network family consuming it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// `[batch, rows * cols]`
    Flat,
    /// `[batch, 1, rows, cols]`
    Image,
}

/// Shuffled mini-batches. Each pass visits every index once; the short
/// remainder of a pass is dropped and the order is reshuffled.
#[derive(Clone, Debug)]
pub struct BatchIterator<'a> {
    data: &'a BinarizedDataset,
    batch: usize,
    rng: rng::Rng,
    order: Vec<usize>,
    cursor: usize,
    epoch: usize,
}

impl<'a> BatchIterator<'a> {
    pub fn new(data: &'a BinarizedDataset, batch: usize, rng: rng::Rng) -> Result<Self> {
        if batch == 0 || data.len() < batch {
            return Err(Error::Config(format!(
                "dataset of {} images cannot fill a batch of {batch}",
                data.len()
            )));
        }
        let mut it = BatchIterator {
            data,
            batch,
            rng,
            order: (0..data.len()).collect(),
            cursor: 0,
            epoch: 0,
        };
        it.order.shuffle(&mut it.rng);
        Ok(it)
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.data.len() / self.batch
    }

    /// Completed passes over the data.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.cursor + self.batch > self.data.len() {
            self.epoch += 1;
            self.cursor = 0;
            self.order.shuffle(&mut self.rng);
        }
        let idx = self.order[self.cursor..self.cursor + self.batch].to_vec();
        self.cursor += self.batch;
        idx
    }

    pub fn next_batch(&mut self, layout: Layout) -> Tensor<f32> {
        let idx = self.next_indices();
        let n = self.data.pixels_per_image();
        let mut values = Vec::with_capacity(idx.len() * n);
        for &i in &idx {
            values.extend_from_slice(self.data.image(i));
        }
        let (r, c) = self.data.dims();
        let shape = match layout {
            Layout::Flat => vec![self.batch, n],
            Layout::Image => vec![self.batch, 1, r, c],
        };
        Tensor::new(shape, values).expect("batch shape matches gathered pixels")
    }
}

/// `dir` if given, otherwise the directory named by [`DATA_DIR_ENV`].
pub fn resolve_data_dir(dir: Option<&Path>) -> Option<PathBuf> {
    dir.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
}

/// Find the training-image file in `dir`, compressed or not.
pub fn locate_training_images(dir: &Path) -> Result<PathBuf> {
    const NAMES: [&str; 4] = [
        "train-images-idx3-ubyte",
        "train-images-idx3-ubyte.gz",
        "train-images.idx3-ubyte",
        "train-images.idx3-ubyte.gz",
    ];
    NAMES
        .iter()
        .map(|n| dir.join(n))
        .find(|p| p.is_file())
        .ok_or_else(|| {
            Error::Idx(format!(
                "no training images in {} (looked for {})",
                dir.display(),
                NAMES.join(", ")
            ))
        })
}

/// Load and binarize the training split from `dir`.
pub fn load_training_set(dir: &Path) -> Result<BinarizedDataset> {
    let raw = read_idx(&locate_training_images(dir)?)?;
    let data = binarize(&raw);
    data.require_mnist_dims()?;
    Ok(data)
}

/// Procedurally drawn 28x28 stroke images (rings, bars, crosses and the
/// like) with anti-aliased edges, for running the pipeline where the real
/// digits are not available.
pub fn synthetic_digits<R: Rng + ?Sized>(count: usize, rng: &mut R) -> RawImages {
    let mut pixels = Vec::with_capacity(count * PIXELS);
    for _ in 0..count {
        let shape = rng.gen_range(0..6);
        let cx = 14.0 + rng.gen_range(-2.0..2.0);
        let cy = 14.0 + rng.gen_range(-2.0..2.0);
        let h = rng.gen_range(7.0..10.0);
        let w = rng.gen_range(3.5..6.5);
        let thick = rng.gen_range(1.2..2.2);
        let slant = rng.gen_range(-0.25..0.25);
        let segs: Vec<[f64; 4]> = match shape {
            // ring
            0 => (0..16)
                .map(|k| {
                    let a0 = k as f64 / 16.0 * std::f64::consts::TAU;
                    let a1 = (k + 1) as f64 / 16.0 * std::f64::consts::TAU;
                    [cx + w * a0.cos(), cy + h * a0.sin(), cx + w * a1.cos(), cy + h * a1.sin()]
                })
                .collect(),
            // vertical bar
            1 => vec![[cx + slant * h, cy - h, cx - slant * h, cy + h]],
            // seven
            2 => vec![
                [cx - w, cy - h, cx + w, cy - h],
                [cx + w, cy - h, cx - w * 0.3, cy + h],
            ],
            // cross
            3 => vec![
                [cx - w, cy, cx + w, cy],
                [cx + slant * h, cy - h, cx - slant * h, cy + h],
            ],
            // four-ish
            4 => vec![
                [cx - w, cy - h, cx - w, cy + 1.0],
                [cx - w, cy + 1.0, cx + w, cy + 1.0],
                [cx + w * 0.5, cy - h, cx + w * 0.5, cy + h],
            ],
            // zig-zag two
            _ => vec![
                [cx - w, cy - h, cx + w, cy - h],
                [cx + w, cy - h, cx - w, cy + h],
                [cx - w, cy + h, cx + w, cy + h],
            ],
        };
        for r in 0..SIDE {
            for c in 0..SIDE {
                let (px, py) = (c as f64 + 0.5, r as f64 + 0.5);
                let d = segs
                    .iter()
                    .map(|s| segment_distance(px, py, s))
                    .fold(f64::INFINITY, f64::min);
                let ink = (thick - d + 0.5).clamp(0.0, 1.0);
                pixels.push((ink * 255.0).round() as u8);
            }
        }
    }
    RawImages {
        count,
        rows: SIDE,
        cols: SIDE,
        pixels,
    }
}

fn segment_distance(px: f64, py: f64, s: &[f64; 4]) -> f64 {
    let (dx, dy) = (s[2] - s[0], s[3] - s[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - s[0]) * dx + (py - s[1]) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (s[0] + t * dx, s[1] + t * dy);
    ((px - qx).powi(2) + (py - qy).powi(2)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use std::io::Write;

    fn fixture() -> RawImages {
        RawImages {
            count: 2,
            rows: 2,
            cols: 2,
            pixels: vec![0, 1, 128, 255, 7, 0, 0, 9],
        }
    }

    #[test]
    fn fixture_round_trips() {
        let raw = fixture();
        assert_eq!(parse_idx(&encode_idx(&raw)).unwrap(), raw);
    }

    #[test]
    fn gzip_is_detected() {
        let raw = fixture();
        let mut gz = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        gz.write_all(&encode_idx(&raw)).unwrap();
        let bytes = gz.finish().unwrap();
        assert_eq!(parse_idx(&bytes).unwrap(), raw);
    }

    #[test]
    fn standard_header() {
        let mut bytes = Vec::new();
        for v in [IMAGE_MAGIC, 60_000, 28, 28] {
            bytes.extend_from_slice(&v.to_be_bytes());
        }
        bytes.resize(16 + 60_000 * 784, 0);
        let raw = parse_idx(&bytes).unwrap();
        assert_eq!((raw.count, raw.rows, raw.cols), (60_000, 28, 28));
    }

    #[test]
    fn truncated_payload_reports_counts() {
        let mut bytes = encode_idx(&fixture());
        bytes.pop();
        let msg = parse_idx(&bytes).unwrap_err().to_string();
        assert!(msg.contains("need 8") && msg.contains("got 7"), "{msg}");
        let msg = parse_idx(&bytes[..6]).unwrap_err().to_string();
        assert!(msg.contains("truncated header"), "{msg}");
    }

    #[test]
    fn wrong_magic() {
        let mut bytes = encode_idx(&fixture());
        bytes[3] = 0x01;
        let msg = parse_idx(&bytes).unwrap_err().to_string();
        assert!(msg.contains("wrong magic") && msg.contains("label"), "{msg}");
    }

    #[test]
    fn nonzero_becomes_one() {
        let data = binarize(&fixture());
        assert_eq!(data.values(), [0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn binarize_is_idempotent() {
        let once = binarize(&fixture());
        let back = RawImages {
            count: 2,
            rows: 2,
            cols: 2,
            pixels: once.values().iter().map(|&v| v as u8).collect(),
        };
        assert_eq!(binarize(&back), once);
    }

    fn synthetic(n: usize) -> BinarizedDataset {
        binarize(&synthetic_digits(n, &mut stream(0, Stream::Init)))
    }

    #[test]
    fn epoch_covers_each_index_once() {
        let data = synthetic(128);
        let mut it = BatchIterator::new(&data, 64, stream(1, Stream::Shuffle)).unwrap();
        assert_eq!(it.batches_per_epoch(), 2);
        let mut seen: Vec<usize> = (0..2).flat_map(|_| it.next_indices()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..128).collect::<Vec<_>>());
        assert_eq!(it.epoch(), 0);
        it.next_indices();
        assert_eq!(it.epoch(), 1);
    }

    #[test]
    fn short_remainder_is_dropped() {
        let data = synthetic(150);
        let mut it = BatchIterator::new(&data, 64, stream(2, Stream::Shuffle)).unwrap();
        let mut seen: Vec<usize> = (0..2).flat_map(|_| it.next_indices()).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 128);
    }

    #[test]
    fn batches_are_reproducible_and_binary() {
        let data = synthetic(200);
        let run = || {
            let mut it = BatchIterator::new(&data, 64, stream(9, Stream::Shuffle)).unwrap();
            (0..5).map(|_| it.next_batch(Layout::Image)).collect::<Vec<_>>()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert_eq!(a[0].shape(), [64, 1, 28, 28]);
        assert!(a.iter().all(|t| t.data().iter().all(|&v| v == 0.0 || v == 1.0)));
    }

    #[test]
    fn synthetic_images_have_ink() {
        let raw = synthetic_digits(50, &mut stream(4, Stream::Init));
        for img in raw.pixels.chunks(PIXELS) {
            let lit = img.iter().filter(|&&p| p > 0).count();
            assert!((20..500).contains(&lit), "{lit}");
        }
    }
}
