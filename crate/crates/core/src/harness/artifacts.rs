use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use image::{GrayImage, Luma};
use rand::Rng;

use crate::data::SIDE;
use crate::error::{Error, Result};
use crate::neurons::PreactivationRecord;
use crate::tensor::{Real, Tensor};

pub const GUTTER: usize = 2;
pub const HISTOGRAM_BINS: usize = 100;

/// Canvas side of a square grid of `per_side` tiles of `SIDE` pixels each.
pub fn grid_side(per_side: usize) -> usize {
    per_side * SIDE + (per_side + 1) * GUTTER
}

/// Tile 28×28 images (values in `[0, 1]`) into a square grid with white
/// gutters. Any tensor whose rows hold 784 values is accepted.
pub fn render_grid<T: Real>(images: &Tensor<T>) -> Result<GrayImage> {
    let count = images.rows();
    let per_side = (count as f64).sqrt().round() as usize;
    if per_side * per_side != count || count == 0 {
        return Err(Error::InvalidShape {
            shape: images.shape().to_vec(),
            reason: format!("a grid needs a perfect-square image count, got {count}"),
        });
    }
    if images.len() != count * SIDE * SIDE {
        return Err(Error::InvalidShape {
            shape: images.shape().to_vec(),
            reason: format!("grid tiles must be {SIDE}x{SIDE}"),
        });
    }
    let side = grid_side(per_side) as u32;
    let mut canvas = GrayImage::from_pixel(side, side, Luma([255]));
    for i in 0..count {
        let (ty, tx) = (i / per_side, i % per_side);
        let (oy, ox) = (GUTTER + ty * (SIDE + GUTTER), GUTTER + tx * (SIDE + GUTTER));
        for (k, v) in images.row(i).iter().enumerate() {
            let level = (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8;
            canvas.put_pixel((ox + k % SIDE) as u32, (oy + k / SIDE) as u32, Luma([level]));
        }
    }
    Ok(canvas)
}

pub fn emit_sample_grid<T: Real>(images: &Tensor<T>, path: &Path) -> Result<GrayImage> {
    let canvas = render_grid(images)?;
    canvas.save(path)?;
    Ok(canvas)
}

/// Counts of values in 100 equal-width bins over `[0, 1]`. Bins are
/// half-open `[lo, hi)` except the last, which also holds `1.0`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Histogram {
    counts: Vec<u64>,
    total: u64,
}

impl Histogram {
    pub fn empty() -> Self {
        Histogram {
            counts: vec![0; HISTOGRAM_BINS],
            total: 0,
        }
    }

    pub fn bin_of(v: f64) -> usize {
        ((v * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1)
    }

    /// Add preactivated outputs, which must lie strictly inside `(0, 1)`.
    pub fn extend<I: IntoIterator<Item = f64>>(&mut self, values: I) -> Result<()> {
        for v in values {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Domain {
                    op: "preactivation histogram",
                    value: v,
                    domain: "(0, 1)",
                });
            }
            self.counts[Self::bin_of(v)] += 1;
            self.total += 1;
        }
        Ok(())
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn bounds(i: usize) -> (f64, f64) {
        let w = 1.0 / HISTOGRAM_BINS as f64;
        (i as f64 * w, if i + 1 == HISTOGRAM_BINS { 1.0 } else { (i + 1) as f64 * w })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_low,bin_high,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let (lo, hi) = Self::bounds(i);
            let _ = writeln!(out, "{lo:.2},{hi:.2},{c}");
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

pub fn compute_preactivation_histogram<T: Real>(records: &[PreactivationRecord<T>]) -> Result<Histogram> {
    if records.iter().all(|r| r.values.is_empty()) {
        return Err(Error::Config("histogram needs at least one preactivation".into()));
    }
    let mut h = Histogram::empty();
    for r in records {
        h.extend(r.values.data().iter().map(|v| v.as_f64()))?;
    }
    Ok(h)
}

/// One row of the loss table.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub d_loss: f64,
    pub g_loss: f64,
    /// Critic estimate of the distance; absent for GAN.
    pub w_estimate: Option<f64>,
}

pub const LOSS_HEADER: &str = "iteration,d_loss,g_loss,w_estimate";

/// Loss rows appended to a CSV file as they arrive.
pub struct LossLog {
    file: std::io::BufWriter<std::fs::File>,
    path: std::path::PathBuf,
}

impl LossLog {
    pub fn create(path: &Path) -> Result<Self> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut log = LossLog {
            file: std::io::BufWriter::new(f),
            path: path.to_path_buf(),
        };
        log.line(LOSS_HEADER)?;
        Ok(log)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.file, "{s}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn append(&mut self, r: &LossRecord) -> Result<()> {
        let w = r.w_estimate.map(|w| w.to_string()).unwrap_or_default();
        let row = format!("{},{},{},{w}", r.iteration, r.d_loss, r.g_loss);
        self.line(&row)
    }

    pub fn flush(&mut self) -> Result<()> {
        self.file.flush().map_err(|e| Error::io(&self.path, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PostprocessStrategy {
    /// 1 iff `p >= 0.5`.
    Threshold,
    /// 1 with probability `p`, independently per pixel.
    Bernoulli,
}

impl std::str::FromStr for PostprocessStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "threshold" | "ht" => Ok(PostprocessStrategy::Threshold),
            "bernoulli" | "bs" => Ok(PostprocessStrategy::Bernoulli),
            other => Err(Error::Config(format!("unknown post-processing strategy `{other}`"))),
        }
    }
}

/// Binarize probabilistic images from the real-valued baseline.
pub fn postprocess_real<T: Real, R: Rng + ?Sized>(
    probs: &Tensor<T>,
    strategy: PostprocessStrategy,
    rng: &mut R,
) -> Tensor<T> {
    let half = T::of(0.5);
    match strategy {
        PostprocessStrategy::Threshold => probs.map(|p| if p >= half { T::one() } else { T::zero() }),
        PostprocessStrategy::Bernoulli => {
            let data = probs
                .data()
                .iter()
                .map(|&p| if p.as_f64() >= rng.gen::<f64>() { T::one() } else { T::zero() })
                .collect();
            Tensor::new(probs.shape().to_vec(), data).expect("same shape as input")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn canvas_side() {
        assert_eq!(grid_side(8), 242);
        let imgs = Tensor::<f32>::zeros(vec![64, 784]);
        let g = render_grid(&imgs).unwrap();
        assert_eq!(g.dimensions(), (242, 242));
    }

    #[test]
    fn black_tiles_white_gutters() {
        let g = render_grid(&Tensor::<f32>::zeros(vec![4, 1, 28, 28])).unwrap();
        assert_eq!(g.get_pixel(0, 0)[0], 255);
        assert_eq!(g.get_pixel(1, 40)[0], 255);
        assert_eq!(g.get_pixel(2, 2)[0], 0);
        assert_eq!(g.get_pixel(29, 29)[0], 0);
        assert_eq!(g.get_pixel(30, 2)[0], 255);
        assert_eq!(g.get_pixel(31, 2)[0], 255);
        assert_eq!(g.get_pixel(32, 2)[0], 0);
    }

    #[test]
    fn non_square_count_is_rejected() {
        assert!(render_grid(&Tensor::<f32>::zeros(vec![3, 784])).is_err());
    }

    #[test]
    fn one_bin_for_constant_values() {
        let mut h = Histogram::empty();
        h.extend(std::iter::repeat_n(0.5, 1000)).unwrap();
        assert_eq!(h.counts()[50], 1000);
        assert_eq!(h.total(), 1000);
    }

    #[test]
    fn bin_edges() {
        assert_eq!(Histogram::bin_of(0.0), 0);
        assert_eq!(Histogram::bin_of(0.0099), 0);
        assert_eq!(Histogram::bin_of(0.01), 1);
        assert_eq!(Histogram::bin_of(0.999), 99);
        assert_eq!(Histogram::bin_of(1.0), 99);
        assert_eq!(Histogram::bounds(99), (0.99, 1.0));
    }

    #[test]
    fn out_of_range_is_rejected() {
        for v in [0.0, 1.0, -0.1, f64::NAN] {
            assert!(Histogram::empty().extend([v]).is_err(), "{v}");
        }
    }

    #[test]
    fn csv_layout() {
        let mut h = Histogram::empty();
        h.extend([0.001, 0.995]).unwrap();
        let csv = h.to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines.len(), 101);
        assert_eq!(lines[0], "bin_low,bin_high,count");
        assert_eq!(lines[1], "0.00,0.01,1");
        assert_eq!(lines[100], "0.99,1.00,1");
    }

    #[test]
    fn threshold_ties_fire() {
        let p = Tensor::<f64>::from_f64(vec![3], &[0.5, 0.7, 0.4999]).unwrap();
        let out = postprocess_real(&p, PostprocessStrategy::Threshold, &mut stream(0, Stream::Eval));
        assert_eq!(out.data(), [1.0, 1.0, 0.0]);
    }

    #[test]
    fn bernoulli_is_binary() {
        let p = Tensor::<f32>::full(vec![1000], 0.3);
        let out = postprocess_real(&p, PostprocessStrategy::Bernoulli, &mut stream(1, Stream::Eval));
        assert!(out.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }
}
