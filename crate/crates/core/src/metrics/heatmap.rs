//! Attention heatmaps: raw per-token weights as CSV, and a min-max
//! normalized, bilinearly upsampled grayscale image per patch.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::dataio::TokenBag;
use crate::error::{Error, Result};
use crate::mil::BagForward;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionMapFiles {
    pub images: Vec<PathBuf>,
    pub csvs: Vec<PathBuf>,
}

/// Resample a row-major `rows x cols` grid to `height x width` with
/// half-pixel-centred bilinear interpolation, clamped at the edges.
pub fn bilinear_upsample(src: &[f64], rows: usize, cols: usize, height: usize, width: usize) -> Vec<f64> {
    assert_eq!(src.len(), rows * cols);
    let axis = |i: usize, n_out: usize, n_in: usize| {
        let s = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = s.floor() as usize;
        (lo, (lo + 1).min(n_in - 1), s - lo as f64)
    };
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        let (y0, y1, fy) = axis(y, height, rows);
        for x in 0..width {
            let (x0, x1, fx) = axis(x, width, cols);
            let top = src[y0 * cols + x0] * (1.0 - fx) + src[y0 * cols + x1] * fx;
            let bottom = src[y1 * cols + x0] * (1.0 - fx) + src[y1 * cols + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Binary (P5) 8-bit PGM.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    assert_eq!(pixels.len(), width * height);
    let mut buf = format!("P5\n{width} {height}\n255\n").into_bytes();
    buf.extend_from_slice(pixels);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Write `<id>_p<k>.csv` (raw weights, one grid row per line) and
/// `<id>_p<k>.pgm` (`pixels x pixels`) for every patch of `bag`.
///
/// Normalization is over the whole bag, so patches are comparable; a bag with
/// constant weights maps to mid-gray.
pub fn export_attention_map(
    bag: &TokenBag,
    forward: &BagForward,
    out_dir: impl AsRef<Path>,
    pixels: usize,
) -> Result<AttentionMapFiles> {
    let out_dir = out_dir.as_ref();
    let w = &forward.weights;
    if w.len() != bag.instances() {
        return Err(Error::Invalid(format!(
            "{} attention weights for a bag of {} tokens",
            w.len(),
            bag.instances()
        )));
    }
    if pixels == 0 {
        return Err(Error::Invalid("heatmap size must be positive".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let (rows, cols, _) = bag.grid_shape();
    let cells = rows * cols;
    let lo = w.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let normalize = |v: f64| if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };

    let mut files = AttentionMapFiles::default();
    for (p, patch) in w.chunks_exact(cells).enumerate() {
        let stem = format!("{}_p{p}", bag.patient_id);

        let mut csv = String::new();
        for row in patch.chunks_exact(cols) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(csv, "{}", line.join(",")).unwrap();
        }
        let csv_path = out_dir.join(format!("{stem}.csv"));
        fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;

        let norm: Vec<f64> = patch.iter().map(|&v| normalize(v)).collect();
        let img: Vec<u8> = bilinear_upsample(&norm, rows, cols, pixels, pixels)
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        let pgm_path = out_dir.join(format!("{stem}.pgm"));
        write_pgm(&pgm_path, pixels, pixels, &img)?;

        files.csvs.push(csv_path);
        files.images.push(pgm_path);
    }
    Ok(files)
}
