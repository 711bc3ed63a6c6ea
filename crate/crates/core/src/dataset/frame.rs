use std::io::Read;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::Plane;
use crate::error::{ensure, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrameFormat {
    /// Binary portable graymap (P5); dimensions come from the header.
    Pgm,
    /// Headerless planar 4:2:0; 10-bit samples are 16-bit little-endian.
    Yuv420 { width: usize, height: usize, bitdepth: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameSource {
    pub path: PathBuf,
    pub format: FrameFormat,
    /// Keep every `interleave`-th frame of a video.
    pub interleave: usize,
}

impl FrameSource {
    /// Format from the extension: `.pgm` is a graymap, anything else needs
    /// explicit raw dimensions.
    pub fn guess(path: &Path, raw: Option<(usize, usize, u32)>, interleave: usize) -> Result<Self> {
        let is_pgm = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
        let format = match (is_pgm, raw) {
            (true, _) => FrameFormat::Pgm,
            (false, Some((width, height, bitdepth))) => FrameFormat::Yuv420 { width, height, bitdepth },
            (false, None) => {
                return Err(Error::InvalidParam(format!("{}: raw video needs width, height and bit depth", path.display())))
            }
        };
        Ok(Self { path: path.to_path_buf(), format, interleave: interleave.max(1) })
    }
}

/// Luma planes of a source, honoring the frame interleave.
pub fn ingest(source: &FrameSource) -> Result<Vec<Plane>> {
    let mut bytes = Vec::new();
    std::fs::File::open(&source.path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", source.path.display()))))?
        .read_to_end(&mut bytes)?;
    match source.format {
        FrameFormat::Pgm => Ok(vec![read_pgm(&bytes)?]),
        FrameFormat::Yuv420 { width, height, bitdepth } => {
            ensure!(width > 0 && height > 0, InvalidParam, "empty frame {width}x{height}");
            ensure!(width % 2 == 0 && height % 2 == 0, InvalidParam, "4:2:0 needs even dimensions, got {width}x{height}");
            ensure!(bitdepth == 8 || bitdepth == 10, Unsupported, "bit depth {bitdepth}");
            let bps = if bitdepth == 8 { 1 } else { 2 };
            let luma = width * height * bps;
            let frame = luma + luma / 2;
            ensure!(!bytes.is_empty(), Empty, "{}: empty file", source.path.display());
            ensure!(
                bytes.len() % frame == 0,
                Format,
                "{}: {} bytes is not a whole number of {width}x{height} frames",
                source.path.display(),
                bytes.len()
            );
            let interleave = source.interleave.max(1);
            (0..bytes.len() / frame)
                .step_by(interleave)
                .map(|f| {
                    let y = &bytes[f * frame..f * frame + luma];
                    let samples = if bps == 1 {
                        y.iter().map(|&b| u16::from(b)).collect()
                    } else {
                        y.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect()
                    };
                    Plane::new(width, height, bitdepth, samples)
                })
                .collect()
        }
    }
}

/// Parses a binary graymap. A maximum value above 255 selects 16-bit
/// big-endian samples; the bit depth is the smallest of 8 or 10 that holds it.
pub fn read_pgm(bytes: &[u8]) -> Result<Plane> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        ensure!(start < pos, Format, "truncated graymap header");
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    ensure!(token()? == "P5", Format, "not a binary graymap (P5)");
    let mut number = |what: &str| -> Result<usize> {
        token()?.parse::<usize>().map_err(|_| Error::Format(format!("bad graymap {what}")))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maximum value")?;
    ensure!(width > 0 && height > 0, Format, "empty graymap");
    ensure!((1..=1023).contains(&maxval), Unsupported, "graymap maximum value {maxval}");
    // Exactly one whitespace byte separates the header from the raster.
    let data = &bytes[(pos + 1).min(bytes.len())..];
    let (bitdepth, bps) = if maxval <= 255 { (8, 1) } else { (10, 2) };
    ensure!(data.len() >= width * height * bps, Format, "graymap raster truncated");
    let samples = if bps == 1 {
        data[..width * height].iter().map(|&b| u16::from(b)).collect()
    } else {
        data[..width * height * 2].chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    };
    Plane::new(width, height, bitdepth, samples)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct TilePosition {
    pub y: usize,
    pub x: usize,
}

/// Top-left corners of non-overlapping `n×n` tiles on a fixed grid, edge
/// remainders dropped, optionally subsampled to `max` tiles. The result is in
/// raster order.
pub fn extract_blocks(plane: &Plane, n: usize, seed: u64, max: Option<usize>) -> Result<Vec<TilePosition>> {
    ensure!(n > 0 && n <= plane.width && n <= plane.height, InvalidParam, "{n}x{n} tiles in a {}x{} plane", plane.width, plane.height);
    let (cols, rows) = (plane.width / n, plane.height / n);
    let total = cols * rows;
    let tile = |i: usize| TilePosition { y: (i / cols) * n, x: (i % cols) * n };
    match max {
        Some(m) if m < total => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked = sample(&mut rng, total, m).into_vec();
            picked.sort_unstable();
            Ok(picked.into_iter().map(tile).collect())
        }
        _ => Ok((0..total).map(tile).collect()),
    }
}
