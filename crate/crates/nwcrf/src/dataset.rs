//! Datasets on disk: PPM/PGM pairs listed in an `index.txt` of
//! `image<TAB>depth` lines relative to the index.

use std::fs;
use std::path::Path;

use nwcrf_core::synth::DepthSample;

use crate::error::CliError;
use crate::netpbm::{read_depth_pgm, read_ppm, write_depth_pgm, write_ppm};

/// Writes `samples` as `{prefix}_{i}.ppm` / `{prefix}_{i}.pgm` into `dir`
/// and returns the index lines. Invalid pixels are stored as depth 0.
pub fn write_samples(dir: &Path, prefix: &str, samples: &[DepthSample]) -> Result<Vec<String>, CliError> {
    let mut lines = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let image = format!("{prefix}_{i:04}.ppm");
        let depth = format!("{prefix}_{i:04}.pgm");
        write_ppm(&dir.join(&image), &s.image)?;
        let mut d = s.depth.clone();
        for (v, &ok) in d.data_mut().iter_mut().zip(&s.valid) {
            if !ok {
                *v = 0.0;
            }
        }
        write_depth_pgm(&dir.join(&depth), &d)?;
        lines.push(format!("{image}\t{depth}"));
    }
    Ok(lines)
}

/// Loads every pair listed in `index`; zero depth marks invalid pixels.
pub fn read_index(index: &Path) -> Result<Vec<DepthSample>, CliError> {
    let text = fs::read_to_string(index).map_err(|e| CliError::Input(format!("cannot read index {}: {e}", index.display())))?;
    let base = index.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let Some((img, depth)) = line.split_once('\t') else {
            return Err(CliError::Input(format!("{}:{}: expected image<TAB>depth", index.display(), n + 1)));
        };
        let image = read_ppm(&base.join(img.trim()))?;
        let depth = read_depth_pgm(&base.join(depth.trim()))?;
        let valid = depth.data().iter().map(|&d| d > 0.0).collect();
        let sample = DepthSample::new(image, depth, valid).map_err(|e| CliError::Input(format!("{}:{}: {e}", index.display(), n + 1)))?;
        out.push(sample);
    }
    Ok(out)
}
