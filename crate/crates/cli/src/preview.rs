//! 16-bit binary PGM previews with a window/level mapping.

use std::path::Path;

use findnet::{fnt, Error, Tensor};

/// Gray value for `v`: `clamp((v − (level − window/2)) / window) · 65535`, rounded.
pub fn gray(v: f64, window: f64, level: f64) -> u16 {
    let t = ((v - (level - window / 2.0)) / window).clamp(0.0, 1.0);
    (t * 65535.0).round() as u16
}

pub fn encode_pgm(t: &Tensor, window: f64, level: f64) -> Result<Vec<u8>, Error> {
    let (c, h, w) = t.chw()?;
    if c != 1 {
        return Err(Error::Dimension(format!(
            "previews need a single channel, got {:?}",
            t.shape()
        )));
    }
    let mut out = format!("P5\n{w} {h}\n65535\n").into_bytes();
    for &v in t.data() {
        out.extend_from_slice(&gray(v, window, level).to_be_bytes());
    }
    Ok(out)
}

pub fn write_pgm(path: &Path, t: &Tensor, window: f64, level: f64) -> Result<(), Error> {
    fnt::write_atomic(path, &encode_pgm(t, window, level)?)
}
