//! Raw planar 4:2:0 8-bit frame reading for MSE computation.

use std::io::Read;

use crate::error::{Error, Result};
use crate::metrics;

/// One planar 4:2:0 frame: full-size luma plane, half-size chroma planes.
pub struct Yuv420Frame {
    pub y: Vec<u8>,
    pub u: Vec<u8>,
    pub v: Vec<u8>,
}

/// Byte size of one 4:2:0 frame of `height x width` luma samples.
pub fn frame_size(height: usize, width: usize) -> usize {
    height * width + 2 * ((height / 2) * (width / 2))
}

/// Reads the next frame, or `Ok(None)` on a clean EOF at a frame boundary.
pub fn read_frame<R: Read>(reader: &mut R, height: usize, width: usize) -> Result<Option<Yuv420Frame>> {
    let mut y = vec![0u8; height * width];
    match read_exact_or_eof(reader, &mut y)? {
        false => return Ok(None),
        true => {}
    }
    let mut u = vec![0u8; (height / 2) * (width / 2)];
    let mut v = vec![0u8; (height / 2) * (width / 2)];
    reader.read_exact(&mut u)?;
    reader.read_exact(&mut v)?;
    Ok(Some(Yuv420Frame { y, u, v }))
}

fn read_exact_or_eof<R: Read>(reader: &mut R, buf: &mut [u8]) -> Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = reader.read(&mut buf[filled..])?;
        if n == 0 {
            if filled == 0 {
                return Ok(false);
            }
            return Err(Error::InvalidInput(
                "truncated YUV stream: partial frame at end of file".into(),
            ));
        }
        filled += n;
    }
    Ok(true)
}

/// Per-frame (mse_y, mse_u, mse_v) between two planar 4:2:0 streams.
pub fn per_frame_mse<R: Read>(
    reference: &mut R,
    distorted: &mut R,
    height: usize,
    width: usize,
) -> Result<Vec<(f64, f64, f64)>> {
    let mut out = Vec::new();
    loop {
        let rf = read_frame(reference, height, width)?;
        let df = read_frame(distorted, height, width)?;
        match (rf, df) {
            (None, None) => break,
            (Some(rf), Some(df)) => {
                out.push((
                    metrics::frame_mse(&rf.y, &df.y)?,
                    metrics::frame_mse(&rf.u, &df.u)?,
                    metrics::frame_mse(&rf.v, &df.v)?,
                ));
            }
            _ => {
                return Err(Error::DimensionMismatch(
                    "reference and distorted streams have different frame counts".into(),
                ))
            }
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidInput("empty YUV streams".into()));
    }
    Ok(out)
}
