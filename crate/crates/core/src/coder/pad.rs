//! Replicate padding up to the alignment the analysis transform needs.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::scale::MIN_EDGE;
use crate::transforms::INPUT_ALIGN;

/// Pad each spatial edge of an NHWC image up to a multiple of 64 by
/// repeating the last row / column. Returns the padded image and the
/// original `(h, w)`.
pub fn pad_input(x: &Tensor) -> Result<(Tensor, (usize, usize))> {
    let (_, h, w, _) = x.dims4()?;
    if h < MIN_EDGE || w < MIN_EDGE {
        return Err(Error::Input(format!(
            "image is {h}x{w}; both edges must be at least {MIN_EDGE}"
        )));
    }
    let ph = h.next_multiple_of(INPUT_ALIGN) - h;
    let pw = w.next_multiple_of(INPUT_ALIGN) - w;
    let mut out = x.clone();
    if ph > 0 {
        out = out.pad_with_same(1, 0, ph)?;
    }
    if pw > 0 {
        out = out.pad_with_same(2, 0, pw)?;
    }
    Ok((out, (h, w)))
}

pub fn crop(x: &Tensor, size: (usize, usize)) -> Result<Tensor> {
    Ok(x.narrow(1, 0, size.0)?.narrow(2, 0, size.1)?)
}
