//! 8-bit RGB PNG <-> `(1, H, W, 3)` tensors in `[0, 1]`.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::RgbImage;

use crate::error::{Error, Result};

pub fn rgb_to_tensor(img: &RgbImage) -> Result<Tensor> {
    let (w, h) = img.dimensions();
    let data: Vec<f32> = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    Ok(Tensor::from_vec(data, (1, h as usize, w as usize, 3), &Device::Cpu)?)
}

pub fn tensor_to_rgb(x: &Tensor) -> Result<RgbImage> {
    let (b, h, w, c) = x.dims4()?;
    if b != 1 || c != 3 {
        return Err(Error::Input(format!("expected one RGB image, got {:?}", x.dims())));
    }
    let v = x.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let bytes = v
        .into_iter()
        .map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    RgbImage::from_raw(w as u32, h as u32, bytes).ok_or_else(|| Error::Input("image buffer has the wrong size".into()))
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Input(format!("{}: {other}", path.display())),
    })?;
    Ok(img.to_rgb8())
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    rgb_to_tensor(&read_rgb(path)?)
}

pub fn write_image(path: &Path, x: &Tensor) -> Result<()> {
    tensor_to_rgb(x)?.save(path)?;
    Ok(())
}
