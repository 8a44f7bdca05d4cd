//! 8-bit RGB image buffers, PPM/PNG codecs, and conversion to tensors.
//!
//! Binary PPM (`P6`, maxval 255) is read and written by hand so round trips
//! are byte-exact; PNG and JPEG go through the `image` crate.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub data: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != 3 * width * height {
            return Err(Error::shape(format!(
                "image {width}x{height} needs {} samples, got {}",
                3 * width * height,
                data.len()
            )));
        }
        Ok(ImageBuffer { width, height, data })
    }
}

fn decode_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Decode { path: path.to_path_buf(), detail: detail.into() }
}

/// Parses the `P6` header; returns `(width, height, payload offset)`.
fn ppm_header(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(decode_err(path, "not a binary PPM (missing P6 magic)"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(decode_err(path, "truncated PPM header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(decode_err(path, "malformed PPM header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| decode_err(path, "PPM header value out of range"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(decode_err(path, "truncated PPM header"));
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(decode_err(path, format!("unsupported PPM maxval {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(decode_err(path, "PPM has a zero dimension"));
    }
    Ok((w, h, pos + 1))
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<ImageBuffer> {
    let (w, h, offset) = ppm_header(bytes, path)?;
    let need = 3 * w * h;
    let payload = &bytes[offset..];
    if payload.len() < need {
        return Err(decode_err(path, format!("truncated PPM payload: {} of {need} bytes", payload.len())));
    }
    ImageBuffer::new(w, h, payload[..need].to_vec())
}

pub fn encode_ppm(image: &ImageBuffer) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.data);
    out
}

fn is_ppm(path: &Path) -> bool {
    path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("ppm"))
}

pub fn decode_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"P6") {
        return decode_ppm(&bytes, path);
    }
    let img = image::load_from_memory(&bytes).map_err(|e| decode_err(path, e.to_string()))?;
    let rgb = img.to_rgb8();
    ImageBuffer::new(rgb.width() as usize, rgb.height() as usize, rgb.into_raw())
}

/// Writes PPM for `.ppm` paths and uses the extension-selected codec otherwise.
pub fn encode_image(image: &ImageBuffer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if is_ppm(path) {
        return std::fs::write(path, encode_ppm(image)).map_err(|e| Error::io(path, e));
    }
    let buf = image::RgbImage::from_raw(image.width as u32, image.height as u32, image.data.clone())
        .ok_or_else(|| Error::shape("image buffer size mismatch"))?;
    buf.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Config(format!("cannot encode {}: {other}", path.display())),
    })
}

/// `(width, height)` without decoding pixel data where the codec allows.
pub fn image_dimensions(path: impl AsRef<Path>) -> Result<(usize, usize)> {
    let path = path.as_ref();
    if is_ppm(path) {
        use std::io::Read;
        let mut head = Vec::with_capacity(512);
        std::fs::File::open(path)
            .and_then(|f| f.take(512).read_to_end(&mut head))
            .map_err(|e| Error::io(path, e))?;
        let (w, h, _) = ppm_header(&head, path)?;
        return Ok((w, h));
    }
    let (w, h) = image::image_dimensions(path).map_err(|e| decode_err(path, e.to_string()))?;
    Ok((w as usize, h as usize))
}

/// `(1, 3, h, w)` tensor with samples mapped `v ↦ v/255`.
pub fn to_tensor<T: Scalar>(image: &ImageBuffer) -> Tensor<T> {
    let (w, h) = (image.width, image.height);
    let shape = Shape::new(1, 3, h, w).expect("non-empty image");
    let scale = T::from_f64(255.0);
    let mut data = Vec::with_capacity(3 * w * h);
    for c in 0..3 {
        data.extend(image.data.iter().skip(c).step_by(3).map(|&v| T::from_usize(v as usize) / scale));
    }
    Tensor::from_vec(shape, data).expect("sized")
}

/// First sample of an RGB tensor; values are scaled by 255, rounded half away
/// from zero and clamped to `0..=255`.
pub fn from_tensor<T: Scalar>(tensor: &Tensor<T>) -> Result<ImageBuffer> {
    let s = tensor.shape();
    if s.c != 3 {
        return Err(Error::shape(format!("expected an RGB tensor, got {s}")));
    }
    let mut data = Vec::with_capacity(3 * s.plane());
    let planes = [tensor.channel(0, 0), tensor.channel(0, 1), tensor.channel(0, 2)];
    for i in 0..s.plane() {
        for p in &planes {
            let v = (p[i].as_f64() * 255.0).round();
            data.push(if v.is_nan() { 0 } else { v.clamp(0.0, 255.0) as u8 });
        }
    }
    ImageBuffer::new(s.w, s.h, data)
}
