//! Images and masks on the unit interval.
//!
//! An `Image` is row-major, channel-interleaved f32 with 1 or 3 channels and
//! every value in [0, 1]. Files map byte k to k/255 on read and v to
//! round(v*255) on write. PPM is the P6 8-bit flavor only; PNG is 8-bit
//! gray or RGB (no alpha, no 16-bit). Readers sniff the magic bytes, writers
//! pick the format from the file extension.

use std::fs;
use std::path::Path;

use ::image::codecs::png::PngEncoder;
use ::image::{ExtendedColorType, ImageEncoder};

use crate::d2ft::atomic_write;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Image> {
        if width == 0 || height == 0 {
            return Err(Error::shape(format!("empty image {width}x{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::shape(format!("{channels} channels, want 1 or 3")));
        }
        if data.len() != width * height * channels {
            return Err(Error::shape(format!(
                "{width}x{height}x{channels} wants {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        for (i, &v) in data.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::domain(format!("pixel value {v} at index {i} outside [0, 1]")));
            }
        }
        Ok(Image { width, height, channels, data })
    }

    pub fn constant(width: usize, height: usize, channels: usize, v: f32) -> Result<Image> {
        Image::new(width, height, channels, vec![v; width * height * channels])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Single luma plane as an H x W tensor. Three-channel input uses the
    /// Rec. 601 weights 0.299, 0.587, 0.114; single-channel input is copied.
    pub fn luma(&self) -> Result<Tensor> {
        let mut out = Vec::with_capacity(self.width * self.height);
        match self.channels {
            1 => out.extend_from_slice(&self.data),
            _ => {
                for px in self.data.chunks_exact(3) {
                    let y = 0.299 * f64::from(px[0])
                        + 0.587 * f64::from(px[1])
                        + 0.114 * f64::from(px[2]);
                    out.push(y as f32);
                }
            }
        }
        Tensor::new(&[self.height, self.width], out)
    }

    /// Planar C x H x W tensor view of the pixels.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let (w, h, c) = (self.width, self.height, self.channels);
        let mut out = vec![0.0f32; c * h * w];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[ch * h * w + y * w + x] = self.data[(y * w + x) * c + ch];
                }
            }
        }
        Tensor::new(&[c, h, w], out)
    }

    /// Inverse of `to_tensor`; every value must already be inside [0, 1].
    pub fn from_tensor(t: &Tensor) -> Result<Image> {
        let s = t.shape();
        if s.len() != 3 {
            return Err(Error::shape(format!("image tensor wants rank 3, got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        if c != 1 && c != 3 {
            return Err(Error::shape(format!("{c} channels, want 1 or 3")));
        }
        let mut data = vec![0.0f32; w * h * c];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data[(y * w + x) * c + ch] = t.data()[ch * h * w + y * w + x];
                }
            }
        }
        Image::new(w, h, c, data)
    }

    /// Quantizes to bytes with round-half-up on v*255.
    pub fn to_bytes_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect()
    }

    fn from_bytes_u8(width: usize, height: usize, channels: usize, bytes: &[u8]) -> Result<Image> {
        let data = bytes.iter().map(|&b| f32::from(b) / 255.0).collect();
        Image::new(width, height, channels, data)
    }
}

/// Blending weights in [0, 1], one per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Mask> {
        if width == 0 || height == 0 {
            return Err(Error::shape(format!("empty mask {width}x{height}")));
        }
        if data.len() != width * height {
            return Err(Error::shape(format!(
                "{width}x{height} mask wants {} values, got {}",
                width * height,
                data.len()
            )));
        }
        for (i, &v) in data.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::domain(format!("mask value {v} at index {i} outside [0, 1]")));
            }
        }
        Ok(Mask { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }
}

// ===== file i/o =====

pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let bytes = fs::read(&path)?;
    decode_image(&bytes)
}

/// Sniffs the magic bytes: P6 for PPM, the PNG signature otherwise.
pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    if bytes.starts_with(b"P6") {
        decode_ppm(bytes)
    } else if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        decode_png(bytes)
    } else {
        Err(Error::format("unrecognized image data, want P6 PPM or PNG"))
    }
}

pub fn write_image(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    let bytes = match ext.as_str() {
        "ppm" => encode_ppm(img)?,
        "png" => encode_png(img)?,
        other => {
            return Err(Error::format(format!(
                "unsupported image extension {other:?}, want .ppm or .png"
            )))
        }
    };
    atomic_write(path, &bytes)
}

pub fn encode_ppm(img: &Image) -> Result<Vec<u8>> {
    if img.channels != 3 {
        return Err(Error::format("P6 PPM is three-channel; write gray images as PNG"));
    }
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.to_bytes_u8());
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let mut at = 2usize; // past "P6"
    let mut fields = [0usize; 3];
    for f in &mut fields {
        *f = ppm_field(bytes, &mut at)?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::format(format!("PPM maxval {maxval}, want 255")));
    }
    // One whitespace byte separates the header from the payload.
    at += 1;
    let want = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| Error::format("PPM extents overflow"))?;
    let payload = bytes.get(at..).unwrap_or_default();
    if payload.len() != want {
        return Err(Error::format(format!(
            "PPM payload is {} bytes, {width}x{height} wants {want}",
            payload.len()
        )));
    }
    Image::from_bytes_u8(width, height, 3, payload)
}

/// Reads one decimal header field, skipping whitespace and # comments.
fn ppm_field(bytes: &[u8], at: &mut usize) -> Result<usize> {
    loop {
        match bytes.get(*at) {
            Some(b) if b.is_ascii_whitespace() => *at += 1,
            Some(b'#') => {
                while !matches!(bytes.get(*at), None | Some(b'\n')) {
                    *at += 1;
                }
            }
            Some(b) if b.is_ascii_digit() => break,
            other => return Err(Error::format(format!("bad PPM header byte {other:?}"))),
        }
    }
    let mut v: usize = 0;
    while let Some(b) = bytes.get(*at) {
        if !b.is_ascii_digit() {
            break;
        }
        v = v
            .checked_mul(10)
            .and_then(|v| v.checked_add(usize::from(b - b'0')))
            .ok_or_else(|| Error::format("PPM header field overflow"))?;
        *at += 1;
    }
    Ok(v)
}

pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let color = match img.channels {
        1 => ExtendedColorType::L8,
        _ => ExtendedColorType::Rgb8,
    };
    let mut out = Vec::new();
    PngEncoder::new(&mut out)
        .write_image(&img.to_bytes_u8(), img.width as u32, img.height as u32, color)
        .map_err(|e| Error::format(format!("PNG encode: {e}")))?;
    Ok(out)
}

pub fn decode_png(bytes: &[u8]) -> Result<Image> {
    let dynamic = ::image::load_from_memory(bytes)
        .map_err(|e| Error::format(format!("PNG decode: {e}")))?;
    match dynamic {
        ::image::DynamicImage::ImageLuma8(g) => {
            let (w, h) = (g.width() as usize, g.height() as usize);
            Image::from_bytes_u8(w, h, 1, g.as_raw())
        }
        ::image::DynamicImage::ImageRgb8(rgb) => {
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            Image::from_bytes_u8(w, h, 3, rgb.as_raw())
        }
        other => Err(Error::format(format!(
            "unsupported PNG color {:?}, want 8-bit gray or RGB",
            other.color()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image(w: usize, h: usize) -> Image {
        let mut data = Vec::with_capacity(w * h * 3);
        for y in 0..h {
            for x in 0..w {
                data.push(x as f32 / (w - 1).max(1) as f32);
                data.push(y as f32 / (h - 1).max(1) as f32);
                data.push(((x + y) % 2) as f32);
            }
        }
        Image::new(w, h, 3, data).unwrap()
    }

    #[test]
    fn construction_validates_range_and_count() {
        assert!(matches!(Image::new(2, 2, 3, vec![0.0; 11]), Err(Error::Shape(_))));
        assert!(matches!(Image::new(2, 2, 2, vec![0.0; 8]), Err(Error::Shape(_))));
        assert!(matches!(Image::new(1, 1, 1, vec![1.5]), Err(Error::Domain(_))));
        assert!(matches!(Mask::new(2, 2, vec![0.0, 0.5, 1.0, -0.1]), Err(Error::Domain(_))));
    }

    #[test]
    fn byte_mapping_is_k_over_255() {
        let img = Image::from_bytes_u8(1, 1, 3, &[0, 128, 255]).unwrap();
        assert_eq!(img.data(), &[0.0, 128.0 / 255.0, 1.0]);
        assert_eq!(img.to_bytes_u8(), vec![0, 128, 255]);
    }

    #[test]
    fn ppm_round_trip_is_byte_exact() {
        let img = gradient_image(5, 4);
        let bytes = encode_ppm(&img).unwrap();
        let back = decode_ppm(&bytes).unwrap();
        assert_eq!(encode_ppm(&back).unwrap(), bytes);
        // Quantization error is at most half a step.
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-7);
        }
    }

    #[test]
    fn ppm_header_allows_comments() {
        let bytes = b"P6 # comment\n# another\n2 1\n255\n\xff\x00\x00\x00\xff\x00".to_vec();
        let img = decode_ppm(&bytes).unwrap();
        assert_eq!((img.width(), img.height()), (2, 1));
        assert_eq!(img.get(0, 0, 0), 1.0);
        assert_eq!(img.get(1, 0, 1), 1.0);
    }

    #[test]
    fn ppm_rejects_bad_maxval_and_short_payload() {
        let bad = b"P6\n1 1\n65535\n\x00\x00".to_vec();
        assert!(matches!(decode_ppm(&bad), Err(Error::Format(_))));
        let short = b"P6\n2 2\n255\n\x00\x00\x00".to_vec();
        assert!(matches!(decode_ppm(&short), Err(Error::Format(_))));
    }

    #[test]
    fn png_round_trip_is_byte_exact() {
        let img = gradient_image(7, 3);
        let bytes = encode_png(&img).unwrap();
        let back = decode_png(&bytes).unwrap();
        assert_eq!(back.to_bytes_u8(), img.to_bytes_u8());
        assert_eq!(encode_png(&back).unwrap(), bytes);
    }

    #[test]
    fn png_handles_gray_and_rejects_16_bit() {
        let gray = Image::new(3, 2, 1, vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]).unwrap();
        let bytes = encode_png(&gray).unwrap();
        let back = decode_png(&bytes).unwrap();
        assert_eq!(back.channels(), 1);
        assert_eq!(back.to_bytes_u8(), gray.to_bytes_u8());

        let wide = ::image::DynamicImage::ImageLuma16(
            ::image::ImageBuffer::from_pixel(2, 2, ::image::Luma([1000u16])),
        );
        let mut buf = std::io::Cursor::new(Vec::new());
        wide.write_to(&mut buf, ::image::ImageFormat::Png).unwrap();
        assert!(matches!(decode_png(buf.get_ref()), Err(Error::Format(_))));
    }

    #[test]
    fn decode_sniffs_magic_bytes() {
        let img = gradient_image(2, 2);
        assert_eq!(decode_image(&encode_ppm(&img).unwrap()).unwrap(), {
            decode_ppm(&encode_ppm(&img).unwrap()).unwrap()
        });
        assert!(decode_image(&encode_png(&img).unwrap()).is_ok());
        assert!(matches!(decode_image(b"JUNK"), Err(Error::Format(_))));
    }

    #[test]
    fn tensor_round_trip_preserves_layout() {
        let img = gradient_image(4, 3);
        let t = img.to_tensor().unwrap();
        assert_eq!(t.shape(), &[3, 3, 4]);
        assert_eq!(t.get(&[1, 2, 0]).unwrap(), img.get(0, 2, 1));
        assert_eq!(Image::from_tensor(&t).unwrap(), img);
    }

    #[test]
    fn luma_matches_rec601_weights() {
        let img = Image::new(1, 1, 3, vec![1.0, 0.5, 0.25]).unwrap();
        let y = img.luma().unwrap();
        let want = 0.299 + 0.587 * 0.5 + 0.114 * 0.25;
        assert!((f64::from(y.data()[0]) - want).abs() < 1e-7);

        let gray = Image::new(2, 1, 1, vec![0.3, 0.7]).unwrap();
        assert_eq!(gray.luma().unwrap().data(), &[0.3, 0.7]);
    }

    #[test]
    fn file_round_trip_by_extension() {
        let dir = tempfile::tempdir().unwrap();
        let img = gradient_image(6, 5);
        for name in ["a.ppm", "a.png"] {
            let path = dir.path().join(name);
            write_image(&path, &img).unwrap();
            let back = read_image(&path).unwrap();
            assert_eq!(back.to_bytes_u8(), img.to_bytes_u8());
        }
        assert!(matches!(
            write_image(dir.path().join("a.gif"), &img),
            Err(Error::Format(_))
        ));
    }
}
