//! Image decoding and the geometric primitives shared by every stage.
//!
//! Pixel values are kept as `f32` in `[0, 255]` from decode onward; the only
//! rounding back to integers happens in the encoders.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

const PNG_MAGIC: &[u8] = b"\x89PNG\r\n\x1a\n";

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported bit depth {0} (only 8-bit samples are supported)")]
    UnsupportedBitDepth(u32),
    #[error("truncated data: expected {expected} bytes, found {found}")]
    TruncatedData { expected: usize, found: usize },
    #[error("crop {crop_w}x{crop_h} larger than image {width}x{height}")]
    CropLargerThanImage {
        crop_w: usize,
        crop_h: usize,
        width: usize,
        height: usize,
    },
    #[error("standard deviation must be nonzero")]
    ZeroStd,
    #[error("invalid dimensions {width}x{height}x{channels}")]
    InvalidDimensions {
        width: usize,
        height: usize,
        channels: usize,
    },
    #[error("unsupported image format for {0}")]
    UnknownFormat(String),
    #[error("png encode: {0}")]
    Encode(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Ppm,
    Png,
}

impl ImageFormat {
    /// Sniffs the format from magic bytes.
    pub fn detect(bytes: &[u8]) -> Option<Self> {
        if bytes.starts_with(PNG_MAGIC) {
            Some(Self::Png)
        } else if bytes.starts_with(b"P6") || bytes.starts_with(b"P5") {
            Some(Self::Ppm)
        } else {
            None
        }
    }

    pub fn from_extension(path: &Path) -> Option<Self> {
        let ext = path.extension()?.to_str()?.to_ascii_lowercase();
        match ext.as_str() {
            "png" => Some(Self::Png),
            "ppm" | "pgm" | "pnm" => Some(Self::Ppm),
            _ => None,
        }
    }
}

/// Decoded raster, row-major and channel-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<f32>,
    ) -> Result<Self, ImageError> {
        if width == 0 || height == 0 || !(channels == 1 || channels == 3) {
            return Err(ImageError::InvalidDimensions {
                width,
                height,
                channels,
            });
        }
        let expected = width * height * channels;
        if data.len() != expected {
            return Err(ImageError::TruncatedData {
                expected,
                found: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Image filled with a single value in every channel.
    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
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

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[self.index(x, y, c)]
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = self.index(x, y, 0);
        &self.data[i..i + self.channels]
    }

    /// Converts a 1-channel image to 3 channels by replication (3-channel images are cloned).
    pub fn to_rgb(&self) -> ImageBuffer {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        ImageBuffer {
            width: self.width,
            height: self.height,
            channels: 3,
            data,
        }
    }
}

pub fn decode_image(bytes: &[u8], format: ImageFormat) -> Result<ImageBuffer, ImageError> {
    if bytes.is_empty() {
        return Err(ImageError::MalformedHeader("empty input".into()));
    }
    if ImageFormat::detect(bytes) != Some(format) {
        return Err(ImageError::MalformedHeader(format!(
            "magic bytes do not match {format:?}"
        )));
    }
    match format {
        ImageFormat::Ppm => decode_ppm(bytes),
        ImageFormat::Png => decode_png(bytes),
    }
}

/// Reads a file and decodes it according to its magic bytes.
pub fn read_image(path: &Path) -> Result<ImageBuffer, ImageError> {
    let bytes = fs::read(path)?;
    let format = ImageFormat::detect(&bytes)
        .ok_or_else(|| ImageError::UnknownFormat(path.display().to_string()))?;
    decode_image(&bytes, format)
}

/// Writes PNG or PPM depending on the file extension.
pub fn write_image(img: &ImageBuffer, path: &Path) -> Result<(), ImageError> {
    let bytes = match ImageFormat::from_extension(path) {
        Some(ImageFormat::Png) => encode_png(img)?,
        Some(ImageFormat::Ppm) => encode_ppm(img),
        None => return Err(ImageError::UnknownFormat(path.display().to_string())),
    };
    fs::write(path, bytes)?;
    Ok(())
}

struct PnmHeader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl PnmHeader<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize, ImageError> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ImageError::MalformedHeader(format!("bad {what}")))
    }
}

fn decode_ppm(bytes: &[u8]) -> Result<ImageBuffer, ImageError> {
    let channels = match &bytes[..2] {
        b"P6" => 3,
        b"P5" => 1,
        _ => return Err(ImageError::MalformedHeader("expected P6 or P5".into())),
    };
    let mut header = PnmHeader { bytes, pos: 2 };
    let width = header.number("width")?;
    let height = header.number("height")?;
    let maxval = header.number("maxval")?;
    if maxval == 0 {
        return Err(ImageError::MalformedHeader("maxval 0".into()));
    }
    if maxval > 255 {
        return Err(ImageError::UnsupportedBitDepth(16));
    }
    if width == 0 || height == 0 {
        return Err(ImageError::MalformedHeader("zero dimension".into()));
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(header.pos) {
        Some(b) if b.is_ascii_whitespace() => header.pos += 1,
        _ => return Err(ImageError::MalformedHeader("missing raster separator".into())),
    }
    let expected = width * height * channels;
    let raster = &bytes[header.pos..];
    if raster.len() < expected {
        return Err(ImageError::TruncatedData {
            expected,
            found: raster.len(),
        });
    }
    let data = raster[..expected].iter().map(|&b| f32::from(b)).collect();
    ImageBuffer::new(width, height, channels, data)
}

fn decode_png(bytes: &[u8]) -> Result<ImageBuffer, ImageError> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(png_error)?;
    let info = reader.info();
    let depth = info.bit_depth as u32;
    // palette images carry 8-bit indices into 8-bit RGB entries
    if depth != 8 && info.color_type != png::ColorType::Indexed {
        return Err(ImageError::UnsupportedBitDepth(depth));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| ImageError::MalformedHeader("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let frame = reader.next_frame(&mut buf).map_err(png_error)?;
    if frame.bit_depth != png::BitDepth::Eight {
        return Err(ImageError::UnsupportedBitDepth(frame.bit_depth as u32));
    }
    let (width, height) = (frame.width as usize, frame.height as usize);
    let (src_channels, keep) = match frame.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => {
            return Err(ImageError::MalformedHeader("palette not expanded".into()))
        }
    };
    let mut data = Vec::with_capacity(width * height * keep);
    for row in buf.chunks(frame.line_size).take(height) {
        for px in row[..width * src_channels].chunks_exact(src_channels) {
            data.extend(px[..keep].iter().map(|&b| f32::from(b)));
        }
    }
    ImageBuffer::new(width, height, keep, data)
}

fn png_error(e: png::DecodingError) -> ImageError {
    match e {
        png::DecodingError::IoError(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => {
            ImageError::TruncatedData {
                expected: 0,
                found: 0,
            }
        }
        png::DecodingError::IoError(io) => ImageError::Io(io),
        other => ImageError::MalformedHeader(other.to_string()),
    }
}

/// Rounds half away from zero and clamps into a byte.
pub fn to_u8(v: f32) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Binary PPM (P6) for 3-channel images, PGM (P5) for 1-channel.
pub fn encode_ppm(img: &ImageBuffer) -> Vec<u8> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| to_u8(v)));
    out
}

pub fn encode_png(img: &ImageBuffer) -> Result<Vec<u8>, ImageError> {
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        encoder.set_color(if img.channels == 3 {
            png::ColorType::Rgb
        } else {
            png::ColorType::Grayscale
        });
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder
            .write_header()
            .map_err(|e| ImageError::Encode(e.to_string()))?;
        let bytes: Vec<u8> = img.data.iter().map(|&v| to_u8(v)).collect();
        writer
            .write_image_data(&bytes)
            .map_err(|e| ImageError::Encode(e.to_string()))?;
    }
    Ok(out)
}

/// Source coordinate for destination index `dst` under the half-pixel-center
/// convention, clamped to the valid source range.
#[inline]
fn source_coord(dst: usize, src_len: usize, dst_len: usize) -> f64 {
    let x = (dst as f64 + 0.5) * (src_len as f64 / dst_len as f64) - 0.5;
    x.clamp(0.0, (src_len - 1) as f64)
}

#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    let v = a + (b - a) * t;
    // keep the blend inside [min(a,b), max(a,b)] despite rounding
    v.clamp(a.min(b), a.max(b))
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(
    img: &ImageBuffer,
    out_w: usize,
    out_h: usize,
) -> Result<ImageBuffer, ImageError> {
    if out_w == 0 || out_h == 0 {
        return Err(ImageError::InvalidDimensions {
            width: out_w,
            height: out_h,
            channels: img.channels,
        });
    }
    if out_w == img.width && out_h == img.height {
        return Ok(img.clone());
    }
    let c = img.channels;
    let cols: Vec<(usize, usize, f32)> = (0..out_w)
        .map(|x| {
            let sx = source_coord(x, img.width, out_w);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(img.width - 1);
            (x0, x1, (sx - x0 as f64) as f32)
        })
        .collect();
    let mut data = Vec::with_capacity(out_w * out_h * c);
    for y in 0..out_h {
        let sy = source_coord(y, img.height, out_h);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(img.height - 1);
        let fy = (sy - y0 as f64) as f32;
        for &(x0, x1, fx) in &cols {
            for ch in 0..c {
                let top = lerp(img.get(x0, y0, ch), img.get(x1, y0, ch), fx);
                let bottom = lerp(img.get(x0, y1, ch), img.get(x1, y1, ch), fx);
                data.push(lerp(top, bottom, fy));
            }
        }
    }
    ImageBuffer::new(out_w, out_h, c, data)
}

/// Crops a `cw x ch` window whose origin is `((w - cw) / 2, (h - ch) / 2)`, rounded down.
pub fn center_crop(img: &ImageBuffer, cw: usize, ch: usize) -> Result<ImageBuffer, ImageError> {
    if cw > img.width || ch > img.height || cw == 0 || ch == 0 {
        return Err(ImageError::CropLargerThanImage {
            crop_w: cw,
            crop_h: ch,
            width: img.width,
            height: img.height,
        });
    }
    let x0 = (img.width - cw) / 2;
    let y0 = (img.height - ch) / 2;
    let c = img.channels;
    let mut data = Vec::with_capacity(cw * ch * c);
    for y in y0..y0 + ch {
        let start = img.index(x0, y, 0);
        data.extend_from_slice(&img.data[start..start + cw * c]);
    }
    ImageBuffer::new(cw, ch, c, data)
}

/// `(pixel - mean) / std` with scalar statistics; output shape `(height, width, channels)`.
pub fn normalize(img: &ImageBuffer, mean: f32, std: f32) -> Result<Tensor, ImageError> {
    normalize_per_channel(img, &[mean], &[std])
}

/// Per-channel normalization. Single-element `mean`/`std` broadcast over channels.
pub fn normalize_per_channel(
    img: &ImageBuffer,
    mean: &[f32],
    std: &[f32],
) -> Result<Tensor, ImageError> {
    let c = img.channels;
    let pick = |v: &[f32], ch: usize| if v.len() == 1 { v[0] } else { v[ch] };
    if mean.is_empty() || std.is_empty() {
        return Err(ImageError::MalformedHeader("empty normalization statistics".into()));
    }
    for stats in [mean, std] {
        if stats.len() != 1 && stats.len() != c {
            return Err(ImageError::MalformedHeader(format!(
                "{} normalization entries for {c} channels",
                stats.len()
            )));
        }
    }
    if std.iter().any(|&s| s == 0.0) {
        return Err(ImageError::ZeroStd);
    }
    let data = img
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = i % c;
            (v - pick(mean, ch)) / pick(std, ch)
        })
        .collect();
    Ok(Tensor::new(vec![img.height, img.width, c], data).expect("shape matches image"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gray(width: usize, height: usize, data: &[f32]) -> ImageBuffer {
        ImageBuffer::new(width, height, 1, data.to_vec()).unwrap()
    }

    #[test]
    fn decodes_single_red_pixel() {
        let mut bytes = b"P6\n1 1\n255\n".to_vec();
        bytes.extend([255, 0, 0]);
        let img = decode_image(&bytes, ImageFormat::Ppm).unwrap();
        assert_eq!((img.width(), img.height(), img.channels()), (1, 1, 3));
        assert_eq!(img.data(), &[255.0, 0.0, 0.0]);
    }

    #[test]
    fn decodes_two_pixels_with_comment() {
        let mut bytes = b"P6 # comment\n2 1\n255\n".to_vec();
        bytes.extend([0, 0, 0, 255, 255, 255]);
        let img = decode_image(&bytes, ImageFormat::Ppm).unwrap();
        assert_eq!(img.data(), &[0.0, 0.0, 0.0, 255.0, 255.0, 255.0]);
    }

    #[test]
    fn ppm_errors() {
        let truncated = b"P6\n2 2\n255\n\x00\x01".to_vec();
        assert!(matches!(
            decode_image(&truncated, ImageFormat::Ppm),
            Err(ImageError::TruncatedData { expected: 12, found: 2 })
        ));
        let deep = b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00".to_vec();
        assert!(matches!(
            decode_image(&deep, ImageFormat::Ppm),
            Err(ImageError::UnsupportedBitDepth(16))
        ));
        let garbled = b"P6\nx 1\n255\n".to_vec();
        assert!(matches!(
            decode_image(&garbled, ImageFormat::Ppm),
            Err(ImageError::MalformedHeader(_))
        ));
        assert!(matches!(
            decode_image(b"P6\n1 1\n255\n\x00\x00\x00", ImageFormat::Png),
            Err(ImageError::MalformedHeader(_))
        ));
        assert!(decode_image(&[], ImageFormat::Ppm).is_err());
    }

    #[test]
    fn png_round_trip_gray_and_rgb() {
        for channels in [1, 3] {
            let data: Vec<f32> = (0..4 * 3 * channels).map(|i| (i * 7 % 256) as f32).collect();
            let img = ImageBuffer::new(4, 3, channels, data).unwrap();
            let bytes = encode_png(&img).unwrap();
            assert_eq!(decode_image(&bytes, ImageFormat::Png).unwrap(), img);
        }
    }

    #[test]
    fn resize_identity_is_bitwise() {
        let img = gray(3, 2, &[1.5, 2.0, 9.0, 0.0, 255.0, 17.25]);
        assert_eq!(resize_bilinear(&img, 3, 2).unwrap(), img);
    }

    #[test]
    fn resize_constant_field() {
        let img = ImageBuffer::filled(2, 2, 3, 77.0);
        let out = resize_bilinear(&img, 5, 7).unwrap();
        assert!(out.data().iter().all(|&v| v == 77.0));
    }

    #[test]
    fn resize_two_to_three() {
        // dst 1 maps to src x = (1.5 * 2/3) - 0.5 = 0.5
        let img = gray(2, 1, &[0.0, 255.0]);
        let out = resize_bilinear(&img, 3, 1).unwrap();
        assert_eq!(out.data(), &[0.0, 127.5, 255.0]);
    }

    #[test]
    fn crop_fig6_frame() {
        let mut frame = ImageBuffer::filled(480, 640, 1, 0.0);
        for y in 0..640 {
            for x in 0..480 {
                let i = frame.index(x, y, 0);
                frame.data_mut()[i] = y as f32;
            }
        }
        let out = center_crop(&frame, 480, 480).unwrap();
        assert_eq!(out.get(0, 0, 0), 80.0);
        assert_eq!(out.get(479, 479, 0), 559.0);
        // discarded bands are equal: 80 rows above, 80 rows below
        assert_eq!(80, 640 - 1 - 559);
    }

    #[test]
    fn crop_center_pixel_and_identity() {
        let img = gray(3, 3, &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        assert_eq!(center_crop(&img, 1, 1).unwrap().data(), &[4.0]);
        assert_eq!(center_crop(&img, 3, 3).unwrap(), img);
        assert!(matches!(
            center_crop(&img, 4, 1),
            Err(ImageError::CropLargerThanImage { .. })
        ));
    }

    #[test]
    fn normalize_values() {
        let img = gray(2, 1, &[255.0, 0.0]);
        assert_eq!(normalize(&img, 0.0, 255.0).unwrap().data(), &[1.0, 0.0]);
        assert_eq!(normalize(&img, 127.5, 127.5).unwrap().data()[0], 1.0);
        assert!(matches!(normalize(&img, 0.0, 0.0), Err(ImageError::ZeroStd)));
        assert_eq!(normalize(&img, 0.0, 1.0).unwrap().shape(), &[1, 2, 1]);
    }

    fn arb_image() -> impl Strategy<Value = ImageBuffer> {
        (1usize..8, 1usize..8, prop_oneof![Just(1usize), Just(3usize)]).prop_flat_map(
            |(w, h, c)| {
                proptest::collection::vec(0u8..=255, w * h * c).prop_map(move |v| {
                    ImageBuffer::new(w, h, c, v.into_iter().map(f32::from).collect()).unwrap()
                })
            },
        )
    }

    proptest! {
        #[test]
        fn resize_stays_within_input_range(img in arb_image(), w in 1usize..20, h in 1usize..20) {
            let lo = img.data().iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = img.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let out = resize_bilinear(&img, w, h).unwrap();
            prop_assert!(out.data().iter().all(|&v| v >= lo && v <= hi));
        }

        #[test]
        fn crop_is_idempotent(img in arb_image(), fw in 0.0f64..1.0, fh in 0.0f64..1.0) {
            let cw = 1 + ((img.width() - 1) as f64 * fw) as usize;
            let ch = 1 + ((img.height() - 1) as f64 * fh) as usize;
            let once = center_crop(&img, cw, ch).unwrap();
            prop_assert_eq!(center_crop(&once, cw, ch).unwrap(), once);
        }

        #[test]
        fn unit_normalization_maps_into_unit_interval(img in arb_image()) {
            let t = normalize(&img, 0.0, 255.0).unwrap();
            prop_assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        #[test]
        fn ppm_round_trip(img in arb_image()) {
            let bytes = encode_ppm(&img);
            let back = decode_image(&bytes, ImageFormat::Ppm).unwrap();
            prop_assert_eq!(encode_ppm(&back), bytes);
            prop_assert_eq!(back, img);
        }
    }
}
