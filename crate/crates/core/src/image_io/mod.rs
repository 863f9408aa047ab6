//! RGB images, occlusion masks and dataset manifests.
//!
//! Pixel values are floats in `[0, 1]`, stored row-major and channel-interleaved
//! (`H × W × 3`). Values are treated as linear for all arithmetic.

mod manifest;

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use manifest::{
    load_manifest, manifest_root, write_manifest, ManifestEntry, Split, TripletManifest,
};

/// Smallest side accepted by the network (7×7 patches plus a search margin).
pub const MIN_NETWORK_SIDE: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRGB {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageRGB {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(dim_err!(
                "{height}x{width} RGB image needs {} samples, got {}",
                height * width * 3,
                data.len()
            ));
        }
        Ok(ImageRGB {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        ImageRGB {
            height,
            width,
            data: vec![value; height * width * 3],
        }
    }

    /// Builds an image from `f(y, x, channel)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(f(y, x, c));
                }
            }
        }
        ImageRGB {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * 3 + c] = v;
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        ImageRGB {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn clamped(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// Mean over all pixels and channels.
    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }

    pub fn crop(&self, y0: usize, x0: usize, height: usize, width: usize) -> Result<Self> {
        if y0 + height > self.height || x0 + width > self.width {
            return Err(dim_err!(
                "crop {height}x{width} at ({y0}, {x0}) exceeds {}x{} image",
                self.height,
                self.width
            ));
        }
        Ok(Self::from_fn(height, width, |y, x, c| {
            self.get(y0 + y, x0 + x, c)
        }))
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x, c| {
            self.get(y, self.width - 1 - x, c)
        })
    }

    /// NCHW tensor of shape `[1, 3, H, W]`.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let (h, w) = (self.height, self.width);
        Tensor::from_fn(vec![1, 3, h, w], |i| {
            let c = i / (h * w);
            let p = i % (h * w);
            T::lit(self.data[p * 3 + c] as f64)
        })
    }

    /// Inverse of [`ImageRGB::to_tensor`]; accepts `[1, 3, H, W]` or `[3, H, W]`.
    /// Values are copied unclamped.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let (h, w) = match t.shape() {
            [1, 3, h, w] | [3, h, w] => (*h, *w),
            s => return Err(dim_err!("expected a 3-channel image tensor, got {:?}", s)),
        };
        let src = t.data();
        Ok(Self::from_fn(h, w, |y, x, c| {
            src[(c * h + y) * w + x].as_f64() as f32
        }))
    }

    pub fn ensure_network_size(&self) -> Result<()> {
        if self.height < MIN_NETWORK_SIDE || self.width < MIN_NETWORK_SIDE {
            return Err(dim_err!(
                "image {}x{} is below the {MIN_NETWORK_SIDE}x{MIN_NETWORK_SIDE} network minimum",
                self.height,
                self.width
            ));
        }
        Ok(())
    }
}

/// Quantizes a `[0, 1]` sample to 8 bits: clamp, scale, round half away from zero.
pub fn quantize_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Per-pixel validity map; `true` marks usable (non-occluded) pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub valid: Vec<bool>,
}

impl Mask {
    pub fn all_valid(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            valid: vec![true; height * width],
        }
    }

    /// Loads a single-channel PNG; zero samples are occluded.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let raw = decode_png(path.as_ref())?;
        if raw.channels != 1 && raw.channels != 2 {
            return Err(Error::Unsupported(format!(
                "{}: occlusion mask must be single-channel",
                path.as_ref().display()
            )));
        }
        let valid = (0..raw.height * raw.width)
            .map(|p| raw.samples[p * raw.channels] != 0)
            .collect();
        Ok(Mask {
            height: raw.height,
            width: raw.width,
            valid,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes: Vec<u8> = self
            .valid
            .iter()
            .map(|&v| if v { 255 } else { 0 })
            .collect();
        encode_png(
            path.as_ref(),
            self.width,
            self.height,
            png::ColorType::Grayscale,
            &bytes,
        )
    }
}

/// Loads an 8/16-bit PNG or a binary PPM (P6), chosen by file signature.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageRGB> {
    let path = path.as_ref();
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"\x89PNG") {
        let raw = decode_png_bytes(&bytes, path)?;
        let (h, w, ch) = (raw.height, raw.width, raw.channels);
        let scale = raw.max_value;
        Ok(ImageRGB::from_fn(h, w, |y, x, c| {
            let base = (y * w + x) * ch;
            let idx = if ch >= 3 { base + c } else { base };
            raw.samples[idx] as f32 / scale
        }))
    } else if bytes.starts_with(b"P6") {
        decode_ppm(&bytes, path)
    } else {
        Err(Error::Unsupported(format!(
            "{}: not a PNG or binary PPM (P6) file",
            path.display()
        )))
    }
}

/// Writes an 8-bit image; `.ppm` paths get PPM P6, everything else PNG.
/// Samples are clamped to `[0, 1]` and rounded half away from zero.
pub fn save_image(img: &ImageRGB, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if img.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericDomain(format!(
            "refusing to save non-finite image to {}",
            path.display()
        )));
    }
    let bytes: Vec<u8> = img.data.iter().map(|&v| quantize_u8(v)).collect();
    let is_ppm = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("ppm"));
    if is_ppm {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        write!(w, "P6\n{} {}\n255\n", img.width, img.height)
            .and_then(|_| w.write_all(&bytes))
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    } else {
        encode_png(path, img.width, img.height, png::ColorType::Rgb, &bytes)
    }
}

struct RawImage {
    height: usize,
    width: usize,
    channels: usize,
    max_value: f32,
    samples: Vec<u16>,
}

fn decode_png(path: &Path) -> Result<RawImage> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_png_bytes(&bytes, path)
}

fn decode_png_bytes(bytes: &[u8], path: &Path) -> Result<RawImage> {
    let malformed = |e: png::DecodingError| Error::Malformed(format!("{}: {e}", path.display()));
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(malformed)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Unsupported(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(malformed)?;
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => {
            return Err(Error::Unsupported(format!(
                "{}: indexed PNG",
                path.display()
            )))
        }
    };
    let (height, width) = (info.height as usize, info.width as usize);
    let n = height * width * channels;
    let (samples, max_value) = match info.bit_depth {
        png::BitDepth::Eight => {
            let mut s = Vec::with_capacity(n);
            for row in buf.chunks(info.line_size).take(height) {
                s.extend(row[..width * channels].iter().map(|&b| b as u16));
            }
            (s, 255.0)
        }
        png::BitDepth::Sixteen => {
            let mut s = Vec::with_capacity(n);
            for row in buf.chunks(info.line_size).take(height) {
                s.extend(
                    row[..width * channels * 2]
                        .chunks_exact(2)
                        .map(|b| u16::from_be_bytes([b[0], b[1]])),
                );
            }
            (s, 65535.0)
        }
        d => {
            return Err(Error::Unsupported(format!(
                "{}: bit depth {d:?}",
                path.display()
            )))
        }
    };
    Ok(RawImage {
        height,
        width,
        channels,
        max_value,
        samples,
    })
}

fn encode_png(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    bytes: &[u8],
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e.to_string()));
    let mut writer = enc.write_header().map_err(to_io)?;
    writer.write_image_data(bytes).map_err(to_io)?;
    writer.finish().map_err(to_io)
}

fn decode_ppm(bytes: &[u8], path: &Path) -> Result<ImageRGB> {
    let malformed = |msg: &str| Error::Malformed(format!("{}: {msg}", path.display()));
    let mut pos = 2;
    let mut header = [0usize; 3];
    for field in header.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(malformed("truncated PPM header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| malformed("bad PPM header field"))?;
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(malformed("missing whitespace after PPM header"));
    }
    pos += 1;
    let [width, height, maxval] = header;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Unsupported(format!(
            "{}: PPM maxval {maxval}",
            path.display()
        )));
    }
    let bytes_per = if maxval < 256 { 1 } else { 2 };
    let need = width * height * 3 * bytes_per;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| malformed("truncated PPM raster"))?;
    let scale = maxval as f32;
    let data = if bytes_per == 1 {
        raster.iter().map(|&b| b as f32 / scale).collect()
    } else {
        raster
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]) as f32 / scale)
            .collect()
    };
    ImageRGB::new(height, width, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn write_bytes(dir: &Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, bytes).unwrap();
        p
    }

    #[test]
    fn ppm_bytes_scale_by_255() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = b"P6\n# comment\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 128, 255, 1, 2, 3, 4, 5, 6, 7, 8, 9]);
        let img = load_image(write_bytes(dir.path(), "a.ppm", &bytes)).unwrap();
        assert_eq!(img.dims(), (2, 2));
        assert_eq!(img.get(0, 0, 0), 0.0);
        assert_eq!(img.get(0, 0, 1), 128.0 / 255.0);
        assert_eq!(img.get(0, 0, 2), 1.0);
        assert_eq!(img.get(1, 1, 2), 9.0 / 255.0);
    }

    #[test]
    fn sixteen_bit_ppm_scales_by_65535() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = b"P6 1 1 65535\n".to_vec();
        bytes.extend_from_slice(&[0xff, 0xff, 0x00, 0x00, 0x80, 0x00]);
        let img = load_image(write_bytes(dir.path(), "b.ppm", &bytes)).unwrap();
        assert_eq!(img.data(), &[1.0, 0.0, 32768.0 / 65535.0]);
    }

    #[test]
    fn truncated_files_are_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = b"P6\n4 4\n255\n".to_vec();
        bytes.extend_from_slice(&[1; 20]);
        assert!(matches!(
            load_image(write_bytes(dir.path(), "t.ppm", &bytes)),
            Err(Error::Malformed(_))
        ));

        let img = ImageRGB::filled(8, 8, 0.5);
        let p = dir.path().join("full.png");
        save_image(&img, &p).unwrap();
        let png_bytes = std::fs::read(&p).unwrap();
        let cut = write_bytes(dir.path(), "cut.png", &png_bytes[..png_bytes.len() / 2]);
        assert!(matches!(load_image(cut), Err(Error::Malformed(_))));
    }

    #[test]
    fn missing_and_unknown_files() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_image(dir.path().join("nope.png")),
            Err(Error::Io { .. })
        ));
        let p = write_bytes(dir.path(), "x.bmp", b"BM....");
        assert!(matches!(load_image(p), Err(Error::Unsupported(_))));
    }

    #[test]
    fn save_clamps_and_rounds_half_away() {
        assert_eq!(quantize_u8(1.5), 255);
        assert_eq!(quantize_u8(0.5), 128);
        assert_eq!(quantize_u8(-0.2), 0);
        let dir = tempfile::tempdir().unwrap();
        let img = ImageRGB::new(1, 1, vec![1.5, 0.5, -0.2]).unwrap();
        for name in ["q.png", "q.ppm"] {
            let p = dir.path().join(name);
            save_image(&img, &p).unwrap();
            let back = load_image(&p).unwrap();
            assert_eq!(back.data(), &[1.0, 128.0 / 255.0, 0.0]);
        }
    }

    #[test]
    fn round_trip_error_is_within_half_a_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = ImageRGB::from_fn(17, 23, |_, _, _| rng.random_range(-0.1f32..1.1));
        let dir = tempfile::tempdir().unwrap();
        for name in ["r.png", "r.ppm"] {
            let p = dir.path().join(name);
            save_image(&img, &p).unwrap();
            let back = load_image(&p).unwrap();
            let clamped = img.clamped();
            for (a, b) in back.data().iter().zip(clamped.data()) {
                assert!((a - b).abs() <= 1.0 / 510.0 + 1e-7);
            }
        }
    }

    #[test]
    fn sixteen_bit_png_and_gray_mask() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.png");
        {
            let file = File::create(&p).unwrap();
            let mut enc = png::Encoder::new(BufWriter::new(file), 1, 1);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Sixteen);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&[0xff, 0xff, 0, 0, 0x80, 0]).unwrap();
        }
        assert_eq!(
            load_image(&p).unwrap().data(),
            &[1.0, 0.0, 32768.0 / 65535.0]
        );

        let mask = Mask {
            height: 2,
            width: 2,
            valid: vec![true, false, false, true],
        };
        let mp = dir.path().join("m.png");
        mask.save(&mp).unwrap();
        assert_eq!(Mask::load(&mp).unwrap(), mask);
    }

    #[test]
    fn tensor_conversion_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = ImageRGB::from_fn(5, 7, |_, _, _| rng.random());
        let t = img.to_tensor::<f32>();
        assert_eq!(t.shape(), &[1, 3, 5, 7]);
        assert_eq!(t.data()[2 * 35 + 7 + 3], img.get(1, 3, 2));
        assert_eq!(ImageRGB::from_tensor(&t).unwrap(), img);
    }

    #[test]
    fn flip_is_an_involution_and_crop_checks_bounds() {
        let img = ImageRGB::from_fn(4, 5, |y, x, c| (y * 15 + x * 3 + c) as f32 / 60.0);
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
        assert_eq!(img.flip_horizontal().get(1, 0, 2), img.get(1, 4, 2));
        assert!(img.crop(1, 1, 3, 4).is_ok());
        assert!(matches!(img.crop(2, 0, 3, 5), Err(Error::Dimension(_))));
    }
}
