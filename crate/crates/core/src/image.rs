//! 8-bit grayscale word images: PGM decoding, fragment grids, resizing.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const WHITE: u8 = 255;

/// Row-major 8-bit image, 0 = ink, 255 = paper.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "image extent {width}x{height} must be at least 1x1"
            )));
        }
        if pixels.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// A `width×height` image of one value. Panics on a zero extent.
    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        assert!(width > 0 && height > 0, "image extents must be positive");
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }

    /// Copy of the `w×h` window whose top-left corner is `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> GrayImage {
        assert!(
            x + w <= self.width && y + h <= self.height,
            "crop out of bounds"
        );
        let mut pixels = Vec::with_capacity(w * h);
        for row in y..y + h {
            let start = row * self.width + x;
            pixels.extend_from_slice(&self.pixels[start..start + w]);
        }
        GrayImage {
            width: w,
            height: h,
            pixels,
        }
    }

    /// Extends the canvas to `w×h` (never shrinks), filling with `fill` on
    /// the right and bottom.
    pub fn pad_to(&self, w: usize, h: usize, fill: u8) -> GrayImage {
        let (w, h) = (w.max(self.width), h.max(self.height));
        let mut out = GrayImage::filled(w, h, fill);
        out.paste(self, 0, 0);
        out
    }

    /// Writes `src` with its top-left corner at `(x, y)`, clipped to the canvas.
    pub fn paste(&mut self, src: &GrayImage, x: usize, y: usize) {
        for sy in 0..src.height {
            let ty = y + sy;
            if ty >= self.height {
                break;
            }
            let n = src.width.min(self.width.saturating_sub(x));
            let dst = ty * self.width + x;
            self.pixels[dst..dst + n]
                .copy_from_slice(&src.pixels[sy * src.width..sy * src.width + n]);
        }
    }
}

// ------------------------------------------------------------------- PGM

/// Decodes a binary (`P5`) PGM with maxval 255. Header comments (`#` to end
/// of line) are allowed anywhere whitespace is.
pub fn load_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let mut cur = Cursor { bytes, pos: 0 };
    if bytes.get(..2) != Some(b"P5") {
        return Err(Error::Parse {
            offset: 0,
            msg: "expected magic \"P5\"".into(),
        });
    }
    cur.pos = 2;
    let width = cur.header_number("width")?;
    let height = cur.header_number("height")?;
    let maxval_at = cur.pos;
    let maxval = cur.header_number("maxval")?;
    if maxval != 255 {
        return Err(Error::Parse {
            offset: maxval_at,
            msg: format!("unsupported maxval {maxval} (only 255)"),
        });
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => {
            return Err(Error::Parse {
                offset: cur.pos,
                msg: "missing whitespace after maxval".into(),
            })
        }
    }
    if width == 0 || height == 0 {
        return Err(Error::Parse {
            offset: 2,
            msg: format!("zero image extent {width}x{height}"),
        });
    }
    let need = width * height;
    let payload = &bytes[cur.pos..];
    if payload.len() < need {
        return Err(Error::Parse {
            offset: bytes.len(),
            msg: format!(
                "truncated payload: need {need} bytes, found {}",
                payload.len()
            ),
        });
    }
    GrayImage::new(width, height, payload[..need].to_vec())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn header_number(&mut self, what: &str) -> Result<usize> {
        let before = self.pos;
        self.skip_space();
        if self.pos == before {
            return Err(Error::Parse {
                offset: self.pos,
                msg: format!("expected whitespace before {what}"),
            });
        }
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Parse {
                offset: start,
                msg: format!("expected decimal {what}"),
            });
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse {
                offset: start,
                msg: format!("{what} out of range"),
            })
    }
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    std::fs::write(path, encode_pgm(img)).map_err(|e| Error::io(path, e))
}

/// Reads a PGM file, or a PNG when built with the `png` feature.
pub fn read_image(path: &Path) -> Result<GrayImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes)
}

/// Sniffs the format from the leading bytes.
pub fn decode_image(bytes: &[u8]) -> Result<GrayImage> {
    if bytes.starts_with(b"P5") {
        return load_pgm(bytes);
    }
    if bytes.starts_with(b"\x89PNG") {
        #[cfg(feature = "png")]
        return png_io::decode(bytes);
        #[cfg(not(feature = "png"))]
        return Err(Error::Format("PNG input needs the `png` feature".into()));
    }
    Err(Error::Format(
        "unrecognized image format (expected binary PGM)".into(),
    ))
}

#[cfg(feature = "png")]
pub mod png_io {
    //! PNG decoding (any 8-bit colour type, reduced to luma) and RGB encoding.

    use super::GrayImage;
    use crate::error::{Error, Result};

    pub fn decode(bytes: &[u8]) -> Result<GrayImage> {
        let mut dec = png::Decoder::new(std::io::Cursor::new(bytes));
        dec.set_transformations(png::Transformations::normalize_to_color8());
        let mut reader = dec
            .read_info()
            .map_err(|e| Error::Format(format!("png: {e}")))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::Format("png: image too large".into()))?;
        let mut buf = vec![0; size];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::Format(format!("png: {e}")))?;
        let (w, h) = (info.width as usize, info.height as usize);
        let channels = info.color_type.samples();
        let luma = |px: &[u8]| -> u8 {
            match px.len() {
                1 | 2 => px[0],
                _ => (0.299 * px[0] as f32 + 0.587 * px[1] as f32 + 0.114 * px[2] as f32).round()
                    as u8,
            }
        };
        let pixels = buf[..info.buffer_size()]
            .chunks_exact(channels)
            .map(luma)
            .collect();
        GrayImage::new(w, h, pixels)
    }

    pub fn encode_rgb(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc
                .write_header()
                .map_err(|e| Error::Format(format!("png: {e}")))?;
            w.write_image_data(rgb)
                .map_err(|e| Error::Format(format!("png: {e}")))?;
        }
        Ok(out)
    }
}

// -------------------------------------------------------------- fragments

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fragment {
    pub image: GrayImage,
    pub grid_row: usize,
    pub grid_col: usize,
}

/// Extent after white-padding `n` up to the next multiple of `p`.
pub fn padded_extent(n: usize, p: usize) -> usize {
    n.div_ceil(p) * p
}

/// Cuts `image` into a `p×p` grid of equal patches, row-major. The image is
/// first padded with white on the right and bottom to a multiple of `p`.
pub fn extract_fragments(image: &GrayImage, p: usize) -> Result<Vec<Fragment>> {
    if p == 0 {
        return Err(Error::InvalidArgument(
            "fragment grid must be at least 1x1".into(),
        ));
    }
    let (pw, ph) = (
        padded_extent(image.width, p),
        padded_extent(image.height, p),
    );
    let padded = image.pad_to(pw, ph, WHITE);
    let (fw, fh) = (pw / p, ph / p);
    let mut out = Vec::with_capacity(p * p);
    for r in 0..p {
        for c in 0..p {
            out.push(Fragment {
                image: padded.crop(c * fw, r * fh, fw, fh),
                grid_row: r,
                grid_col: c,
            });
        }
    }
    Ok(out)
}

/// Inverse of [`extract_fragments`]: tiles fragments back at their grid
/// positions and crops to `width×height`.
pub fn assemble_fragments(
    fragments: &[Fragment],
    width: usize,
    height: usize,
) -> Result<GrayImage> {
    let first = fragments
        .first()
        .ok_or_else(|| Error::InvalidArgument("no fragments to assemble".into()))?;
    let (fw, fh) = (first.image.width, first.image.height);
    let p = fragments
        .iter()
        .map(|f| f.grid_row.max(f.grid_col) + 1)
        .max()
        .unwrap_or(1);
    let mut canvas = GrayImage::filled(fw * p, fh * p, WHITE);
    for f in fragments {
        canvas.paste(&f.image, f.grid_col * fw, f.grid_row * fh);
    }
    if width > canvas.width || height > canvas.height {
        return Err(Error::InvalidArgument(format!(
            "{width}x{height} exceeds the assembled {}x{}",
            canvas.width, canvas.height
        )));
    }
    Ok(canvas.crop(0, 0, width, height))
}

// ----------------------------------------------------------------- resize

/// Bilinear resampling of a single-channel `f32` plane with pixel-centre
/// alignment. Equal sizes reproduce the input exactly.
pub fn resize_bilinear(src: &[f32], w: usize, h: usize, nw: usize, nh: usize) -> Vec<f32> {
    let xs = sample_positions(w, nw);
    let ys = sample_positions(h, nh);
    let mut out = Vec::with_capacity(nw * nh);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

fn sample_positions(n: usize, m: usize) -> Vec<(usize, usize, f32)> {
    let scale = n as f64 / m as f64;
    (0..m)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, (s - i0 as f64) as f32)
        })
        .collect()
}

/// Size of a `w×h` image scaled so its larger side is `side`, aspect kept
/// and the other side rounded (at least 1). [`resize_with_padding`] centres
/// content of this size at `((side - nw) / 2, (side - nh) / 2)`.
pub fn fit_extent(w: usize, h: usize, side: usize) -> (usize, usize) {
    let long = w.max(h) as f64;
    let fit = |n: usize| ((n as f64 * side as f64 / long).round() as usize).clamp(1, side);
    if w >= h {
        (side, fit(h))
    } else {
        (fit(w), side)
    }
}

/// Separable Gaussian blur of an `f32` plane; borders replicate the edge.
/// The kernel spans `±ceil(3σ)`; `σ <= 0` returns the input.
pub fn gaussian_blur(src: &[f32], w: usize, h: usize, sigma: f32) -> Vec<f32> {
    if sigma <= 0.0 {
        return src.to_vec();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f32> = (-r..=r)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let pass =
        |src: &[f32], len: usize, lines: usize, at: &dyn Fn(usize, usize) -> usize| -> Vec<f32> {
            let mut out = vec![0f32; src.len()];
            for line in 0..lines {
                for i in 0..len {
                    let mut acc = 0f32;
                    for (k, &kv) in kernel.iter().enumerate() {
                        let j = (i as isize + k as isize - r).clamp(0, len as isize - 1) as usize;
                        acc += kv * src[at(line, j)];
                    }
                    out[at(line, i)] = acc;
                }
            }
            out
        };
    let rows = pass(src, w, h, &|y, x| y * w + x);
    pass(&rows, h, w, &|x, y| y * w + x)
}

/// Scales so the larger side equals `side` (aspect kept, the other side
/// rounded, at least 1) and centres the result on a white `side×side`
/// canvas.
pub fn resize_with_padding(img: &GrayImage, side: usize) -> Result<GrayImage> {
    if side == 0 {
        return Err(Error::InvalidArgument(
            "resize side must be at least 1".into(),
        ));
    }
    let (w, h) = (img.width, img.height);
    let (nw, nh) = fit_extent(w, h, side);
    let src: Vec<f32> = img.pixels.iter().map(|&p| p as f32).collect();
    let scaled = resize_bilinear(&src, w, h, nw, nh);
    let content = GrayImage {
        width: nw,
        height: nh,
        pixels: scaled
            .iter()
            .map(|&v| v.round().clamp(0.0, 255.0) as u8)
            .collect(),
    };
    let mut canvas = GrayImage::filled(side, side, WHITE);
    canvas.paste(&content, (side - nw) / 2, (side - nh) / 2);
    Ok(canvas)
}

/// `[1, h, w, 1]` tensor of `pixel / 255`.
pub fn to_tensor(img: &GrayImage) -> Tensor {
    let data = img.pixels.iter().map(|&p| p as f32 / 255.0).collect();
    Tensor::new(&[1, img.height, img.width, 1], data).expect("pixel count matches extents")
}

/// Fragments of `img` resized to `side` and stacked as `[p², side, side, 1]`.
pub fn word_to_batch(img: &GrayImage, p: usize, side: usize) -> Result<Tensor> {
    let frags = extract_fragments(img, p)?;
    let tensors = frags
        .iter()
        .map(|f| resize_with_padding(&f.image, side).map(|r| to_tensor(&r)))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&tensors)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_and_paste_round_trip() {
        let img = GrayImage::new(3, 2, vec![1, 2, 3, 4, 5, 6]).unwrap();
        let c = img.crop(1, 0, 2, 2);
        assert_eq!(c.pixels(), &[2, 3, 5, 6]);
        let mut blank = GrayImage::filled(3, 2, 0);
        blank.paste(&c, 1, 0);
        assert_eq!(blank.pixels(), &[0, 2, 3, 0, 5, 6]);
    }

    #[test]
    fn bilinear_identity_at_equal_size() {
        let src: Vec<f32> = (0..12).map(|v| v as f32).collect();
        assert_eq!(resize_bilinear(&src, 4, 3, 4, 3), src);
    }
}
