//! Binary PPM images, procedural test images and a random-crop patch source.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// 8-bit RGB image, samples interleaved row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PpmImage {
    width: usize,
    height: usize,
    samples: Vec<u8>,
}

impl PpmImage {
    pub fn new(width: usize, height: usize, samples: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Image(format!("empty image {width}x{height}")));
        }
        if samples.len() != 3 * width * height {
            return Err(Error::Image(format!(
                "{width}x{height} RGB needs {} samples, got {}",
                3 * width * height,
                samples.len()
            )));
        }
        Ok(Self {
            width,
            height,
            samples,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn samples(&self) -> &[u8] {
        &self.samples
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let mut header = HeaderReader { bytes, pos: 0 };
        if header.token()? != b"P6" {
            return Err(Error::Image("not a binary PPM (magic P6)".into()));
        }
        let width = header.number()?;
        let height = header.number()?;
        let maxval = header.number()?;
        if maxval != 255 {
            return Err(Error::Image(format!("maxval must be 255, found {maxval}")));
        }
        // exactly one whitespace byte separates the header from the samples
        let start = header.pos + 1;
        let needed = 3 * width * height;
        if start > bytes.len() || bytes.len() - start < needed {
            return Err(Error::Image(format!("truncated PPM payload: {width}x{height} needs {needed} bytes")));
        }
        Self::new(width, height, bytes[start..start + needed].to_vec())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.samples);
        out
    }

    /// `(1, 3, H, W)` tensor with samples scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let plane = self.width * self.height;
        let mut data = vec![0.0; 3 * plane];
        for (i, px) in self.samples.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + i] = px[c] as f64 / 255.0;
            }
        }
        Tensor::new(vec![1, 3, self.height, self.width], data).expect("consistent shape")
    }

    /// Rounds a `(1, 3, H, W)` tensor in `[0, 1]` back to 8-bit samples.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (n, c, h, w) = t.dims4()?;
        if n != 1 || c != 3 {
            return Err(Error::Shape(format!("expected (1, 3, H, W), got {:?}", t.shape())));
        }
        let plane = h * w;
        let mut samples = vec![0u8; 3 * plane];
        for i in 0..plane {
            for ch in 0..3 {
                let v = t.data()[ch * plane + i];
                samples[3 * i + ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        Self::new(w, h, samples)
    }
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<&[u8]> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(|b| !b.is_ascii_whitespace() && *b != b'#') {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Image("truncated PPM header".into()));
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self) -> Result<usize> {
        let tok = self.token()?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .filter(|&n: &usize| n > 0)
            .ok_or_else(|| Error::Image(format!("bad PPM header field {:?}", String::from_utf8_lossy(tok))))
    }
}

pub fn load_ppm(path: impl AsRef<Path>) -> Result<PpmImage> {
    PpmImage::parse(&fs::read(path)?)
}

pub fn write_ppm(image: &PpmImage, path: impl AsRef<Path>) -> Result<()> {
    crate::codec::write_atomic(path.as_ref(), &image.to_bytes())
}

/// Deterministic procedural image: smooth colour gradients, value noise,
/// overlapping shapes, striped texture and mild sensor noise.
pub fn synthetic_image(seed: u64, width: usize, height: usize) -> PpmImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rgb = vec![[0.0f64; 3]; width * height];
    let c0: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.1..0.9));
    let c1: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.1..0.9));
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    let noise = ValueNoise::new(&mut rng, 24.0);
    let span = (width + height) as f64;
    for y in 0..height {
        for x in 0..width {
            let t = ((x as f64 * ca + y as f64 * sa) / span + 0.5).clamp(0.0, 1.0);
            let n = noise.at(x as f64, y as f64) - 0.5;
            rgb[y * width + x] = std::array::from_fn(|c| c0[c] * (1.0 - t) + c1[c] * t + 0.25 * n);
        }
    }
    let shapes = rng.gen_range(6..14);
    for _ in 0..shapes {
        let color: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
        let cx = rng.gen_range(0.0..width as f64);
        let cy = rng.gen_range(0.0..height as f64);
        let rx = rng.gen_range(0.05..0.35) * width as f64;
        let ry = rng.gen_range(0.05..0.35) * height as f64;
        let ellipse = rng.gen_bool(0.6);
        let stripes = rng.gen_bool(0.3).then(|| (rng.gen_range(2.0..9.0), rng.gen_range(0.0..std::f64::consts::PI)));
        let alpha = rng.gen_range(0.6..1.0);
        for y in 0..height {
            for x in 0..width {
                let dx = (x as f64 - cx) / rx;
                let dy = (y as f64 - cy) / ry;
                let d = if ellipse { (dx * dx + dy * dy).sqrt() } else { dx.abs().max(dy.abs()) };
                // one-pixel soft edge
                let cover = ((1.0 - d) * rx.min(ry)).clamp(0.0, 1.0) * alpha;
                if cover <= 0.0 {
                    continue;
                }
                let shade = stripes.map_or(1.0, |(period, phase): (f64, f64)| {
                    0.8 + 0.2 * ((x as f64 * phase.cos() + y as f64 * phase.sin()) / period).sin()
                });
                let px = &mut rgb[y * width + x];
                for c in 0..3 {
                    px[c] = px[c] * (1.0 - cover) + color[c] * shade * cover;
                }
            }
        }
    }
    let samples = rgb
        .iter()
        .flat_map(|px| *px)
        .map(|v| {
            let jitter = rng.gen_range(-1.5..1.5);
            (v.clamp(0.0, 1.0) * 255.0 + jitter).round().clamp(0.0, 255.0) as u8
        })
        .collect();
    PpmImage::new(width, height, samples).expect("consistent size")
}

/// Bilinearly interpolated lattice noise in `[0, 1]`.
struct ValueNoise {
    cell: f64,
    cols: usize,
    lattice: Vec<f64>,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, cell: f64) -> Self {
        let cols = 64;
        Self {
            cell,
            cols,
            lattice: (0..cols * cols).map(|_| rng.gen()).collect(),
        }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let (gx, gy) = (x / self.cell, y / self.cell);
        let (ix, iy) = (gx.floor() as usize, gy.floor() as usize);
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        let (fx, fy) = (smooth(gx.fract()), smooth(gy.fract()));
        let v = |i: usize, j: usize| self.lattice[(j % self.cols) * self.cols + i % self.cols];
        let top = v(ix, iy) * (1.0 - fx) + v(ix + 1, iy) * fx;
        let bottom = v(ix, iy + 1) * (1.0 - fx) + v(ix + 1, iy + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

/// Images that training draws random square crops from.
#[derive(Clone, Debug)]
pub struct PatchSource {
    images: Vec<Tensor>,
}

impl PatchSource {
    pub fn new(images: Vec<PpmImage>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::InvalidArgument("no training images".into()));
        }
        Ok(Self {
            images: images.iter().map(PpmImage::to_tensor).collect(),
        })
    }

    /// Every `.ppm` file of a directory, in file-name order.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let mut paths: Vec<_> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")))
            .collect();
        paths.sort();
        Self::new(paths.iter().map(load_ppm).collect::<Result<_>>()?)
    }

    /// `count` procedural images of the given size, seeds `seed..seed+count`.
    pub fn synthetic(seed: u64, count: usize, width: usize, height: usize) -> Result<Self> {
        Self::new((0..count as u64).map(|i| synthetic_image(seed + i, width, height)).collect())
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `(batch, 3, patch, patch)` random crops.
    pub fn sample(&self, rng: &mut ChaCha8Rng, batch: usize, patch: usize) -> Result<Tensor> {
        let plane = patch * patch;
        let mut data = Vec::with_capacity(batch * 3 * plane);
        for _ in 0..batch {
            let img = &self.images[rng.gen_range(0..self.images.len())];
            let (_, _, h, w) = img.dims4()?;
            if h < patch || w < patch {
                return Err(Error::Image(format!("{w}x{h} image smaller than {patch}px patch")));
            }
            let y0 = rng.gen_range(0..=h - patch);
            let x0 = rng.gen_range(0..=w - patch);
            for c in 0..3 {
                for y in 0..patch {
                    let row = (c * h + y0 + y) * w + x0;
                    data.extend_from_slice(&img.data()[row..row + patch]);
                }
            }
        }
        Tensor::new(vec![batch, 3, patch, patch], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_with_comment() {
        let mut bytes = b"P6\n# made by hand\n2 1\n# another\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        let img = PpmImage::parse(&bytes).unwrap();
        assert_eq!((img.width(), img.height()), (2, 1));
        assert_eq!(img.samples(), &[1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn sixteen_bit_rejected() {
        let err = PpmImage::parse(b"P6 1 1 65535\n\0\0\0\0\0\0").unwrap_err();
        assert!(err.to_string().contains("maxval must be 255"), "{err}");
    }

    #[test]
    fn bad_magic_and_truncation() {
        assert!(PpmImage::parse(b"P3 1 1 255\n1 2 3").is_err());
        assert!(PpmImage::parse(b"P6 2 2 255\n\0\0\0").is_err());
        assert!(PpmImage::parse(b"P6 2").is_err());
    }

    #[test]
    fn byte_round_trip() {
        let img = synthetic_image(5, 17, 9);
        let back = PpmImage::parse(&img.to_bytes()).unwrap();
        assert_eq!(back, img);
        assert_eq!(PpmImage::from_tensor(&img.to_tensor()).unwrap(), img);
    }

    #[test]
    fn synthetic_is_deterministic() {
        assert_eq!(synthetic_image(3, 32, 32), synthetic_image(3, 32, 32));
        assert_ne!(synthetic_image(3, 32, 32), synthetic_image(4, 32, 32));
    }

    #[test]
    fn patches_have_requested_shape() {
        let src = PatchSource::synthetic(1, 2, 80, 70).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = src.sample(&mut rng, 3, 64).unwrap();
        assert_eq!(p.shape(), &[3, 3, 64, 64]);
        assert!(src.sample(&mut rng, 1, 128).is_err());
    }
}
