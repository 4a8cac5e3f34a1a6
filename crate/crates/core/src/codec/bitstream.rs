use super::model::{AnchorModel, HardForward, LayerPair, DOWNSAMPLING};
use crate::entropy::{
    build_coding_table, conditional_tables, range_decode, range_encode, CodingTable, ScaleTable, DEFAULT_PRECISION,
};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::quantizer::{interpolate, StanhLayer};

pub const BITSTREAM_MAGIC: &[u8; 4] = b"SVRC";
pub const BITSTREAM_VERSION: u8 = 1;
/// Fixed header size; each payload adds a 4-byte length prefix.
pub const HEADER_LEN: usize = 24;

/// Which quantizers a bitstream was coded with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSource {
    Anchor,
    Derivation(u16),
    /// Endpoints are derivation ids (0 names the anchor's own layers); `rho`
    /// is fixed point over 65535.
    Interpolation { from: u16, to: u16, rho: u16 },
}

impl LayerSource {
    fn mode(&self) -> u8 {
        match self {
            Self::Anchor => 0,
            Self::Derivation(_) => 1,
            Self::Interpolation { .. } => 2,
        }
    }
}

/// Nearest fixed-point weight for an interpolation factor in `[0, 1]`.
pub fn quantize_rho(rho: f64) -> Result<u16> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::InvalidArgument(format!("rho {rho} outside [0, 1]")));
    }
    Ok((rho * 65535.0).round() as u16)
}

pub fn rho_value(fixed: u16) -> f64 {
    fixed as f64 / 65535.0
}

/// Interpolated layers exactly as a decoder rebuilds them from the header.
pub fn interpolate_pair(first: &LayerPair, second: &LayerPair, rho: u16) -> Result<LayerPair> {
    let r = rho_value(rho);
    Ok(LayerPair {
        main: interpolate(&first.main, &second.main, r)?,
        hyper: interpolate(&first.hyper, &second.hyper, r)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub anchor_id: u16,
    pub source: LayerSource,
    pub width: u32,
    pub height: u32,
    pub pad_right: u8,
    pub pad_bottom: u8,
}

impl Header {
    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let (a, b, rho) = match self.source {
            LayerSource::Anchor => (0, 0, 0),
            LayerSource::Derivation(d) => (d, 0, 0),
            LayerSource::Interpolation { from, to, rho } => (from, to, rho),
        };
        let mut out = [0u8; HEADER_LEN];
        out[..4].copy_from_slice(BITSTREAM_MAGIC);
        out[4] = BITSTREAM_VERSION;
        out[5..7].copy_from_slice(&self.anchor_id.to_le_bytes());
        out[7] = self.source.mode();
        out[8..10].copy_from_slice(&a.to_le_bytes());
        out[10..12].copy_from_slice(&b.to_le_bytes());
        out[12..14].copy_from_slice(&rho.to_le_bytes());
        out[14..18].copy_from_slice(&self.width.to_le_bytes());
        out[18..22].copy_from_slice(&self.height.to_le_bytes());
        out[22] = self.pad_right;
        out[23] = self.pad_bottom;
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated(format!("bitstream header needs {HEADER_LEN} bytes")));
        }
        if &bytes[..4] != BITSTREAM_MAGIC {
            return Err(Error::BadMagic { expected: "SVRC" });
        }
        if bytes[4] != BITSTREAM_VERSION {
            return Err(Error::Version {
                found: bytes[4],
                expected: BITSTREAM_VERSION,
            });
        }
        let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let (a, b, rho) = (u16_at(8), u16_at(10), u16_at(12));
        let source = match bytes[7] {
            0 => LayerSource::Anchor,
            1 => LayerSource::Derivation(a),
            2 => LayerSource::Interpolation { from: a, to: b, rho },
            m => return Err(Error::Corrupted(format!("unknown layer mode {m}"))),
        };
        let header = Self {
            anchor_id: u16_at(5),
            source,
            width: u32_at(14),
            height: u32_at(18),
            pad_right: bytes[22],
            pad_bottom: bytes[23],
        };
        if header.width == 0 || header.height == 0 {
            return Err(Error::Corrupted("zero image extent".into()));
        }
        let aligned = |n: u32, pad: u8| (pad as usize) < DOWNSAMPLING && (n as usize + pad as usize).is_multiple_of(DOWNSAMPLING);
        if !aligned(header.width, header.pad_right) || !aligned(header.height, header.pad_bottom) {
            return Err(Error::Corrupted("padding does not align the image".into()));
        }
        Ok(header)
    }

    pub fn padded_size(&self) -> (usize, usize) {
        (
            self.height as usize + self.pad_bottom as usize,
            self.width as usize + self.pad_right as usize,
        )
    }
}

/// A compressed image: header and the two range-coded payloads.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitstream {
    pub header: Header,
    pub hyper: Vec<u8>,
    pub main: Vec<u8>,
}

impl Bitstream {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len());
        out.extend_from_slice(&self.header.to_bytes());
        for payload in [&self.hyper, &self.main] {
            out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
            out.extend_from_slice(payload);
        }
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let header = Header::parse(bytes)?;
        let mut pos = HEADER_LEN;
        let mut take = || -> Result<Vec<u8>> {
            let len_bytes = bytes
                .get(pos..pos + 4)
                .ok_or_else(|| Error::Truncated("payload length prefix".into()))?;
            let len = u32::from_le_bytes(len_bytes.try_into().expect("4 bytes")) as usize;
            pos += 4;
            let payload = bytes
                .get(pos..pos + len)
                .ok_or_else(|| Error::Truncated(format!("payload of {len} bytes")))?;
            pos += len;
            Ok(payload.to_vec())
        };
        let hyper = take()?;
        let main = take()?;
        if pos != bytes.len() {
            return Err(Error::Corrupted(format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(Self { header, hyper, main })
    }

    /// Total serialized size in bytes.
    pub fn len(&self) -> usize {
        HEADER_LEN + 8 + self.hyper.len() + self.main.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn bpp(&self) -> f64 {
        bpp(self.len(), self.header.width as usize, self.header.height as usize)
    }
}

/// `8 * bytes / (width * height)`.
pub fn bpp(bytes: usize, width: usize, height: usize) -> f64 {
    8.0 * bytes as f64 / (width * height) as f64
}

fn mirror(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let j = i % period;
    if j < n {
        j
    } else {
        period - j
    }
}

/// Extends an `(N, C, H, W)` tensor on the right and bottom by mirroring
/// without repeating the edge.
pub fn pad_reflect(x: &Tensor, pad_bottom: usize, pad_right: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (ph, pw) = (h + pad_bottom, w + pad_right);
    let mut data = Vec::with_capacity(n * c * ph * pw);
    for map in x.data().chunks_exact(h * w) {
        for y in 0..ph {
            let row = &map[mirror(y, h) * w..][..w];
            data.extend((0..pw).map(|xx| row[mirror(xx, w)]));
        }
    }
    Tensor::new(vec![n, c, ph, pw], data)
}

/// Top-left `(h, w)` window of every map, clamped to `[0, 1]`.
pub(crate) fn crop_clamp(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (n, c, ph, pw) = x.dims4()?;
    let mut data = Vec::with_capacity(n * c * h * w);
    for map in x.data().chunks_exact(ph * pw) {
        for y in 0..h {
            data.extend(map[y * pw..y * pw + w].iter().map(|v| v.clamp(0.0, 1.0)));
        }
    }
    Tensor::new(vec![n, c, h, w], data)
}

pub(crate) fn padding_for(x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    if n != 1 || c != 3 {
        return Err(Error::Shape(format!("expected one RGB image (1, 3, H, W), got {:?}", x.shape())));
    }
    let up = |v: usize| v.div_ceil(DOWNSAMPLING) * DOWNSAMPLING - v;
    Ok((h, w, up(h), up(w)))
}

/// Hard path of one `(1, 3, H, W)` image after alignment padding.
pub fn analyze_image(x: &Tensor, anchor: &AnchorModel, layers: &LayerPair) -> Result<HardForward> {
    let (_, _, pb, pr) = padding_for(x)?;
    anchor.hard_forward(&pad_reflect(x, pb, pr)?, layers)
}

/// Unquantized `(y, z)` of one image after alignment padding.
pub fn image_latents(x: &Tensor, anchor: &AnchorModel) -> Result<(Tensor, Tensor)> {
    let (_, _, pb, pr) = padding_for(x)?;
    anchor.latents(&pad_reflect(x, pb, pr)?)
}

/// The reconstruction the decoder will produce, computed without coding.
pub fn reconstruct(x: &Tensor, anchor: &AnchorModel, layers: &LayerPair) -> Result<Tensor> {
    let (h, w, _, _) = padding_for(x)?;
    crop_clamp(&analyze_image(x, anchor, layers)?.x_hat, h, w)
}

/// Estimated bits `(hyper, main)` of an image under the training densities.
pub fn estimate_image_bits(x: &Tensor, anchor: &AnchorModel, layers: &LayerPair) -> Result<(f64, f64)> {
    anchor.estimate_bits(&analyze_image(x, anchor, layers)?, layers)
}

/// One table per hyper channel, from the factorized prior.
fn hyper_tables(anchor: &AnchorModel, hyper: &StanhLayer) -> Result<Vec<CodingTable>> {
    let grid = hyper.grid();
    (0..anchor.config.n)
        .map(|ch| build_coding_table(&anchor.prior.level_probabilities(ch, &grid), DEFAULT_PRECISION))
        .collect()
}

fn per_element(tables: &[CodingTable], len: usize, plane: usize) -> Vec<&CodingTable> {
    (0..len).map(|j| &tables[(j / plane) % tables.len()]).collect()
}

fn encode_with(symbols: &[usize], tables: &[&CodingTable]) -> Result<Vec<u8>> {
    let mut enc = crate::entropy::RangeEncoder::new();
    for (&s, t) in symbols.iter().zip(tables) {
        enc.encode(s, t)?;
    }
    Ok(enc.finish())
}

fn decode_with_tables(bytes: &[u8], tables: &[&CodingTable]) -> Result<Vec<usize>> {
    let mut dec = crate::entropy::RangeDecoder::new(bytes)?;
    tables.iter().map(|t| dec.decode(t)).collect()
}

/// Compresses one `(1, 3, H, W)` image in `[0, 1]` with the given
/// quantizers. `source` is recorded so a decoder can find the same layers.
pub fn encode_image(
    x: &Tensor,
    anchor: &AnchorModel,
    anchor_id: u16,
    source: LayerSource,
    layers: &LayerPair,
) -> Result<Bitstream> {
    let (h, w, pb, pr) = padding_for(x)?;
    let fwd = anchor.hard_forward(&pad_reflect(x, pb, pr)?, layers)?;

    let zt = hyper_tables(anchor, &layers.hyper)?;
    let (_, _, zh, zw) = fwd.z_hat.dims4()?;
    let hyper = encode_with(&fwd.z_idx, &per_element(&zt, fwd.z_idx.len(), zh * zw))?;

    let yt = conditional_tables(&fwd.mu, &fwd.sigma, &layers.main.grid(), &ScaleTable::default(), DEFAULT_PRECISION)?;
    let main = range_encode(&fwd.y_idx, &yt)?;

    Ok(Bitstream {
        header: Header {
            anchor_id,
            source,
            width: w as u32,
            height: h as u32,
            pad_right: pr as u8,
            pad_bottom: pb as u8,
        },
        hyper,
        main,
    })
}

/// Reconstructs an image from a bitstream with explicitly supplied layers.
pub fn decode_with_layers(stream: &Bitstream, anchor: &AnchorModel, layers: &LayerPair) -> Result<Tensor> {
    anchor.check_layers(layers)?;
    let (ph, pw) = stream.header.padded_size();
    let n = anchor.config.n;
    let (zh, zw) = (ph / DOWNSAMPLING, pw / DOWNSAMPLING);
    let zt = hyper_tables(anchor, &layers.hyper)?;
    let z_len = n * zh * zw;
    let z_idx = decode_with_tables(&stream.hyper, &per_element(&zt, z_len, zh * zw))?;
    let hyper_levels = layers.hyper.levels();
    let z_hat = Tensor::new(vec![1, n, zh, zw], z_idx.iter().map(|&k| hyper_levels[k]).collect())?;

    let (mu, sigma) = anchor.hyper_synthesis(&z_hat)?;
    let yt = conditional_tables(&mu, &sigma, &layers.main.grid(), &ScaleTable::default(), DEFAULT_PRECISION)?;
    let y_idx = range_decode(&stream.main, &yt, yt.len())?;
    let main_levels = layers.main.levels();
    let y_hat = Tensor::new(mu.shape().to_vec(), y_idx.iter().map(|&k| main_levels[k]).collect())?;

    let x_hat = anchor.synthesize(&y_hat)?;
    crop_clamp(&x_hat, stream.header.height as usize, stream.header.width as usize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::ModelConfig;

    #[test]
    fn header_round_trip() {
        let h = Header {
            anchor_id: 513,
            source: LayerSource::Interpolation { from: 11, to: 12, rho: 32768 },
            width: 100,
            height: 70,
            pad_right: 28,
            pad_bottom: 58,
        };
        let bytes = h.to_bytes();
        assert_eq!(bytes.len(), HEADER_LEN);
        assert_eq!(Header::parse(&bytes).unwrap(), h);
        let mut bad = bytes;
        bad[7] = 9;
        assert!(Header::parse(&bad).is_err());
    }

    #[test]
    fn reflect_padding() {
        let x = Tensor::new(vec![1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let p = pad_reflect(&x, 1, 4).unwrap();
        assert_eq!(p.shape(), &[1, 1, 2, 7]);
        assert_eq!(&p.data()[..7], &[1.0, 2.0, 3.0, 2.0, 1.0, 2.0, 3.0]);
        assert_eq!(&p.data()[7..], &p.data()[..7]);
    }

    #[test]
    fn bpp_arithmetic() {
        assert!((bpp(1000, 100, 100) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn small_model_round_trip() {
        let cfg = ModelConfig {
            m: 4,
            n: 3,
            levels_main: 9,
            levels_hyper: 7,
            init_lo: -4.0,
            init_hi: 4.0,
        };
        let anchor = AnchorModel::init(cfg, 0.01, 9).unwrap();
        let x = crate::image::synthetic_image(2, 70, 40).to_tensor();
        let s = encode_image(&x, &anchor, 1, LayerSource::Anchor, &anchor.layers).unwrap();
        let parsed = Bitstream::parse(&s.to_bytes()).unwrap();
        assert_eq!(parsed, s);
        let rec = decode_with_layers(&parsed, &anchor, &anchor.layers).unwrap();
        assert_eq!(rec, reconstruct(&x, &anchor, &anchor.layers).unwrap());
        assert_eq!(rec.shape(), &[1, 3, 40, 70]);
    }
}
