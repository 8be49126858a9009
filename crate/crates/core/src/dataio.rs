//! Dataset manifests, image codecs (8-bit PNG, binary PGM/PPM), the
//! checkpoint format and prediction output.
//!
//! Checkpoint layout, little-endian throughout:
//!
//! ```text
//! "WMKA"  u32 version=1  u32 record count
//! per record: u32 name length, UTF-8 name, u8 dtype (0 = f32), u8 ndim,
//!             ndim × u32 dims, raw f32 payload
//! u64 FNV-1a of every preceding byte
//! ```
//!
//! Metadata (step counters, optimizer settings, the config echo) is stored
//! as zero-element records (ndim 1, dims [0]) whose name is `meta:key=value`.

use std::fs;
use std::hash::Hasher;
use std::io::{BufReader, Cursor, Write};
use std::path::{Path, PathBuf};

use fnv::FnvHasher;
use indexmap::IndexMap;

use crate::autograd::{AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::preprocess::ImageU8;
use crate::tensor::{Scalar, Shape4, Tensor4};

// ---------------------------------------------------------------- manifest

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "test" => Ok(Self::Test),
            other => Err(Error::Manifest(format!("unknown split {other:?} (train|test)"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub name: String,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }
}

/// Parses `image<TAB>mask<TAB>split` lines. Blank lines and lines starting
/// with `#` are ignored; relative paths resolve against the manifest's
/// directory. Every referenced file must exist and no image may appear twice.
pub fn parse_manifest(text: &str, base: &Path, name: &str) -> Result<DatasetManifest> {
    let mut records = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Manifest(format!(
                "line {}: expected 3 tab-separated fields, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        let split: Split = fields[2].trim().parse().map_err(|_| {
            Error::Manifest(format!("line {}: unknown split {:?} (train|test)", lineno + 1, fields[2].trim()))
        })?;
        let image = base.join(fields[0].trim());
        let mask = base.join(fields[1].trim());
        for p in [&image, &mask] {
            if !p.is_file() {
                return Err(Error::Manifest(format!(
                    "line {}: missing file {}",
                    lineno + 1,
                    p.display()
                )));
            }
        }
        if !seen.insert(image.clone()) {
            return Err(Error::Manifest(format!(
                "line {}: duplicate entry {}",
                lineno + 1,
                image.display()
            )));
        }
        records.push(ManifestRecord { image, mask, split });
    }
    if records.is_empty() {
        return Err(Error::Manifest("manifest has no records".into()));
    }
    Ok(DatasetManifest {
        name: name.to_string(),
        records,
    })
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_manifest(&text, base, &name)
}

// ------------------------------------------------------------------ images

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];

pub fn decode_image(bytes: &[u8]) -> Result<ImageU8> {
    if bytes.starts_with(&PNG_SIGNATURE) {
        decode_png(bytes)
    } else if bytes.starts_with(b"P5") || bytes.starts_with(b"P6") {
        decode_pnm(bytes)
    } else {
        Err(Error::UnsupportedFormat("expected PNG or binary PGM/PPM".into()))
    }
}

pub fn read_image(path: &Path) -> Result<ImageU8> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes).map_err(|e| match e {
        Error::UnsupportedFormat(m) => Error::UnsupportedFormat(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn decode_png(bytes: &[u8]) -> Result<ImageU8> {
    let bad = |e: png::DecodingError| Error::UnsupportedFormat(format!("PNG decode failed: {e}"));
    let decoder = png::Decoder::new(BufReader::new(Cursor::new(bytes)));
    let mut reader = decoder.read_info().map_err(bad)?;
    let (color, depth) = reader.output_color_type();
    if depth != png::BitDepth::Eight {
        return Err(Error::UnsupportedFormat(format!(
            "only 8-bit PNG is accepted, got {depth:?}"
        )));
    }
    let src_channels = match color {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => {
            return Err(Error::UnsupportedFormat("paletted PNG".into()));
        }
    };
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::UnsupportedFormat("PNG too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let line = info.line_size;
    let keep = if src_channels >= 3 { 3 } else { 1 };
    let mut data = Vec::with_capacity(h * w * keep);
    for y in 0..h {
        let row = &buf[y * line..y * line + w * src_channels];
        for px in row.chunks_exact(src_channels) {
            data.extend_from_slice(&px[..keep]);
        }
    }
    ImageU8::new(h, w, keep, data)
}

fn decode_pnm(bytes: &[u8]) -> Result<ImageU8> {
    let channels = if bytes[1] == b'5' { 1 } else { 3 };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in fields.iter_mut() {
        // whitespace and comments before each header number
        loop {
            match bytes.get(pos) {
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::UnsupportedFormat("truncated PNM header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap_or("");
        *f = text
            .parse()
            .map_err(|_| Error::UnsupportedFormat("malformed PNM header".into()))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::UnsupportedFormat("malformed PNM header".into()));
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(Error::UnsupportedFormat(format!(
            "PNM maxval {maxval} (8-bit only)"
        )));
    }
    let need = w
        .checked_mul(h)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| Error::UnsupportedFormat("PNM dimensions overflow".into()))?;
    let body = &bytes[pos..];
    if body.len() < need {
        return Err(Error::UnsupportedFormat(format!(
            "truncated PNM: {} of {need} sample bytes",
            body.len()
        )));
    }
    let mut data = body[..need].to_vec();
    if maxval != 255 {
        for v in &mut data {
            *v = ((*v as usize).min(maxval) * 255 + maxval / 2).div_euclid(maxval) as u8;
        }
    }
    ImageU8::new(h, w, channels, data)
}

pub fn encode_pnm(img: &ImageU8) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.w, img.h).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn encode_png(img: &ImageU8) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.w as u32, img.h as u32);
        enc.set_color(if img.channels == 1 {
            png::ColorType::Grayscale
        } else {
            png::ColorType::Rgb
        });
        enc.set_depth(png::BitDepth::Eight);
        let err = |e: png::EncodingError| Error::InvalidArgument(format!("PNG encode failed: {e}"));
        let mut writer = enc.write_header().map_err(err)?;
        writer.write_image_data(&img.data).map_err(err)?;
    }
    Ok(out)
}

/// Writes PNG for `.png`, PGM/PPM for `.pgm`/`.ppm`/`.pnm`.
pub fn write_image(path: &Path, img: &ImageU8) -> Result<()> {
    let ext = path
        .extension()
        .map(|e| e.to_string_lossy().to_ascii_lowercase())
        .unwrap_or_default();
    let bytes = match ext.as_str() {
        "png" => encode_png(img)?,
        "pgm" | "ppm" | "pnm" => encode_pnm(img),
        _ => {
            return Err(Error::UnsupportedFormat(format!(
                "cannot write {}",
                path.display()
            )))
        }
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes the probability map as 8-bit gray `round(255·p)` and the
/// thresholded mask (strict `>`) as 0/255.
pub fn write_prediction<T: Scalar>(
    prob: &Tensor4<T>,
    threshold: f64,
    path_prob: &Path,
    path_mask: &Path,
) -> Result<()> {
    let s = prob.shape();
    if s.n != 1 || s.c != 1 {
        return Err(Error::Shape(format!("prediction must be (1,1,H,W), got {s}")));
    }
    let probs: Vec<u8> = prob
        .data()
        .iter()
        .map(|p| (p.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let mask: Vec<u8> = prob
        .data()
        .iter()
        .map(|p| if p.as_f64() > threshold { 255 } else { 0 })
        .collect();
    write_image(path_prob, &ImageU8::new(s.h, s.w, 1, probs)?)?;
    write_image(path_mask, &ImageU8::new(s.h, s.w, 1, mask)?)
}

// -------------------------------------------------------------- checkpoint

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"WMKA";
pub const CHECKPOINT_VERSION: u32 = 1;
const META_PREFIX: &str = "meta:";

/// Ordered named f32 tensors plus string metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: IndexMap<String, Tensor4<f32>>,
    pub meta: IndexMap<String, String>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let count = u32::try_from(self.tensors.len() + self.meta.len())
            .map_err(|_| Error::Checkpoint("too many records".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        let put_name = |out: &mut Vec<u8>, name: &str| {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
        };
        for (k, v) in &self.meta {
            if k.contains('=') {
                return Err(Error::Checkpoint(format!("metadata key {k:?} contains '='")));
            }
            put_name(&mut out, &format!("{META_PREFIX}{k}={v}"));
            out.extend_from_slice(&[0, 1]);
            out.extend_from_slice(&0u32.to_le_bytes());
        }
        for (name, t) in &self.tensors {
            if name.starts_with(META_PREFIX) {
                return Err(Error::Checkpoint(format!("tensor name {name:?} uses the metadata prefix")));
            }
            put_name(&mut out, name);
            out.extend_from_slice(&[0, 4]);
            for d in t.shape().dims() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let hash = fnv1a(&out);
        out.extend_from_slice(&hash.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "version mismatch: file has {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        if bytes.len() < 20 {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let body_end = bytes.len() - 8;
        let stored = u64::from_le_bytes(bytes[body_end..].try_into().expect("8 bytes"));
        if fnv1a(&bytes[..body_end]) != stored {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let mut r = ByteReader {
            bytes: &bytes[..body_end],
            pos: 8,
        };
        let count = r.u32()?;
        let mut ck = Checkpoint::default();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?
                .to_string();
            let dtype = r.u8()?;
            if dtype != 0 {
                return Err(Error::Checkpoint(format!("unknown dtype code {dtype} for {name}")));
            }
            let ndim = r.u8()? as usize;
            let dims: Vec<usize> = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            if let Some(meta) = name.strip_prefix(META_PREFIX) {
                if dims != [0] {
                    return Err(Error::Checkpoint(format!("metadata record {name} has dims {dims:?}")));
                }
                let (k, v) = meta
                    .split_once('=')
                    .ok_or_else(|| Error::Checkpoint(format!("malformed metadata record {name}")))?;
                if ck.meta.insert(k.to_string(), v.to_string()).is_some() {
                    return Err(Error::Checkpoint(format!("duplicate metadata key {k}")));
                }
                continue;
            }
            if ndim != 4 {
                return Err(Error::Checkpoint(format!("tensor {name} has rank {ndim}, expected 4")));
            }
            let numel = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n.checked_mul(4).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::Checkpoint(format!("truncated payload for {name}")))?;
            let payload = r.take(numel * 4)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let shape = Shape4::new(dims[0], dims[1], dims[2], dims[3]);
            let t = Tensor4::from_vec(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            if ck.tensors.insert(name.clone(), t).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
            }
        }
        if r.remaining() != 0 {
            return Err(Error::Checkpoint(format!("{} unexpected trailing bytes", r.remaining())));
        }
        Ok(ck)
    }

    /// Writes to a sibling temp file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
        tmp_name.push(".tmp");
        let tmp = path.with_file_name(tmp_name);
        {
            let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
            f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        }
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Parameters, buffers, Adam moments and settings of a store.
    pub fn from_store<T: Scalar>(store: &ParamStore<T>) -> Self {
        let mut ck = Checkpoint::default();
        let groups = [
            ("param/", &store.params),
            ("buffer/", &store.buffers),
            ("adam.m/", &store.adam.m),
            ("adam.v/", &store.adam.v),
        ];
        for (prefix, map) in groups {
            for (k, v) in map {
                ck.tensors.insert(format!("{prefix}{k}"), v.cast());
            }
        }
        let c = store.adam.config;
        ck.meta.insert("adam.t".into(), store.adam.t.to_string());
        ck.meta.insert("adam.lr".into(), c.lr.to_string());
        ck.meta.insert("adam.beta1".into(), c.beta1.to_string());
        ck.meta.insert("adam.beta2".into(), c.beta2.to_string());
        ck.meta.insert("adam.eps".into(), c.eps.to_string());
        ck
    }

    pub fn to_store<T: Scalar>(&self) -> Result<ParamStore<T>> {
        let mut store = ParamStore::new();
        let meta_f64 = |k: &str| -> Result<f64> {
            self.meta
                .get(k)
                .ok_or_else(|| Error::Checkpoint(format!("missing metadata {k}")))?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("malformed metadata {k}")))
        };
        let config = AdamConfig {
            lr: meta_f64("adam.lr")?,
            beta1: meta_f64("adam.beta1")?,
            beta2: meta_f64("adam.beta2")?,
            eps: meta_f64("adam.eps")?,
        };
        let t: u64 = self
            .meta
            .get("adam.t")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Checkpoint("missing or malformed metadata adam.t".into()))?;
        let mut adam = AdamState::new(config);
        adam.t = t;
        for (name, v) in &self.tensors {
            let v = v.cast::<T>();
            if let Some(k) = name.strip_prefix("param/") {
                store.insert_param(k, v)?;
            } else if let Some(k) = name.strip_prefix("buffer/") {
                store.insert_buffer(k, v)?;
            } else if let Some(k) = name.strip_prefix("adam.m/") {
                adam.m.insert(k.to_string(), v);
            } else if let Some(k) = name.strip_prefix("adam.v/") {
                adam.v.insert(k.to_string(), v);
            } else {
                return Err(Error::Checkpoint(format!("unrecognised tensor {name}")));
            }
        }
        store.adam = adam;
        Ok(store)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_hand_bytes() {
        let mut bytes = b"P5 2 1 255\n".to_vec();
        bytes.extend([0, 255]);
        let img = decode_image(&bytes).unwrap();
        assert_eq!((img.h, img.w, img.channels), (1, 2, 1));
        assert_eq!(img.data, vec![0, 255]);
    }

    #[test]
    fn pnm_comments_and_truncation() {
        let mut bytes = b"P6\n# made by hand\n1 1\n255\n".to_vec();
        bytes.extend([1, 2, 3]);
        assert_eq!(decode_image(&bytes).unwrap().data, vec![1, 2, 3]);
        bytes.pop();
        assert!(decode_image(&bytes).is_err());
        assert!(decode_image(b"P5 1 1 65535\n\0\0").is_err());
    }

    #[test]
    fn text_is_unsupported() {
        let err = decode_image(b"hello world").unwrap_err();
        assert!(err.to_string().contains("unsupported format"), "{err}");
    }

    #[test]
    fn png_roundtrip_gray_and_rgb() {
        for channels in [1, 3] {
            let data: Vec<u8> = (0..5 * 3 * channels).map(|i| (i * 17) as u8).collect();
            let img = ImageU8::new(3, 5, channels, data).unwrap();
            let back = decode_image(&encode_png(&img).unwrap()).unwrap();
            assert_eq!(back, img);
        }
    }

    #[test]
    fn empty_checkpoint_layout() {
        let bytes = Checkpoint::default().to_bytes().unwrap();
        assert_eq!(bytes.len(), 20);
        assert_eq!(&bytes[..4], b"WMKA");
        assert_eq!(&bytes[4..12], &[1, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), Checkpoint::default());
    }

    #[test]
    fn default_fnv_is_fnv1a() {
        // published FNV-1a 64-bit test vectors
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn every_single_byte_corruption_is_detected() {
        let mut ck = Checkpoint::default();
        ck.tensors.insert(
            "w".into(),
            Tensor4::from_vec([1, 2, 1, 2], vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE]).unwrap(),
        );
        ck.meta.insert("epoch".into(), "3".into());
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
        for i in 0..bytes.len() {
            for flip in [0x01u8, 0x80, 0xff] {
                let mut bad = bytes.clone();
                bad[i] ^= flip;
                assert!(Checkpoint::from_bytes(&bad).is_err(), "byte {i} flip {flip:#x}");
            }
        }
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(Checkpoint::from_bytes(&longer).is_err());
    }
}
