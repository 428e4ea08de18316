//! Feature pyramid container, bilinear sampling, and surface-keypoint feature
//! extraction, plus the on-disk pyramid format.
//!
//! Maps are dense `(h, w, C)` tensors. Positions are crop-frame pixels: the
//! crop spans `[0, crop_size]` on both axes, and level `l` of a standard
//! 4-level pyramid has spatial extent `crop_size/4 .. crop_size/32`.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Vec2;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum PyramidError {
    #[error("pyramid needs at least one level")]
    NoLevels,
    #[error("level {level} is rank {rank}, expected rank-3 (h, w, c) maps")]
    BadRank { level: usize, rank: usize },
    #[error("level {level} has {got} channels, expected {expected}")]
    ChannelMismatch {
        level: usize,
        got: usize,
        expected: usize,
    },
    #[error("crop size {0} must be positive and finite")]
    BadCropSize(f64),
}

/// Multi-scale feature maps over a fixed square crop. Immutable after
/// construction; sampling is pure and safe for concurrent readers.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    levels: Vec<Tensor>,
    crop_size: f64,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<Tensor>, crop_size: f64) -> Result<Self, PyramidError> {
        if levels.is_empty() {
            return Err(PyramidError::NoLevels);
        }
        if !(crop_size > 0.0) || !crop_size.is_finite() {
            return Err(PyramidError::BadCropSize(crop_size));
        }
        let channels = levels[0].shape().last().copied().unwrap_or(0);
        for (level, map) in levels.iter().enumerate() {
            if map.rank() != 3 {
                return Err(PyramidError::BadRank {
                    level,
                    rank: map.rank(),
                });
            }
            if map.shape()[2] != channels {
                return Err(PyramidError::ChannelMismatch {
                    level,
                    got: map.shape()[2],
                    expected: channels,
                });
            }
        }
        Ok(Self { levels, crop_size })
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn channels(&self) -> usize {
        self.levels[0].shape()[2]
    }

    pub fn crop_size(&self) -> f64 {
        self.crop_size
    }

    pub fn level(&self, l: usize) -> &Tensor {
        &self.levels[l]
    }

    pub fn levels(&self) -> &[Tensor] {
        &self.levels
    }

    /// Crop pixels per grid cell on (x, y) for level `l`.
    pub fn strides(&self, l: usize) -> [f64; 2] {
        let shape = self.levels[l].shape();
        [
            self.crop_size / shape[1] as f64,
            self.crop_size / shape[0] as f64,
        ]
    }
}

/// Per-keypoint feature vectors sampled at every pyramid level, together with
/// the crop-frame positions they were sampled at.
#[derive(Debug, Clone)]
pub struct OskfSet {
    /// Shape `(K, L, C)`.
    pub features: Tensor,
    pub positions: Vec<Vec2>,
}

impl OskfSet {
    pub fn k(&self) -> usize {
        self.features.shape()[0]
    }

    /// The `(L·C)`-vector for keypoint `k`, levels concatenated in order.
    pub fn flat_feature(&self, k: usize) -> &[f64] {
        let l = self.features.shape()[1];
        let c = self.features.shape()[2];
        &self.features.data()[k * l * c..(k + 1) * l * c]
    }
}

/// Bilinear interpolation of one corner-anchored patch, accumulated into
/// `out`. Cell centers sit at `(index + 0.5) * stride` (align-corners=false);
/// positions outside the map contribute zeros. Non-finite positions sample
/// zero everywhere.
pub(crate) fn sample_into(map: &Tensor, x: f64, y: f64, sx: f64, sy: f64, out: &mut [f64]) {
    let (h, w, c) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    debug_assert_eq!(out.len(), c);
    if !x.is_finite() || !y.is_finite() {
        return;
    }
    let u = x / sx - 0.5;
    let v = y / sy - 0.5;
    let x0f = u.floor();
    let y0f = v.floor();
    let fx = u - x0f;
    let fy = v - y0f;
    let x0 = x0f as i64;
    let y0 = y0f as i64;
    for (dy, dx, wgt) in [
        (0, 0, (1.0 - fx) * (1.0 - fy)),
        (0, 1, fx * (1.0 - fy)),
        (1, 0, (1.0 - fx) * fy),
        (1, 1, fx * fy),
    ] {
        let yy = y0 + dy;
        let xx = x0 + dx;
        if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
            continue;
        }
        let base = (yy as usize * w + xx as usize) * c;
        for ch in 0..c {
            out[ch] += wgt * map.data()[base + ch];
        }
    }
}

/// Gradient of the sampled value with respect to the position, contracted
/// with the output cotangent `g` (length C). Returns `(d/dx, d/dy)`.
pub(crate) fn sample_pos_grad(
    map: &Tensor,
    x: f64,
    y: f64,
    sx: f64,
    sy: f64,
    g: &[f64],
) -> (f64, f64) {
    let (h, w, c) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    if !x.is_finite() || !y.is_finite() {
        return (0.0, 0.0);
    }
    let u = x / sx - 0.5;
    let v = y / sy - 0.5;
    let x0f = u.floor();
    let y0f = v.floor();
    let fx = u - x0f;
    let fy = v - y0f;
    let x0 = x0f as i64;
    let y0 = y0f as i64;
    let mut du = 0.0;
    let mut dv = 0.0;
    // Corner weight derivatives w.r.t. the fractional offsets.
    for (dy, dx, dw_dfx, dw_dfy) in [
        (0, 0, -(1.0 - fy), -(1.0 - fx)),
        (0, 1, 1.0 - fy, -fx),
        (1, 0, -fy, 1.0 - fx),
        (1, 1, fy, fx),
    ] {
        let yy = y0 + dy;
        let xx = x0 + dx;
        if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
            continue;
        }
        let base = (yy as usize * w + xx as usize) * c;
        let mut dot = 0.0;
        for ch in 0..c {
            dot += g[ch] * map.data()[base + ch];
        }
        du += dw_dfx * dot;
        dv += dw_dfy * dot;
    }
    (du / sx, dv / sy)
}

/// Sample one feature map at a crop-frame position.
pub fn bilinear_sample(map: &Tensor, position_px: &Vec2, strides: [f64; 2]) -> Vec<f64> {
    let mut out = vec![0.0; map.shape()[2]];
    sample_into(map, position_px.x, position_px.y, strides[0], strides[1], &mut out);
    out
}

/// Sample every pyramid level at every keypoint position.
pub fn extract_oskf(pyramid: &FeaturePyramid, positions: &[Vec2]) -> OskfSet {
    let k = positions.len();
    let l = pyramid.num_levels();
    let c = pyramid.channels();
    let mut data = vec![0.0; k * l * c];
    for (ki, p) in positions.iter().enumerate() {
        for li in 0..l {
            let [sx, sy] = pyramid.strides(li);
            let out = &mut data[(ki * l + li) * c..(ki * l + li + 1) * c];
            sample_into(pyramid.level(li), p.x, p.y, sx, sy, out);
        }
    }
    OskfSet {
        features: Tensor::new(&[k, l, c], data),
        positions: positions.to_vec(),
    }
}

// ---- on-disk format ----

/// Header line of the pyramid file: one JSON object terminated by a newline,
/// followed by the raw little-endian f64 payload, levels concatenated in
/// order, row-major, channel-last.
#[derive(Debug, Serialize, Deserialize)]
struct PyramidHeader {
    #[serde(rename = "L")]
    l: usize,
    #[serde(rename = "C")]
    c: usize,
    s: f64,
    dims: Vec<[usize; 2]>,
}

#[derive(Debug, Error)]
pub enum PyramidFileError {
    #[error("missing newline-terminated JSON header")]
    MissingHeader,
    #[error("malformed header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("header declares L={l} but {dims} level dims")]
    LevelCountMismatch { l: usize, dims: usize },
    #[error("header field out of range: {0}")]
    BadField(String),
    #[error("payload holds {got} bytes, expected {expected}")]
    PayloadSize { expected: usize, got: usize },
    #[error("payload contains a non-finite value at element {index}")]
    NonFinite { index: usize },
    #[error(transparent)]
    Invalid(#[from] PyramidError),
}

pub fn pyramid_to_bytes(pyramid: &FeaturePyramid) -> Vec<u8> {
    let header = PyramidHeader {
        l: pyramid.num_levels(),
        c: pyramid.channels(),
        s: pyramid.crop_size(),
        dims: pyramid
            .levels()
            .iter()
            .map(|m| [m.shape()[0], m.shape()[1]])
            .collect(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serialization cannot fail");
    out.push(b'\n');
    for level in pyramid.levels() {
        for v in level.data() {
            out.write_all(&v.to_le_bytes()).expect("vec write");
        }
    }
    out
}

pub fn pyramid_from_bytes(bytes: &[u8]) -> Result<FeaturePyramid, PyramidFileError> {
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or(PyramidFileError::MissingHeader)?;
    let header: PyramidHeader = serde_json::from_slice(&bytes[..newline])?;
    if header.dims.len() != header.l {
        return Err(PyramidFileError::LevelCountMismatch {
            l: header.l,
            dims: header.dims.len(),
        });
    }
    if header.l == 0 {
        return Err(PyramidFileError::BadField("L must be >= 1".into()));
    }
    if header.c == 0 {
        return Err(PyramidFileError::BadField("C must be >= 1".into()));
    }
    if !(header.s > 0.0) || !header.s.is_finite() {
        return Err(PyramidFileError::BadField(format!(
            "s = {} must be positive and finite",
            header.s
        )));
    }
    let mut expected = 0usize;
    for &[h, w] in &header.dims {
        let elems = h
            .checked_mul(w)
            .and_then(|hw| hw.checked_mul(header.c))
            .ok_or_else(|| PyramidFileError::BadField("level size overflows".into()))?;
        if h == 0 || w == 0 {
            return Err(PyramidFileError::BadField("level dims must be >= 1".into()));
        }
        expected = expected
            .checked_add(elems)
            .ok_or_else(|| PyramidFileError::BadField("total size overflows".into()))?;
    }
    let payload = &bytes[newline + 1..];
    let expected_bytes = expected
        .checked_mul(8)
        .ok_or_else(|| PyramidFileError::BadField("total size overflows".into()))?;
    if payload.len() != expected_bytes {
        return Err(PyramidFileError::PayloadSize {
            expected: expected_bytes,
            got: payload.len(),
        });
    }

    let mut offset = 0;
    let mut levels = Vec::with_capacity(header.l);
    for &[h, w] in &header.dims {
        let elems = h * w * header.c;
        let mut data = Vec::with_capacity(elems);
        for i in 0..elems {
            let start = (offset + i) * 8;
            let v = f64::from_le_bytes(payload[start..start + 8].try_into().unwrap());
            if !v.is_finite() {
                return Err(PyramidFileError::NonFinite { index: offset + i });
            }
            data.push(v);
        }
        offset += elems;
        levels.push(Tensor::new(&[h, w, header.c], data));
    }
    Ok(FeaturePyramid::new(levels, header.s)?)
}
