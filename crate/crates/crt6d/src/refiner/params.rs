//! Flat parameter storage with a named tensor table, deterministic
//! initialization, and the binary checkpoint format.
//!
//! All trainable tensors live in one contiguous `Vec<f64>` so the optimizer
//! and the gradient vector share a single indexing scheme: the entry table
//! maps names to (shape, offset) and fixes the checkpoint payload order.

use std::collections::BTreeMap;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::RefinerConfig;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(skip)]
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// All refiner parameters in table order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: BTreeMap<String, usize>,
    data: Vec<f64>,
}

enum Init {
    Zeros,
    Ones,
    Uniform(f64),
    Values(Vec<f64>),
}

struct Builder {
    entries: Vec<ParamEntry>,
    data: Vec<f64>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn add(&mut self, name: &str, shape: &[usize], init: Init) {
        let len: usize = shape.iter().product();
        let offset = self.data.len();
        match init {
            Init::Zeros => self.data.extend(std::iter::repeat_n(0.0, len)),
            Init::Ones => self.data.extend(std::iter::repeat_n(1.0, len)),
            Init::Uniform(a) => self
                .data
                .extend((0..len).map(|_| self.rng.random_range(-a..a))),
            Init::Values(v) => {
                assert_eq!(v.len(), len, "init value length for {name}");
                self.data.extend(v);
            }
        }
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset,
        });
    }
}

/// Pose-head output bias that decodes to the identity offset: canonical 6D
/// identity in the rotation block, zero gamma offsets.
fn identity_head_bias() -> Vec<f64> {
    vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]
}

/// Coarse-head output bias: identity rotation, centered object, and a raw
/// depth that softplus maps to a plausible positive gamma_z.
fn coarse_bias() -> Vec<f64> {
    vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0]
}

/// Initial deformable sampling offsets (crop-normalized): each (head, point)
/// slot looks in a distinct direction with radius growing per point, shared
/// across levels, so the block probes a neighborhood before training.
fn offset_spread(config: &RefinerConfig) -> Vec<f64> {
    let (h, l, j) = (config.heads, config.levels, config.points);
    let mut out = Vec::with_capacity(h * l * j * 2);
    for hi in 0..h {
        for _li in 0..l {
            for ji in 0..j {
                let theta =
                    2.0 * std::f64::consts::PI * (hi * j + ji) as f64 / (h * j) as f64;
                let r = 0.02 * (ji + 1) as f64;
                out.push(r * theta.cos());
                out.push(r * theta.sin());
            }
        }
    }
    out
}

impl ParamStore {
    /// Deterministic initialization from a seed. Entry order (and therefore
    /// checkpoint layout and RNG consumption) is fixed by the config alone.
    pub fn init(config: &RefinerConfig, seed: u64) -> Self {
        let d = config.d_model;
        let c = config.channels;
        let lc = config.levels * c;
        let hlj = config.heads * config.levels * config.points;
        let coarse_hidden = 2 * c;
        let head_hidden = 2 * d;

        let mut b = Builder {
            entries: Vec::new(),
            data: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };

        b.add("q0", &[config.keypoints, d], Init::Uniform(0.1));

        b.add("coarse.w1", &[c, coarse_hidden], Init::Uniform(inv_sqrt(c)));
        b.add("coarse.b1", &[coarse_hidden], Init::Zeros);
        b.add(
            "coarse.w2",
            &[coarse_hidden, 9],
            Init::Uniform(inv_sqrt(coarse_hidden)),
        );
        b.add("coarse.b2", &[9], Init::Values(coarse_bias()));

        for t in 0..config.step_param_sets() {
            let p = |suffix: &str| format!("step{t}.{suffix}");
            b.add(&p("in_proj.w"), &[lc, d], Init::Uniform(inv_sqrt(lc)));
            b.add(&p("in_proj.b"), &[d], Init::Zeros);

            for attn in ["attn1", "attn2"] {
                for w in ["wq", "wk", "wv", "wo"] {
                    b.add(&p(&format!("{attn}.{w}")), &[d, d], Init::Uniform(inv_sqrt(d)));
                }
                b.add(&p(&format!("{attn}.ln_gain")), &[d], Init::Ones);
                b.add(&p(&format!("{attn}.ln_bias")), &[d], Init::Zeros);
            }

            b.add(&p("deform.off_w"), &[d, hlj * 2], Init::Zeros);
            b.add(
                &p("deform.off_b"),
                &[hlj * 2],
                Init::Values(offset_spread(config)),
            );
            b.add(&p("deform.att_w"), &[d, hlj], Init::Zeros);
            b.add(&p("deform.att_b"), &[hlj], Init::Zeros);
            b.add(&p("deform.val_w"), &[c, d], Init::Uniform(inv_sqrt(c)));
            b.add(&p("deform.out_w"), &[d, d], Init::Uniform(inv_sqrt(d)));
            b.add(&p("deform.ln_gain"), &[d], Init::Ones);
            b.add(&p("deform.ln_bias"), &[d], Init::Zeros);

            b.add(&p("head.w1"), &[d, head_hidden], Init::Uniform(inv_sqrt(d)));
            b.add(&p("head.b1"), &[head_hidden], Init::Zeros);
            b.add(&p("head.w2"), &[head_hidden, 9], Init::Zeros);
            b.add(&p("head.b2"), &[9], Init::Values(identity_head_bias()));
        }

        Self::from_parts(b.entries, b.data)
    }

    fn from_parts(entries: Vec<ParamEntry>, data: Vec<f64>) -> Self {
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.name.clone(), i))
            .collect();
        Self {
            entries,
            index,
            data,
        }
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn entry(&self, name: &str) -> &ParamEntry {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter tensor '{name}'"));
        &self.entries[i]
    }

    pub fn tensor(&self, name: &str) -> Tensor {
        let e = self.entry(name);
        Tensor::new(&e.shape, self.data[e.offset..e.offset + e.len()].to_vec())
    }

    pub fn set_tensor(&mut self, name: &str, t: &Tensor) {
        let e = self.entry(name);
        assert_eq!(e.shape, t.shape(), "shape mismatch for '{name}'");
        let (offset, len) = (e.offset, e.len());
        self.data[offset..offset + len].copy_from_slice(t.data());
    }

    /// Zero every tensor whose name matches the pose-head weights, and reset
    /// head biases to the identity offset. Used by identity-cascade tests.
    pub fn zero_pose_heads(&mut self) {
        let names: Vec<String> = self.entries.iter().map(|e| e.name.clone()).collect();
        for name in names {
            if let Some((_, field)) = name.split_once(".head.") {
                let e = self.entry(&name);
                let (offset, len) = (e.offset, e.len());
                match field {
                    "b2" => self.data[offset..offset + len]
                        .copy_from_slice(&identity_head_bias()),
                    _ => self.data[offset..offset + len].fill(0.0),
                }
            }
        }
    }

    /// Record every tensor on the tape; returns name → leaf handle.
    pub fn leaves(&self, tape: &mut Tape) -> BTreeMap<String, Var> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), tape.leaf(self.tensor(&e.name))))
            .collect()
    }

    /// Flatten per-tensor gradients into a vector aligned with `data`.
    /// Tensors no gradient reached contribute zeros.
    pub fn gradient_vector(
        &self,
        grads: &Gradients,
        vars: &BTreeMap<String, Var>,
    ) -> Vec<f64> {
        let mut out = vec![0.0; self.data.len()];
        for e in &self.entries {
            let var = vars[&e.name];
            if let Some(g) = grads.get(var) {
                out[e.offset..e.offset + e.len()].copy_from_slice(g.data());
            }
        }
        out
    }
}

fn inv_sqrt(n: usize) -> f64 {
    1.0 / (n as f64).sqrt()
}

// ---- checkpoint format ----

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: RefinerConfig,
    tensors: Vec<ParamEntry>,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("missing newline-terminated JSON header")]
    MissingHeader,
    #[error("malformed header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("invalid config in header: {0}")]
    BadConfig(String),
    #[error("tensor table does not match the header config (expected '{expected}', found '{found}')")]
    TableMismatch { expected: String, found: String },
    #[error("payload holds {got} bytes, expected {expected}")]
    PayloadSize { expected: usize, got: usize },
    #[error("non-finite value in tensor '{name}'")]
    NonFinite { name: String },
}

/// Serialize config + named tensor table as one JSON header line, then the
/// raw little-endian f64 payload in table order.
pub fn checkpoint_to_bytes(config: &RefinerConfig, params: &ParamStore) -> Vec<u8> {
    let header = CheckpointHeader {
        config: config.clone(),
        tensors: params.entries().to_vec(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serialization cannot fail");
    out.push(b'\n');
    for v in params.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parameter count of the layout [`ParamStore::init`] builds, computed without
/// allocating it. `None` when the dimensions overflow `usize`.
fn param_count(config: &RefinerConfig) -> Option<usize> {
    let d = config.d_model;
    let c = config.channels;
    let lc = config.levels.checked_mul(c)?;
    let hlj = config
        .heads
        .checked_mul(config.levels)?
        .checked_mul(config.points)?;
    let coarse_hidden = c.checked_mul(2)?;
    let head_hidden = d.checked_mul(2)?;
    let dd = d.checked_mul(d)?;

    let mut total = config.keypoints.checked_mul(d)?;
    total = total.checked_add(c.checked_mul(coarse_hidden)?)?;
    total = total.checked_add(coarse_hidden)?;
    total = total.checked_add(coarse_hidden.checked_mul(9)?)?;
    total = total.checked_add(9)?;

    let mut per_set = lc.checked_mul(d)?.checked_add(d)?;
    per_set = per_set.checked_add(dd.checked_mul(8)?)?;
    per_set = per_set.checked_add(d.checked_mul(4)?)?;
    per_set = per_set.checked_add(d.checked_mul(hlj.checked_mul(2)?)?)?;
    per_set = per_set.checked_add(hlj.checked_mul(2)?)?;
    per_set = per_set.checked_add(d.checked_mul(hlj)?)?;
    per_set = per_set.checked_add(hlj)?;
    per_set = per_set.checked_add(c.checked_mul(d)?)?;
    per_set = per_set.checked_add(dd)?;
    per_set = per_set.checked_add(d.checked_mul(2)?)?;
    per_set = per_set.checked_add(d.checked_mul(head_hidden)?)?;
    per_set = per_set.checked_add(head_hidden)?;
    per_set = per_set.checked_add(head_hidden.checked_mul(9)?)?;
    per_set = per_set.checked_add(9)?;

    total.checked_add(per_set.checked_mul(config.step_param_sets())?)
}

pub fn checkpoint_from_bytes(
    bytes: &[u8],
) -> Result<(RefinerConfig, ParamStore), CheckpointError> {
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or(CheckpointError::MissingHeader)?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..newline])?;
    header
        .config
        .validate()
        .map_err(|e| CheckpointError::BadConfig(e.to_string()))?;

    // The payload must match the size the config implies before the reference
    // layout is materialized, so allocation stays bounded by the input.
    let payload = &bytes[newline + 1..];
    let overflow = || CheckpointError::BadConfig("dimensions overflow".into());
    let expected_bytes = param_count(&header.config)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(overflow)?;
    if payload.len() != expected_bytes {
        return Err(CheckpointError::PayloadSize {
            expected: expected_bytes,
            got: payload.len(),
        });
    }

    // The table must be exactly the layout this config produces: same names,
    // same shapes, same order.
    let expected = ParamStore::init(&header.config, 0);
    if expected.entries().len() != header.tensors.len() {
        return Err(CheckpointError::TableMismatch {
            expected: format!("{} tensors", expected.entries().len()),
            found: format!("{} tensors", header.tensors.len()),
        });
    }
    for (want, got) in expected.entries().iter().zip(header.tensors.iter()) {
        if want.name != got.name || want.shape != got.shape {
            return Err(CheckpointError::TableMismatch {
                expected: format!("{} {:?}", want.name, want.shape),
                found: format!("{} {:?}", got.name, got.shape),
            });
        }
    }
    let mut data = Vec::with_capacity(expected.len());
    for i in 0..expected.len() {
        data.push(f64::from_le_bytes(
            payload[i * 8..(i + 1) * 8].try_into().unwrap(),
        ));
    }
    for e in expected.entries() {
        if data[e.offset..e.offset + e.len()].iter().any(|v| !v.is_finite()) {
            return Err(CheckpointError::NonFinite {
                name: e.name.clone(),
            });
        }
    }
    let entries = expected.entries().to_vec();
    Ok((header.config, ParamStore::from_parts(entries, data)))
}
