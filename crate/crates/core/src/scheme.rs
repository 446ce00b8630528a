//! Identity keys, codes, and the hash primitives shared by the forward
//! (key -> codes -> triggers) and reverse (triggers -> codes -> chained labels)
//! watermarking directions.
//!
//! All hashing is SHA-256 truncated from the most-significant end to the code
//! length `R`. `R` must be a multiple of 8 in `[64, 256]` so codes are whole
//! bytes.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::image::{Image, ImageError};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SchemeError {
    #[error("invalid scheme parameter `{field}`: {reason}")]
    InvalidParams { field: &'static str, reason: String },
    #[error("malformed trigger: {0}")]
    MalformedTrigger(#[from] ImageError),
    #[error("bad hex code: {0}")]
    Hex(String),
}

/// How labels are compared during verification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Labels live in `[0, C)`.
    #[default]
    Full,
    /// Labels are post-mapped to `label mod 2`: two equivalence classes, for
    /// services whose output space is not the training label space.
    Parity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchemeParams {
    /// Code length in bits (`R`).
    pub code_bits: usize,
    /// Number of triggers (`N`), a power of two.
    pub num_triggers: usize,
    /// Label-space size (`C`).
    pub num_labels: usize,
    pub height: usize,
    pub width: usize,
    pub label_mode: LabelMode,
}

impl Default for SchemeParams {
    fn default() -> Self {
        Self {
            code_bits: 256,
            num_triggers: 64,
            num_labels: 10,
            height: 16,
            width: 16,
            label_mode: LabelMode::Full,
        }
    }
}

impl SchemeParams {
    pub fn validate(&self) -> Result<(), SchemeError> {
        let bad = |field, reason: &str| {
            Err(SchemeError::InvalidParams {
                field,
                reason: reason.to_string(),
            })
        };
        if !(64..=256).contains(&self.code_bits) || !self.code_bits.is_multiple_of(8) {
            return bad("code_bits", "must be a multiple of 8 in [64, 256]");
        }
        if self.num_triggers == 0 || !self.num_triggers.is_power_of_two() {
            return bad("num_triggers", "must be a power of two");
        }
        if self.num_labels < 2 {
            return bad("num_labels", "must be at least 2");
        }
        if self.height < 8 || self.width < 8 {
            return bad("image_dims", "height and width must be at least 8");
        }
        Ok(())
    }

    /// Merkle depth `P = log2(N)`.
    pub fn merkle_depth(&self) -> u32 {
        self.num_triggers.trailing_zeros()
    }

    pub fn code_bytes(&self) -> usize {
        self.code_bits / 8
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Size of the label space the verifier compares in.
    pub fn effective_labels(&self) -> usize {
        match self.label_mode {
            LabelMode::Full => self.num_labels,
            LabelMode::Parity => 2,
        }
    }

    /// Maps a raw service response into the comparison space.
    pub fn project(&self, label: Label) -> Label {
        match self.label_mode {
            LabelMode::Full => label,
            LabelMode::Parity => Label(label.0 % 2),
        }
    }

    pub fn with_triggers(mut self, n: usize) -> Self {
        self.num_triggers = n;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Label(pub u32);

impl Label {
    pub fn value(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A fixed-length bit string. Bits are stored MSB-first in whole bytes.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Code(Vec<u8>);

impl Code {
    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        Self(bytes)
    }

    pub fn from_hex(s: &str) -> Result<Self, SchemeError> {
        hex::decode(s)
            .map(Self)
            .map_err(|e| SchemeError::Hex(e.to_string()))
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn bit_len(&self) -> usize {
        self.0.len() * 8
    }

    /// Bit `i`, counting from the most-significant bit of byte 0.
    pub fn bit(&self, i: usize) -> bool {
        (self.0[i / 8] >> (7 - i % 8)) & 1 == 1
    }

    pub fn to_hex(&self) -> String {
        hex::encode(&self.0)
    }

    /// `self || other`.
    pub fn concat(&self, other: &Code) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.0.len() + other.0.len());
        out.extend_from_slice(&self.0);
        out.extend_from_slice(&other.0);
        out
    }

    /// Bits packed from a bool slice, MSB-first. Length must be a multiple of 8.
    pub fn from_bits(bits: &[bool]) -> Self {
        let bytes = bits
            .chunks(8)
            .map(|chunk| {
                chunk
                    .iter()
                    .enumerate()
                    .fold(0u8, |acc, (i, &b)| acc | ((b as u8) << (7 - i)))
            })
            .collect();
        Self(bytes)
    }
}

impl fmt::Debug for Code {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Code({})", self.to_hex())
    }
}

impl fmt::Display for Code {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Code {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Code {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Code::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

/// The owner's identity: an `R`-bit string plus the seed it came from, if known.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentityKey {
    pub bits: Code,
    pub seed: Option<u64>,
}

impl IdentityKey {
    pub fn from_code(bits: Code) -> Self {
        Self { bits, seed: None }
    }
}

/// SHA-256 of `input`, truncated to `code_bits` from the most-significant end.
pub fn hash_r(input: &[u8], code_bits: usize) -> Code {
    let digest = Sha256::digest(input);
    Code(digest[..code_bits / 8].to_vec())
}

pub fn keygen(seed: u64, params: &SchemeParams) -> IdentityKey {
    IdentityKey {
        bits: hash_r(&seed.to_le_bytes(), params.code_bits),
        seed: Some(seed),
    }
}

/// Forward `Encode`: `c_1 = h(key)`, `c_n = h(c_{n-1})`.
pub fn encode_chain(key: &IdentityKey, params: &SchemeParams) -> Vec<Code> {
    hash_chain(key.bits.as_bytes(), params.num_triggers, params.code_bits)
}

/// `count` successive hashes starting from `seed_bytes`.
pub fn hash_chain(seed_bytes: &[u8], count: usize, code_bits: usize) -> Vec<Code> {
    let mut out: Vec<Code> = Vec::with_capacity(count);
    for i in 0..count {
        let next = match i {
            0 => hash_r(seed_bytes, code_bits),
            _ => hash_r(out[i - 1].as_bytes(), code_bits),
        };
        out.push(next);
    }
    out
}

/// Inverse trigger generator: hash of the trigger's canonical bytes.
pub fn inverse_trigger_code(trigger: &Image, params: &SchemeParams) -> Result<Code, SchemeError> {
    trigger.check_dims(params.height, params.width)?;
    Ok(hash_r(&trigger.to_canonical_bytes(), params.code_bits))
}

/// SHA-256 of `input` read as a big-endian unsigned integer, reduced mod `classes`.
pub fn label_mod(input: &[u8], classes: u32) -> Label {
    assert!(classes >= 1, "label space must be non-empty");
    let digest = Sha256::digest(input);
    let c = u64::from(classes);
    let r = digest
        .iter()
        .fold(0u64, |acc, &b| ((acc << 8) | u64::from(b)) % c);
    Label(r as u32)
}

/// Label generator `L`, including the parity post-map when enabled.
pub fn label_of(input: &[u8], params: &SchemeParams) -> Label {
    params.project(label_mod(input, params.num_labels as u32))
}
