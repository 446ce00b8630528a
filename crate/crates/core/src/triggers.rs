//! Trigger generators: the four forward baselines and reverse selection of
//! ordinary dataset samples.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::image::{Image, ImageError};
use crate::model::SyntheticDataset;
use crate::scheme::{hash_chain, keygen, label_of, Code, IdentityKey, Label, SchemeParams};
use crate::seed::{rng_for, rng_from_seed};

/// Side of the square patch used by the Wonder Filter and Stamp generators.
pub const PATCH: usize = 8;
/// Outranged values written by the Wonder Filter generator.
pub const WONDER_LOW: f32 = -1.0;
pub const WONDER_HIGH: f32 = 2.0;
const QUANT: f32 = 256.0;

#[derive(Debug, Error)]
pub enum TriggerError {
    #[error("image {height}x{width} too small: {needed}")]
    TooSmall {
        height: usize,
        width: usize,
        needed: String,
    },
    #[error("cannot select {requested} triggers from a pool of {available}")]
    PoolTooSmall { requested: usize, available: usize },
    #[error("trigger count {0} is not a power of two")]
    NotPowerOfTwo(usize),
    #[error("trigger set I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("trigger set manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("trigger image: {0}")]
    Image(#[from] ImageError),
    #[error("unknown scheme id `{0}`")]
    UnknownScheme(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeId {
    Noise,
    Wonder,
    Stamp,
    Stego,
    Reverse,
}

impl SchemeId {
    pub const ALL: [SchemeId; 5] = [
        SchemeId::Noise,
        SchemeId::Wonder,
        SchemeId::Stamp,
        SchemeId::Stego,
        SchemeId::Reverse,
    ];
    pub const BASELINES: [SchemeId; 4] = [
        SchemeId::Noise,
        SchemeId::Wonder,
        SchemeId::Stamp,
        SchemeId::Stego,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SchemeId::Noise => "noise",
            SchemeId::Wonder => "wonder",
            SchemeId::Stamp => "stamp",
            SchemeId::Stego => "stego",
            SchemeId::Reverse => "reverse",
        }
    }

    pub fn is_forward(self) -> bool {
        self != SchemeId::Reverse
    }
}

impl fmt::Display for SchemeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SchemeId {
    type Err = TriggerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SchemeId::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| TriggerError::UnknownScheme(s.to_string()))
    }
}

/// An ordered trigger collection. Order matters: for the reverse scheme it is
/// the chain order that the labels and Merkle root commit to.
#[derive(Debug, Clone, PartialEq)]
pub struct TriggerSet {
    pub scheme: SchemeId,
    pub triggers: Vec<Image>,
    /// `None` until labels are assigned.
    pub labels: Option<Vec<Label>>,
    /// Dataset index each trigger was built from (the base image, or the
    /// sample itself for reverse triggers). `None` for pure-noise triggers.
    pub sources: Vec<Option<usize>>,
}

#[derive(Serialize, Deserialize)]
struct TriggerManifest {
    scheme_id: SchemeId,
    order: Vec<String>,
    labels: Option<Vec<Label>>,
    #[serde(default)]
    sources: Vec<Option<usize>>,
}

impl TriggerSet {
    pub fn len(&self) -> usize {
        self.triggers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triggers.is_empty()
    }

    /// `(trigger, label)` pairs; empty when labels are unassigned.
    pub fn labeled(&self) -> impl Iterator<Item = (&Image, Label)> {
        self.triggers
            .iter()
            .zip(self.labels.iter().flatten().copied())
    }

    pub fn save(&self, dir: &Path) -> Result<(), TriggerError> {
        fs::create_dir_all(dir)?;
        let mut order = Vec::with_capacity(self.len());
        for (i, t) in self.triggers.iter().enumerate() {
            let name = format!("trigger_{i:04}.bin");
            fs::write(dir.join(&name), t.to_canonical_bytes())?;
            order.push(name);
        }
        let manifest = TriggerManifest {
            scheme_id: self.scheme,
            order,
            labels: self.labels.clone(),
            sources: self.sources.clone(),
        };
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_vec_pretty(&manifest)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, TriggerError> {
        let m: TriggerManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        let triggers = m
            .order
            .iter()
            .map(|f| Ok(Image::from_canonical_bytes(&fs::read(dir.join(f))?)?))
            .collect::<Result<Vec<_>, TriggerError>>()?;
        let sources = if m.sources.len() == triggers.len() {
            m.sources
        } else {
            vec![None; triggers.len()]
        };
        Ok(Self {
            scheme: m.scheme_id,
            triggers,
            labels: m.labels,
            sources,
        })
    }
}

fn code_seed_u64(domain: &str, code: &Code) -> u64 {
    let mut h = Sha256::new();
    h.update(domain.as_bytes());
    h.update(code.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

/// I.i.d. `N(0.5, 0.25^2)` pixels seeded by the code, clamped to `[0, 1]`.
pub fn noise_trigger(code: &Code, params: &SchemeParams) -> Image {
    let mut rng = rng_for("noise-trigger", &[code.as_bytes()]);
    let dist = Normal::new(0.5f64, 0.25).unwrap();
    let pixels = (0..params.pixels())
        .map(|_| dist.sample(&mut rng).clamp(0.0, 1.0) as f32)
        .collect();
    Image::new(params.height, params.width, pixels).unwrap()
}

fn check_patch_fits(base: &Image) -> Result<(), TriggerError> {
    if base.height() < PATCH || base.width() < PATCH {
        return Err(TriggerError::TooSmall {
            height: base.height(),
            width: base.width(),
            needed: format!("{PATCH}x{PATCH} patch"),
        });
    }
    Ok(())
}

/// Top-left corner of the Wonder Filter patch, decoded from code bytes 0 and 1.
pub fn wonder_offset(code: &Code, height: usize, width: usize) -> (usize, usize) {
    let b = code.as_bytes();
    (
        b[0] as usize % (height - PATCH + 1),
        b[1] as usize % (width - PATCH + 1),
    )
}

/// Copies `base` and writes an 8x8 patch of outranged values. Bytes 0-1 of
/// the code place the patch; bits from 16 on (cycling) pick each value.
pub fn wonder_trigger(code: &Code, base: &Image) -> Result<Image, TriggerError> {
    check_patch_fits(base)?;
    let (oy, ox) = wonder_offset(code, base.height(), base.width());
    let bits = code.bit_len();
    let mut out = base.clone();
    for k in 0..PATCH * PATCH {
        let v = if code.bit((16 + k) % bits) {
            WONDER_HIGH
        } else {
            WONDER_LOW
        };
        out.set(oy + k / PATCH, ox + k % PATCH, v);
    }
    Ok(out)
}

/// Overlays the first 64 code bits as a binary 8x8 block at the top-left corner.
pub fn stamp_trigger(code: &Code, base: &Image) -> Result<Image, TriggerError> {
    check_patch_fits(base)?;
    let mut out = base.clone();
    for k in 0..PATCH * PATCH {
        out.set(k / PATCH, k % PATCH, if code.bit(k) { 1.0 } else { 0.0 });
    }
    Ok(out)
}

/// Reads the stamp block back into 64 bits.
pub fn read_stamp(img: &Image) -> Code {
    let bits: Vec<bool> = (0..PATCH * PATCH)
        .map(|k| img.get(k / PATCH, k % PATCH) >= 0.5)
        .collect();
    Code::from_bits(&bits)
}

/// Sets the parity of the first `R` pixels (row-major), each snapped to a
/// neighbouring level of the 1/256 grid, to the code bits. Every pixel moves
/// by at most 1/256.
pub fn stego_trigger(code: &Code, base: &Image) -> Result<Image, TriggerError> {
    let r = code.bit_len();
    if base.pixels().len() < r {
        return Err(TriggerError::TooSmall {
            height: base.height(),
            width: base.width(),
            needed: format!("{r} pixels"),
        });
    }
    let mut out = base.clone();
    for (i, p) in out.pixels_mut().iter_mut().take(r).enumerate() {
        let want = code.bit(i) as i64;
        let lo = (*p * QUANT).floor() as i64;
        let level = if lo.rem_euclid(2) == want {
            lo
        } else if lo < QUANT as i64 {
            lo + 1
        } else {
            lo - 1
        };
        *p = level as f32 / QUANT;
    }
    Ok(out)
}

/// Recovers the embedded bits from grid parities.
pub fn extract_stego(img: &Image, code_bits: usize) -> Code {
    let bits: Vec<bool> = img.pixels()[..code_bits]
        .iter()
        .map(|&p| ((p * QUANT).round() as i64).rem_euclid(2) == 1)
        .collect();
    Code::from_bits(&bits)
}

/// Pool position of the base image for a code.
pub fn base_index(code: &Code, pool_len: usize) -> usize {
    (code_seed_u64("trigger-base", code) % pool_len as u64) as usize
}

/// Forward generator `T` for a baseline scheme. Returns the trigger and the
/// dataset index of its base, if any.
pub fn forward_trigger(
    scheme: SchemeId,
    code: &Code,
    params: &SchemeParams,
    images: &[Image],
    pool: &[usize],
) -> Result<(Image, Option<usize>), TriggerError> {
    if scheme == SchemeId::Noise {
        return Ok((noise_trigger(code, params), None));
    }
    if pool.is_empty() {
        return Err(TriggerError::PoolTooSmall {
            requested: 1,
            available: 0,
        });
    }
    let src = pool[base_index(code, pool.len())];
    let base = &images[src];
    let img = match scheme {
        SchemeId::Wonder => wonder_trigger(code, base)?,
        SchemeId::Stamp => stamp_trigger(code, base)?,
        SchemeId::Stego => stego_trigger(code, base)?,
        SchemeId::Noise | SchemeId::Reverse => unreachable!("handled by caller"),
    };
    Ok((img, Some(src)))
}

/// The labeled forward trigger set for `key`: codes from the hash chain,
/// triggers from `T`, labels from `L`. Bases come from the train split.
pub fn forward_trigger_set(
    scheme: SchemeId,
    key: &IdentityKey,
    params: &SchemeParams,
    dataset: &SyntheticDataset,
) -> Result<TriggerSet, TriggerError> {
    assert!(
        scheme.is_forward(),
        "reverse triggers are selected, not generated"
    );
    let codes = hash_chain(key.bits.as_bytes(), params.num_triggers, params.code_bits);
    let mut triggers = Vec::with_capacity(codes.len());
    let mut sources = Vec::with_capacity(codes.len());
    for code in &codes {
        let (t, s) = forward_trigger(scheme, code, params, &dataset.images, &dataset.train)?;
        triggers.push(t);
        sources.push(s);
    }
    let labels = codes
        .iter()
        .map(|c| label_of(c.as_bytes(), params))
        .collect();
    Ok(TriggerSet {
        scheme,
        triggers,
        labels: Some(labels),
        sources,
    })
}

/// Draws `n` distinct pool members uniformly without replacement, in a
/// seed-determined order. Labels are left unassigned.
pub fn reverse_select_from(
    images: &[Image],
    pool: &[usize],
    n: usize,
    seed: u64,
) -> Result<TriggerSet, TriggerError> {
    if !n.is_power_of_two() {
        return Err(TriggerError::NotPowerOfTwo(n));
    }
    if n > pool.len() {
        return Err(TriggerError::PoolTooSmall {
            requested: n,
            available: pool.len(),
        });
    }
    let mut rng = rng_from_seed("reverse-select", seed);
    let picks: Vec<usize> = index::sample(&mut rng, pool.len(), n)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    Ok(TriggerSet {
        scheme: SchemeId::Reverse,
        triggers: picks.iter().map(|&i| images[i].clone()).collect(),
        labels: None,
        sources: picks.into_iter().map(Some).collect(),
    })
}

/// Reverse selection from the dataset's train split.
pub fn reverse_select(
    dataset: &SyntheticDataset,
    n: usize,
    seed: u64,
) -> Result<TriggerSet, TriggerError> {
    reverse_select_from(&dataset.images, &dataset.train, n, seed)
}

/// `count` triggers of `scheme` as an adversary holding the generator would
/// obtain them: forward schemes run `T` on a fresh key's hash chain, the
/// reverse scheme samples the pool without replacement.
pub fn sample_scheme_triggers(
    scheme: SchemeId,
    count: usize,
    seed: u64,
    params: &SchemeParams,
    images: &[Image],
    pool: &[usize],
) -> Result<Vec<Image>, TriggerError> {
    if scheme == SchemeId::Reverse {
        if count > pool.len() {
            return Err(TriggerError::PoolTooSmall {
                requested: count,
                available: pool.len(),
            });
        }
        let mut rng = rng_from_seed("reverse-sample", seed);
        return Ok(index::sample(&mut rng, pool.len(), count)
            .into_iter()
            .map(|i| images[pool[i]].clone())
            .collect());
    }
    let key = keygen(seed, params);
    hash_chain(key.bits.as_bytes(), count, params.code_bits)
        .iter()
        .map(|code| Ok(forward_trigger(scheme, code, params, images, pool)?.0))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::gen_dataset;
    use crate::scheme::hash_r;

    fn code(i: u64) -> Code {
        hash_r(&i.to_le_bytes(), 256)
    }

    fn base() -> Image {
        let pixels = (0..256).map(|i| (i as f32 * 0.37).fract()).collect();
        Image::new(16, 16, pixels).unwrap()
    }

    #[test]
    fn noise_statistics() {
        let p = SchemeParams::default();
        assert_eq!(noise_trigger(&code(1), &p), noise_trigger(&code(1), &p));
        let mut sum = 0.0;
        for i in 0..100 {
            sum += noise_trigger(&code(i), &p)
                .pixels()
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>();
        }
        let mean = sum / (100.0 * 256.0);
        assert!((mean - 0.5).abs() <= 0.02, "mean {mean}");
        let a = noise_trigger(&code(1), &p);
        let b = noise_trigger(&code(2), &p);
        let differing = a
            .pixels()
            .iter()
            .zip(b.pixels())
            .filter(|(x, y)| x != y)
            .count();
        assert!(differing as f64 > 0.9 * 256.0);
        assert!(!a.has_outranged());
    }

    #[test]
    fn wonder_patch_is_local_and_outranged() {
        let b = base();
        let c = code(3);
        let t = wonder_trigger(&c, &b).unwrap();
        let (oy, ox) = wonder_offset(&c, 16, 16);
        let mut outranged = 0;
        for r in 0..16 {
            for col in 0..16 {
                let inside = (oy..oy + 8).contains(&r) && (ox..ox + 8).contains(&col);
                if inside {
                    assert!(t.get(r, col) == WONDER_LOW || t.get(r, col) == WONDER_HIGH);
                    outranged += 1;
                } else {
                    assert_eq!(t.get(r, col), b.get(r, col));
                }
            }
        }
        assert!(outranged >= 64);
    }

    #[test]
    fn wonder_offsets_follow_position_bits() {
        let mut a = vec![0u8; 32];
        let mut b = vec![0u8; 32];
        a[0] = 1;
        a[1] = 2;
        b[0] = 5;
        b[1] = 7;
        let (ca, cb) = (Code::from_bytes(a), Code::from_bytes(b));
        assert_eq!(wonder_offset(&ca, 16, 16), (1, 2));
        assert_eq!(wonder_offset(&cb, 16, 16), (5, 7));
        let ta = wonder_trigger(&ca, &base()).unwrap();
        assert!(ta.get(1, 2) < 0.0 || ta.get(1, 2) > 1.0);
        assert!((0.0..=1.0).contains(&ta.get(0, 0)));
    }

    #[test]
    fn stamp_round_trips_and_is_local() {
        let b = base();
        let c = code(4);
        let t = stamp_trigger(&c, &b).unwrap();
        assert_eq!(read_stamp(&t).as_bytes(), &c.as_bytes()[..8]);
        for r in 0..16 {
            for col in 0..16 {
                if r < 8 && col < 8 {
                    assert!(t.get(r, col) == 0.0 || t.get(r, col) == 1.0);
                } else {
                    assert_eq!(t.get(r, col), b.get(r, col));
                }
            }
        }
    }

    #[test]
    fn stego_embeds_within_bound() {
        let b = base();
        for i in 0..20 {
            let c = code(i);
            let t = stego_trigger(&c, &b).unwrap();
            assert!(t.max_abs_diff(&b) <= 1.0 / 256.0 + 1e-7);
            assert_eq!(extract_stego(&t, 256), c);
            assert_eq!(t, stego_trigger(&c, &b).unwrap());
            assert!(!t.has_outranged());
        }
        // Edge levels: 0 and 1 stay inside [0, 1].
        let edge = Image::new(16, 16, (0..256).map(|i| (i % 2) as f32).collect()).unwrap();
        let t = stego_trigger(&code(9), &edge).unwrap();
        assert!(!t.has_outranged());
        assert!(t.max_abs_diff(&edge) <= 1.0 / 256.0);
    }

    #[test]
    fn generators_reject_small_images() {
        let tiny = Image::filled(4, 4, 0.5);
        assert!(wonder_trigger(&code(0), &tiny).is_err());
        assert!(stamp_trigger(&code(0), &tiny).is_err());
        assert!(stego_trigger(&code(0), &Image::filled(8, 8, 0.5)).is_err());
    }

    #[test]
    fn reverse_select_contract() {
        let ds = gen_dataset(1, 10, &SchemeParams::default()).unwrap();
        let pool_len = ds.train.len();
        assert_eq!(pool_len, 80);
        let pool: Vec<usize> = ds.train[..64].to_vec();
        let full = reverse_select_from(&ds.images, &pool, 64, 3).unwrap();
        let mut got: Vec<usize> = full.sources.iter().map(|s| s.unwrap()).collect();
        got.sort_unstable();
        let mut want = pool.clone();
        want.sort_unstable();
        assert_eq!(got, want);
        assert!(full.labels.is_none());

        let a = reverse_select(&ds, 8, 5).unwrap();
        assert_eq!(a, reverse_select(&ds, 8, 5).unwrap());
        assert_ne!(a.sources, reverse_select(&ds, 8, 6).unwrap().sources);
        for (t, s) in a.triggers.iter().zip(&a.sources) {
            assert_eq!(
                t.to_canonical_bytes(),
                ds.images[s.unwrap()].to_canonical_bytes()
            );
        }

        assert!(matches!(
            reverse_select(&ds, 6, 0),
            Err(TriggerError::NotPowerOfTwo(6))
        ));
        assert!(matches!(
            reverse_select(&ds, 128, 0),
            Err(TriggerError::PoolTooSmall { .. })
        ));
    }

    #[test]
    fn baselines_are_rule_separable() {
        let p = SchemeParams::default();
        let ds = gen_dataset(2, 100, &p).unwrap();
        let pool: Vec<usize> = (0..ds.len()).collect();
        let stamp_rule = |img: &Image| {
            (0..64).all(|k| {
                let v = img.get(k / 8, k % 8);
                v == 0.0 || v == 1.0
            })
        };
        let wonder =
            sample_scheme_triggers(SchemeId::Wonder, 1000, 1, &p, &ds.images, &pool).unwrap();
        let stamp =
            sample_scheme_triggers(SchemeId::Stamp, 1000, 2, &p, &ds.images, &pool).unwrap();
        assert!(wonder.iter().all(Image::has_outranged));
        assert!(stamp.iter().all(stamp_rule));
        assert!(ds
            .images
            .iter()
            .all(|x| !x.has_outranged() && !stamp_rule(x)));
    }

    #[test]
    fn forward_set_is_labeled_by_codes() {
        let p = SchemeParams::default().with_triggers(8);
        let ds = gen_dataset(1, 10, &p).unwrap();
        let key = keygen(7, &p);
        let ts = forward_trigger_set(SchemeId::Stamp, &key, &p, &ds).unwrap();
        let codes = crate::scheme::encode_chain(&key, &p);
        assert_eq!(ts.len(), 8);
        for ((t, l), c) in ts.labeled().zip(&codes) {
            assert_eq!(l, label_of(c.as_bytes(), &p));
            assert_eq!(read_stamp(t).as_bytes(), &c.as_bytes()[..8]);
        }
        assert!(ts
            .sources
            .iter()
            .all(|s| s.is_some_and(|i| ds.train.contains(&i))));
    }

    #[test]
    fn trigger_set_persists() {
        let p = SchemeParams::default().with_triggers(4);
        let ds = gen_dataset(1, 10, &p).unwrap();
        let ts = forward_trigger_set(SchemeId::Wonder, &keygen(1, &p), &p, &ds).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ts.save(dir.path()).unwrap();
        assert_eq!(TriggerSet::load(dir.path()).unwrap(), ts);
    }

    #[test]
    fn scheme_ids_parse() {
        for id in SchemeId::ALL {
            assert_eq!(id.as_str().parse::<SchemeId>().unwrap(), id);
        }
        assert!("bogus".parse::<SchemeId>().is_err());
    }
}
