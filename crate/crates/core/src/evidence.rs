//! Ownership evidence for the reverse scheme: hash-chained labels, the Merkle
//! commitment over trigger codes, and an append-only timestamped ledger.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::scheme::{hash_r, label_of, Code, IdentityKey, Label, SchemeParams};

#[derive(Debug, Error)]
pub enum EvidenceError {
    #[error("code sequence is empty")]
    EmptyCodes,
    #[error("code {index} has {got} bits, expected {want}")]
    CodeLength {
        index: usize,
        got: usize,
        want: usize,
    },
    #[error("Merkle tree needs a power-of-two leaf count, got {0}")]
    NotPowerOfTwo(usize),
}

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("ledger I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("ledger line {line} is corrupt: {reason}")]
    Corrupt { line: usize, reason: String },
    #[error("evidence {0} is already registered")]
    Duplicate(String),
}

/// Labels and intermediate states of the chain
/// `l_1 = L(key || c_1)`, `b_2 = h(key || c_1)`,
/// `l_n = L(b_n || c_n)`, `b_{n+1} = h(b_n || c_n)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainResult {
    pub labels: Vec<Label>,
    /// `b_2 ..= b_N`.
    pub states: Vec<Code>,
}

pub fn chain_labels(
    key: &IdentityKey,
    codes: &[Code],
    params: &SchemeParams,
) -> Result<ChainResult, EvidenceError> {
    if codes.is_empty() {
        return Err(EvidenceError::EmptyCodes);
    }
    for (index, c) in codes.iter().enumerate() {
        if c.bit_len() != params.code_bits {
            return Err(EvidenceError::CodeLength {
                index,
                got: c.bit_len(),
                want: params.code_bits,
            });
        }
    }
    let mut labels = Vec::with_capacity(codes.len());
    let mut states = Vec::with_capacity(codes.len() - 1);
    let mut prev = key.bits.clone();
    for (n, c) in codes.iter().enumerate() {
        let joined = prev.concat(c);
        labels.push(label_of(&joined, params));
        if n + 1 < codes.len() {
            let next = hash_r(&joined, params.code_bits);
            states.push(next.clone());
            prev = next;
        }
    }
    Ok(ChainResult { labels, states })
}

/// Binary hash tree over codes. `levels[0]` are the leaves, the last level is
/// the single root, and `levels[p][n] = h(levels[p-1][2n] || levels[p-1][2n+1])`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MerkleTree {
    levels: Vec<Vec<Code>>,
}

impl MerkleTree {
    pub fn build(leaves: &[Code]) -> Result<Self, EvidenceError> {
        if leaves.is_empty() || !leaves.len().is_power_of_two() {
            return Err(EvidenceError::NotPowerOfTwo(leaves.len()));
        }
        let bits = leaves[0].bit_len();
        let mut levels = vec![leaves.to_vec()];
        while levels.last().unwrap().len() > 1 {
            let next = levels
                .last()
                .unwrap()
                .chunks_exact(2)
                .map(|pair| hash_r(&pair[0].concat(&pair[1]), bits))
                .collect();
            levels.push(next);
        }
        Ok(Self { levels })
    }

    pub fn root(&self) -> &Code {
        &self.levels.last().unwrap()[0]
    }

    pub fn depth(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn level(&self, p: usize) -> &[Code] {
        &self.levels[p]
    }
}

/// Root of the Merkle tree over `codes` (a single leaf is its own root).
pub fn merkle_root(codes: &[Code]) -> Result<Code, EvidenceError> {
    Ok(MerkleTree::build(codes)?.root().clone())
}

/// Evidence awaiting a ledger timestamp.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PendingEvidence {
    pub key: Code,
    pub merkle_root: Code,
}

impl PendingEvidence {
    pub fn new(key: &IdentityKey, merkle_root: Code) -> Self {
        Self {
            key: key.bits.clone(),
            merkle_root,
        }
    }

    /// SHA-256 over `key || root`, hex.
    pub fn record_id(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.key.as_bytes());
        h.update(self.merkle_root.as_bytes());
        hex::encode(h.finalize())
    }
}

/// One ledger line: `{"id": hex, "key": hex, "root": hex, "ts": integer}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvidenceRecord {
    #[serde(rename = "id")]
    pub record_id: String,
    pub key: Code,
    #[serde(rename = "root")]
    pub merkle_root: Code,
    #[serde(rename = "ts")]
    pub timestamp: u64,
}

impl EvidenceRecord {
    pub fn identity(&self) -> IdentityKey {
        IdentityKey::from_code(self.key.clone())
    }

    fn check_id(&self) -> Result<(), String> {
        let want = PendingEvidence {
            key: self.key.clone(),
            merkle_root: self.merkle_root.clone(),
        }
        .record_id();
        if want == self.record_id {
            Ok(())
        } else {
            Err(format!("id {} does not match its contents", self.record_id))
        }
    }
}

/// Somewhere evidence can be registered and looked up. Timestamps are strictly
/// increasing across appends: `ts = max(now, last_ts + 1)`.
pub trait EvidenceStore {
    fn append(&mut self, pending: PendingEvidence) -> Result<EvidenceRecord, LedgerError>;
    fn lookup(&self, record_id: &str) -> Result<Option<EvidenceRecord>, LedgerError>;
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn next_timestamp(last: Option<u64>) -> u64 {
    let now = unix_now();
    match last {
        Some(t) => now.max(t + 1),
        None => now,
    }
}

/// Newline-delimited JSON file. Appends take an exclusive file lock; earlier
/// lines are never rewritten.
#[derive(Debug, Clone)]
pub struct Ledger {
    path: PathBuf,
}

impl Ledger {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// All records in append order. A missing file is an empty ledger.
    pub fn records(&self) -> Result<Vec<EvidenceRecord>, LedgerError> {
        let file = match File::open(&self.path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        };
        parse_lines(BufReader::new(file))
    }
}

fn parse_lines(reader: impl BufRead) -> Result<Vec<EvidenceRecord>, LedgerError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: EvidenceRecord =
            serde_json::from_str(&line).map_err(|e| LedgerError::Corrupt {
                line: i + 1,
                reason: e.to_string(),
            })?;
        record.check_id().map_err(|reason| LedgerError::Corrupt {
            line: i + 1,
            reason,
        })?;
        out.push(record);
    }
    Ok(out)
}

impl EvidenceStore for Ledger {
    fn append(&mut self, pending: PendingEvidence) -> Result<EvidenceRecord, LedgerError> {
        if let Some(dir) = self.path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .read(true)
            .open(&self.path)?;
        file.lock()?;
        let existing = parse_lines(BufReader::new(File::open(&self.path)?))?;
        let id = pending.record_id();
        if existing.iter().any(|r| r.record_id == id) {
            return Err(LedgerError::Duplicate(id));
        }
        let record = EvidenceRecord {
            record_id: id,
            key: pending.key,
            merkle_root: pending.merkle_root,
            timestamp: next_timestamp(existing.iter().map(|r| r.timestamp).max()),
        };
        let mut line = serde_json::to_string(&record).expect("record serializes");
        line.push('\n');
        file.write_all(line.as_bytes())?;
        file.flush()?;
        file.unlock()?;
        Ok(record)
    }

    fn lookup(&self, record_id: &str) -> Result<Option<EvidenceRecord>, LedgerError> {
        Ok(self
            .records()?
            .into_iter()
            .find(|r| r.record_id == record_id))
    }
}

/// In-process ledger for bulk simulations.
#[derive(Debug, Clone, Default)]
pub struct MemoryLedger {
    records: HashMap<String, EvidenceRecord>,
    last_ts: Option<u64>,
}

impl MemoryLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

impl EvidenceStore for MemoryLedger {
    fn append(&mut self, pending: PendingEvidence) -> Result<EvidenceRecord, LedgerError> {
        let id = pending.record_id();
        if self.records.contains_key(&id) {
            return Err(LedgerError::Duplicate(id));
        }
        let ts = next_timestamp(self.last_ts);
        self.last_ts = Some(ts);
        let record = EvidenceRecord {
            record_id: id.clone(),
            key: pending.key,
            merkle_root: pending.merkle_root,
            timestamp: ts,
        };
        self.records.insert(id, record.clone());
        Ok(record)
    }

    fn lookup(&self, record_id: &str) -> Result<Option<EvidenceRecord>, LedgerError> {
        Ok(self.records.get(record_id).cloned())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheme::keygen;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn codes(n: usize, seed: u64) -> Vec<Code> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Code::from_bytes((0..32).map(|_| rng.gen()).collect()))
            .collect()
    }

    fn params() -> SchemeParams {
        SchemeParams::default()
    }

    #[test]
    fn chain_base_case() {
        let key = keygen(1, &params());
        let cs = codes(1, 0);
        let r = chain_labels(&key, &cs, &params()).unwrap();
        assert_eq!(
            r.labels,
            vec![label_of(&key.bits.concat(&cs[0]), &params())]
        );
        assert!(r.states.is_empty());
        assert!(matches!(
            chain_labels(&key, &[], &params()),
            Err(EvidenceError::EmptyCodes)
        ));
    }

    #[test]
    fn chain_matches_hand_recursion() {
        let key = keygen(2, &params());
        let cs = codes(4, 1);
        let r = chain_labels(&key, &cs, &params()).unwrap();
        let b2 = hash_r(&key.bits.concat(&cs[0]), 256);
        let b3 = hash_r(&b2.concat(&cs[1]), 256);
        let b4 = hash_r(&b3.concat(&cs[2]), 256);
        assert_eq!(r.states, vec![b2.clone(), b3.clone(), b4.clone()]);
        assert_eq!(r.labels[1], label_of(&b2.concat(&cs[1]), &params()));
        assert_eq!(r.labels[3], label_of(&b4.concat(&cs[3]), &params()));
        assert_eq!(r, chain_labels(&key, &cs, &params()).unwrap());
    }

    #[test]
    fn chain_is_sequential() {
        let key = keygen(3, &params());
        let cs = codes(16, 2);
        let base = chain_labels(&key, &cs, &params()).unwrap();
        // Transposing two later codes leaves label 1 alone.
        let mut swapped = cs.clone();
        swapped.swap(1, 2);
        let r = chain_labels(&key, &swapped, &params()).unwrap();
        assert_eq!(r.labels[0], base.labels[0]);
        assert_ne!(r.states[1..], base.states[1..]);
        // Changing code m leaves labels before m untouched and changes every
        // later state.
        for m in 0..16 {
            let mut mutated = cs.clone();
            mutated[m] = codes(1, 100 + m as u64).remove(0);
            let r = chain_labels(&key, &mutated, &params()).unwrap();
            assert_eq!(r.labels[..m], base.labels[..m]);
            assert!(r.states[m..]
                .iter()
                .zip(&base.states[m..])
                .all(|(a, b)| a != b));
        }
    }

    #[test]
    fn chain_rejects_wrong_code_length() {
        let key = keygen(3, &params());
        let short = vec![Code::from_bytes(vec![0; 8])];
        assert!(matches!(
            chain_labels(&key, &short, &params()),
            Err(EvidenceError::CodeLength { .. })
        ));
    }

    #[test]
    fn merkle_small_trees() {
        let cs = codes(2, 3);
        assert_eq!(merkle_root(&cs[..1]).unwrap(), cs[0]);
        assert_eq!(
            merkle_root(&cs).unwrap(),
            hash_r(&cs[0].concat(&cs[1]), 256)
        );
        let four = codes(4, 4);
        let l = hash_r(&four[0].concat(&four[1]), 256);
        let r = hash_r(&four[2].concat(&four[3]), 256);
        let tree = MerkleTree::build(&four).unwrap();
        assert_eq!(tree.depth(), 2);
        assert_eq!(tree.level(1), &[l.clone(), r.clone()]);
        assert_eq!(tree.root(), &hash_r(&l.concat(&r), 256));
        assert!(matches!(
            merkle_root(&codes(3, 0)),
            Err(EvidenceError::NotPowerOfTwo(3))
        ));
        assert!(merkle_root(&[]).is_err());
    }

    #[test]
    fn merkle_binds_leaves_and_order() {
        let cs = codes(64, 5);
        let root = merkle_root(&cs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..1000 {
            let mut m = cs.clone();
            let i = rng.gen_range(0..64);
            m[i] = Code::from_bytes((0..32).map(|_| rng.gen()).collect());
            let r = merkle_root(&m).unwrap();
            assert_ne!(r, root);
            seen.insert(r);
        }
        assert_eq!(seen.len(), 1000);
        let mut swapped = cs.clone();
        swapped.swap(0, 63);
        assert_ne!(merkle_root(&swapped).unwrap(), root);
        let reversed: Vec<Code> = cs.iter().rev().cloned().collect();
        assert_ne!(merkle_root(&reversed).unwrap(), root);
    }

    fn pending(seed: u64) -> PendingEvidence {
        let key = keygen(seed, &params());
        PendingEvidence::new(&key, merkle_root(&codes(4, seed)).unwrap())
    }

    #[test]
    fn ledger_round_trip_and_uniqueness() {
        let dir = tempfile::tempdir().unwrap();
        let mut ledger = Ledger::new(dir.path().join("ledger.jsonl"));
        assert_eq!(ledger.lookup("00").unwrap(), None);
        let a = ledger.append(pending(1)).unwrap();
        let b = ledger.append(pending(2)).unwrap();
        assert!(b.timestamp > a.timestamp);
        assert_eq!(ledger.lookup(&a.record_id).unwrap(), Some(a.clone()));
        assert_eq!(ledger.lookup(&b.record_id).unwrap(), Some(b));
        assert_eq!(ledger.lookup("ffff").unwrap(), None);
        assert!(matches!(
            ledger.append(pending(1)),
            Err(LedgerError::Duplicate(_))
        ));
    }

    #[test]
    fn ledger_is_append_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.jsonl");
        let mut ledger = Ledger::new(&path);
        ledger.append(pending(1)).unwrap();
        let before = fs::read(&path).unwrap();
        ledger.append(pending(2)).unwrap();
        let after = fs::read(&path).unwrap();
        assert!(after.len() > before.len());
        assert_eq!(&after[..before.len()], &before[..]);
    }

    #[test]
    fn ledger_line_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.jsonl");
        let rec = Ledger::new(&path).append(pending(7)).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let v: serde_json::Value = serde_json::from_str(text.trim_end()).unwrap();
        let obj = v.as_object().unwrap();
        let mut keys: Vec<_> = obj.keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, ["id", "key", "root", "ts"]);
        assert_eq!(obj["ts"].as_u64(), Some(rec.timestamp));
        assert_eq!(obj["root"].as_str().unwrap(), rec.merkle_root.to_hex());
        assert!(text.ends_with('\n'));
    }

    #[test]
    fn corrupt_line_is_reported_with_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.jsonl");
        let mut ledger = Ledger::new(&path);
        ledger.append(pending(1)).unwrap();
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        writeln!(f, "{{not json").unwrap();
        match ledger.lookup("x") {
            Err(LedgerError::Corrupt { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected corrupt ledger, got {other:?}"),
        }
    }

    #[test]
    fn tampered_id_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.jsonl");
        let rec = Ledger::new(&path).append(pending(1)).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, text.replace(&rec.record_id, &"0".repeat(64))).unwrap();
        assert!(matches!(
            Ledger::new(&path).records(),
            Err(LedgerError::Corrupt { line: 1, .. })
        ));
    }

    #[test]
    fn memory_ledger_behaves_like_file() {
        let mut m = MemoryLedger::new();
        let a = m.append(pending(1)).unwrap();
        let b = m.append(pending(2)).unwrap();
        assert!(b.timestamp > a.timestamp);
        assert_eq!(m.lookup(&a.record_id).unwrap(), Some(a));
        assert!(matches!(
            m.append(pending(2)),
            Err(LedgerError::Duplicate(_))
        ));
        assert_eq!(m.len(), 2);
    }
}
