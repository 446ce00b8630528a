//! Ownership verification between an owner, a judge, and a suspicious
//! service, plus the end-to-end capsulation and overwriting scenarios.
//!
//! A reverse-scheme session runs in three phases. The owner submits its
//! triggers in a secret random order and the judge records the service's
//! answers. Only then does the owner reveal the order. Finally the judge
//! restores chain order, checks the Merkle root against the ledger, recomputes
//! the chained labels from the registered key, and counts matches.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attack::{
    capsulate, fit_classifier, AttackError, ClassifierHyper, ClassifierKind, ComplementLabeler,
    ConstFilter, Filter, RuleFilter, TableLabeler,
};
use crate::evidence::{
    chain_labels, merkle_root, EvidenceError, EvidenceRecord, EvidenceStore, LedgerError,
    PendingEvidence,
};
use crate::image::{Image, ImageDigest};
use crate::metrics::required_matches;
use crate::model::{
    accuracy, embed_backdoor, gen_dataset, train, BlackBoxModel, DatasetError, EmbedHyper, Mlp,
    ModelError, SyntheticDataset, TrainHyper,
};
use crate::scheme::{
    inverse_trigger_code, keygen, Code, IdentityKey, Label, SchemeError, SchemeParams,
};
use crate::seed::{derive_seed, rng_from_seed};
use crate::triggers::{
    forward_trigger_set, reverse_select, sample_scheme_triggers, SchemeId, TriggerError, TriggerSet,
};

#[derive(Debug, Error)]
pub enum PhaseError {
    #[error("the order is not revealed before all responses are recorded")]
    OrderNotRevealed,
    #[error("all {0} responses are already recorded")]
    ResponsesComplete(usize),
    #[error("{recorded} of {expected} responses recorded; cannot reveal yet")]
    ResponsesIncomplete { recorded: usize, expected: usize },
    #[error("the order was already revealed")]
    AlreadyRevealed,
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("protocol phase violation: {0}")]
    Phase(#[from] PhaseError),
    #[error("revealed order is not a permutation of 0..{0}")]
    Permutation(usize),
    #[error("evidence {0} not found in the ledger")]
    EvidenceMissing(String),
    #[error("not enough data: {0}")]
    InsufficientData(String),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Evidence(#[from] EvidenceError),
    #[error(transparent)]
    Scheme(#[from] SchemeError),
    #[error(transparent)]
    Trigger(#[from] TriggerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Attack(#[from] AttackError),
}

/// Everything the owner of a reverse-scheme watermark keeps: the key, the
/// labeled triggers in chain order, their codes, and the Merkle root.
#[derive(Debug, Clone, PartialEq)]
pub struct Owner {
    pub key: IdentityKey,
    pub params: SchemeParams,
    pub triggers: TriggerSet,
    pub codes: Vec<Code>,
    pub root: Code,
}

/// Selects reverse triggers and derives their codes, chained labels, and root.
pub fn owner_prepare(
    key: &IdentityKey,
    dataset: &SyntheticDataset,
    params: &SchemeParams,
    seed: u64,
) -> Result<Owner, ProtocolError> {
    params.validate()?;
    let mut triggers = reverse_select(dataset, params.num_triggers, seed)?;
    let codes = triggers
        .triggers
        .iter()
        .map(|t| inverse_trigger_code(t, params))
        .collect::<Result<Vec<_>, _>>()?;
    let chain = chain_labels(key, &codes, params)?;
    triggers.labels = Some(chain.labels);
    let root = merkle_root(&codes)?;
    Ok(Owner {
        key: key.clone(),
        params: *params,
        triggers,
        codes,
        root,
    })
}

/// [`owner_prepare`] followed by publishing `(key, root)` to the ledger.
pub fn owner_register<S: EvidenceStore + ?Sized>(
    key: &IdentityKey,
    dataset: &SyntheticDataset,
    params: &SchemeParams,
    seed: u64,
    store: &mut S,
) -> Result<(Owner, EvidenceRecord), ProtocolError> {
    let owner = owner_prepare(key, dataset, params, seed)?;
    let record = store.append(PendingEvidence::new(key, owner.root.clone()))?;
    Ok((owner, record))
}

impl Owner {
    /// Triggers in a seeded random order, and `pi` with `pi[i]` the chain
    /// index of the `i`-th submitted trigger.
    pub fn submission(&self, session_seed: u64) -> (Vec<Image>, Vec<usize>) {
        let mut pi: Vec<usize> = (0..self.triggers.len()).collect();
        pi.shuffle(&mut rng_from_seed("session-order", session_seed));
        let submitted = pi
            .iter()
            .map(|&n| self.triggers.triggers[n].clone())
            .collect();
        (submitted, pi)
    }

    pub fn record_id(&self) -> String {
        PendingEvidence::new(&self.key, self.root.clone()).record_id()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Querying,
    Revealed,
}

/// The judge's side of one verification session.
#[derive(Debug, Clone)]
pub struct Session {
    id: String,
    record_id: String,
    submitted: Vec<Image>,
    responses: Vec<Label>,
    pi: Option<Vec<usize>>,
}

impl Session {
    pub fn new(id: impl Into<String>, record_id: impl Into<String>, submitted: Vec<Image>) -> Self {
        Self {
            id: id.into(),
            record_id: record_id.into(),
            submitted,
            responses: Vec::new(),
            pi: None,
        }
    }

    pub fn phase(&self) -> Phase {
        if self.pi.is_some() {
            Phase::Revealed
        } else {
            Phase::Querying
        }
    }

    pub fn submitted(&self) -> &[Image] {
        &self.submitted
    }

    pub fn responses(&self) -> &[Label] {
        &self.responses
    }

    pub fn record_response(&mut self, label: Label) -> Result<(), PhaseError> {
        if self.pi.is_some() {
            return Err(PhaseError::AlreadyRevealed);
        }
        if self.responses.len() == self.submitted.len() {
            return Err(PhaseError::ResponsesComplete(self.submitted.len()));
        }
        self.responses.push(label);
        Ok(())
    }

    /// Sends every outstanding trigger to the service in submission order.
    pub fn query_all<M: BlackBoxModel + ?Sized>(&mut self, service: &M) -> Result<(), PhaseError> {
        for i in self.responses.len()..self.submitted.len() {
            let label = service.query(&self.submitted[i], i as u64);
            self.record_response(label)?;
        }
        Ok(())
    }

    pub fn reveal(&mut self, pi: Vec<usize>) -> Result<(), ProtocolError> {
        if self.pi.is_some() {
            return Err(PhaseError::AlreadyRevealed.into());
        }
        let n = self.submitted.len();
        if self.responses.len() < n {
            return Err(PhaseError::ResponsesIncomplete {
                recorded: self.responses.len(),
                expected: n,
            }
            .into());
        }
        let mut seen = vec![false; n];
        if pi.len() != n {
            return Err(ProtocolError::Permutation(n));
        }
        for &p in &pi {
            if p >= n || seen[p] {
                return Err(ProtocolError::Permutation(n));
            }
            seen[p] = true;
        }
        self.pi = Some(pi);
        Ok(())
    }

    pub fn permutation(&self) -> Result<&[usize], PhaseError> {
        self.pi.as_deref().ok_or(PhaseError::OrderNotRevealed)
    }

    /// Phase 3: restore chain order, check the commitment, and count matches
    /// against labels recomputed from the registered key.
    pub fn decide<S: EvidenceStore + ?Sized>(
        self,
        store: &S,
        params: &SchemeParams,
        tau: f64,
    ) -> Result<VerificationTranscript, ProtocolError> {
        let pi = self.permutation()?.to_vec();
        let record = store
            .lookup(&self.record_id)?
            .ok_or_else(|| ProtocolError::EvidenceMissing(self.record_id.clone()))?;
        let n = self.submitted.len();
        let mut chain_triggers = vec![None; n];
        let mut chain_responses = vec![Label(0); n];
        for (i, &p) in pi.iter().enumerate() {
            chain_triggers[p] = Some(&self.submitted[i]);
            chain_responses[p] = self.responses[i];
        }
        let codes = chain_triggers
            .into_iter()
            .map(|t| inverse_trigger_code(t.expect("pi is a bijection"), params))
            .collect::<Result<Vec<_>, _>>()?;
        let merkle_ok = merkle_root(&codes)? == record.merkle_root;
        let expected = chain_labels(&record.identity(), &codes, params)?.labels;
        let match_count = expected
            .iter()
            .zip(&chain_responses)
            .filter(|(want, got)| params.project(**got) == **want)
            .count();
        let verdict = Verdict::new(merkle_ok, match_count, n, tau);
        Ok(VerificationTranscript {
            session_id: self.id,
            record_id: self.record_id,
            triggers: self
                .submitted
                .iter()
                .map(|t| hex::encode(t.digest()))
                .collect(),
            responses: self.responses,
            permutation: pi,
            verdict,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub merkle_ok: bool,
    pub match_count: usize,
    pub accuracy: f64,
    pub tau: f64,
    pub accepted: bool,
}

impl Verdict {
    /// Accepts iff the commitment holds and at least `ceil(tau n)` labels match.
    pub fn new(merkle_ok: bool, match_count: usize, n: usize, tau: f64) -> Self {
        let accuracy = if n == 0 {
            0.0
        } else {
            match_count as f64 / n as f64
        };
        Self {
            merkle_ok,
            match_count,
            accuracy,
            tau,
            accepted: merkle_ok && n > 0 && match_count >= required_matches(tau, n),
        }
    }
}

/// What the judge saw and decided. `permutation[i]` is the chain index of
/// the `i`-th submitted trigger; triggers are listed as hex digests in
/// submission order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationTranscript {
    pub session_id: String,
    pub record_id: String,
    pub triggers: Vec<String>,
    pub responses: Vec<Label>,
    pub permutation: Vec<usize>,
    pub verdict: Verdict,
}

impl VerificationTranscript {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("transcript serializes")
    }
}

pub fn session_id(record_id: &str, session_seed: u64) -> String {
    let mut h = Sha256::new();
    h.update(record_id.as_bytes());
    h.update(session_seed.to_le_bytes());
    hex::encode(&h.finalize()[..8])
}

/// Runs all three phases of a reverse-scheme session.
pub fn verify_session<M, S>(
    owner: &Owner,
    record_id: &str,
    service: &M,
    tau: f64,
    session_seed: u64,
    store: &S,
) -> Result<VerificationTranscript, ProtocolError>
where
    M: BlackBoxModel + ?Sized,
    S: EvidenceStore + ?Sized,
{
    let (submitted, pi) = owner.submission(session_seed);
    let mut session = Session::new(session_id(record_id, session_seed), record_id, submitted);
    session.query_all(service)?;
    session.reveal(pi)?;
    session.decide(store, &owner.params, tau)
}

/// Forward-scheme check: regenerate triggers from the key, query them in
/// order, and compare with `L(c_n)`. There is no commitment, so `merkle_ok`
/// is vacuously true.
pub fn verify_forward<M: BlackBoxModel + ?Sized>(
    scheme: SchemeId,
    key: &IdentityKey,
    params: &SchemeParams,
    dataset: &SyntheticDataset,
    service: &M,
    tau: f64,
) -> Result<Verdict, ProtocolError> {
    let ts = forward_trigger_set(scheme, key, params, dataset)?;
    let matches = ts
        .labeled()
        .enumerate()
        .filter(|(i, (t, l))| params.project(service.query(t, *i as u64)) == *l)
        .count();
    Ok(Verdict::new(true, matches, ts.len(), tau))
}

/// Sub-seeds of one experiment, all derived from a master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub dataset: u64,
    pub model: u64,
    pub embed: u64,
    pub key: u64,
    pub select: u64,
    pub adversary: u64,
    pub session: u64,
}

impl Seeds {
    pub fn from_master(master: u64) -> Self {
        Self {
            dataset: derive_seed(master, "dataset", 0),
            model: derive_seed(master, "model", 0),
            embed: derive_seed(master, "embed", 0),
            key: derive_seed(master, "key", 0),
            select: derive_seed(master, "select", 0),
            adversary: derive_seed(master, "adversary", 0),
            session: derive_seed(master, "session", 0),
        }
    }
}

/// Dataset, model, and embedding settings shared by the scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSetup {
    pub params: SchemeParams,
    pub n_per_class: usize,
    pub train: TrainHyper,
    pub embed: EmbedHyper,
    pub seeds: Seeds,
}

impl ExperimentSetup {
    pub fn new(params: SchemeParams, n_per_class: usize, master_seed: u64) -> Self {
        let seeds = Seeds::from_master(master_seed);
        Self {
            params,
            n_per_class,
            train: TrainHyper {
                seed: seeds.model,
                ..TrainHyper::default()
            },
            embed: EmbedHyper {
                seed: seeds.embed,
                ..EmbedHyper::default()
            },
            seeds,
        }
    }
}

/// A trained model before and after embedding one scheme's watermark.
#[derive(Debug, Clone)]
pub struct Watermarked {
    pub scheme: SchemeId,
    pub key: IdentityKey,
    pub clean: Mlp,
    pub model: Mlp,
    pub triggers: TriggerSet,
    pub owner: Option<Owner>,
}

impl Watermarked {
    pub fn trigger_accuracy<M: BlackBoxModel + ?Sized>(&self, service: &M) -> f64 {
        accuracy(service, self.triggers.labeled())
    }
}

/// Builds the scheme's trigger set for `key` and embeds it into `clean`.
pub fn watermark_model(
    scheme: SchemeId,
    key: &IdentityKey,
    clean: &Mlp,
    dataset: &SyntheticDataset,
    setup: &ExperimentSetup,
) -> Result<Watermarked, ProtocolError> {
    let (triggers, owner) = if scheme == SchemeId::Reverse {
        let owner = owner_prepare(key, dataset, &setup.params, setup.seeds.select)?;
        (owner.triggers.clone(), Some(owner))
    } else {
        (
            forward_trigger_set(scheme, key, &setup.params, dataset)?,
            None,
        )
    };
    let model = embed_backdoor(clean, &triggers, dataset, &setup.embed)?;
    Ok(Watermarked {
        scheme,
        key: key.clone(),
        clean: clean.clone(),
        model,
        triggers,
        owner,
    })
}

/// Clean test accuracy lost by embedding, in percentage points.
pub fn functionality_drop(wm: &Watermarked, dataset: &SyntheticDataset) -> f64 {
    100.0 * (accuracy(&wm.clean, dataset.test_pairs()) - accuracy(&wm.model, dataset.test_pairs()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapsulationConfig {
    pub kinds: Vec<ClassifierKind>,
    pub q: usize,
    pub thresholds: Vec<f64>,
    pub classifier: ClassifierHyper,
}

impl Default for CapsulationConfig {
    fn default() -> Self {
        Self {
            kinds: vec![ClassifierKind::Mlp],
            q: 500,
            thresholds: vec![0.5],
            classifier: ClassifierHyper::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapsulationRow {
    pub scheme: SchemeId,
    pub filter: String,
    pub q: usize,
    pub threshold: f64,
    pub clean_pre: f64,
    pub clean_post: f64,
    pub trigger_pre: f64,
    pub trigger_post: f64,
    /// Fraction of clean test queries flagged.
    pub fpr: f64,
    /// Fraction of the owner's triggers flagged.
    pub tpr: f64,
}

impl CapsulationRow {
    /// Clean accuracy lost to the filter, in percentage points.
    pub fn clean_drop(&self) -> f64 {
        100.0 * (self.clean_pre - self.clean_post)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapsulationReport {
    pub rows: Vec<CapsulationRow>,
}

impl CapsulationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "scheme,filter,q,threshold,clean_pre,clean_post,trigger_pre,trigger_post,fpr,tpr\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.2},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                r.scheme,
                r.filter,
                r.q,
                r.threshold,
                r.clean_pre,
                r.clean_post,
                r.trigger_pre,
                r.trigger_post,
                r.fpr,
                r.tpr
            ));
        }
        out
    }
}

/// A fitted filter's scores cached by input digest so that threshold sweeps
/// reuse one scoring pass. Unknown inputs score 0.
struct CachedScores {
    scores: HashMap<ImageDigest, f64>,
    threshold: f64,
}

impl CachedScores {
    fn new<'a, F: Filter + ?Sized>(
        filter: &F,
        inputs: impl IntoIterator<Item = &'a Image>,
    ) -> Self {
        Self {
            scores: inputs
                .into_iter()
                .map(|x| (x.digest(), filter.score(x)))
                .collect(),
            threshold: filter.threshold(),
        }
    }
}

impl Filter for CachedScores {
    fn score(&self, x: &Image) -> f64 {
        self.scores.get(&x.digest()).copied().unwrap_or(0.0)
    }
    fn threshold(&self) -> f64 {
        self.threshold
    }
}

/// Fits a filter of each kind on `Q` triggers the adversary generates itself
/// and `Q` normal queries it collects (both from its own sample of the data
/// distribution), capsulates the watermarked model, and measures clean and
/// trigger accuracy before and after.
pub fn capsulation_rows(
    wm: &Watermarked,
    dataset: &SyntheticDataset,
    setup: &ExperimentSetup,
    config: &CapsulationConfig,
) -> Result<Vec<CapsulationRow>, ProtocolError> {
    let params = &setup.params;
    let adv = gen_dataset(setup.seeds.adversary, setup.n_per_class, params)?;
    let half = adv.train.len() / 2;
    if half < config.q {
        return Err(ProtocolError::InsufficientData(format!(
            "adversary pools hold {half} samples, Q = {}",
            config.q
        )));
    }
    let (base_pool, normal_pool) = adv.train.split_at(half);
    let t_fit = sample_scheme_triggers(
        wm.scheme,
        config.q,
        derive_seed(setup.seeds.adversary, "filter-triggers", 0),
        params,
        &adv.images,
        base_pool,
    )?;
    let n_fit: Vec<Image> = normal_pool[..config.q]
        .iter()
        .map(|&i| adv.images[i].clone())
        .collect();
    let labeler = ComplementLabeler::new(params.num_labels, setup.seeds.adversary)?;
    let test: Vec<(&Image, Label)> = dataset.test_pairs().collect();
    let clean_pre = accuracy(&wm.model, test.iter().copied());
    let trigger_pre = wm.trigger_accuracy(&wm.model);
    let flagged = |f: &dyn Filter, xs: &mut dyn Iterator<Item = &Image>| {
        let (mut hit, mut n) = (0usize, 0usize);
        for x in xs {
            n += 1;
            hit += f.flags(x) as usize;
        }
        hit as f64 / n.max(1) as f64
    };
    let mut rows = vec![CapsulationRow {
        scheme: wm.scheme,
        filter: "none".into(),
        q: 0,
        threshold: 0.5,
        clean_pre,
        clean_post: accuracy(
            &capsulate(&wm.model, ConstFilter(false), labeler),
            test.iter().copied(),
        ),
        trigger_pre,
        trigger_post: wm.trigger_accuracy(&capsulate(&wm.model, ConstFilter(false), labeler)),
        fpr: 0.0,
        tpr: 0.0,
    }];
    for (ki, &kind) in config.kinds.iter().enumerate() {
        let filter = fit_classifier(
            kind,
            &t_fit,
            &n_fit,
            &config.classifier,
            derive_seed(setup.seeds.adversary, kind.as_str(), ki as u64),
        )?;
        let mut cache = CachedScores::new(
            &filter,
            test.iter().map(|(x, _)| *x).chain(&wm.triggers.triggers),
        );
        for &theta in &config.thresholds {
            cache.threshold = theta;
            let svc = capsulate(&wm.model, &cache, labeler);
            rows.push(CapsulationRow {
                scheme: wm.scheme,
                filter: kind.to_string(),
                q: config.q,
                threshold: theta,
                clean_pre,
                clean_post: accuracy(&svc, test.iter().copied()),
                trigger_pre,
                trigger_post: wm.trigger_accuracy(&svc),
                fpr: flagged(&cache, &mut test.iter().map(|(x, _)| *x)),
                tpr: flagged(&cache, &mut wm.triggers.triggers.iter()),
            });
        }
    }
    Ok(rows)
}

/// End-to-end capsulation experiment for one scheme: generate data, train,
/// embed, attack, measure.
pub fn scenario_capsulation(
    scheme: SchemeId,
    setup: &ExperimentSetup,
    config: &CapsulationConfig,
) -> Result<CapsulationReport, ProtocolError> {
    let dataset = gen_dataset(setup.seeds.dataset, setup.n_per_class, &setup.params)?;
    let clean = train(&dataset, &setup.train)?;
    let key = keygen(setup.seeds.key, &setup.params);
    let wm = watermark_model(scheme, &key, &clean, &dataset, setup)?;
    Ok(CapsulationReport {
        rows: capsulation_rows(&wm, &dataset, setup, config)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictPair {
    pub alice: Verdict,
    pub carol: Verdict,
}

/// Outcome of the overwriting scenario. Ledger timestamps are summarized by
/// their order only, so the report is reproducible byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverwriteReport {
    pub alice_record: String,
    pub carol_record: String,
    pub alice_earlier: bool,
    pub capsulated: VerdictPair,
    pub without_filter: VerdictPair,
    /// Both claims verify against the capsulated service while Alice's
    /// evidence is older.
    pub ambiguous: bool,
}

/// Alice registers evidence without ever watermarking a model. Carol
/// registers later and watermarks hers. Bob pirates Carol's model and
/// capsulates it with a rule filter over Alice's triggers whose fake labels
/// are Alice's legal chain labels. Both owners then run sessions against
/// Bob's service, and again against Carol's bare model.
pub fn scenario_overwrite<S: EvidenceStore + ?Sized>(
    setup: &ExperimentSetup,
    tau: f64,
    store: &mut S,
) -> Result<OverwriteReport, ProtocolError> {
    let params = &setup.params;
    let seeds = &setup.seeds;
    let dataset = gen_dataset(seeds.dataset, setup.n_per_class, params)?;
    let alice_key = keygen(derive_seed(seeds.key, "alice", 0), params);
    let carol_key = keygen(derive_seed(seeds.key, "carol", 0), params);
    let (alice, alice_rec) = owner_register(
        &alice_key,
        &dataset,
        params,
        derive_seed(seeds.select, "alice", 0),
        store,
    )?;
    let (carol, carol_rec) = owner_register(
        &carol_key,
        &dataset,
        params,
        derive_seed(seeds.select, "carol", 0),
        store,
    )?;
    let clean = train(&dataset, &setup.train)?;
    let carol_model = embed_backdoor(&clean, &carol.triggers, &dataset, &setup.embed)?;
    let bob = capsulate(
        &carol_model,
        RuleFilter::from_triggers(&alice.triggers.triggers),
        TableLabeler::new(alice.triggers.labeled()),
    );
    let session = |i: u64| derive_seed(seeds.session, "overwrite", i);
    let capsulated = VerdictPair {
        alice: verify_session(&alice, &alice_rec.record_id, &bob, tau, session(0), &*store)?
            .verdict,
        carol: verify_session(&carol, &carol_rec.record_id, &bob, tau, session(1), &*store)?
            .verdict,
    };
    let without_filter = VerdictPair {
        alice: verify_session(
            &alice,
            &alice_rec.record_id,
            &carol_model,
            tau,
            session(2),
            &*store,
        )?
        .verdict,
        carol: verify_session(
            &carol,
            &carol_rec.record_id,
            &carol_model,
            tau,
            session(3),
            &*store,
        )?
        .verdict,
    };
    let alice_earlier = alice_rec.timestamp < carol_rec.timestamp;
    Ok(OverwriteReport {
        alice_record: alice_rec.record_id,
        carol_record: carol_rec.record_id,
        alice_earlier,
        ambiguous: alice_earlier && capsulated.alice.accepted && capsulated.carol.accepted,
        capsulated,
        without_filter,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evidence::MemoryLedger;
    use crate::model::OracleModel;

    fn small() -> (SyntheticDataset, SchemeParams) {
        let p = SchemeParams::default().with_triggers(16);
        (gen_dataset(21, 20, &p).unwrap(), p)
    }

    #[test]
    fn registration_is_deterministic_and_consistent() {
        let (ds, p) = small();
        let key = keygen(1, &p);
        let mut ledger = MemoryLedger::new();
        let (owner, rec) = owner_register(&key, &ds, &p, 5, &mut ledger).unwrap();
        assert_eq!(owner, owner_prepare(&key, &ds, &p, 5).unwrap());
        assert_eq!(rec.merkle_root, merkle_root(&owner.codes).unwrap());
        assert_eq!(
            owner.triggers.labels.as_deref().unwrap(),
            chain_labels(&key, &owner.codes, &p).unwrap().labels
        );
        assert_eq!(owner.record_id(), rec.record_id);
        assert!(matches!(
            owner_register(&key, &ds, &p, 5, &mut ledger),
            Err(ProtocolError::Ledger(LedgerError::Duplicate(_)))
        ));
    }

    #[test]
    fn honest_session_accepts() {
        let (ds, p) = small();
        let mut ledger = MemoryLedger::new();
        let (owner, rec) = owner_register(&keygen(2, &p), &ds, &p, 1, &mut ledger).unwrap();
        let service = OracleModel::clean(&ds, 0).with_triggers(&owner.triggers);
        let tr = verify_session(&owner, &rec.record_id, &service, 1.0, 9, &ledger).unwrap();
        assert!(tr.verdict.merkle_ok && tr.verdict.accepted);
        assert_eq!(tr.verdict.match_count, 16);
        assert_eq!(tr.triggers.len(), 16);
        let back: VerificationTranscript = serde_json::from_str(&tr.to_json()).unwrap();
        assert_eq!(back, tr);
    }

    #[test]
    fn substituted_trigger_breaks_merkle() {
        let (ds, p) = small();
        let mut ledger = MemoryLedger::new();
        let (mut owner, rec) = owner_register(&keygen(3, &p), &ds, &p, 1, &mut ledger).unwrap();
        owner.triggers.triggers[4] = ds.images[ds.test[0]].clone();
        let service = OracleModel::clean(&ds, 0).with_triggers(&owner.triggers);
        let tr = verify_session(&owner, &rec.record_id, &service, 0.0, 1, &ledger).unwrap();
        assert!(!tr.verdict.merkle_ok);
        assert!(!tr.verdict.accepted);
    }

    #[test]
    fn phase_discipline() {
        let (ds, p) = small();
        let mut ledger = MemoryLedger::new();
        let (owner, rec) = owner_register(&keygen(4, &p), &ds, &p, 1, &mut ledger).unwrap();
        let (submitted, pi) = owner.submission(3);
        let mut s = Session::new("s", rec.record_id.clone(), submitted);
        assert!(matches!(s.permutation(), Err(PhaseError::OrderNotRevealed)));
        assert!(matches!(
            s.reveal(pi.clone()),
            Err(ProtocolError::Phase(PhaseError::ResponsesIncomplete {
                recorded: 0,
                ..
            }))
        ));
        let service = OracleModel::clean(&ds, 0);
        s.query_all(&service).unwrap();
        assert!(matches!(
            s.record_response(Label(0)),
            Err(PhaseError::ResponsesComplete(16))
        ));
        assert!(matches!(
            s.reveal(vec![0; 16]),
            Err(ProtocolError::Permutation(16))
        ));
        assert!(matches!(
            s.reveal(pi[..15].to_vec()),
            Err(ProtocolError::Permutation(16))
        ));
        s.reveal(pi.clone()).unwrap();
        assert_eq!(s.phase(), Phase::Revealed);
        assert_eq!(s.permutation().unwrap(), &pi[..]);
        assert!(matches!(
            s.record_response(Label(0)),
            Err(PhaseError::AlreadyRevealed)
        ));
        assert!(s.decide(&ledger, &p, 0.5).is_ok());
    }

    #[test]
    fn missing_evidence_is_an_error() {
        let (ds, p) = small();
        let owner = owner_prepare(&keygen(5, &p), &ds, &p, 1).unwrap();
        let service = OracleModel::clean(&ds, 0);
        assert!(matches!(
            verify_session(
                &owner,
                &owner.record_id(),
                &service,
                0.5,
                0,
                &MemoryLedger::new()
            ),
            Err(ProtocolError::EvidenceMissing(_))
        ));
    }

    #[test]
    fn verdict_threshold() {
        assert!(Verdict::new(true, 32, 64, 0.5).accepted);
        assert!(!Verdict::new(true, 31, 64, 0.5).accepted);
        assert!(!Verdict::new(false, 64, 64, 0.5).accepted);
        assert!(Verdict::new(true, 3, 4, 0.75).accepted);
    }

    #[test]
    fn forward_verification() {
        let (ds, p) = small();
        let key = keygen(6, &p);
        let ts = forward_trigger_set(SchemeId::Noise, &key, &p, &ds).unwrap();
        let marked = OracleModel::clean(&ds, 0).with_triggers(&ts);
        assert!(
            verify_forward(SchemeId::Noise, &key, &p, &ds, &marked, 1.0)
                .unwrap()
                .accepted
        );
        let other = keygen(7, &p);
        assert!(
            !verify_forward(SchemeId::Noise, &other, &p, &ds, &marked, 0.5)
                .unwrap()
                .accepted
        );
    }

    #[test]
    fn seeds_are_distinct() {
        let s = Seeds::from_master(0);
        let all = [
            s.dataset,
            s.model,
            s.embed,
            s.key,
            s.select,
            s.adversary,
            s.session,
        ];
        let set: std::collections::HashSet<_> = all.iter().collect();
        assert_eq!(set.len(), all.len());
        assert_eq!(s, Seeds::from_master(0));
    }
}
