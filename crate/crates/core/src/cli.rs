//! Experiment driver behind the `capsule-wm` binary.
//!
//! Settings come from an optional TOML file, then the `CAPSULE_WM_OUT`
//! environment variable for the output directory, then command-line flags.
//! Every random draw is derived from the master seed. Each subcommand writes
//! its artifacts under `<out>/<subcommand>/` together with a `manifest.json`
//! holding the resolved configuration, the derived seeds, and a SHA-256 per
//! artifact.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{ClassifierHyper, ClassifierKind};
use crate::evidence::{EvidenceStore, Ledger, PendingEvidence};
use crate::metrics::{
    ambiguity_montecarlo, cascore_bound, chernoff_bound, exact_tail, CAScoreConfig,
};
use crate::model::{accuracy, gen_dataset, train, EmbedHyper, OracleModel, TrainHyper};
use crate::protocol::{
    functionality_drop, owner_prepare, scenario_capsulation, scenario_overwrite, verify_forward,
    verify_session, watermark_model, CapsulationConfig, CapsulationReport, ExperimentSetup, Seeds,
};
use crate::scheme::{keygen, LabelMode, SchemeParams};
use crate::seed::derive_seed;
use crate::triggers::SchemeId;

pub const OUT_ENV: &str = "CAPSULE_WM_OUT";

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_COMPONENT: i32 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub hidden: usize,
    pub learning_rate: f32,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainHyper::default();
        Self {
            hidden: d.hidden,
            learning_rate: d.learning_rate,
            epochs: d.epochs,
            batch_size: d.batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedSection {
    pub learning_rate: f32,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub clean_per_trigger: usize,
    pub target_accuracy: f64,
    pub min_accuracy: f64,
    pub settle_epochs: usize,
}

impl Default for EmbedSection {
    fn default() -> Self {
        let d = EmbedHyper::default();
        Self {
            learning_rate: d.learning_rate,
            max_epochs: d.max_epochs,
            batch_size: d.batch_size,
            clean_per_trigger: d.clean_per_trigger,
            target_accuracy: d.target_accuracy,
            min_accuracy: d.min_accuracy,
            settle_epochs: d.settle_epochs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub kinds: Vec<ClassifierKind>,
    /// Q for the capsulation attack.
    pub q: usize,
    /// Q grid for CAScore.
    pub q_values: Vec<usize>,
    pub thresholds: Vec<f64>,
    pub eval_size: usize,
    pub classifier: ClassifierHyper,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            kinds: ClassifierKind::ALL.to_vec(),
            q: 500,
            q_values: vec![50, 100, 200, 500],
            thresholds: vec![0.5],
            eval_size: 1000,
            classifier: ClassifierHyper::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Not echoed in manifests, so runs into different directories compare
    /// equal.
    #[serde(skip_serializing)]
    pub out_dir: PathBuf,
    pub scheme: SchemeId,
    pub n_per_class: usize,
    pub tau: f64,
    pub trials: u64,
    pub params: SchemeParams,
    pub train: TrainSection,
    pub embed: EmbedSection,
    pub attack: AttackSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            scheme: SchemeId::Reverse,
            n_per_class: 500,
            tau: 0.5,
            trials: 1_000_000,
            params: SchemeParams::default(),
            train: TrainSection::default(),
            embed: EmbedSection::default(),
            attack: AttackSection::default(),
        }
    }
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Component(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Component(m) => write!(f, "error: {m}"),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Component(_) => EXIT_COMPONENT,
        }
    }
}

fn component<E: fmt::Display>(e: E) -> CliError {
    CliError::Component(e.to_string())
}

fn field_error(field: &str, reason: &str) -> CliError {
    CliError::Config(format!("{field}: {reason}"))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.params.validate().map_err(|e| match e {
            crate::scheme::SchemeError::InvalidParams { field, reason } => {
                field_error(&format!("params.{field}"), &reason)
            }
            other => CliError::Config(other.to_string()),
        })?;
        if self.n_per_class < 2 {
            return Err(field_error("n_per_class", "must be at least 2"));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(field_error("tau", "must lie in (0, 1]"));
        }
        let a = &self.attack;
        if a.kinds.is_empty() {
            return Err(field_error("attack.kinds", "must not be empty"));
        }
        if a.q < 2 || a.q_values.iter().any(|&q| q < 2) || a.q_values.is_empty() {
            return Err(field_error("attack.q", "Q values must be at least 2"));
        }
        if a.thresholds.is_empty() || a.thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(field_error(
                "attack.thresholds",
                "must be non-empty values in [0, 1]",
            ));
        }
        if a.eval_size < 1 {
            return Err(field_error("attack.eval_size", "must be at least 1"));
        }
        if a.classifier.k < 1 {
            return Err(field_error("attack.classifier.k", "must be at least 1"));
        }
        if self.train.epochs > 0 && self.train.batch_size == 0 {
            return Err(field_error("train.batch_size", "must be at least 1"));
        }
        if self.embed.batch_size == 0 {
            return Err(field_error("embed.batch_size", "must be at least 1"));
        }
        Ok(())
    }

    pub fn setup(&self) -> ExperimentSetup {
        let seeds = Seeds::from_master(self.seed);
        ExperimentSetup {
            params: self.params,
            n_per_class: self.n_per_class,
            train: TrainHyper {
                hidden: self.train.hidden,
                learning_rate: self.train.learning_rate,
                epochs: self.train.epochs,
                batch_size: self.train.batch_size,
                seed: seeds.model,
            },
            embed: EmbedHyper {
                learning_rate: self.embed.learning_rate,
                max_epochs: self.embed.max_epochs,
                batch_size: self.embed.batch_size,
                clean_per_trigger: self.embed.clean_per_trigger,
                target_accuracy: self.embed.target_accuracy,
                min_accuracy: self.embed.min_accuracy,
                settle_epochs: self.embed.settle_epochs,
                seed: seeds.embed,
            },
            seeds,
        }
    }

    fn capsulation(&self) -> CapsulationConfig {
        CapsulationConfig {
            kinds: self.attack.kinds.clone(),
            q: self.attack.q,
            thresholds: self.attack.thresholds.clone(),
            classifier: self.attack.classifier,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "capsule-wm",
    version,
    about = "Backdoor watermarking, capsulation attacks, and reverse-backdoor ownership verification"
)]
pub struct Cli {
    /// TOML experiment configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Default, Args)]
pub struct Overrides {
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub scheme: Option<SchemeId>,
    #[arg(long, global = true)]
    pub n_per_class: Option<usize>,
    #[arg(long, global = true)]
    pub tau: Option<f64>,
    #[arg(long, global = true)]
    pub trials: Option<u64>,
    #[arg(long, global = true)]
    pub code_bits: Option<usize>,
    #[arg(long, global = true)]
    pub num_triggers: Option<usize>,
    #[arg(long, global = true)]
    pub num_labels: Option<usize>,
    #[arg(long, global = true)]
    pub label_mode: Option<LabelModeArg>,
    #[arg(long, global = true)]
    pub q: Option<usize>,
    #[arg(long, global = true, value_delimiter = ',')]
    pub q_values: Option<Vec<usize>>,
    #[arg(long, global = true, value_delimiter = ',')]
    pub kinds: Option<Vec<KindArg>>,
    #[arg(long, global = true, value_delimiter = ',')]
    pub thresholds: Option<Vec<f64>>,
    #[arg(long, global = true)]
    pub eval_size: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LabelModeArg {
    Full,
    Parity,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KindArg {
    Knn,
    NaiveBayes,
    Logistic,
    Mlp,
}

impl From<KindArg> for ClassifierKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Knn => ClassifierKind::Knn,
            KindArg::NaiveBayes => ClassifierKind::NaiveBayes,
            KindArg::Logistic => ClassifierKind::Logistic,
            KindArg::Mlp => ClassifierKind::Mlp,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ServiceArg {
    /// Lookup oracle that answers every trigger with its assigned label.
    Honest,
    /// Lookup oracle that knows only true labels.
    Unrelated,
    /// Trained network with the watermark embedded.
    Model,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Derive the identity key from the seed.
    Keygen,
    /// Select reverse triggers, chain their labels, and publish the evidence.
    Register,
    /// Train a clean model and embed the configured scheme's watermark.
    Embed,
    /// Run one verification session against a service.
    Verify {
        #[arg(long, value_enum, default_value = "honest")]
        service: ServiceArg,
    },
    /// Capsulate the watermarked model for the configured scheme.
    Attack,
    /// Estimate the CAScore bound.
    Cascore {
        /// Every scheme instead of the configured one.
        #[arg(long)]
        all: bool,
    },
    /// Chernoff bound on the success of ambiguity attacks.
    Chernoff {
        /// Label-space size (defaults to params.num_labels).
        #[arg(long)]
        c: Option<usize>,
        /// Number of triggers (defaults to params.num_triggers).
        #[arg(long)]
        n: Option<usize>,
    },
    /// End-to-end scenarios.
    Scenario {
        #[command(subcommand)]
        which: ScenarioCommand,
    },
    /// Merge every CSV under the output directory into one summary.
    Report,
}

#[derive(Debug, Subcommand)]
pub enum ScenarioCommand {
    /// Capsulation against every scheme.
    Capsulation,
    /// Two owners, one pirate, one ambiguous ownership claim.
    Overwrite,
}

impl Command {
    fn dir_name(&self) -> &'static str {
        match self {
            Command::Keygen => "keygen",
            Command::Register => "register",
            Command::Embed => "embed",
            Command::Verify { .. } => "verify",
            Command::Attack => "attack",
            Command::Cascore { .. } => "cascore",
            Command::Chernoff { .. } => "chernoff",
            Command::Scenario {
                which: ScenarioCommand::Capsulation,
            } => "scenario_capsulation",
            Command::Scenario {
                which: ScenarioCommand::Overwrite,
            } => "scenario_overwrite",
            Command::Report => "report",
        }
    }
}

/// Loads the config file (if any), then applies the environment and flags.
pub fn resolve_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            ExperimentConfig::from_toml(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(dir) = std::env::var_os(OUT_ENV) {
        cfg.out_dir = PathBuf::from(dir);
    }
    let o = &cli.overrides;
    macro_rules! set {
        ($field:expr, $value:expr) => {
            if let Some(v) = $value.clone() {
                $field = v.into();
            }
        };
    }
    set!(cfg.seed, o.seed);
    set!(cfg.out_dir, o.out);
    set!(cfg.scheme, o.scheme);
    set!(cfg.n_per_class, o.n_per_class);
    set!(cfg.tau, o.tau);
    set!(cfg.trials, o.trials);
    set!(cfg.params.code_bits, o.code_bits);
    set!(cfg.params.num_triggers, o.num_triggers);
    set!(cfg.params.num_labels, o.num_labels);
    set!(cfg.attack.q, o.q);
    set!(cfg.attack.q_values, o.q_values);
    set!(cfg.attack.thresholds, o.thresholds);
    set!(cfg.attack.eval_size, o.eval_size);
    if let Some(m) = o.label_mode {
        cfg.params.label_mode = match m {
            LabelModeArg::Full => LabelMode::Full,
            LabelModeArg::Parity => LabelMode::Parity,
        };
    }
    if let Some(kinds) = &o.kinds {
        cfg.attack.kinds = kinds.iter().map(|&k| k.into()).collect();
    }
    cfg.validate()?;
    Ok(cfg)
}

impl clap::ValueEnum for SchemeId {
    fn value_variants<'a>() -> &'a [Self] {
        &SchemeId::ALL
    }
    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(self.as_str()))
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config: &'a ExperimentConfig,
    seeds: Seeds,
    artifacts: &'a BTreeMap<String, String>,
    status: &'a str,
    error: Option<String>,
    partial: bool,
}

/// Output directory of one subcommand; records a digest for every file written.
struct RunDir {
    root: PathBuf,
    dir: PathBuf,
    artifacts: BTreeMap<String, String>,
}

impl RunDir {
    fn new(root: &Path, name: &str) -> Result<Self, CliError> {
        let dir = root.join(name);
        fs::create_dir_all(&dir).map_err(|e| component(format!("{}: {e}", dir.display())))?;
        Ok(Self {
            root: root.to_path_buf(),
            dir,
            artifacts: BTreeMap::new(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn track(&mut self, path: &Path) -> Result<(), CliError> {
        let bytes = fs::read(path).map_err(component)?;
        let rel = path.strip_prefix(&self.dir).unwrap_or(path);
        self.artifacts.insert(
            rel.display().to_string(),
            hex::encode(Sha256::digest(&bytes)),
        );
        Ok(())
    }

    fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(component)?;
        }
        fs::write(&path, bytes).map_err(component)?;
        self.track(&path)
    }

    fn track_dir(&mut self, sub: &str) -> Result<(), CliError> {
        let mut files: Vec<PathBuf> = fs::read_dir(self.path(sub))
            .map_err(component)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        files.sort();
        for f in files {
            self.track(&f)?;
        }
        Ok(())
    }

    fn finish(&self, command: &str, cfg: &ExperimentConfig, result: &Result<(), CliError>) {
        let manifest = Manifest {
            command,
            config: cfg,
            seeds: Seeds::from_master(cfg.seed),
            artifacts: &self.artifacts,
            status: if result.is_ok() { "ok" } else { "error" },
            error: result.as_ref().err().map(|e| e.to_string()),
            partial: result.is_err(),
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        let _ = fs::write(self.dir.join("manifest.json"), text + "\n");
    }
}

fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("value serializes") + "\n"
}

fn ledger_path(root: &Path) -> PathBuf {
    root.join("ledger.jsonl")
}

fn cmd_keygen(cfg: &ExperimentConfig, run: &mut RunDir) -> Result<(), CliError> {
    let seeds = Seeds::from_master(cfg.seed);
    let key = keygen(seeds.key, &cfg.params);
    run.write(
        "key.json",
        json(&serde_json::json!({ "key": key.bits.to_hex(), "seed": seeds.key })),
    )?;
    println!("key {}", key.bits.to_hex());
    Ok(())
}

fn require_reverse(cfg: &ExperimentConfig, what: &str) -> Result<(), CliError> {
    if cfg.scheme != SchemeId::Reverse {
        return Err(field_error(
            "scheme",
            &format!("{what} requires the reverse scheme"),
        ));
    }
    Ok(())
}

fn cmd_register(cfg: &ExperimentConfig, run: &mut RunDir) -> Result<(), CliError> {
    require_reverse(cfg, "register")?;
    let setup = cfg.setup();
    let dataset =
        gen_dataset(setup.seeds.dataset, cfg.n_per_class, &cfg.params).map_err(component)?;
    let key = keygen(setup.seeds.key, &cfg.params);
    let mut ledger = Ledger::new(ledger_path(&run.root));
    let (owner, record) = crate::protocol::owner_register(
        &key,
        &dataset,
        &cfg.params,
        setup.seeds.select,
        &mut ledger,
    )
    .map_err(component)?;
    owner
        .triggers
        .save(&run.path("triggers"))
        .map_err(component)?;
    run.track_dir("triggers")?;
    run.write(
        "evidence.json",
        json(&serde_json::json!({
            "id": record.record_id,
            "key": record.key.to_hex(),
            "root": record.merkle_root.to_hex(),
        })),
    )?;
    println!("registered {}", record.record_id);
    Ok(())
}

fn cmd_embed(cfg: &ExperimentConfig, run: &mut RunDir) -> Result<(), CliError> {
    let setup = cfg.setup();
    let dataset =
        gen_dataset(setup.seeds.dataset, cfg.n_per_class, &cfg.params).map_err(component)?;
    let clean = train(&dataset, &setup.train).map_err(component)?;
    let key = keygen(setup.seeds.key, &cfg.params);
    let wm = watermark_model(cfg.scheme, &key, &clean, &dataset, &setup).map_err(component)?;
    for (name, model) in [("clean.bin", &wm.clean), ("model.bin", &wm.model)] {
        let path = run.path(name);
        model.save(&path).map_err(component)?;
        run.track(&path)?;
        run.track(&run.path(&format!("{name}.json")))?;
    }
    wm.triggers.save(&run.path("triggers")).map_err(component)?;
    run.track_dir("triggers")?;
    let before = accuracy(&wm.clean, dataset.test_pairs());
    let after = accuracy(&wm.model, dataset.test_pairs());
    let trig = wm.trigger_accuracy(&wm.model);
    let drop = functionality_drop(&wm, &dataset);
    run.write(
        "embed.csv",
        format!(
            "scheme,num_triggers,clean_before,clean_after,drop_points,trigger_accuracy\n{},{},{:.6},{:.6},{:.4},{:.6}\n",
            cfg.scheme, cfg.params.num_triggers, before, after, drop, trig
        ),
    )?;
    println!(
        "{}: clean {:.4} -> {:.4} (drop {:.2} points), trigger accuracy {:.4}",
        cfg.scheme, before, after, drop, trig
    );
    Ok(())
}

fn cmd_verify(
    cfg: &ExperimentConfig,
    service: ServiceArg,
    run: &mut RunDir,
) -> Result<(), CliError> {
    let setup = cfg.setup();
    let dataset =
        gen_dataset(setup.seeds.dataset, cfg.n_per_class, &cfg.params).map_err(component)?;
    let key = keygen(setup.seeds.key, &cfg.params);
    let model = match service {
        ServiceArg::Model => {
            let clean = train(&dataset, &setup.train).map_err(component)?;
            Some(
                watermark_model(cfg.scheme, &key, &clean, &dataset, &setup)
                    .map_err(component)?
                    .model,
            )
        }
        _ => None,
    };
    if cfg.scheme.is_forward() {
        let ts = crate::triggers::forward_trigger_set(cfg.scheme, &key, &cfg.params, &dataset)
            .map_err(component)?;
        let oracle = OracleModel::clean(&dataset, setup.seeds.model);
        let verdict = match (service, &model) {
            (ServiceArg::Honest, _) => verify_forward(
                cfg.scheme,
                &key,
                &cfg.params,
                &dataset,
                &oracle.with_triggers(&ts),
                cfg.tau,
            ),
            (ServiceArg::Unrelated, _) => {
                verify_forward(cfg.scheme, &key, &cfg.params, &dataset, &oracle, cfg.tau)
            }
            (ServiceArg::Model, Some(m)) => {
                verify_forward(cfg.scheme, &key, &cfg.params, &dataset, m, cfg.tau)
            }
            (ServiceArg::Model, None) => unreachable!(),
        }
        .map_err(component)?;
        run.write("verdict.json", json(&verdict))?;
        println!(
            "{}: {} of {} match, accepted = {}",
            cfg.scheme, verdict.match_count, cfg.params.num_triggers, verdict.accepted
        );
        return Ok(());
    }
    let owner =
        owner_prepare(&key, &dataset, &cfg.params, setup.seeds.select).map_err(component)?;
    let mut ledger = Ledger::new(ledger_path(&run.root));
    let record_id = owner.record_id();
    if ledger.lookup(&record_id).map_err(component)?.is_none() {
        ledger
            .append(PendingEvidence::new(&key, owner.root.clone()))
            .map_err(component)?;
    }
    let oracle = OracleModel::clean(&dataset, setup.seeds.model);
    let honest = oracle.clone().with_triggers(&owner.triggers);
    let svc: &dyn crate::model::BlackBoxModel = match (service, &model) {
        (ServiceArg::Honest, _) => &honest,
        (ServiceArg::Unrelated, _) => &oracle,
        (ServiceArg::Model, Some(m)) => m,
        (ServiceArg::Model, None) => unreachable!(),
    };
    let transcript = verify_session(
        &owner,
        &record_id,
        svc,
        cfg.tau,
        setup.seeds.session,
        &ledger,
    )
    .map_err(component)?;
    run.write("transcript.json", transcript.to_json() + "\n")?;
    let v = transcript.verdict;
    println!(
        "merkle_ok = {}, {} of {} match (accuracy {:.4}, tau {}), accepted = {}",
        v.merkle_ok, v.match_count, cfg.params.num_triggers, v.accuracy, v.tau, v.accepted
    );
    Ok(())
}

fn print_capsulation(report: &CapsulationReport) {
    for r in &report.rows {
        println!(
            "{:8} {:12} theta {:.2}: clean {:.4} -> {:.4}, triggers {:.4} -> {:.4}",
            r.scheme.as_str(),
            r.filter,
            r.threshold,
            r.clean_pre,
            r.clean_post,
            r.trigger_pre,
            r.trigger_post
        );
    }
}

fn cmd_attack(cfg: &ExperimentConfig, run: &mut RunDir) -> Result<(), CliError> {
    let report =
        scenario_capsulation(cfg.scheme, &cfg.setup(), &cfg.capsulation()).map_err(component)?;
    run.write("capsulation.csv", report.to_csv())?;
    run.write("capsulation.json", json(&report))?;
    print_capsulation(&report);
    Ok(())
}

fn cmd_cascore(cfg: &ExperimentConfig, all: bool, run: &mut RunDir) -> Result<(), CliError> {
    let setup = cfg.setup();
    let dataset =
        gen_dataset(setup.seeds.dataset, cfg.n_per_class, &cfg.params).map_err(component)?;
    let config = CAScoreConfig {
        kinds: cfg.attack.kinds.clone(),
        q_values: cfg.attack.q_values.clone(),
        eval_size: cfg.attack.eval_size,
        hyper: cfg.attack.classifier,
        seed: derive_seed(cfg.seed, "cascore", 0),
    };
    let schemes: Vec<SchemeId> = if all {
        SchemeId::ALL.to_vec()
    } else {
        vec![cfg.scheme]
    };
    let mut csv = String::new();
    let mut reports = Vec::new();
    for scheme in schemes {
        let r = cascore_bound(scheme, &dataset, &cfg.params, &config).map_err(component)?;
        let body = r.to_csv();
        if csv.is_empty() {
            csv.push_str(&body);
        } else {
            csv.extend(body.lines().skip(1).map(|l| format!("{l}\n")));
        }
        println!(
            "{:8} CAScore bound {:.4} (max AUC {:.4})",
            scheme.as_str(),
            r.cascore_bound,
            r.max_auc
        );
        reports.push(r);
    }
    run.write("cascore.csv", csv)?;
    run.write("cascore.json", json(&reports))?;
    Ok(())
}

fn cmd_chernoff(
    cfg: &ExperimentConfig,
    c: Option<usize>,
    n: Option<usize>,
    run: &mut RunDir,
) -> Result<(), CliError> {
    let c = c.unwrap_or(cfg.params.num_labels);
    let n = n.unwrap_or(cfg.params.num_triggers);
    let bound = chernoff_bound(cfg.tau, c, n).map_err(|e| CliError::Config(e.to_string()))?;
    let exact = exact_tail(cfg.tau, c, n).map_err(component)?;
    let mc = if cfg.trials > 0 {
        Some(
            ambiguity_montecarlo(
                c,
                n,
                cfg.tau,
                cfg.trials,
                derive_seed(cfg.seed, "chernoff", 0),
            )
            .map_err(component)?,
        )
    } else {
        None
    };
    println!("chernoff_bound {bound:.6e}");
    println!("exact_tail {exact:.6e}");
    if let Some(m) = mc {
        println!("monte_carlo {m:.6e} ({} trials)", cfg.trials);
    }
    run.write(
        "chernoff.json",
        json(&serde_json::json!({
            "tau": cfg.tau,
            "c": c,
            "n": n,
            "chernoff_bound": bound,
            "exact_tail": exact,
            "monte_carlo": mc,
            "trials": cfg.trials,
        })),
    )
}

fn cmd_scenario_capsulation(cfg: &ExperimentConfig, run: &mut RunDir) -> Result<(), CliError> {
    let setup = cfg.setup();
    let mut all = CapsulationReport { rows: Vec::new() };
    for scheme in SchemeId::ALL {
        let r = scenario_capsulation(scheme, &setup, &cfg.capsulation()).map_err(component)?;
        all.rows.extend(r.rows);
    }
    run.write("capsulation.csv", all.to_csv())?;
    run.write("capsulation.json", json(&all))?;
    print_capsulation(&all);
    Ok(())
}

fn cmd_scenario_overwrite(cfg: &ExperimentConfig, run: &mut RunDir) -> Result<(), CliError> {
    require_reverse(cfg, "the overwrite scenario")?;
    let path = run.path("ledger.jsonl");
    if path.exists() {
        return Err(component(format!(
            "{} already exists; the scenario needs a fresh ledger",
            path.display()
        )));
    }
    let mut ledger = Ledger::new(path);
    let report = scenario_overwrite(&cfg.setup(), cfg.tau, &mut ledger).map_err(component)?;
    run.write("overwrite.json", json(&report))?;
    let show = |who: &str, v: &crate::protocol::Verdict| {
        println!(
            "  {who}: {:.4} accuracy, accepted = {}",
            v.accuracy, v.accepted
        )
    };
    println!("capsulated service:");
    show("alice", &report.capsulated.alice);
    show("carol", &report.capsulated.carol);
    println!("without the filter:");
    show("alice", &report.without_filter.alice);
    show("carol", &report.without_filter.carol);
    println!(
        "alice registered first = {}, ownership ambiguous = {}",
        report.alice_earlier, report.ambiguous
    );
    Ok(())
}

/// Renders every CSV under the output directory (except the report's own)
/// as a Markdown table, in path order.
fn cmd_report(run: &mut RunDir) -> Result<(), CliError> {
    let mut csvs = Vec::new();
    collect_csvs(&run.root, &mut csvs).map_err(component)?;
    csvs.retain(|p| !p.starts_with(&run.dir));
    csvs.sort();
    let mut out = String::from("# Experiment summary\n");
    for path in &csvs {
        let text = fs::read_to_string(path).map_err(component)?;
        let rel = path.strip_prefix(&run.root).unwrap_or(path);
        out.push_str(&format!("\n## {}\n\n", rel.display()));
        for (i, line) in text.lines().enumerate() {
            out.push_str(&format!(
                "| {} |\n",
                line.split(',').collect::<Vec<_>>().join(" | ")
            ));
            if i == 0 {
                let cols = line.split(',').count();
                out.push_str(&format!("|{}\n", "---|".repeat(cols)));
            }
        }
    }
    run.write("summary.md", &out)?;
    println!("merged {} tables", csvs.len());
    Ok(())
}

fn collect_csvs(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    if !dir.is_dir() {
        return Ok(());
    }
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_csvs(&path, out)?;
        } else if path.extension().is_some_and(|e| e == "csv") {
            out.push(path);
        }
    }
    Ok(())
}

fn dispatch(cli: &Cli, cfg: &ExperimentConfig, run: &mut RunDir) -> Result<(), CliError> {
    match &cli.command {
        Command::Keygen => cmd_keygen(cfg, run),
        Command::Register => cmd_register(cfg, run),
        Command::Embed => cmd_embed(cfg, run),
        Command::Verify { service } => cmd_verify(cfg, *service, run),
        Command::Attack => cmd_attack(cfg, run),
        Command::Cascore { all } => cmd_cascore(cfg, *all, run),
        Command::Chernoff { c, n } => cmd_chernoff(cfg, *c, *n, run),
        Command::Scenario {
            which: ScenarioCommand::Capsulation,
        } => cmd_scenario_capsulation(cfg, run),
        Command::Scenario {
            which: ScenarioCommand::Overwrite,
        } => cmd_scenario_overwrite(cfg, run),
        Command::Report => cmd_report(run),
    }
}

/// Parses `args` (including the program name), runs the subcommand, and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let cfg = match resolve_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return e.exit_code();
        }
    };
    let name = cli.command.dir_name();
    let mut run = match RunDir::new(&cfg.out_dir, name) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("{e}");
            return e.exit_code();
        }
    };
    let result = dispatch(&cli, &cfg, &mut run);
    run.finish(name, &cfg, &result);
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("capsule-wm").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn toml_sections_and_unknown_fields() {
        let cfg = ExperimentConfig::from_toml(
            "seed = 7\nscheme = \"wonder\"\n[params]\nnum_triggers = 16\n[attack]\nkinds = [\"mlp\", \"knn\"]\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.scheme, SchemeId::Wonder);
        assert_eq!(cfg.params.num_triggers, 16);
        assert_eq!(cfg.params.num_labels, 10);
        assert_eq!(
            cfg.attack.kinds,
            vec![ClassifierKind::Mlp, ClassifierKind::Knn]
        );
        assert!(ExperimentConfig::from_toml("sed = 1\n").is_err());
        assert!(ExperimentConfig::from_toml("[params]\nnum_trigers = 4\n").is_err());
    }

    #[test]
    fn flags_override_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "seed = 7\ntau = 0.9\n[params]\nnum_labels = 4\n").unwrap();
        let cli = parse(&[
            "--config",
            path.to_str().unwrap(),
            "chernoff",
            "--tau",
            "0.75",
            "--num-labels",
            "2",
            "--kinds",
            "knn,logistic",
        ]);
        let cfg = resolve_config(&cli).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.tau, 0.75);
        assert_eq!(cfg.params.num_labels, 2);
        assert_eq!(
            cfg.attack.kinds,
            vec![ClassifierKind::Knn, ClassifierKind::Logistic]
        );
    }

    #[test]
    fn invalid_fields_are_named() {
        let cli = parse(&["keygen", "--num-triggers", "12"]);
        match resolve_config(&cli) {
            Err(CliError::Config(m)) => assert!(m.starts_with("params.num_triggers"), "{m}"),
            other => panic!("{other:?}"),
        }
        let cli = parse(&["keygen", "--tau", "1.5"]);
        assert!(matches!(resolve_config(&cli), Err(CliError::Config(m)) if m.starts_with("tau")));
    }

    #[test]
    fn exit_codes() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        assert_eq!(run(["capsule-wm", "keygen", "--out", out]), EXIT_OK);
        assert_eq!(
            run(["capsule-wm", "keygen", "--out", out, "--code-bits", "12"]),
            EXIT_CONFIG
        );
        assert_eq!(run(["capsule-wm", "bogus"]), EXIT_CONFIG);
        assert_eq!(
            run(["capsule-wm", "register", "--out", out, "--n-per-class", "2"]),
            EXIT_COMPONENT
        );
        let manifest = fs::read_to_string(dir.path().join("register/manifest.json")).unwrap();
        assert!(manifest.contains("\"partial\": true"), "{manifest}");
    }

    #[test]
    fn chernoff_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        let code = run([
            "capsule-wm",
            "chernoff",
            "--tau",
            "0.75",
            "--c",
            "2",
            "--n",
            "4",
            "--trials",
            "0",
            "--out",
            out,
        ]);
        assert_eq!(code, EXIT_OK);
        let v: serde_json::Value = serde_json::from_str(
            &fs::read_to_string(dir.path().join("chernoff/chernoff.json")).unwrap(),
        )
        .unwrap();
        assert!((v["exact_tail"].as_f64().unwrap() - 0.3125).abs() < 1e-12);
        assert!(v["chernoff_bound"].as_f64().unwrap() >= 0.3125);
        assert_eq!(
            run([
                "capsule-wm",
                "chernoff",
                "--tau",
                "0.05",
                "--c",
                "10",
                "--out",
                out
            ]),
            EXIT_CONFIG
        );
    }
}
