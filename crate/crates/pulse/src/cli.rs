//! Command-line driver.
//!
//! Stage subcommands (`synth` through `eval`) run one step of the pipeline
//! against a single artifacts directory and are resumable: a MANIFEST.json
//! next to the artifacts records the config fingerprint plus a content hash
//! for every file each stage wrote. Rerunning a finished stage verifies the
//! hashes and reuses the files; any mismatch, or files present without a
//! manifest entry, aborts with a stale-artifacts error rather than silently
//! recomputing. The composite subcommands (`ablate-a`, `ablate-b`,
//! `cross-domain`) run their whole experiment in one stage under the same
//! rules.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::backbone::{self, Backbone, ItemVocab};
use crate::config::{self, RunConfig};
use crate::data::{self, synth::gen_synthetic_dataset, CandidateSet, DatasetSplit, ItemCatalog};
use crate::error::{PulseError, Result};
use crate::eval::{
    self, behavior_texts, emit_report, generate_rationales, history_texts, hr_from_records,
    make_backend, reference_targets, scoring_space, select_rationales, MetricsReport,
    REPORT_VERSION,
};
use crate::hashing::{derive_seed, sha256_file};
use crate::rationale::{self, Rationale, RationaleTree};
use crate::sft::{self, SelectionMethod};
use crate::tensor::{read_checkpoint, write_checkpoint};
use crate::thought::{self, ThoughtSpace};

pub const MANIFEST_NAME: &str = "MANIFEST.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Parser)]
#[command(
    name = "pulse",
    version,
    about = "Two-phase rationale-aligned sequential recommendation pipeline"
)]
pub struct Cli {
    /// Run config (JSON). Missing keys fall back to defaults.
    #[arg(long, global = true, default_value = "pulse.json")]
    pub config: PathBuf,
    /// Override the config's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Override the config's artifacts directory.
    #[arg(long, global = true)]
    pub artifacts_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate the synthetic interaction corpus.
    Synth,
    /// Load interactions, core-filter, split, and sample candidate slates.
    Ingest,
    /// Train the sequential backbone.
    TrainBackbone,
    /// Generate positive and base rationales plus candidate trees.
    GenRationales,
    /// Contrastive alignment of rationales with behavioral texts.
    TrainTs,
    /// Pick one rationale per user according to the configured method.
    Select,
    /// Train the rationale-conditioned candidate scorer.
    TrainSft,
    /// Score the test slates and emit the report.
    Eval,
    /// Scoring-space ablation over identical candidate slates.
    AblateA,
    /// Selection-method ablation.
    AblateB {
        /// Add a uniform random-leaf arm as a control.
        #[arg(long)]
        include_control: bool,
    },
    /// Train on this config, evaluate frozen on the target config's domain.
    CrossDomain {
        /// Target-domain run config (JSON).
        #[arg(long)]
        target_config: PathBuf,
    },
    /// Project rationale and behavior embeddings to 2D for plotting.
    Project,
    /// Print every config key with its type and default.
    ConfigSchema,
}

/// Parse args, dispatch, and map errors to exit codes: 1 usage, 2 io,
/// 3 data, 4 training, 5 backend.
pub fn main_entry<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return 1;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(cli: Cli) -> Result<()> {
    if matches!(cli.command, Command::ConfigSchema) {
        for line in config::schema_lines()? {
            println!("{line}");
        }
        return Ok(());
    }

    let mut cfg = config::load_config(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &cli.artifacts_dir {
        cfg.artifacts_dir = dir.clone();
    }
    cfg.validate()?;
    log::info!(
        "config {}: seed {}, fingerprint {}",
        cli.config.display(),
        cfg.seed,
        cfg.fingerprint()?
    );

    match cli.command {
        Command::ConfigSchema => unreachable!("handled above"),
        Command::Synth => {
            if let Some(path) = &cfg.data.interactions {
                return Err(PulseError::InvalidArgument(format!(
                    "config reads interactions from {}; synth applies only to synthetic-data configs",
                    path.display()
                )));
            }
            Ctx::open(cfg)?.ensure_synth()
        }
        Command::Ingest => Ctx::open(cfg)?.ensure_ingest(),
        Command::TrainBackbone => Ctx::open(cfg)?.ensure_backbone(),
        Command::GenRationales => Ctx::open(cfg)?.ensure_rationales(),
        Command::TrainTs => Ctx::open(cfg)?.ensure_thought(),
        Command::Select => Ctx::open(cfg)?.ensure_select(),
        Command::TrainSft => Ctx::open(cfg)?.ensure_sft(),
        Command::Eval => Ctx::open(cfg)?.ensure_eval(),
        Command::Project => Ctx::open(cfg)?.ensure_project(),
        Command::AblateA => {
            let mut ctx = Ctx::open(cfg)?;
            ctx.ensure_composite("ablate-a", "reports/ablation_a", |config| {
                eval::run_ablation_a(config).map(|_| ())
            })
        }
        Command::AblateB { include_control } => {
            let mut ctx = Ctx::open(cfg)?;
            ctx.ensure_composite("ablate-b", "reports/ablation_b", |config| {
                eval::run_ablation_b(config, include_control).map(|_| ())
            })
        }
        Command::CrossDomain { target_config } => {
            let target = config::load_config(&target_config)?;
            target.validate()?;
            let source = cfg;
            let transfer_fp = eval::transfer_fingerprint(&source, &target)?;
            let stage = format!("cross-domain-{}", &transfer_fp[..12]);
            let mut ctx = Ctx::open_at(source.clone(), target.artifacts_dir.clone())?;
            ctx.ensure_composite(&stage, "reports/cross_domain", move |_| {
                eval::run_cross_domain(&source, &target).map(|_| ())
            })
        }
    }
}

/// Per-stage file hashes plus the config fingerprint the run belongs to.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub manifest_version: u32,
    pub fingerprint: String,
    pub stages: BTreeMap<String, BTreeMap<String, String>>,
}

impl Manifest {
    fn new(fingerprint: String) -> Self {
        Manifest {
            manifest_version: MANIFEST_VERSION,
            fingerprint,
            stages: BTreeMap::new(),
        }
    }
}

pub fn read_manifest(root: &Path) -> Result<Option<Manifest>> {
    let path = root.join(MANIFEST_NAME);
    if !path.is_file() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| PulseError::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| PulseError::Format {
        path: path.clone(),
        detail: e.to_string(),
    })?;
    if manifest.manifest_version != MANIFEST_VERSION {
        return Err(PulseError::Format {
            path,
            detail: format!(
                "manifest version {} unsupported (expected {MANIFEST_VERSION})",
                manifest.manifest_version
            ),
        });
    }
    Ok(Some(manifest))
}

struct Ctx {
    config: RunConfig,
    root: PathBuf,
    manifest: Manifest,
}

impl Ctx {
    fn open(config: RunConfig) -> Result<Self> {
        let root = config.artifacts_dir.clone();
        Ctx::open_at(config, root)
    }

    /// Open `root` for the given config, binding the manifest to the
    /// config's fingerprint. An existing manifest written by a different
    /// config is a hard error.
    fn open_at(config: RunConfig, root: PathBuf) -> Result<Self> {
        let fingerprint = config.fingerprint()?;
        let manifest = match read_manifest(&root)? {
            Some(m) if m.fingerprint != fingerprint => {
                return Err(PulseError::StaleArtifacts {
                    path: root.join(MANIFEST_NAME),
                    detail: format!(
                        "artifacts belong to config {}, current config is {fingerprint}",
                        m.fingerprint
                    ),
                });
            }
            Some(m) => m,
            None => Manifest::new(fingerprint),
        };
        Ok(Ctx {
            config,
            root,
            manifest,
        })
    }

    fn save_manifest(&self) -> Result<()> {
        let path = self.root.join(MANIFEST_NAME);
        data::ingest::ensure_parent(&path)?;
        let text = serde_json::to_string_pretty(&self.manifest).map_err(|e| PulseError::Format {
            path: path.clone(),
            detail: e.to_string(),
        })?;
        fs::write(&path, text + "\n").map_err(|e| PulseError::io(&path, e))
    }

    fn rel(&self, path: &Path) -> String {
        path.strip_prefix(&self.root)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/")
    }

    /// True when the stage already ran under this config; its recorded
    /// files must then still match the disk, byte for byte.
    fn stage_reusable(&self, stage: &str) -> Result<bool> {
        let Some(recorded) = self.manifest.stages.get(stage) else {
            return Ok(false);
        };
        for (rel, want) in recorded {
            let path = self.root.join(rel);
            if !path.is_file() {
                return Err(PulseError::StaleArtifacts {
                    path,
                    detail: format!("recorded by stage `{stage}` but missing from disk"),
                });
            }
            let got = sha256_file(&path)?;
            if got != *want {
                return Err(PulseError::StaleArtifacts {
                    path,
                    detail: format!("stage `{stage}` recorded {want}, disk has {got}"),
                });
            }
        }
        log::info!("stage {stage}: reusing {} artifacts", recorded.len());
        Ok(true)
    }

    /// Unrecorded outputs must not already exist; overwriting files of
    /// unknown provenance is never silent.
    fn guard_fresh(&self, stage: &str, outputs: &[PathBuf]) -> Result<()> {
        for path in outputs {
            if path.exists() {
                return Err(PulseError::StaleArtifacts {
                    path: path.clone(),
                    detail: format!(
                        "exists but stage `{stage}` is not recorded in {MANIFEST_NAME}; \
                         point at a clean artifacts dir"
                    ),
                });
            }
        }
        Ok(())
    }

    fn finish_stage(&mut self, stage: &str, outputs: &[PathBuf]) -> Result<()> {
        let mut record = BTreeMap::new();
        for path in outputs {
            record.insert(self.rel(path), sha256_file(path)?);
        }
        log::info!("stage {stage}: wrote {} artifacts", record.len());
        self.manifest.stages.insert(stage.to_string(), record);
        self.save_manifest()
    }

    // -- artifact paths ------------------------------------------------------

    fn data_path(&self, name: &str) -> PathBuf {
        self.root.join("data").join(name)
    }

    fn curve_path(&self, name: &str) -> PathBuf {
        self.root.join("curves").join(format!("{name}.json"))
    }

    fn selected_path(&self) -> PathBuf {
        let label = self.config.sft.selection.label();
        self.root.join(format!("rationales/selected_{label}.jsonl"))
    }

    fn head_path(&self) -> PathBuf {
        let label = self.config.sft.selection.label();
        self.root.join(format!("checkpoints/head_{label}.ckpt"))
    }

    // -- artifact loaders ----------------------------------------------------

    fn load_split(&self) -> Result<DatasetSplit> {
        data::read_split(&self.data_path("split.jsonl"))
    }

    fn load_catalog(&self) -> Result<ItemCatalog> {
        data::read_catalog(&self.data_path("catalog.jsonl"))
    }

    fn load_candidates(&self, role: &str) -> Result<BTreeMap<String, CandidateSet>> {
        data::read_candidates(&self.data_path(&format!("candidates_{role}.jsonl")))
    }

    fn load_backbone(&self, catalog: &ItemCatalog) -> Result<Backbone> {
        let params = read_checkpoint(&self.root.join("checkpoints/backbone.ckpt"))?;
        Backbone::from_parts(
            self.config.backbone.clone(),
            ItemVocab::from_catalog(catalog),
            params,
        )
    }

    fn load_space(&self) -> Result<ThoughtSpace> {
        let params = read_checkpoint(&self.root.join("checkpoints/thought.ckpt"))?;
        ThoughtSpace::from_params(self.config.thought_space.encoder.clone(), params)
    }

    fn load_rationale_map(&self, path: &Path) -> Result<BTreeMap<String, String>> {
        Ok(rationale::read_rationales(path)?
            .into_iter()
            .map(|r| (r.source_user.clone(), r.text))
            .collect())
    }

    fn load_trees(&self) -> Result<BTreeMap<String, RationaleTree>> {
        let rows: Vec<RationaleTree> =
            data::ingest::read_jsonl(&self.root.join("rationales/trees.jsonl"))?;
        Ok(rows.into_iter().map(|t| (t.root.source_user.clone(), t)).collect())
    }

    /// Per-user rationale text the scorer conditions on, per the configured
    /// selection method; `None` for the no-reason arm.
    fn load_selection(&self) -> Result<Option<BTreeMap<String, String>>> {
        match self.config.sft.selection {
            SelectionMethod::None => Ok(None),
            SelectionMethod::BaseReason => Ok(Some(
                self.load_rationale_map(&self.root.join("rationales/bases.jsonl"))?,
            )),
            _ => {
                let rows: Vec<thought::SelectedRationale> =
                    data::ingest::read_jsonl(&self.selected_path())?;
                Ok(Some(
                    rows.into_iter().map(|s| (s.user_id.clone(), s.text)).collect(),
                ))
            }
        }
    }

    fn write_curve(&self, path: &Path, values: &[f64]) -> Result<()> {
        data::ingest::ensure_parent(path)?;
        let text = serde_json::to_string(values).map_err(|e| PulseError::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        fs::write(path, text + "\n").map_err(|e| PulseError::io(path, e))
    }

    fn read_curve(&self, path: &Path) -> Result<Vec<f64>> {
        let text = fs::read_to_string(path).map_err(|e| PulseError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| PulseError::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }

    // -- stages ---------------------------------------------------------------

    fn ensure_synth(&mut self) -> Result<()> {
        if self.config.data.interactions.is_some() {
            return Ok(());
        }
        let stage = "synth";
        if self.stage_reusable(stage)? {
            return Ok(());
        }
        // The full catalog rides along separately: items nobody interacted
        // with would otherwise vanish from the line-embedded metadata.
        let outputs = vec![
            self.data_path("interactions.jsonl"),
            self.data_path("catalog_full.jsonl"),
        ];
        self.guard_fresh(stage, &outputs)?;

        (|| -> Result<()> {
            let (records, catalog, _) = gen_synthetic_dataset(&self.config.data.synth)?;
            write_raw_interactions(&outputs[0], &records, &catalog)?;
            data::write_catalog(&outputs[1], &catalog)
        })()
        .map_err(|e| e.in_stage(stage))?;
        self.finish_stage(stage, &outputs)
    }

    fn ensure_ingest(&mut self) -> Result<()> {
        self.ensure_synth()?;
        let stage = "ingest";
        if self.stage_reusable(stage)? {
            return Ok(());
        }
        let outputs: Vec<PathBuf> = [
            "split.jsonl",
            "catalog.jsonl",
            "candidates_train.jsonl",
            "candidates_val.jsonl",
            "candidates_test.jsonl",
        ]
        .iter()
        .map(|n| self.data_path(n))
        .collect();
        self.guard_fresh(stage, &outputs)?;

        (|| -> Result<()> {
            let (source, catalog_override) = match &self.config.data.interactions {
                Some(path) => (path.clone(), self.config.data.catalog.clone()),
                None => (
                    self.data_path("interactions.jsonl"),
                    Some(self.data_path("catalog_full.jsonl")),
                ),
            };
            let (records, mut catalog, _) = data::load_interactions(&source)?;
            if let Some(path) = &catalog_override {
                catalog.items.extend(data::read_catalog(path)?.items);
            }
            let core = data::preprocess_core(&records)?;
            let sequences = data::build_sequences(&core);
            let split = data::split_leave_one_out(&sequences)?;
            let universe: Vec<String> = catalog.items.keys().cloned().collect();
            data::write_split(&outputs[0], &split)?;
            data::write_catalog(&outputs[1], &catalog)?;
            for (role, path) in [("train", &outputs[2]), ("val", &outputs[3]), ("test", &outputs[4])] {
                let sets = data::sample_all_candidates(&split, &universe, role, self.config.seed)?;
                data::write_candidates(path, &sets)?;
            }
            log::info!(
                "stage {stage}: {} users, {} items",
                split.users.len(),
                universe.len()
            );
            Ok(())
        })()
        .map_err(|e| e.in_stage(stage))?;
        self.finish_stage(stage, &outputs)
    }

    fn ensure_backbone(&mut self) -> Result<()> {
        self.ensure_ingest()?;
        let stage = "backbone";
        if self.stage_reusable(stage)? {
            return Ok(());
        }
        let outputs = vec![
            self.root.join("checkpoints/backbone.ckpt"),
            self.curve_path("backbone_val_hr"),
        ];
        self.guard_fresh(stage, &outputs)?;

        (|| -> Result<()> {
            let split = self.load_split()?;
            let catalog = self.load_catalog()?;
            let cand_val = self.load_candidates("val")?;
            let (model, curve) = backbone::train_backbone(
                &split,
                &cand_val,
                &catalog,
                self.config.backbone.clone(),
                derive_seed(self.config.seed, "backbone"),
            )?;
            write_checkpoint(&outputs[0], &model.params)?;
            self.write_curve(&outputs[1], &curve)
        })()
        .map_err(|e| e.in_stage(stage))?;
        self.finish_stage(stage, &outputs)
    }

    fn ensure_rationales(&mut self) -> Result<()> {
        self.ensure_backbone()?;
        let stage = "rationales";
        if self.stage_reusable(stage)? {
            return Ok(());
        }
        let dir = self.root.join("rationales");
        let outputs = vec![
            dir.join("positives.jsonl"),
            dir.join("bases.jsonl"),
            dir.join("trees.jsonl"),
        ];
        self.guard_fresh(stage, &outputs)?;

        (|| -> Result<()> {
            let split = self.load_split()?;
            let catalog = self.load_catalog()?;
            let model = self.load_backbone(&catalog)?;
            let cand_test = self.load_candidates("test")?;
            let backend = make_backend(&self.config.rationale, self.config.seed)?;
            let gen = generate_rationales(
                &self.config,
                backend.as_ref(),
                &split,
                &catalog,
                &model,
                &cand_test,
            )?;
            eval::write_rationale_files(&dir, &gen)
        })()
        .map_err(|e| e.in_stage(stage))?;
        self.finish_stage(stage, &outputs)
    }

    fn ensure_thought(&mut self) -> Result<()> {
        self.ensure_rationales()?;
        let stage = "thought-space";
        if self.stage_reusable(stage)? {
            return Ok(());
        }
        let outputs = vec![
            self.root.join("checkpoints/thought.ckpt"),
            self.curve_path("thought_loss"),
        ];
        self.guard_fresh(stage, &outputs)?;

        (|| -> Result<()> {
            let split = self.load_split()?;
            let catalog = self.load_catalog()?;
            let positives: BTreeMap<String, Rationale> =
                rationale::read_rationales(&self.root.join("rationales/positives.jsonl"))?
                    .into_iter()
                    .map(|r| (r.source_user.clone(), r))
                    .collect();
            let (train_behaviors, _) = behavior_texts(&split, &catalog)?;
            let mut ts_config = self.config.thought_space.clone();
            ts_config.seed = derive_seed(self.config.seed, &format!("thought/{}", ts_config.seed));
            let (space, curve) =
                thought::train_thought_space(&positives, &train_behaviors, &ts_config, None)?;
            write_checkpoint(&outputs[0], &space.params)?;
            self.write_curve(&outputs[1], &curve)
        })()
        .map_err(|e| e.in_stage(stage))?;
        self.finish_stage(stage, &outputs)
    }

    fn ensure_select(&mut self) -> Result<()> {
        self.ensure_thought()?;
        let stage = "select";
        if self.stage_reusable(stage)? {
            return Ok(());
        }
        let method = self.config.sft.selection;
        let outputs = match method {
            SelectionMethod::None | SelectionMethod::BaseReason => Vec::new(),
            _ => vec![self.selected_path()],
        };
        self.guard_fresh(stage, &outputs)?;

        (|| -> Result<()> {
            if outputs.is_empty() {
                log::info!("stage {stage}: method {} selects nothing", method.label());
                return Ok(());
            }
            let split = self.load_split()?;
            let catalog = self.load_catalog()?;
            let trees = self.load_trees()?;
            let bases: BTreeMap<String, Rationale> =
                rationale::read_rationales(&self.root.join("rationales/bases.jsonl"))?
                    .into_iter()
                    .map(|r| (r.source_user.clone(), r))
                    .collect();
            let (_, select_behaviors) = behavior_texts(&split, &catalog)?;
            let space = scoring_space(&self.config, &self.load_space()?)?;
            let backend = make_backend(&self.config.rationale, self.config.seed)?;
            let Some((_, records)) = select_rationales(
                &trees,
                &bases,
                &select_behaviors,
                &space,
                backend.as_ref(),
                method,
                self.config.seed,
            )?
            else {
                return Ok(());
            };
            thought::write_selected(&outputs[0], &records)
        })()
        .map_err(|e| e.in_stage(stage))?;
        self.finish_stage(stage, &outputs)
    }

    fn ensure_sft(&mut self) -> Result<()> {
        self.ensure_select()?;
        let stage = "sft";
        if self.stage_reusable(stage)? {
            return Ok(());
        }
        let outputs = vec![self.head_path(), self.curve_path("sft_val_hr")];
        self.guard_fresh(stage, &outputs)?;

        (|| -> Result<()> {
            let split = self.load_split()?;
            let catalog = self.load_catalog()?;
            let method = self.config.sft.selection;
            let rationales = self.load_selection()?;
            let space = scoring_space(&self.config, &self.load_space()?)?;
            let train_ex = sft::build_sft_dataset(
                &history_texts(&split, &catalog, "train")?,
                &self.load_candidates("train")?,
                &catalog,
                rationales.as_ref(),
                method,
            )?;
            let val_ex = sft::build_sft_dataset(
                &history_texts(&split, &catalog, "val")?,
                &self.load_candidates("val")?,
                &catalog,
                rationales.as_ref(),
                method,
            )?;
            let (head, curve) = sft::train_sft(
                &space,
                &train_ex,
                &val_ex,
                &self.config.sft.scorer,
                derive_seed(self.config.seed, "sft"),
            )?;
            write_checkpoint(&outputs[0], &head)?;
            self.write_curve(&outputs[1], &curve)
        })()
        .map_err(|e| e.in_stage(stage))?;
        self.finish_stage(stage, &outputs)
    }

    fn ensure_eval(&mut self) -> Result<()> {
        self.ensure_sft()?;
        let stage = "eval";
        if self.stage_reusable(stage)? {
            return Ok(());
        }
        let label = self.config.sft.selection.label();
        let predictions_path = self
            .root
            .join(format!("reports/predictions_{label}.jsonl"));
        let static_outputs = vec![
            predictions_path.clone(),
            self.root.join("reports/report.json"),
            self.root.join("reports/report.csv"),
        ];
        self.guard_fresh(stage, &static_outputs)?;

        let outputs = (|| -> Result<Vec<PathBuf>> {
            let split = self.load_split()?;
            let catalog = self.load_catalog()?;
            let method = self.config.sft.selection;
            let rationales = self.load_selection()?;
            let space = scoring_space(&self.config, &self.load_space()?)?;
            let test_ex = sft::build_sft_dataset(
                &history_texts(&split, &catalog, "test")?,
                &self.load_candidates("test")?,
                &catalog,
                rationales.as_ref(),
                method,
            )?;
            let head = read_checkpoint(&self.head_path())?;
            let (predictions, hr) = eval::evaluate_head(
                &head,
                &space,
                &test_ex,
                self.config.sft.scorer.candidate_encoder,
            )?;
            sft::write_predictions(&predictions_path, &predictions)?;
            let recount = hr_from_records(&sft::read_predictions(&predictions_path)?)?;
            if recount != hr {
                return Err(PulseError::ProtocolViolation(format!(
                    "HR@1 recount {recount} != primary count {hr}"
                )));
            }

            let mut curves = BTreeMap::new();
            for name in ["backbone_val_hr", "thought_loss", "sft_val_hr"] {
                curves.insert(name.to_string(), self.read_curve(&self.curve_path(name))?);
            }
            let mut artifacts: BTreeMap<String, String> = BTreeMap::new();
            for record in self.manifest.stages.values() {
                artifacts.extend(record.clone());
            }
            artifacts.insert(self.rel(&predictions_path), sha256_file(&predictions_path)?);
            let report = MetricsReport {
                report_version: REPORT_VERSION,
                experiment: self.config.eval.experiment.clone(),
                dataset: self.config.dataset_id(),
                method: format!("pulse/{label}"),
                seed: self.config.seed,
                fingerprint: self.config.fingerprint()?,
                hr_at_1: hr,
                n_test_users: predictions.len(),
                artifacts,
                curves,
                reference_full_scale: reference_targets("main"),
                wall_clock_secs: 0.0,
            };
            log::info!("stage {stage}: HR@1 {hr:.4} over {} users", predictions.len());
            let mut outputs = vec![predictions_path.clone()];
            outputs.extend(emit_report(&[report], &self.root.join("reports"))?);
            Ok(outputs)
        })()
        .map_err(|e| e.in_stage(stage))?;
        self.finish_stage(stage, &outputs)
    }

    fn ensure_project(&mut self) -> Result<()> {
        self.ensure_thought()?;
        let stage = "project";
        if self.stage_reusable(stage)? {
            return Ok(());
        }
        let outputs = vec![self.root.join("reports/projection.csv")];
        self.guard_fresh(stage, &outputs)?;

        (|| -> Result<()> {
            let split = self.load_split()?;
            let catalog = self.load_catalog()?;
            let space = self.load_space()?;
            let positives =
                rationale::read_rationales(&self.root.join("rationales/positives.jsonl"))?;
            let (train_behaviors, _) = behavior_texts(&split, &catalog)?;
            let mut ids = Vec::new();
            let mut labels = Vec::new();
            let mut vectors = Vec::new();
            for r in &positives {
                ids.push(r.source_user.clone());
                labels.push("rationale".to_string());
                vectors.push(space.encode_rationale(&r.text)?);
            }
            for (user, behavior) in &train_behaviors {
                ids.push(user.clone());
                labels.push("behavior".to_string());
                vectors.push(space.encode_behavior(&behavior.text)?);
            }
            let coords = thought::project_embeddings_2d(&vectors)?;
            thought::write_projection_csv(&outputs[0], &ids, &labels, &coords)
        })()
        .map_err(|e| e.in_stage(stage))?;
        self.finish_stage(stage, &outputs)
    }

    /// One-shot experiments: the whole run is a single manifest stage
    /// keyed on the emitted report files.
    fn ensure_composite(
        &mut self,
        stage: &str,
        report_dir: &str,
        run: impl FnOnce(&RunConfig) -> Result<()>,
    ) -> Result<()> {
        if self.stage_reusable(stage)? {
            return Ok(());
        }
        let outputs = vec![
            self.root.join(report_dir).join("report.json"),
            self.root.join(report_dir).join("report.csv"),
        ];
        self.guard_fresh(stage, &outputs)?;
        run(&self.config)?;
        self.finish_stage(stage, &outputs)
    }
}

#[derive(Serialize)]
struct RawInteractionOut<'a> {
    user_id: &'a str,
    item_id: &'a str,
    timestamp: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    rating: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    review: Option<&'a str>,
    title: &'a str,
    description: &'a str,
    domain: &'a str,
}

/// Serialize interactions in the raw ingest format, item metadata inline.
fn write_raw_interactions(
    path: &Path,
    records: &[data::InteractionRecord],
    catalog: &ItemCatalog,
) -> Result<()> {
    let rows = records.iter().map(|r| {
        let meta = catalog.items.get(&r.item_id);
        RawInteractionOut {
            user_id: &r.user_id,
            item_id: &r.item_id,
            timestamp: r.timestamp,
            rating: r.rating,
            review: r.review.as_deref(),
            title: meta.map_or("", |m| m.title.as_str()),
            description: meta.map_or("", |m| m.description.as_str()),
            domain: meta.map_or("", |m| m.domain.as_str()),
        }
    });
    data::ingest::write_jsonl(path, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::SynthSpec;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(args).expect("args should parse")
    }

    #[test]
    fn subcommand_names_follow_kebab_case() {
        for cmd in [
            "synth",
            "ingest",
            "train-backbone",
            "gen-rationales",
            "train-ts",
            "select",
            "train-sft",
            "eval",
            "ablate-a",
            "ablate-b",
            "cross-domain",
            "project",
            "config-schema",
        ] {
            let mut args = vec!["pulse", cmd];
            if cmd == "cross-domain" {
                args.extend(["--target-config", "t.json"]);
            }
            assert!(
                Cli::try_parse_from(&args).is_ok(),
                "subcommand {cmd} should parse"
            );
        }
        assert!(Cli::try_parse_from(["pulse", "frobnicate"]).is_err());
        assert!(Cli::try_parse_from(["pulse", "eval", "--bogus-flag"]).is_err());
    }

    #[test]
    fn global_flags_override_config_fields() {
        let cli = parse(&[
            "pulse",
            "--config",
            "c.json",
            "--seed",
            "42",
            "--artifacts-dir",
            "/tmp/x",
            "eval",
        ]);
        assert_eq!(cli.config, PathBuf::from("c.json"));
        assert_eq!(cli.seed, Some(42));
        assert_eq!(cli.artifacts_dir, Some(PathBuf::from("/tmp/x")));
    }

    #[test]
    fn manifest_rejects_foreign_fingerprint() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = RunConfig::default();
        config.artifacts_dir = dir.path().to_path_buf();

        let ctx = Ctx::open(config.clone()).unwrap();
        ctx.save_manifest().unwrap();
        assert!(Ctx::open(config.clone()).is_ok());

        config.seed = 777;
        let err = match Ctx::open(config) {
            Ok(_) => panic!("foreign manifest should be rejected"),
            Err(e) => e,
        };
        assert!(matches!(err, PulseError::StaleArtifacts { .. }), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn stage_verification_catches_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = RunConfig::default();
        config.artifacts_dir = dir.path().to_path_buf();

        let mut ctx = Ctx::open(config).unwrap();
        let out = ctx.root.join("data/thing.txt");
        data::ingest::ensure_parent(&out).unwrap();
        fs::write(&out, "original").unwrap();
        ctx.finish_stage("demo", &[out.clone()]).unwrap();
        assert!(ctx.stage_reusable("demo").unwrap());

        fs::write(&out, "tampered").unwrap();
        let err = ctx.stage_reusable("demo").unwrap_err();
        assert!(matches!(err, PulseError::StaleArtifacts { .. }), "{err}");

        fs::remove_file(&out).unwrap();
        let err = ctx.stage_reusable("demo").unwrap_err();
        assert!(matches!(err, PulseError::StaleArtifacts { .. }), "{err}");
    }

    #[test]
    fn unrecorded_outputs_are_never_overwritten() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = RunConfig::default();
        config.artifacts_dir = dir.path().to_path_buf();

        let ctx = Ctx::open(config).unwrap();
        let out = ctx.root.join("data/thing.txt");
        data::ingest::ensure_parent(&out).unwrap();
        fs::write(&out, "someone else's file").unwrap();
        let err = ctx.guard_fresh("demo", &[out]).unwrap_err();
        assert!(matches!(err, PulseError::StaleArtifacts { .. }), "{err}");
    }

    #[test]
    fn raw_interactions_round_trip_through_ingest() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            n_users: 8,
            n_items: 30,
            n_traits: 3,
            seq_len_range: (6, 8),
            seed: 3,
            ..SynthSpec::default()
        };
        let (records, catalog, _) = gen_synthetic_dataset(&spec).unwrap();
        let path = dir.path().join("interactions.jsonl");
        write_raw_interactions(&path, &records, &catalog).unwrap();

        let (loaded, mut loaded_catalog, stats) = data::load_interactions(&path).unwrap();
        assert_eq!(stats.skipped, 0);
        assert_eq!(loaded, records);
        // Line-embedded metadata covers exactly the interacted items; the
        // full catalog restores the rest without changing any entry.
        for (id, meta) in &loaded_catalog.items {
            assert_eq!(catalog.items.get(id), Some(meta));
        }
        loaded_catalog.items.extend(catalog.items.clone());
        assert_eq!(loaded_catalog.items, catalog.items);
    }
}
