//! Experiment harness: runs the staged pipeline end to end, computes HR@1,
//! drives the two ablations and the cross-domain transfer, and emits
//! machine-readable reports.
//!
//! Seed derivation: the synthetic corpus uses `data.synth.seed` verbatim, so
//! the same dataset can be trained under different global seeds. Every
//! training stage derives its seed from the global `seed` plus a stage
//! label; `thought_space.seed` is mixed in as extra salt rather than used
//! raw. Reports never serialize wall-clock time, so two identical runs
//! produce byte-identical report files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, Backbone};
use crate::config::{BackendKind, RationaleSection, RunConfig, ScoringSpace};
use crate::data::{
    self, synth::gen_synthetic_dataset, CandidateSet, DatasetSplit, ItemCatalog,
};
use crate::error::{PulseError, Result};
use crate::hashing::{derive_seed, sha256_file};
use crate::rationale::{
    self, backend::run_requests, backend::GenerationRequest, GenerationBackend, HttpBackend,
    MockBackend, Rationale, RationaleKind, RationaleTree,
};
use crate::sft::{
    self, EmbeddingCache, PredictionRecord, SelectionMethod, SftExample,
};
use crate::tensor::{write_checkpoint, ParamStore};
use crate::thought::{
    self, BehavioralText, SelectedRationale, ThoughtSpace,
};

pub const REPORT_VERSION: u32 = 1;
pub const REPORT_CSV_HEADER: [&str; 7] = [
    "experiment",
    "dataset",
    "method",
    "hr_at_1",
    "n_users",
    "seed",
    "fingerprint",
];

/// One experiment's outcome. `wall_clock_secs` is measured but never
/// serialized: report files must be byte-stable across reruns.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub report_version: u32,
    pub experiment: String,
    pub dataset: String,
    pub method: String,
    pub seed: u64,
    pub fingerprint: String,
    pub hr_at_1: f64,
    pub n_test_users: usize,
    /// Content hashes of the input artifacts, keyed by path relative to the
    /// artifacts directory.
    pub artifacts: BTreeMap<String, String>,
    /// Training curves for plot export (per-epoch values).
    pub curves: BTreeMap<String, Vec<f64>>,
    /// Published full-scale results for orientation only; desk-scale runs
    /// are not expected to reproduce them and nothing asserts against them.
    pub reference_full_scale: BTreeMap<String, f64>,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

/// Full-scale reference numbers recorded in report metadata. Documentation
/// only: no test or assertion consumes these.
pub fn reference_targets(kind: &str) -> BTreeMap<String, f64> {
    let pairs: &[(&str, f64)] = match kind {
        "main" => &[
            ("luxury_beauty/pulse", 0.9339),
            ("prime_pantry/pulse", 0.8373),
            ("video_games/pulse", 0.9170),
        ],
        "ablation_a" => &[
            ("luxury_beauty/thought_space", 0.9339),
            ("luxury_beauty/sbert", 0.8636),
            ("luxury_beauty/distilbert", 0.7920),
        ],
        "ablation_b" => &[
            ("luxury_beauty/none", 0.6111),
            ("luxury_beauty/base_reason", 0.7186),
            ("luxury_beauty/tot_loglik", 0.8559),
            ("luxury_beauty/tot_thought_space", 0.9339),
        ],
        "cross_domain" => &[
            ("beauty_to_games/pulse", 0.6240),
            ("beauty_to_games/sasrec", 0.1030),
        ],
        _ => &[],
    };
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

/// Fraction of exact top-1 hits.
pub fn hr_at_1(predictions: &[(usize, usize)]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(PulseError::InvalidArgument(
            "cannot compute HR@1 over zero predictions".into(),
        ));
    }
    let hits = predictions.iter().filter(|(p, g)| p == g).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Independent recount: re-derive every prediction from its stored logits
/// and recompute the metric. A stored index that disagrees with its own
/// logits marks a corrupted dump.
pub fn hr_from_records(records: &[PredictionRecord]) -> Result<f64> {
    let mut pairs = Vec::with_capacity(records.len());
    for r in records {
        let rederived = sft::argmax_low(&r.logits);
        if rederived != r.predicted_index {
            return Err(PulseError::ProtocolViolation(format!(
                "prediction dump for {} disagrees with its logits",
                r.user_id
            )));
        }
        pairs.push((rederived, r.ground_truth_index));
    }
    hr_at_1(&pairs)
}

pub fn make_backend(section: &RationaleSection, global_seed: u64) -> Result<Box<dyn GenerationBackend>> {
    match section.backend {
        BackendKind::Mock => Ok(Box::new(MockBackend {
            seed: derive_seed(global_seed, "backend"),
            drift_base: section.drift_base,
            drift_refine: section.drift_refine,
        })),
        BackendKind::Http => Ok(Box::new(HttpBackend::new(section.base_url.clone())?)),
    }
}

/// Everything the training stages produce, kept in memory so ablation arms
/// can share upstream work, plus content hashes of the files written.
pub struct PipelineArtifacts {
    pub split: DatasetSplit,
    pub catalog: ItemCatalog,
    pub cand_train: BTreeMap<String, CandidateSet>,
    pub cand_val: BTreeMap<String, CandidateSet>,
    pub cand_test: BTreeMap<String, CandidateSet>,
    pub backbone: Backbone,
    pub backbone_curve: Vec<f64>,
    pub positives: BTreeMap<String, Rationale>,
    pub bases: BTreeMap<String, Rationale>,
    pub trees: BTreeMap<String, RationaleTree>,
    /// Phase I anchors: train-prefix history joined with the last train item.
    pub train_behaviors: BTreeMap<String, BehavioralText>,
    /// Selection anchors: full train history joined with the validation
    /// item, so the serialization keeps its shape without touching the test
    /// target.
    pub select_behaviors: BTreeMap<String, BehavioralText>,
    pub space: ThoughtSpace,
    pub ts_curve: Vec<f64>,
    pub hashes: BTreeMap<String, String>,
}

fn record_hash(hashes: &mut BTreeMap<String, String>, root: &Path, path: &Path) -> Result<()> {
    let rel = path
        .strip_prefix(root)
        .unwrap_or(path)
        .to_string_lossy()
        .replace('\\', "/");
    hashes.insert(rel, sha256_file(path)?);
    Ok(())
}

fn stage_data(config: &RunConfig) -> Result<(DatasetSplit, ItemCatalog)> {
    let (records, catalog) = match &config.data.interactions {
        Some(interactions) => {
            let (records, mut catalog, _) = data::load_interactions(interactions)?;
            if let Some(path) = &config.data.catalog {
                catalog.items.extend(data::read_catalog(path)?.items);
            }
            (records, catalog)
        }
        None => {
            let (records, catalog, _) = gen_synthetic_dataset(&config.data.synth)?;
            (records, catalog)
        }
    };
    let core = data::preprocess_core(&records)?;
    let sequences = data::build_sequences(&core);
    let split = data::split_leave_one_out(&sequences)?;
    Ok((split, catalog))
}

fn generation_request(prompt: String, seed: u64) -> GenerationRequest {
    GenerationRequest {
        prompt,
        max_tokens: rationale::GEN_MAX_TOKENS,
        temperature: rationale::GEN_TEMPERATURE,
        seed: Some(seed),
    }
}

/// Output of the generation stage: positive rationales anchor Phase I,
/// base rationales seed the trees, trees feed test-time selection.
pub struct GeneratedRationales {
    pub positives: BTreeMap<String, Rationale>,
    pub bases: BTreeMap<String, Rationale>,
    pub trees: BTreeMap<String, RationaleTree>,
}

/// Run both generation phases plus tree expansion for every user. The
/// backbone supplies user embeddings for the similar-user block of the
/// phase-two prompt; `cand_test` is only consulted when the config asks
/// for candidate titles in that prompt.
pub fn generate_rationales(
    config: &RunConfig,
    backend: &dyn GenerationBackend,
    split: &DatasetSplit,
    catalog: &ItemCatalog,
    model: &Backbone,
    cand_test: &BTreeMap<String, CandidateSet>,
) -> Result<GeneratedRationales> {
    let seed = config.seed;
    let mut embeddings = BTreeMap::new();
    for user in split.users.keys() {
        let history = split.history_for_test(user)?;
        embeddings.insert(user.clone(), model.user_embedding(history)?);
    }

    let users: Vec<&String> = split.users.keys().collect();
    let mut phase1_reqs = Vec::with_capacity(users.len());
    let mut phase2_reqs = Vec::with_capacity(users.len());
    for user in &users {
        let seq = &split.users[*user];
        let (train_hist, train_gt) = split.train_pair(user)?;
        phase1_reqs.push(generation_request(
            rationale::build_phase1_prompt(catalog, seq, train_hist.len(), train_gt)?,
            derive_seed(seed, &format!("gen/phase1/{user}")),
        ));

        let similar = backbone::similar_users(&embeddings, user, config.rationale.k_similar)?;
        let mut similar_items = Vec::new();
        for s in &similar {
            similar_items.extend_from_slice(split.parts(s)?.train);
        }
        let slate;
        let candidate_titles = if config.rationale.include_candidates {
            let set = cand_test.get(*user).ok_or_else(|| {
                PulseError::InvalidArgument(format!("no test candidates for {user}"))
            })?;
            slate = set.candidates.clone();
            Some(slate.as_slice())
        } else {
            None
        };
        phase2_reqs.push(generation_request(
            rationale::build_phase2_prompt(
                catalog,
                seq,
                seq.len() - 1,
                &similar_items,
                candidate_titles,
            )?,
            derive_seed(seed, &format!("gen/phase2/{user}")),
        ));
    }

    let in_flight = config.rationale.in_flight;
    let phase1_out = run_requests(backend, phase1_reqs, in_flight)?;
    let phase2_out = run_requests(backend, phase2_reqs, in_flight)?;

    let mut positives = BTreeMap::new();
    let mut bases = BTreeMap::new();
    let mut trees = BTreeMap::new();
    for (idx, user) in users.iter().enumerate() {
        positives.insert(
            (*user).clone(),
            Rationale::new(
                (*user).clone(),
                RationaleKind::Positive,
                None,
                phase1_out[idx].text.clone(),
            )?,
        );
        let base = Rationale::new(
            (*user).clone(),
            RationaleKind::Base,
            None,
            phase2_out[idx].text.clone(),
        )?;
        let tree = rationale::expand_tot(
            backend,
            &base,
            config.rationale.tot_n,
            config.rationale.tot_m,
            derive_seed(seed, &format!("gen/tot/{user}")),
            in_flight,
        )?;
        bases.insert((*user).clone(), base);
        trees.insert((*user).clone(), tree);
    }

    Ok(GeneratedRationales {
        positives,
        bases,
        trees,
    })
}

pub(crate) fn write_rationale_files(dir: &Path, gen: &GeneratedRationales) -> Result<()> {
    rationale::write_rationales(
        &dir.join("positives.jsonl"),
        &gen.positives.values().cloned().collect::<Vec<_>>(),
    )?;
    rationale::write_rationales(
        &dir.join("bases.jsonl"),
        &gen.bases.values().cloned().collect::<Vec<_>>(),
    )?;
    data::ingest::write_jsonl(&dir.join("trees.jsonl"), gen.trees.values())
}

/// Anchor texts keyed by user: the first map trains Phase I (train history
/// plus the train target in the `next:` slot), the second drives test-time
/// selection (full train history with the validation item in that slot, so
/// the shape holds without touching the test target).
pub fn behavior_texts(
    split: &DatasetSplit,
    catalog: &ItemCatalog,
) -> Result<(
    BTreeMap<String, BehavioralText>,
    BTreeMap<String, BehavioralText>,
)> {
    let mut train_behaviors = BTreeMap::new();
    let mut select_behaviors = BTreeMap::new();
    for (user, seq) in &split.users {
        let parts = split.parts(user)?;
        let (train_hist, train_gt) = split.train_pair(user)?;
        train_behaviors.insert(
            user.clone(),
            thought::build_behavior_text(seq, train_hist.len(), train_gt, catalog)?,
        );
        select_behaviors.insert(
            user.clone(),
            thought::build_behavior_text(seq, parts.train.len(), parts.val, catalog)?,
        );
    }
    Ok((train_behaviors, select_behaviors))
}

/// Data through thought-space training. Every stage failure carries its
/// stage name.
pub fn run_pipeline(config: &RunConfig, backend: &dyn GenerationBackend) -> Result<PipelineArtifacts> {
    config.validate()?;
    let root = config.artifacts_dir.as_path();
    let seed = config.seed;
    let mut hashes = BTreeMap::new();

    // data
    let (split, catalog) = stage_data(config).map_err(|e| e.in_stage("data"))?;
    let universe: Vec<String> = catalog.items.keys().cloned().collect();
    let cand_train = data::sample_all_candidates(&split, &universe, "train", seed)
        .map_err(|e| e.in_stage("data"))?;
    let cand_val = data::sample_all_candidates(&split, &universe, "val", seed)
        .map_err(|e| e.in_stage("data"))?;
    let cand_test = data::sample_all_candidates(&split, &universe, "test", seed)
        .map_err(|e| e.in_stage("data"))?;
    (|| -> Result<()> {
        let dir = root.join("data");
        data::write_split(&dir.join("split.jsonl"), &split)?;
        data::write_catalog(&dir.join("catalog.jsonl"), &catalog)?;
        data::write_candidates(&dir.join("candidates_train.jsonl"), &cand_train)?;
        data::write_candidates(&dir.join("candidates_val.jsonl"), &cand_val)?;
        data::write_candidates(&dir.join("candidates_test.jsonl"), &cand_test)?;
        for name in [
            "split.jsonl",
            "catalog.jsonl",
            "candidates_train.jsonl",
            "candidates_val.jsonl",
            "candidates_test.jsonl",
        ] {
            record_hash(&mut hashes, root, &dir.join(name))?;
        }
        Ok(())
    })()
    .map_err(|e| e.in_stage("data"))?;
    log::info!("stage data: {} users, {} items", split.users.len(), universe.len());

    // backbone
    let (model, backbone_curve) = backbone::train_backbone(
        &split,
        &cand_val,
        &catalog,
        config.backbone.clone(),
        derive_seed(seed, "backbone"),
    )
    .map_err(|e| e.in_stage("backbone"))?;
    write_checkpoint(&root.join("checkpoints/backbone.ckpt"), &model.params)
        .map_err(|e| e.in_stage("backbone"))?;
    record_hash(&mut hashes, root, &root.join("checkpoints/backbone.ckpt"))
        .map_err(|e| e.in_stage("backbone"))?;

    // rationales
    let GeneratedRationales {
        positives,
        bases,
        trees,
    } = (|| -> Result<_> {
        let out = generate_rationales(config, backend, &split, &catalog, &model, &cand_test)?;
        write_rationale_files(&root.join("rationales"), &out)?;
        for name in ["positives.jsonl", "bases.jsonl", "trees.jsonl"] {
            record_hash(&mut hashes, root, &root.join("rationales").join(name))?;
        }
        Ok(out)
    })()
    .map_err(|e| e.in_stage("rationales"))?;
    log::info!(
        "stage rationales: {} trees of {} nodes",
        trees.len(),
        trees.values().next().map_or(0, |t| t.node_count())
    );

    // thought space
    let (space, ts_curve, train_behaviors, select_behaviors) = (|| -> Result<_> {
        let (train_behaviors, select_behaviors) = behavior_texts(&split, &catalog)?;
        let mut ts_config = config.thought_space.clone();
        ts_config.seed = derive_seed(seed, &format!("thought/{}", ts_config.seed));
        let (space, curve) =
            thought::train_thought_space(&positives, &train_behaviors, &ts_config, None)?;
        write_checkpoint(&root.join("checkpoints/thought.ckpt"), &space.params)?;
        record_hash(&mut hashes, root, &root.join("checkpoints/thought.ckpt"))?;
        Ok((space, curve, train_behaviors, select_behaviors))
    })()
    .map_err(|e| e.in_stage("thought-space"))?;

    Ok(PipelineArtifacts {
        split,
        catalog,
        cand_train,
        cand_val,
        cand_test,
        backbone: model,
        backbone_curve,
        positives,
        bases,
        trees,
        train_behaviors,
        select_behaviors,
        space,
        ts_curve,
        hashes,
    })
}

/// The embedding space an evaluation scores with, per the config. `trained`
/// is the space produced by Phase I; the other variants ignore it.
pub fn scoring_space(config: &RunConfig, trained: &ThoughtSpace) -> Result<ThoughtSpace> {
    match config.eval.scoring_space {
        ScoringSpace::ThoughtSpace => Ok(ThoughtSpace::from_params(
            trained.config.clone(),
            trained.params.clone(),
        )?),
        ScoringSpace::FrozenGeneric => Ok(ThoughtSpace::new(
            config.thought_space.encoder.clone(),
            derive_seed(config.seed, "frozen-generic"),
        )?),
        ScoringSpace::ExternalVectors => {
            let path = config.eval.external_vectors.as_ref().ok_or_else(|| {
                PulseError::Config("external_vectors scoring space requires a vector file".into())
            })?;
            let mut space = ThoughtSpace::new(
                config.thought_space.encoder.clone(),
                derive_seed(config.seed, "external-vectors"),
            )?;
            space.load_embedding_table(path)?;
            Ok(space)
        }
    }
}

/// Per-user rationale text for the given method; `None` for the no-reason
/// arm. Tree-based methods also return the selection records.
pub fn select_rationales(
    trees: &BTreeMap<String, RationaleTree>,
    bases: &BTreeMap<String, Rationale>,
    select_behaviors: &BTreeMap<String, BehavioralText>,
    space: &ThoughtSpace,
    backend: &dyn GenerationBackend,
    method: SelectionMethod,
    seed: u64,
) -> Result<Option<(BTreeMap<String, String>, Vec<SelectedRationale>)>> {
    match method {
        SelectionMethod::None => Ok(None),
        SelectionMethod::BaseReason => {
            let map = bases
                .iter()
                .map(|(u, r)| (u.clone(), r.text.clone()))
                .collect();
            Ok(Some((map, Vec::new())))
        }
        SelectionMethod::TotThoughtSpace => {
            let mut map = BTreeMap::new();
            let mut records = Vec::with_capacity(trees.len());
            for (user, tree) in trees {
                let behavior = select_behaviors.get(user).ok_or_else(|| {
                    PulseError::InvalidArgument(format!("no behavior text for {user}"))
                })?;
                let selected = thought::select_best_rationale(space, tree, behavior)?;
                map.insert(user.clone(), selected.text.clone());
                records.push(selected);
            }
            Ok(Some((map, records)))
        }
        SelectionMethod::TotLoglik => {
            let mut map = BTreeMap::new();
            let mut records = Vec::with_capacity(trees.len());
            for (user, tree) in trees {
                let selected = sft::ll_select(tree, backend)?;
                map.insert(user.clone(), selected.text.clone());
                records.push(selected);
            }
            Ok(Some((map, records)))
        }
        SelectionMethod::RandomLeaf => {
            let mut map = BTreeMap::new();
            let mut records = Vec::with_capacity(trees.len());
            for (user, tree) in trees {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    seed,
                    &format!("select/random/{user}"),
                ));
                let leaf = tree.leaves.choose(&mut rng).unwrap();
                map.insert(user.clone(), leaf.text.clone());
                records.push(SelectedRationale {
                    user_id: user.clone(),
                    text: leaf.text.clone(),
                    score: 0.0,
                    tree_pos: leaf.tree_pos.unwrap(),
                });
            }
            Ok(Some((map, records)))
        }
    }
}

pub(crate) fn history_texts(
    split: &DatasetSplit,
    catalog: &ItemCatalog,
    role: &str,
) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (user, seq) in &split.users {
        let parts = split.parts(user)?;
        // History always stops right before the slate's ground truth.
        let len = match role {
            "train" => parts.train.len() - 1,
            "val" => parts.train.len(),
            "test" => seq.len() - 1,
            other => {
                return Err(PulseError::InvalidArgument(format!(
                    "unknown history role {other:?}"
                )))
            }
        };
        out.insert(user.clone(), thought::build_history_text(seq, len, catalog)?);
    }
    Ok(out)
}

/// Select, build the three datasets, train the head, and score the test
/// slates. Returns the trained head with the test predictions.
pub struct MethodRun {
    pub head: ParamStore,
    pub sft_curve: Vec<f64>,
    pub predictions: Vec<PredictionRecord>,
    pub hr_at_1: f64,
    pub selected: Vec<SelectedRationale>,
}

pub fn run_method(
    config: &RunConfig,
    arts: &PipelineArtifacts,
    space: &ThoughtSpace,
    backend: &dyn GenerationBackend,
    method: SelectionMethod,
) -> Result<MethodRun> {
    let seed = config.seed;
    let selection = select_rationales(
        &arts.trees,
        &arts.bases,
        &arts.select_behaviors,
        space,
        backend,
        method,
        seed,
    )
        .map_err(|e| e.in_stage("select"))?;
    let (rationales, selected) = match selection {
        Some((map, records)) => (Some(map), records),
        None => (None, Vec::new()),
    };

    let (head, sft_curve, test_ex) = (|| -> Result<_> {
        let hist_train = history_texts(&arts.split, &arts.catalog, "train")?;
        let hist_val = history_texts(&arts.split, &arts.catalog, "val")?;
        let hist_test = history_texts(&arts.split, &arts.catalog, "test")?;
        let train_ex = sft::build_sft_dataset(
            &hist_train,
            &arts.cand_train,
            &arts.catalog,
            rationales.as_ref(),
            method,
        )?;
        let val_ex = sft::build_sft_dataset(
            &hist_val,
            &arts.cand_val,
            &arts.catalog,
            rationales.as_ref(),
            method,
        )?;
        let test_ex = sft::build_sft_dataset(
            &hist_test,
            &arts.cand_test,
            &arts.catalog,
            rationales.as_ref(),
            method,
        )?;
        let (head, curve) = sft::train_sft(
            space,
            &train_ex,
            &val_ex,
            &config.sft.scorer,
            derive_seed(seed, "sft"),
        )?;
        Ok((head, curve, test_ex))
    })()
    .map_err(|e| e.in_stage("sft"))?;

    let (predictions, hr) = evaluate_head(&head, space, &test_ex, config.sft.scorer.candidate_encoder)
        .map_err(|e| e.in_stage("evaluate"))?;

    Ok(MethodRun {
        head,
        sft_curve,
        predictions,
        hr_at_1: hr,
        selected,
    })
}

/// Score test slates with a trained head; pure inference.
pub fn evaluate_head(
    head: &ParamStore,
    space: &ThoughtSpace,
    examples: &[SftExample],
    encoder: sft::CandidateEncoder,
) -> Result<(Vec<PredictionRecord>, f64)> {
    if examples.is_empty() {
        return Err(PulseError::EmptyDataset("evaluation".into()));
    }
    let mut cache = EmbeddingCache::new();
    let mut records = Vec::with_capacity(examples.len());
    let mut pairs = Vec::with_capacity(examples.len());
    for ex in examples {
        let logits = sft::score_candidates(head, space, &mut cache, ex, encoder)?;
        let predicted = sft::argmax_low(&logits);
        pairs.push((predicted, ex.label));
        records.push(PredictionRecord {
            user_id: ex.user_id.clone(),
            predicted_index: predicted,
            ground_truth_index: ex.label,
            logits,
        });
    }
    let hr = hr_at_1(&pairs)?;
    Ok((records, hr))
}

fn method_artifacts(
    root: &Path,
    label: &str,
    run: &MethodRun,
    hashes: &mut BTreeMap<String, String>,
) -> Result<()> {
    let safe = label.replace(['/', ' '], "-");
    let predictions = root.join(format!("reports/predictions_{safe}.jsonl"));
    sft::write_predictions(&predictions, &run.predictions)?;
    record_hash(hashes, root, &predictions)?;
    let head_path = root.join(format!("checkpoints/head_{safe}.ckpt"));
    write_checkpoint(&head_path, &run.head)?;
    record_hash(hashes, root, &head_path)?;
    if !run.selected.is_empty() {
        let selected = root.join(format!("rationales/selected_{safe}.jsonl"));
        thought::write_selected(&selected, &run.selected)?;
        record_hash(hashes, root, &selected)?;
    }
    // Two-path agreement: the metric must survive an independent recount
    // from the dump on disk.
    let recount = hr_from_records(&sft::read_predictions(&predictions)?)?;
    if recount != run.hr_at_1 {
        return Err(PulseError::ProtocolViolation(format!(
            "HR@1 recount {recount} != primary count {}",
            run.hr_at_1
        )));
    }
    Ok(())
}

fn build_report(
    config: &RunConfig,
    kind: &str,
    method: &str,
    run: &MethodRun,
    arts: &PipelineArtifacts,
    extra_hashes: BTreeMap<String, String>,
    started: Instant,
) -> Result<MetricsReport> {
    let mut curves = BTreeMap::new();
    curves.insert("backbone_val_hr".into(), arts.backbone_curve.clone());
    curves.insert("thought_loss".into(), arts.ts_curve.clone());
    curves.insert("sft_val_hr".into(), run.sft_curve.clone());
    let mut artifacts = arts.hashes.clone();
    artifacts.extend(extra_hashes);
    Ok(MetricsReport {
        report_version: REPORT_VERSION,
        experiment: config.eval.experiment.clone(),
        dataset: config.dataset_id(),
        method: method.to_string(),
        seed: config.seed,
        fingerprint: config.fingerprint()?,
        hr_at_1: run.hr_at_1,
        n_test_users: run.predictions.len(),
        artifacts,
        curves,
        reference_full_scale: reference_targets(kind),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

/// The whole pipeline under one config: ingest through evaluation, report
/// written under `artifacts_dir/reports`.
pub fn run_experiment(config: &RunConfig) -> Result<MetricsReport> {
    let started = Instant::now();
    let backend = make_backend(&config.rationale, config.seed)?;
    let arts = run_pipeline(config, backend.as_ref())?;
    let space = scoring_space(config, &arts.space)?;
    let method = config.sft.selection;
    let run = run_method(config, &arts, &space, backend.as_ref(), method)?;

    let mut extra = BTreeMap::new();
    method_artifacts(&config.artifacts_dir, method.label(), &run, &mut extra)
        .map_err(|e| e.in_stage("evaluate"))?;
    let report = build_report(
        config,
        "main",
        &format!("pulse/{}", method.label()),
        &run,
        &arts,
        extra,
        started,
    )?;
    emit_report(
        std::slice::from_ref(&report),
        &config.artifacts_dir.join("reports"),
    )?;
    log::info!(
        "experiment {}: HR@1 {:.4} over {} users",
        report.experiment,
        report.hr_at_1,
        report.n_test_users
    );
    Ok(report)
}

/// The JSON paths whose values differ between two configs.
fn config_diff(a: &RunConfig, b: &RunConfig) -> Result<Vec<String>> {
    let to_value = |c: &RunConfig| {
        serde_json::to_value(c).map_err(|e| PulseError::Config(format!("not serializable: {e}")))
    };
    let mut diffs = Vec::new();
    fn walk(prefix: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
        match (a, b) {
            (serde_json::Value::Object(ma), serde_json::Value::Object(mb)) => {
                for (k, va) in ma {
                    let path = if prefix.is_empty() {
                        k.clone()
                    } else {
                        format!("{prefix}.{k}")
                    };
                    walk(&path, va, &mb[k], out);
                }
            }
            _ if a != b => out.push(prefix.to_string()),
            _ => {}
        }
    }
    walk("", &to_value(a)?, &to_value(b)?, &mut diffs);
    Ok(diffs)
}

/// Arms must be identical except for the one varied factor.
fn assert_single_factor(base: &RunConfig, arm: &RunConfig, allowed: &str) -> Result<()> {
    let diffs = config_diff(base, arm)?;
    let stray: Vec<&String> = diffs
        .iter()
        .filter(|d| *d != allowed && !d.starts_with(&format!("{allowed}.")))
        .collect();
    if !stray.is_empty() {
        return Err(PulseError::AblationContaminated(format!(
            "arm varies {stray:?} besides {allowed}"
        )));
    }
    Ok(())
}

/// Candidate files are the shared control; any drift poisons the ablation.
fn assert_candidates_shared(paths: &[PathBuf]) -> Result<()> {
    let mut first: Option<(String, &PathBuf)> = None;
    for path in paths {
        let hash = sha256_file(path)?;
        match &first {
            None => first = Some((hash, path)),
            Some((expect, anchor)) => {
                if *expect != hash {
                    return Err(PulseError::AblationContaminated(format!(
                        "candidate files diverge: {} vs {}",
                        anchor.display(),
                        path.display()
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Ablation A: one pipeline, three scoring spaces. The trained space, a
/// frozen randomly initialized space, and (when a vector file is configured)
/// a frozen space with external token embeddings. Trees, candidates, heads'
/// configs, and seeds are shared; only the space varies.
pub fn run_ablation_a(config: &RunConfig) -> Result<Vec<MetricsReport>> {
    let started = Instant::now();
    let backend = make_backend(&config.rationale, config.seed)?;
    let arts = run_pipeline(config, backend.as_ref())?;

    let mut spaces = vec![ScoringSpace::ThoughtSpace, ScoringSpace::FrozenGeneric];
    if config.eval.external_vectors.is_some() {
        spaces.push(ScoringSpace::ExternalVectors);
    }

    let mut reports = Vec::with_capacity(spaces.len());
    let mut candidate_files = Vec::new();
    for which in spaces {
        let mut arm_config = config.clone();
        arm_config.eval.scoring_space = which;
        assert_single_factor(config, &arm_config, "eval.scoring_space")?;
        let label = match which {
            ScoringSpace::ThoughtSpace => "thought_space",
            ScoringSpace::FrozenGeneric => "frozen_generic",
            ScoringSpace::ExternalVectors => "external_vectors",
        };

        let arm_root = config.artifacts_dir.join("arms").join(label);
        let shared = config.artifacts_dir.join("data/candidates_test.jsonl");
        let arm_cands = arm_root.join("data/candidates_test.jsonl");
        data::ingest::ensure_parent(&arm_cands)?;
        fs::copy(&shared, &arm_cands).map_err(|e| PulseError::io(&arm_cands, e))?;
        candidate_files.push(arm_cands);

        let space = scoring_space(&arm_config, &arts.space)?;
        let run = run_method(&arm_config, &arts, &space, backend.as_ref(), config.sft.selection)?;
        let mut extra = BTreeMap::new();
        method_artifacts(&arm_root, label, &run, &mut extra)?;
        let mut report = build_report(
            &arm_config,
            "ablation_a",
            &format!("scoring_space/{label}"),
            &run,
            &arts,
            extra,
            started,
        )?;
        report.experiment = format!("{}/ablation_a", config.eval.experiment);
        reports.push(report);
    }
    assert_candidates_shared(&candidate_files)?;

    let shared_fingerprint = &reports[0].artifacts;
    for r in &reports[1..] {
        for (name, hash) in shared_fingerprint {
            if let Some(other) = r.artifacts.get(name) {
                if other != hash {
                    return Err(PulseError::AblationContaminated(format!(
                        "shared artifact {name} diverged between arms"
                    )));
                }
            }
        }
    }
    emit_report(&reports, &config.artifacts_dir.join("reports/ablation_a"))?;
    Ok(reports)
}

/// Ablation B: one pipeline, one tree per user, four selection arms (plus an
/// optional random-leaf control). Only `sft.selection` varies.
pub fn run_ablation_b(config: &RunConfig, include_control: bool) -> Result<Vec<MetricsReport>> {
    let started = Instant::now();
    let backend = make_backend(&config.rationale, config.seed)?;
    let arts = run_pipeline(config, backend.as_ref())?;
    let space = scoring_space(config, &arts.space)?;

    let mut arms = vec![
        SelectionMethod::None,
        SelectionMethod::BaseReason,
        SelectionMethod::TotLoglik,
        SelectionMethod::TotThoughtSpace,
    ];
    if include_control {
        arms.push(SelectionMethod::RandomLeaf);
    }

    let mut reports = Vec::with_capacity(arms.len());
    for method in arms {
        let mut arm_config = config.clone();
        arm_config.sft.selection = method;
        assert_single_factor(config, &arm_config, "sft.selection")?;

        let arm_root = config.artifacts_dir.join("arms").join(method.label());
        let run = run_method(&arm_config, &arts, &space, backend.as_ref(), method)?;
        let mut extra = BTreeMap::new();
        method_artifacts(&arm_root, method.label(), &run, &mut extra)?;
        let mut report = build_report(
            &arm_config,
            "ablation_b",
            &format!("sft/{}", method.label()),
            &run,
            &arts,
            extra,
            started,
        )?;
        report.experiment = format!("{}/ablation_b", config.eval.experiment);
        reports.push(report);
    }
    emit_report(&reports, &config.artifacts_dir.join("reports/ablation_b"))?;
    Ok(reports)
}

pub struct CrossDomainOutcome {
    /// The source model evaluated on its own test users.
    pub source: MetricsReport,
    /// Source-trained encoders and head scoring target-domain slates.
    pub transfer: MetricsReport,
    /// Source backbone logits restricted to the target slates.
    pub backbone_only: MetricsReport,
}

/// Train on the source config, then evaluate on the target domain with zero
/// parameter updates. Target items reach the encoders through the hashed
/// tokenizer, so disjoint item vocabularies are handled by construction;
/// the backbone, whose item vocabulary is closed, collapses to padding on
/// target ids, which is exactly the contrast the baseline measures.
pub fn run_cross_domain(source: &RunConfig, target: &RunConfig) -> Result<CrossDomainOutcome> {
    let started = Instant::now();
    let backend = make_backend(&source.rationale, source.seed)?;
    let source_arts = run_pipeline(source, backend.as_ref())?;
    let space = scoring_space(source, &source_arts.space)?;
    let method = source.sft.selection;
    let source_run = run_method(source, &source_arts, &space, backend.as_ref(), method)?;
    let mut extra = BTreeMap::new();
    method_artifacts(&source.artifacts_dir, method.label(), &source_run, &mut extra)?;
    let source_report = build_report(
        source,
        "cross_domain",
        &format!("pulse/{}", method.label()),
        &source_run,
        &source_arts,
        extra,
        started,
    )?;

    // Freeze watermarks: any optimizer step on the target side is a
    // protocol violation.
    let steps_before = (
        space.params.step_count(),
        source_run.head.step_count(),
        source_arts.backbone.params.step_count(),
    );

    let target_backend = make_backend(&target.rationale, target.seed)?;
    let outcome = evaluate_transfer(
        source,
        target,
        &source_arts,
        &space,
        &source_run.head,
        target_backend.as_ref(),
        started,
    )?;
    let (transfer_report, backbone_report) = outcome;

    let steps_after = (
        space.params.step_count(),
        source_run.head.step_count(),
        source_arts.backbone.params.step_count(),
    );
    if steps_before != steps_after {
        return Err(PulseError::ProtocolViolation(format!(
            "optimizer steps changed during transfer: {steps_before:?} -> {steps_after:?}"
        )));
    }

    emit_report(
        &[
            source_report.clone(),
            transfer_report.clone(),
            backbone_report.clone(),
        ],
        &target.artifacts_dir.join("reports/cross_domain"),
    )?;
    Ok(CrossDomainOutcome {
        source: source_report,
        transfer: transfer_report,
        backbone_only: backbone_report,
    })
}

fn evaluate_transfer(
    source: &RunConfig,
    target: &RunConfig,
    source_arts: &PipelineArtifacts,
    space: &ThoughtSpace,
    head: &ParamStore,
    backend: &dyn GenerationBackend,
    started: Instant,
) -> Result<(MetricsReport, MetricsReport)> {
    target.validate()?;
    let root = target.artifacts_dir.as_path();
    let seed = target.seed;
    let mut hashes = BTreeMap::new();

    let (split, catalog) = stage_data(target).map_err(|e| e.in_stage("data"))?;
    let universe: Vec<String> = catalog.items.keys().cloned().collect();
    let cand_test = data::sample_all_candidates(&split, &universe, "test", seed)
        .map_err(|e| e.in_stage("data"))?;
    let dir = root.join("data");
    data::write_split(&dir.join("split.jsonl"), &split)?;
    data::write_catalog(&dir.join("catalog.jsonl"), &catalog)?;
    data::write_candidates(&dir.join("candidates_test.jsonl"), &cand_test)?;
    for name in ["split.jsonl", "catalog.jsonl", "candidates_test.jsonl"] {
        record_hash(&mut hashes, root, &dir.join(name))?;
    }

    // Target rationales: generation and selection only, no training. The
    // source backbone sees only padding on target ids, so similar-user
    // lists are degenerate; the prompts still carry the user's history.
    let (bases, trees, select_behaviors) = (|| -> Result<_> {
        let mut embeddings = BTreeMap::new();
        for user in split.users.keys() {
            let history = split.history_for_test(user)?;
            embeddings.insert(user.clone(), source_arts.backbone.user_embedding(history)?);
        }
        let users: Vec<&String> = split.users.keys().collect();
        let mut phase2_reqs = Vec::with_capacity(users.len());
        for user in &users {
            let seq = &split.users[*user];
            let similar = backbone::similar_users(&embeddings, user, target.rationale.k_similar)?;
            let mut similar_items = Vec::new();
            for s in &similar {
                similar_items.extend_from_slice(split.parts(&s)?.train);
            }
            phase2_reqs.push(generation_request(
                rationale::build_phase2_prompt(&catalog, seq, seq.len() - 1, &similar_items, None)?,
                derive_seed(seed, &format!("gen/phase2/{user}")),
            ));
        }
        let phase2_out = run_requests(backend, phase2_reqs, target.rationale.in_flight)?;
        let mut bases = BTreeMap::new();
        let mut trees = BTreeMap::new();
        for (idx, user) in users.iter().enumerate() {
            let base = Rationale::new(
                (*user).clone(),
                RationaleKind::Base,
                None,
                phase2_out[idx].text.clone(),
            )?;
            let tree = rationale::expand_tot(
                backend,
                &base,
                target.rationale.tot_n,
                target.rationale.tot_m,
                derive_seed(seed, &format!("gen/tot/{user}")),
                target.rationale.in_flight,
            )?;
            bases.insert((*user).clone(), base);
            trees.insert((*user).clone(), tree);
        }
        let mut select_behaviors = BTreeMap::new();
        for (user, seq) in &split.users {
            let parts = split.parts(user)?;
            select_behaviors.insert(
                user.clone(),
                thought::build_behavior_text(seq, parts.train.len(), parts.val, &catalog)?,
            );
        }
        Ok((bases, trees, select_behaviors))
    })()
    .map_err(|e| e.in_stage("rationales"))?;

    let method = target.sft.selection;
    let rationales: Option<BTreeMap<String, String>> = match method {
        SelectionMethod::None => None,
        SelectionMethod::BaseReason => Some(
            bases
                .iter()
                .map(|(u, r)| (u.clone(), r.text.clone()))
                .collect(),
        ),
        SelectionMethod::TotThoughtSpace => {
            let mut map = BTreeMap::new();
            for (user, tree) in &trees {
                let selected =
                    thought::select_best_rationale(space, tree, &select_behaviors[user])?;
                map.insert(user.clone(), selected.text);
            }
            Some(map)
        }
        SelectionMethod::TotLoglik => {
            let mut map = BTreeMap::new();
            for (user, tree) in &trees {
                map.insert(user.clone(), sft::ll_select(tree, backend)?.text);
            }
            Some(map)
        }
        SelectionMethod::RandomLeaf => {
            let mut map = BTreeMap::new();
            for (user, tree) in &trees {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    seed,
                    &format!("select/random/{user}"),
                ));
                map.insert(user.clone(), tree.leaves.choose(&mut rng).unwrap().text.clone());
            }
            Some(map)
        }
    };

    let hist_test = history_texts(&split, &catalog, "test")?;
    let test_ex = sft::build_sft_dataset(
        &hist_test,
        &cand_test,
        &catalog,
        rationales.as_ref(),
        method,
    )?;
    let (predictions, transfer_hr) =
        evaluate_head(head, space, &test_ex, source.sft.scorer.candidate_encoder)
            .map_err(|e| e.in_stage("evaluate"))?;
    let pred_path = root.join("reports/predictions_transfer.jsonl");
    sft::write_predictions(&pred_path, &predictions)?;
    record_hash(&mut hashes, root, &pred_path)?;
    let recount = hr_from_records(&sft::read_predictions(&pred_path)?)?;
    if recount != transfer_hr {
        return Err(PulseError::ProtocolViolation(format!(
            "transfer HR@1 recount {recount} != primary count {transfer_hr}"
        )));
    }

    // Backbone-only baseline: source backbone logits over the target slate.
    let mut backbone_pairs = Vec::with_capacity(cand_test.len());
    for (user, set) in &cand_test {
        let history = split.history_for_test(user)?;
        let predicted = source_arts.backbone.predict_among(history, &set.candidates)?;
        backbone_pairs.push((predicted, set.ground_truth_index));
    }
    let backbone_hr = hr_at_1(&backbone_pairs)?;

    let n = cand_test.len();
    let make = |method: &str, hr: f64, n_users: usize| MetricsReport {
        report_version: REPORT_VERSION,
        experiment: format!("{}/cross_domain", target.eval.experiment),
        dataset: target.dataset_id(),
        method: method.to_string(),
        seed: target.seed,
        fingerprint: String::new(),
        hr_at_1: hr,
        n_test_users: n_users,
        artifacts: hashes.clone(),
        curves: BTreeMap::new(),
        reference_full_scale: reference_targets("cross_domain"),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    let mut transfer = make("pulse_transfer", transfer_hr, predictions.len());
    transfer.fingerprint = transfer_fingerprint(source, target)?;
    let mut backbone_only = make("backbone_only_transfer", backbone_hr, n);
    backbone_only.fingerprint = transfer.fingerprint.clone();
    Ok((transfer, backbone_only))
}

pub(crate) fn transfer_fingerprint(source: &RunConfig, target: &RunConfig) -> Result<String> {
    Ok(crate::hashing::sha256_hex(
        format!("{}+{}", source.fingerprint()?, target.fingerprint()?).as_bytes(),
    ))
}

/// Write the JSON report, the flat CSV table, and one plot CSV per training
/// curve. Re-emitting the same reports yields byte-identical files.
pub fn emit_report(reports: &[MetricsReport], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if reports.is_empty() {
        return Err(PulseError::InvalidArgument(
            "emit_report needs at least one report".into(),
        ));
    }
    fs::create_dir_all(out_dir).map_err(|e| PulseError::io(out_dir, e))?;
    let mut written = Vec::new();

    let json_path = out_dir.join("report.json");
    let json = serde_json::to_string_pretty(reports)
        .map_err(|e| PulseError::Format {
            path: json_path.clone(),
            detail: e.to_string(),
        })?;
    fs::write(&json_path, json + "\n").map_err(|e| PulseError::io(&json_path, e))?;
    written.push(json_path);

    let csv_path = out_dir.join("report.csv");
    let write_table = || -> csv::Result<()> {
        let mut writer = csv::Writer::from_path(&csv_path)?;
        writer.write_record(REPORT_CSV_HEADER)?;
        for r in reports {
            writer.write_record([
                r.experiment.as_str(),
                r.dataset.as_str(),
                r.method.as_str(),
                &format!("{:.6}", r.hr_at_1),
                &r.n_test_users.to_string(),
                &r.seed.to_string(),
                r.fingerprint.as_str(),
            ])?;
        }
        writer.flush()?;
        Ok(())
    };
    write_table().map_err(|e| PulseError::Format {
        path: csv_path.clone(),
        detail: e.to_string(),
    })?;
    written.push(csv_path);

    let plots = out_dir.join("plots");
    fs::create_dir_all(&plots).map_err(|e| PulseError::io(&plots, e))?;
    for r in reports {
        for (curve, values) in &r.curves {
            if values.is_empty() {
                continue;
            }
            let safe = |s: &str| s.replace(['/', ' '], "-");
            let path = plots.join(format!(
                "{}__{}__{curve}.csv",
                safe(&r.experiment),
                safe(&r.method)
            ));
            let mut rows = String::from("step,value\n");
            for (i, v) in values.iter().enumerate() {
                rows.push_str(&format!("{i},{v:.6}\n"));
            }
            fs::write(&path, rows).map_err(|e| PulseError::io(&path, e))?;
            written.push(path);
        }
    }
    Ok(written)
}
