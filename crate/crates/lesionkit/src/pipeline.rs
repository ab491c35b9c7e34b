//! Stage orchestration: a fixed directory layout under one output root,
//! a manifest per stage for restartability, and error classification into
//! process exit codes.
//!
//! Every stage is deterministic under the run config; a completed stage is
//! skipped on rerun, so repeating a finished pipeline changes no bytes.

use crate::augment::{self, ChannelSet, SampleTensor};
use crate::ensemble::{
    self, EnsembleError, FindingScore, PredictionRow, PredictionTable, ViewPrediction,
};
use crate::gbm::{self, GbmError, ZooEntry};
use crate::metrics::{self, MetricsError, RocCurve};
use crate::phantom::{self, derive_seed, PhantomError};
use crate::preprocess::{self, LesionMask, PreprocessError, RegionGrowParams, SplitPlan};
use crate::radiomics::{self, FeatureRecord, RadiomicsError};
use crate::runcfg::{RunConfig, RunConfigError};
use crate::volgrid::{io as volio, CaseBundle, Finding, Modality, VolumeError};
use crate::xmasnet::{self, Dataset, XmasNetError};
use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Pipeline failure, classified for the process exit code: usage errors
/// exit 1, data errors exit 2, numeric errors exit 3.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Usage(_) => 1,
            PipelineError::Data(_) => 2,
            PipelineError::Numeric(_) => 3,
        }
    }
}

fn classify_metrics(e: MetricsError) -> PipelineError {
    match e {
        MetricsError::NonFiniteScore(_) => PipelineError::Numeric(e.to_string()),
        other => PipelineError::Data(other.to_string()),
    }
}

impl From<std::io::Error> for PipelineError {
    fn from(e: std::io::Error) -> Self {
        PipelineError::Data(format!("io: {e}"))
    }
}

impl From<RunConfigError> for PipelineError {
    fn from(e: RunConfigError) -> Self {
        PipelineError::Usage(e.to_string())
    }
}

impl From<VolumeError> for PipelineError {
    fn from(e: VolumeError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<PreprocessError> for PipelineError {
    fn from(e: PreprocessError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<augment::AugmentError> for PipelineError {
    fn from(e: augment::AugmentError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<RadiomicsError> for PipelineError {
    fn from(e: RadiomicsError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<PhantomError> for PipelineError {
    fn from(e: PhantomError) -> Self {
        match e {
            PhantomError::InvalidSpec(_) => PipelineError::Usage(e.to_string()),
            PhantomError::Volume(v) => PipelineError::Data(v.to_string()),
        }
    }
}

impl From<GbmError> for PipelineError {
    fn from(e: GbmError) -> Self {
        match e {
            GbmError::InvalidConfig(_) => PipelineError::Usage(e.to_string()),
            GbmError::NonFiniteFeature { .. } => PipelineError::Numeric(e.to_string()),
            GbmError::Metrics(m) => classify_metrics(m),
            other => PipelineError::Data(other.to_string()),
        }
    }
}

impl From<XmasNetError> for PipelineError {
    fn from(e: XmasNetError) -> Self {
        match e {
            XmasNetError::InvalidConfig(_) => PipelineError::Usage(e.to_string()),
            XmasNetError::NonFiniteGradient(_) | XmasNetError::DegenerateBatch => {
                PipelineError::Numeric(e.to_string())
            }
            XmasNetError::Metrics(m) => classify_metrics(m),
            other => PipelineError::Data(other.to_string()),
        }
    }
}

impl From<EnsembleError> for PipelineError {
    fn from(e: EnsembleError) -> Self {
        match e {
            EnsembleError::Metrics(m) => classify_metrics(m),
            other => PipelineError::Data(other.to_string()),
        }
    }
}

impl From<MetricsError> for PipelineError {
    fn from(e: MetricsError) -> Self {
        classify_metrics(e)
    }
}

/// A validated run: configuration plus the output root.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub cfg: RunConfig,
    pub out_dir: PathBuf,
}

impl RunContext {
    pub fn new(cfg: RunConfig, out_dir: impl Into<PathBuf>) -> Result<RunContext, PipelineError> {
        cfg.validate()?;
        Ok(RunContext { cfg, out_dir: out_dir.into() })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out_dir.join(rel)
    }

    fn channel_sets(&self) -> Result<Vec<ChannelSet>, PipelineError> {
        Ok(self.cfg.augment.parsed_channel_sets()?)
    }

    fn gbm_configs(&self) -> Vec<gbm::BoostConfig> {
        if self.cfg.gbm.sweep_grid {
            gbm::hyperparameter_grid()
        } else {
            vec![self.cfg.gbm.boost.clone()]
        }
    }
}

/// Whether a stage actually executed or was already complete.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    Skipped,
}

/// Per-stage provenance record: what went in, under which configuration
/// and seed, and what came out. Paths are relative to the output root.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

fn manifest_path(ctx: &RunContext, stage: &str) -> PathBuf {
    ctx.path(&format!("manifests/{stage}.manifest.json"))
}

fn rel_str(ctx: &RunContext, path: &Path) -> String {
    path.strip_prefix(&ctx.out_dir)
        .unwrap_or(path)
        .to_string_lossy()
        .into_owned()
}

fn stage_is_complete(ctx: &RunContext, stage: &str) -> bool {
    let path = manifest_path(ctx, stage);
    let Ok(text) = fs::read_to_string(&path) else { return false };
    let Ok(manifest) = serde_json::from_str::<StageManifest>(&text) else { return false };
    manifest.stage == stage
        && manifest.config_hash == ctx.cfg.content_hash()
        && manifest.outputs.iter().all(|o| ctx.path(o).exists())
}

fn record_stage(
    ctx: &RunContext,
    stage: &str,
    seed: u64,
    inputs: &[PathBuf],
    outputs: &[PathBuf],
) -> Result<(), PipelineError> {
    let manifest = StageManifest {
        stage: stage.to_string(),
        config_hash: ctx.cfg.content_hash(),
        seed,
        inputs: inputs.iter().map(|p| rel_str(ctx, p)).collect(),
        outputs: outputs.iter().map(|p| rel_str(ctx, p)).collect(),
    };
    let dir = ctx.path("manifests");
    fs::create_dir_all(&dir)?;
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| PipelineError::Data(format!("manifest serialization: {e}")))?;
    fs::write(manifest_path(ctx, stage), json + "\n")?;
    Ok(())
}

pub fn read_stage_manifest(ctx: &RunContext, stage: &str) -> Result<StageManifest, PipelineError> {
    let path = manifest_path(ctx, stage);
    let text = fs::read_to_string(&path)
        .map_err(|e| PipelineError::Data(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| PipelineError::Data(format!("malformed manifest {}: {e}", path.display())))
}

fn load_bundles(
    cases_dir: &Path,
    findings: &[Finding],
) -> Result<BTreeMap<String, CaseBundle>, PipelineError> {
    let mut by_case: BTreeMap<String, Vec<Finding>> = BTreeMap::new();
    for f in findings {
        by_case.entry(f.case_id.clone()).or_default().push(f.clone());
    }
    let mut bundles = BTreeMap::new();
    for (case_id, case_findings) in by_case {
        let dir = cases_dir.join(&case_id);
        let mut channels = BTreeMap::new();
        for m in Modality::ALL {
            let (header, _) = volio::nvol_paths(&dir, m.stem());
            if !header.exists() {
                return Err(PipelineError::Data(format!(
                    "missing volume {} for case {case_id}",
                    header.display()
                )));
            }
            channels.insert(m, volio::read_volume(&header)?);
        }
        bundles.insert(
            case_id.clone(),
            CaseBundle { case_id, channels, findings: case_findings },
        );
    }
    Ok(bundles)
}

/// Generate the synthetic cohort and write it under `cases/`, one directory
/// per case, plus the findings table.
pub fn stage_phantom(ctx: &RunContext) -> Result<StageOutcome, PipelineError> {
    let stage = "phantom";
    if stage_is_complete(ctx, stage) {
        return Ok(StageOutcome::Skipped);
    }
    let seed = derive_seed(ctx.cfg.seed, "phantom");
    let mut spec = ctx.cfg.phantom.clone();
    spec.seed = seed;
    let bundles = phantom::generate_phantoms(&spec)?;

    let mut outputs = Vec::new();
    for bundle in &bundles {
        let dir = ctx.path(&format!("cases/{}", bundle.case_id));
        fs::create_dir_all(&dir)?;
        for m in Modality::ALL {
            let (header, raw) = volio::nvol_paths(&dir, m.stem());
            volio::write_volume(bundle.channel(m).expect("generator fills all channels"), &header)?;
            outputs.push(header);
            outputs.push(raw);
        }
    }
    let findings = phantom::all_findings(&bundles);
    let findings_path = ctx.path("findings.csv");
    volio::write_findings_csv(&findings, &findings_path)?;
    outputs.push(findings_path);

    record_stage(ctx, stage, seed, &[], &outputs)?;
    Ok(StageOutcome::Ran)
}

/// One lesion mask in serializable form.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskRecord {
    pub case_id: String,
    pub finding_id: u32,
    pub source: String,
    pub volume_dims: [usize; 3],
    pub seed_index: [usize; 3],
    pub voxels: Vec<usize>,
}

impl MaskRecord {
    pub fn to_mask(&self) -> LesionMask {
        LesionMask::from_voxels(
            self.volume_dims,
            self.voxels.iter().copied().collect(),
            self.seed_index,
        )
    }
}

/// Resample every channel to isotropic spacing, refine finding centers,
/// grow lesion masks (with the ball fallback), and split cases.
pub fn stage_preprocess(ctx: &RunContext) -> Result<StageOutcome, PipelineError> {
    let stage = "preprocess";
    if stage_is_complete(ctx, stage) {
        return Ok(StageOutcome::Skipped);
    }
    let findings_path = ctx.path("findings.csv");
    let findings = volio::read_findings_csv(&findings_path)?;
    if findings.is_empty() {
        return Err(PipelineError::Data("findings table is empty".into()));
    }
    let raw_bundles = load_bundles(&ctx.path("cases"), &findings)?;

    let target = ctx.cfg.preprocess.target_spacing_mm;
    let params = RegionGrowParams {
        rel_threshold: ctx.cfg.preprocess.rel_threshold,
        max_radius_mm: ctx.cfg.preprocess.max_radius_mm,
        morph_radius_vox: ctx.cfg.preprocess.morph_radius_vox,
    };

    let mut outputs = Vec::new();
    let mut resampled: BTreeMap<String, CaseBundle> = BTreeMap::new();
    for (case_id, bundle) in &raw_bundles {
        let dir = ctx.path(&format!("prep/cases/{case_id}"));
        fs::create_dir_all(&dir)?;
        let mut channels = BTreeMap::new();
        for m in Modality::ALL {
            let vol = bundle
                .channel(m)
                .ok_or_else(|| PipelineError::Data(format!("case {case_id} lacks {m}")))?;
            let iso = vol.resample_isotropic(target)?;
            let (header, raw) = volio::nvol_paths(&dir, m.stem());
            volio::write_volume(&iso, &header)?;
            outputs.push(header);
            outputs.push(raw);
            channels.insert(m, iso);
        }
        resampled.insert(
            case_id.clone(),
            CaseBundle {
                case_id: case_id.clone(),
                channels,
                findings: bundle.findings.clone(),
            },
        );
    }

    let mut refined = Vec::with_capacity(findings.len());
    let mut masks = Vec::with_capacity(findings.len());
    for f in &findings {
        let bundle = &resampled[&f.case_id];
        let dwi = bundle.channel(Modality::Dwi).expect("resampled above");
        let center = preprocess::refine_lesion_center_with(dwi, f, params);
        refined.push(Finding { pos_world: center, ..f.clone() });

        let grown = preprocess::lesion_mask(dwi, center, params);
        let (mask, source) = match grown {
            Ok(m) if !m.is_empty() => (m, "region_grow"),
            _ => (
                radiomics::fallback_ball_mask(
                    dwi,
                    center,
                    ctx.cfg.preprocess.fallback_ball_radius_mm,
                ),
                "ball",
            ),
        };
        if mask.is_empty() {
            return Err(PipelineError::Data(format!(
                "no usable mask for finding {}/{}",
                f.case_id, f.finding_id
            )));
        }
        masks.push(MaskRecord {
            case_id: f.case_id.clone(),
            finding_id: f.finding_id,
            source: source.to_string(),
            volume_dims: mask.volume_dims(),
            seed_index: mask.seed_index(),
            voxels: mask.voxels().iter().copied().collect(),
        });
    }

    let split_seed = derive_seed(ctx.cfg.seed, "split");
    let plan = preprocess::stratified_split(&refined, ctx.cfg.preprocess.val_fraction, split_seed)?;

    let refined_path = ctx.path("prep/findings_refined.csv");
    volio::write_findings_csv(&refined, &refined_path)?;
    outputs.push(refined_path);

    let masks_path = ctx.path("prep/masks.json");
    let masks_json = serde_json::to_string_pretty(&masks)
        .map_err(|e| PipelineError::Data(format!("mask serialization: {e}")))?;
    fs::write(&masks_path, masks_json + "\n")?;
    outputs.push(masks_path);

    let split_path = ctx.path("prep/split.json");
    preprocess::write_split_plan(&plan, &split_path)?;
    outputs.push(split_path);

    record_stage(ctx, stage, split_seed, &[ctx.path("findings.csv"), ctx.path("cases")], &outputs)?;
    Ok(StageOutcome::Ran)
}

fn read_refined_findings(ctx: &RunContext) -> Result<Vec<Finding>, PipelineError> {
    let path = ctx.path("prep/findings_refined.csv");
    if !path.exists() {
        return Err(PipelineError::Data(format!(
            "{} not found; run the preprocess stage first",
            path.display()
        )));
    }
    Ok(volio::read_findings_csv(&path)?)
}

fn archive_path(ctx: &RunContext, set: ChannelSet) -> PathBuf {
    ctx.path(&format!("samples/{}.samples.json", set.code().to_lowercase()))
}

/// Extract every (finding x view) sample per channel set into archives.
pub fn stage_augment(ctx: &RunContext) -> Result<StageOutcome, PipelineError> {
    let stage = "augment";
    if stage_is_complete(ctx, stage) {
        return Ok(StageOutcome::Skipped);
    }
    let findings = read_refined_findings(ctx)?;
    let bundles = load_bundles(&ctx.path("prep/cases"), &findings)?;
    let views = augment::enumerate_views(
        ctx.cfg.augment.rotations_per_orientation,
        ctx.cfg.augment.shears,
    );
    fs::create_dir_all(ctx.path("samples"))?;
    let mut outputs = Vec::new();
    for set in ctx.channel_sets()? {
        let manifest = archive_path(ctx, set);
        augment::build_dataset(&bundles, &findings, &views, set, &manifest)?;
        outputs.push(manifest.clone());
        outputs.push(manifest.with_extension("bin"));
    }
    record_stage(
        ctx,
        stage,
        ctx.cfg.seed,
        &[ctx.path("prep/findings_refined.csv"), ctx.path("prep/cases")],
        &outputs,
    )?;
    Ok(StageOutcome::Ran)
}

/// Extract the 87-feature vector for every finding from the preprocessed
/// volumes and masks.
pub fn stage_features(ctx: &RunContext) -> Result<StageOutcome, PipelineError> {
    let stage = "features";
    if stage_is_complete(ctx, stage) {
        return Ok(StageOutcome::Skipped);
    }
    let findings = read_refined_findings(ctx)?;
    let bundles = load_bundles(&ctx.path("prep/cases"), &findings)?;
    let masks_path = ctx.path("prep/masks.json");
    let masks_text = fs::read_to_string(&masks_path)
        .map_err(|e| PipelineError::Data(format!("cannot read {}: {e}", masks_path.display())))?;
    let mask_records: Vec<MaskRecord> = serde_json::from_str(&masks_text)
        .map_err(|e| PipelineError::Data(format!("malformed masks: {e}")))?;
    let mask_by_key: BTreeMap<(String, u32), &MaskRecord> = mask_records
        .iter()
        .map(|m| ((m.case_id.clone(), m.finding_id), m))
        .collect();

    let mut sorted: Vec<&Finding> = findings.iter().collect();
    sorted.sort_by(|a, b| (&a.case_id, a.finding_id).cmp(&(&b.case_id, b.finding_id)));
    let mut records = Vec::with_capacity(sorted.len());
    for f in sorted {
        let label = f.label.ok_or_else(|| {
            PipelineError::Data(format!("finding {}/{} has no label", f.case_id, f.finding_id))
        })?;
        let mask_record =
            mask_by_key.get(&(f.case_id.clone(), f.finding_id)).ok_or_else(|| {
                PipelineError::Data(format!("no mask for finding {}/{}", f.case_id, f.finding_id))
            })?;
        let mask = mask_record.to_mask();
        let values = radiomics::extract_features(&bundles[&f.case_id], &mask)?;
        records.push(FeatureRecord {
            case_id: f.case_id.clone(),
            finding_id: f.finding_id,
            label,
            values,
        });
    }

    fs::create_dir_all(ctx.path("features"))?;
    let csv_path = ctx.path("features/features.csv");
    radiomics::write_feature_csv(&records, &radiomics::feature_names(), &csv_path)?;
    let manifest_json = ctx.path("features/feature_manifest.json");
    radiomics::write_feature_manifest(&manifest_json)?;

    record_stage(
        ctx,
        stage,
        ctx.cfg.seed,
        &[ctx.path("prep/cases"), masks_path],
        &[csv_path, manifest_json],
    )?;
    Ok(StageOutcome::Ran)
}

fn read_split(ctx: &RunContext) -> Result<SplitPlan, PipelineError> {
    let path = ctx.path("prep/split.json");
    if !path.exists() {
        return Err(PipelineError::Data(format!(
            "{} not found; run the preprocess stage first",
            path.display()
        )));
    }
    Ok(preprocess::read_split_plan(&path)?)
}

fn cnn_model_id(set: ChannelSet) -> String {
    format!("cnn_{}", set.code().to_lowercase())
}

fn partition_samples(
    samples: Vec<SampleTensor>,
    plan: &SplitPlan,
) -> Result<(Vec<SampleTensor>, Vec<SampleTensor>), PipelineError> {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for s in samples {
        if plan.is_train(&s.case_id) {
            train.push(s);
        } else if plan.is_val(&s.case_id) {
            val.push(s);
        } else {
            return Err(PipelineError::Data(format!(
                "case {} is in neither split",
                s.case_id
            )));
        }
    }
    Ok((train, val))
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainingHistory {
    model_id: String,
    channel_set: String,
    best_val_auc: f64,
    best_step: u64,
    history: Vec<xmasnet::EvalPoint>,
}

/// Train one network per channel set, save the best snapshots, and write
/// per-view validation predictions.
pub fn stage_train_cnn(ctx: &RunContext) -> Result<StageOutcome, PipelineError> {
    let stage = "train-cnn";
    if stage_is_complete(ctx, stage) {
        return Ok(StageOutcome::Skipped);
    }
    let plan = read_split(ctx)?;
    fs::create_dir_all(ctx.path("models"))?;
    fs::create_dir_all(ctx.path("predictions"))?;

    let sets = ctx.channel_sets()?;
    let results: Result<Vec<Vec<PathBuf>>, PipelineError> = sets
        .par_iter()
        .map(|&set| {
            let archive = archive_path(ctx, set);
            if !archive.exists() {
                return Err(PipelineError::Data(format!(
                    "{} not found; run the augment stage first",
                    archive.display()
                )));
            }
            let (_, samples) = augment::read_sample_archive(&archive)?;
            let (train_samples, val_samples) = partition_samples(samples, &plan)?;
            let train_set = Dataset::from_samples(&train_samples)?;
            let val_set = Dataset::from_samples(&val_samples)?;

            let model_id = cnn_model_id(set);
            let mut tcfg = ctx.cfg.cnn.train.clone();
            tcfg.seed = derive_seed(ctx.cfg.seed, &format!("cnn/{}", set.code()));
            let trained = xmasnet::train(&ctx.cfg.cnn.network, &tcfg, &train_set, &val_set)?;

            let model_path = ctx.path(&format!("models/{model_id}.model.json"));
            trained.model.save(&model_path)?;

            let history_path = ctx.path(&format!("models/{model_id}.history.json"));
            let history = TrainingHistory {
                model_id: model_id.clone(),
                channel_set: set.code().to_string(),
                best_val_auc: trained.best_val_auc,
                best_step: trained.best_step,
                history: trained.history.clone(),
            };
            let json = serde_json::to_string_pretty(&history)
                .map_err(|e| PipelineError::Data(format!("history serialization: {e}")))?;
            fs::write(&history_path, json + "\n")?;

            let probs = xmasnet::predict(&trained.model, &val_samples, tcfg.batch_size)?;
            let rows: Vec<PredictionRow> = val_samples
                .iter()
                .zip(&probs)
                .map(|(s, &p)| PredictionRow {
                    model_id: model_id.clone(),
                    case_id: s.case_id.clone(),
                    finding_id: s.finding_id,
                    view_index: s.view_index,
                    probability: p,
                })
                .collect();
            let pred_path = ctx.path(&format!("predictions/{model_id}.val.csv"));
            ensemble::write_predictions_csv(&rows, &pred_path)?;

            Ok(vec![
                model_path,
                ctx.path(&format!("models/{model_id}.model.bin")),
                history_path,
                pred_path,
            ])
        })
        .collect();

    let outputs: Vec<PathBuf> = results?.into_iter().flatten().collect();
    record_stage(
        ctx,
        stage,
        derive_seed(ctx.cfg.seed, "cnn"),
        &[ctx.path("samples"), ctx.path("prep/split.json")],
        &outputs,
    )?;
    Ok(StageOutcome::Ran)
}

fn feature_matrix(records: &[&FeatureRecord]) -> Result<(Array2<f64>, Vec<u8>), PipelineError> {
    if records.is_empty() {
        return Err(PipelineError::Data("no feature records".into()));
    }
    let n_features = records[0].values.len();
    let mut x = Array2::zeros((records.len(), n_features));
    let mut y = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        if r.values.len() != n_features {
            return Err(PipelineError::Data(format!(
                "feature record {}/{} has {} values, expected {n_features}",
                r.case_id,
                r.finding_id,
                r.values.len()
            )));
        }
        for (j, &v) in r.values.iter().enumerate() {
            x[[i, j]] = v;
        }
        y.push(r.label);
    }
    Ok((x, y))
}

#[derive(Debug, Serialize, Deserialize)]
struct SelectionReport {
    baseline_auc: f64,
    steps: Vec<SelectionReportStep>,
    best_subset: Vec<usize>,
    best_subset_names: Vec<String>,
    best_auc: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct SelectionReportStep {
    removed_feature: usize,
    removed_name: String,
    mean_auc: f64,
}

/// Backward feature selection on the training split, then one boosted
/// model per configured hyperparameter point, each with its CV score and
/// validation predictions.
pub fn stage_train_gbm(ctx: &RunContext) -> Result<StageOutcome, PipelineError> {
    let stage = "train-gbm";
    if stage_is_complete(ctx, stage) {
        return Ok(StageOutcome::Skipped);
    }
    let plan = read_split(ctx)?;
    let features_path = ctx.path("features/features.csv");
    if !features_path.exists() {
        return Err(PipelineError::Data(format!(
            "{} not found; run the features stage first",
            features_path.display()
        )));
    }
    let (names, records) = radiomics::read_feature_csv(&features_path)?;

    let train_records: Vec<&FeatureRecord> =
        records.iter().filter(|r| plan.is_train(&r.case_id)).collect();
    let val_records: Vec<&FeatureRecord> =
        records.iter().filter(|r| plan.is_val(&r.case_id)).collect();
    let (x_train, y_train) = feature_matrix(&train_records)?;
    let (x_val, _) = feature_matrix(&val_records)?;

    let mut select_cfg = ctx.cfg.gbm.boost.clone();
    select_cfg.seed = derive_seed(ctx.cfg.seed, "gbm/select");
    let selection = gbm::backward_feature_selection(
        &x_train,
        &y_train,
        &select_cfg,
        ctx.cfg.gbm.k_folds,
        ctx.cfg.gbm.min_features,
    )?;

    fs::create_dir_all(ctx.path("models"))?;
    fs::create_dir_all(ctx.path("predictions"))?;
    let report = SelectionReport {
        baseline_auc: selection.baseline_auc,
        steps: selection
            .steps
            .iter()
            .map(|s| SelectionReportStep {
                removed_feature: s.removed_feature,
                removed_name: names[s.removed_feature].clone(),
                mean_auc: s.mean_auc,
            })
            .collect(),
        best_subset: selection.best_subset.clone(),
        best_subset_names: selection.best_subset.iter().map(|&i| names[i].clone()).collect(),
        best_auc: selection.best_auc,
    };
    let selection_path = ctx.path("features/selection.json");
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| PipelineError::Data(format!("selection serialization: {e}")))?;
    fs::write(&selection_path, json + "\n")?;

    let subset = &selection.best_subset;
    let subset_names: Vec<String> = subset.iter().map(|&i| names[i].clone()).collect();
    let x_train_sel = x_train.select(Axis(1), subset);
    let x_val_sel = x_val.select(Axis(1), subset);

    let configs = ctx.gbm_configs();
    let zoo_and_outputs: Result<Vec<(ZooEntry, Vec<PathBuf>)>, PipelineError> = configs
        .par_iter()
        .enumerate()
        .map(|(i, base_cfg)| {
            let model_id = format!("gbm_{i:03}");
            let mut cfg = base_cfg.clone();
            cfg.seed = derive_seed(ctx.cfg.seed, &format!("gbm/{model_id}"));
            let cv = gbm::kfold_cv(&x_train_sel, &y_train, &cfg, ctx.cfg.gbm.k_folds)?;
            let model = gbm::fit(&x_train_sel, &y_train, &cfg)?
                .with_feature_names(subset_names.clone())?;
            let model_path = ctx.path(&format!("models/{model_id}.model.json"));
            model.save(&model_path)?;

            let probs = model.predict_proba(&x_val_sel)?;
            let rows: Vec<PredictionRow> = val_records
                .iter()
                .zip(&probs)
                .map(|(r, &p)| PredictionRow {
                    model_id: model_id.clone(),
                    case_id: r.case_id.clone(),
                    finding_id: r.finding_id,
                    view_index: 0,
                    probability: p,
                })
                .collect();
            let pred_path = ctx.path(&format!("predictions/{model_id}.val.csv"));
            ensemble::write_predictions_csv(&rows, &pred_path)?;

            let entry = ZooEntry {
                model_id,
                hyperparameters: cfg.describe(),
                mean_cv_auc: cv.mean_auc,
                selected_features: subset_names.clone(),
            };
            Ok((entry, vec![model_path, pred_path]))
        })
        .collect();

    let mut outputs = vec![selection_path];
    let mut zoo = Vec::new();
    for (entry, mut paths) in zoo_and_outputs? {
        zoo.push(entry);
        outputs.append(&mut paths);
    }
    let zoo_path = ctx.path("models/zoo_summary.csv");
    gbm::write_zoo_summary(&zoo, &zoo_path)?;
    outputs.push(zoo_path);

    record_stage(
        ctx,
        stage,
        derive_seed(ctx.cfg.seed, "gbm"),
        &[features_path, ctx.path("prep/split.json")],
        &outputs,
    )?;
    Ok(StageOutcome::Ran)
}

/// Validation labels per (case, finding), restricted to validation cases.
fn val_labels(ctx: &RunContext) -> Result<BTreeMap<(String, u32), u8>, PipelineError> {
    let findings = read_refined_findings(ctx)?;
    let plan = read_split(ctx)?;
    let mut labels = BTreeMap::new();
    for f in findings.iter().filter(|f| plan.is_val(&f.case_id)) {
        let label = f.label.ok_or_else(|| {
            PipelineError::Data(format!("finding {}/{} has no label", f.case_id, f.finding_id))
        })?;
        labels.insert((f.case_id.clone(), f.finding_id), label);
    }
    if labels.is_empty() {
        return Err(PipelineError::Data("no validation findings".into()));
    }
    Ok(labels)
}

/// Per-model view-averaged validation scores, keyed by model id, from the
/// prediction CSVs. The ensemble's own output is excluded.
fn collect_model_scores(
    ctx: &RunContext,
) -> Result<BTreeMap<String, Vec<FindingScore>>, PipelineError> {
    let dir = ctx.path("predictions");
    if !dir.exists() {
        return Err(PipelineError::Data(format!(
            "{} not found; run the training stages first",
            dir.display()
        )));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map_or(false, |n| n.ends_with(".val.csv") && !n.starts_with("ensemble"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(PipelineError::Data("no model predictions found".into()));
    }

    let mut scores = BTreeMap::new();
    for file in files {
        let rows = ensemble::read_predictions_csv(&file)?;
        if rows.is_empty() {
            return Err(PipelineError::Data(format!("{} is empty", file.display())));
        }
        let model_id = rows[0].model_id.clone();
        if rows.iter().any(|r| r.model_id != model_id) {
            return Err(PipelineError::Data(format!(
                "{} mixes prediction rows of several models",
                file.display()
            )));
        }
        let views: Vec<ViewPrediction> = rows
            .into_iter()
            .map(|r| ViewPrediction {
                case_id: r.case_id,
                finding_id: r.finding_id,
                view_index: r.view_index,
                probability: r.probability,
            })
            .collect();
        scores.insert(model_id, ensemble::multiview_average(&views)?);
    }
    Ok(scores)
}

/// Scores aligned onto the (case, finding) axis, which must match exactly.
fn align_scores(
    model_id: &str,
    scores: &[FindingScore],
    axis: &[(String, u32)],
) -> Result<Vec<f64>, PipelineError> {
    let by_key: BTreeMap<(&str, u32), f64> = scores
        .iter()
        .map(|s| ((s.case_id.as_str(), s.finding_id), s.score))
        .collect();
    if by_key.len() != axis.len() {
        return Err(PipelineError::Data(format!(
            "model {model_id} scored {} findings, expected {}",
            by_key.len(),
            axis.len()
        )));
    }
    axis.iter()
        .map(|(case, finding)| {
            by_key.get(&(case.as_str(), *finding)).copied().ok_or_else(|| {
                PipelineError::Data(format!("model {model_id} has no score for {case}/{finding}"))
            })
        })
        .collect()
}

/// Greedy ensemble selection over every trained model's validation scores.
pub fn stage_select_ensemble(ctx: &RunContext) -> Result<StageOutcome, PipelineError> {
    let stage = "select-ensemble";
    if stage_is_complete(ctx, stage) {
        return Ok(StageOutcome::Skipped);
    }
    let labels = val_labels(ctx)?;
    let axis: Vec<(String, u32)> = labels.keys().cloned().collect();
    let y: Vec<u8> = labels.values().copied().collect();

    let model_scores = collect_model_scores(ctx)?;
    let mut model_ids = Vec::new();
    let mut matrix = Vec::new();
    for (model_id, scores) in &model_scores {
        matrix.push(align_scores(model_id, scores, &axis)?);
        model_ids.push(model_id.clone());
    }
    let table = PredictionTable::new(model_ids, matrix, y)?;
    let weights =
        ensemble::greedy_select(&table, ctx.cfg.ensemble.max_iters, ctx.cfg.ensemble.patience)?;

    fs::create_dir_all(ctx.path("ensemble"))?;
    let weights_path = ctx.path("ensemble/weights.json");
    ensemble::write_weights(&weights, &weights_path)?;

    record_stage(
        ctx,
        stage,
        ctx.cfg.seed,
        &[ctx.path("predictions"), ctx.path("prep/findings_refined.csv")],
        &[weights_path],
    )?;
    Ok(StageOutcome::Ran)
}

/// Blend the member models' validation scores with the selected weights.
pub fn stage_predict(ctx: &RunContext) -> Result<StageOutcome, PipelineError> {
    let stage = "predict";
    if stage_is_complete(ctx, stage) {
        return Ok(StageOutcome::Skipped);
    }
    let weights_path = ctx.path("ensemble/weights.json");
    if !weights_path.exists() {
        return Err(PipelineError::Data(format!(
            "{} not found; run the select-ensemble stage first",
            weights_path.display()
        )));
    }
    let weights = ensemble::read_weights(&weights_path)?;
    let labels = val_labels(ctx)?;
    let axis: Vec<(String, u32)> = labels.keys().cloned().collect();

    let model_scores = collect_model_scores(ctx)?;
    let mut predictions = BTreeMap::new();
    for (model_id, scores) in &model_scores {
        predictions.insert(model_id.clone(), align_scores(model_id, scores, &axis)?);
    }
    let blended = ensemble::ensemble_predict(&weights, &predictions)?;

    let rows: Vec<PredictionRow> = axis
        .iter()
        .zip(&blended)
        .map(|((case_id, finding_id), &p)| PredictionRow {
            model_id: "ensemble".to_string(),
            case_id: case_id.clone(),
            finding_id: *finding_id,
            view_index: 0,
            probability: p,
        })
        .collect();
    let pred_path = ctx.path("predictions/ensemble.val.csv");
    ensemble::write_predictions_csv(&rows, &pred_path)?;

    record_stage(ctx, stage, ctx.cfg.seed, &[weights_path], &[pred_path])?;
    Ok(StageOutcome::Ran)
}

fn ensemble_scores(ctx: &RunContext) -> Result<Vec<FindingScore>, PipelineError> {
    let path = ctx.path("predictions/ensemble.val.csv");
    if !path.exists() {
        return Err(PipelineError::Data(format!(
            "{} not found; run the predict stage first",
            path.display()
        )));
    }
    let rows = ensemble::read_predictions_csv(&path)?;
    let views: Vec<ViewPrediction> = rows
        .into_iter()
        .map(|r| ViewPrediction {
            case_id: r.case_id,
            finding_id: r.finding_id,
            view_index: r.view_index,
            probability: r.probability,
        })
        .collect();
    Ok(ensemble::multiview_average(&views)?)
}

#[derive(Debug, Serialize, Deserialize)]
struct EvaluationReport {
    models: BTreeMap<String, f64>,
    ensemble_auc: f64,
    youden_threshold: f64,
    sensitivity: f64,
    specificity: f64,
}

/// Validation AUC per model and for the ensemble, plus the ensemble's
/// operating point at the Youden-optimal threshold.
pub fn stage_evaluate(ctx: &RunContext) -> Result<StageOutcome, PipelineError> {
    let stage = "evaluate";
    if stage_is_complete(ctx, stage) {
        return Ok(StageOutcome::Skipped);
    }
    let labels = val_labels(ctx)?;
    let axis: Vec<(String, u32)> = labels.keys().cloned().collect();
    let y: Vec<u8> = labels.values().copied().collect();

    let mut models = BTreeMap::new();
    for (model_id, scores) in &collect_model_scores(ctx)? {
        let aligned = align_scores(model_id, scores, &axis)?;
        models.insert(model_id.clone(), metrics::auc(&aligned, &y)?);
    }
    let blended = align_scores("ensemble", &ensemble_scores(ctx)?, &axis)?;
    let (curve, ensemble_auc) = metrics::roc_auc(&blended, &y)?;
    let threshold = metrics::youden_optimal(&curve);
    let (sensitivity, specificity) = metrics::sens_spec(&blended, &y, threshold)?;

    fs::create_dir_all(ctx.path("eval"))?;
    let report = EvaluationReport {
        models,
        ensemble_auc,
        youden_threshold: threshold,
        sensitivity,
        specificity,
    };
    let metrics_path = ctx.path("eval/metrics.json");
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| PipelineError::Data(format!("report serialization: {e}")))?;
    fs::write(&metrics_path, json + "\n")?;
    let roc_csv = ctx.path("eval/roc.csv");
    metrics::write_roc_csv(&curve, &roc_csv)?;

    record_stage(
        ctx,
        stage,
        ctx.cfg.seed,
        &[ctx.path("predictions")],
        &[metrics_path, roc_csv],
    )?;
    Ok(StageOutcome::Ran)
}

/// Render the ROC curves of every model plus the ensemble to one SVG.
pub fn stage_roc_plot(ctx: &RunContext) -> Result<StageOutcome, PipelineError> {
    let stage = "roc-plot";
    if stage_is_complete(ctx, stage) {
        return Ok(StageOutcome::Skipped);
    }
    let labels = val_labels(ctx)?;
    let axis: Vec<(String, u32)> = labels.keys().cloned().collect();
    let y: Vec<u8> = labels.values().copied().collect();

    let mut curves: Vec<(String, RocCurve, f64)> = Vec::new();
    for (model_id, scores) in &collect_model_scores(ctx)? {
        let aligned = align_scores(model_id, scores, &axis)?;
        let (curve, auc) = metrics::roc_auc(&aligned, &y)?;
        curves.push((model_id.clone(), curve, auc));
    }
    let blended = align_scores("ensemble", &ensemble_scores(ctx)?, &axis)?;
    let (curve, auc) = metrics::roc_auc(&blended, &y)?;
    curves.push(("ensemble".to_string(), curve, auc));

    fs::create_dir_all(ctx.path("eval"))?;
    let svg_path = ctx.path("eval/roc.svg");
    metrics::write_roc_svg(&curves, &svg_path)?;

    record_stage(ctx, stage, ctx.cfg.seed, &[ctx.path("predictions")], &[svg_path])?;
    Ok(StageOutcome::Ran)
}

pub const STAGE_NAMES: [&str; 10] = [
    "phantom",
    "preprocess",
    "augment",
    "features",
    "train-cnn",
    "train-gbm",
    "select-ensemble",
    "predict",
    "evaluate",
    "roc-plot",
];

/// Run one stage by its canonical name.
pub fn run_stage(ctx: &RunContext, stage: &str) -> Result<StageOutcome, PipelineError> {
    match stage {
        "phantom" => stage_phantom(ctx),
        "preprocess" => stage_preprocess(ctx),
        "augment" => stage_augment(ctx),
        "features" => stage_features(ctx),
        "train-cnn" => stage_train_cnn(ctx),
        "train-gbm" => stage_train_gbm(ctx),
        "select-ensemble" => stage_select_ensemble(ctx),
        "predict" => stage_predict(ctx),
        "evaluate" => stage_evaluate(ctx),
        "roc-plot" => stage_roc_plot(ctx),
        other => Err(PipelineError::Usage(format!("unknown stage {other:?}"))),
    }
}

/// Run every stage in order; returns each stage's outcome.
pub fn run_all(ctx: &RunContext) -> Result<Vec<(String, StageOutcome)>, PipelineError> {
    let mut outcomes = Vec::with_capacity(STAGE_NAMES.len());
    for stage in STAGE_NAMES {
        let outcome = run_stage(ctx, stage)?;
        outcomes.push((stage.to_string(), outcome));
    }
    Ok(outcomes)
}

/// Recursively collect (relative path, bytes) for every file under a root.
/// Test and verification helper for byte-stability comparisons.
pub fn snapshot_tree(root: &Path) -> Result<BTreeMap<String, Vec<u8>>, PipelineError> {
    fn walk(
        root: &Path,
        dir: &Path,
        out: &mut BTreeMap<String, Vec<u8>>,
    ) -> Result<(), PipelineError> {
        let mut entries: Vec<PathBuf> =
            fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
        entries.sort();
        for path in entries {
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                let rel = path
                    .strip_prefix(root)
                    .unwrap_or(&path)
                    .to_string_lossy()
                    .into_owned();
                out.insert(rel, fs::read(&path)?);
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runcfg;

    fn smoke_config() -> RunConfig {
        let text = r#"
            seed = 11

            [phantom]
            n_cases = 10
            min_lesions_per_case = 1
            max_lesions_per_case = 2
            dims = [28, 28, 20]
            spacing = [1.5, 1.5, 2.0]

            [preprocess]
            val_fraction = 0.3

            [augment]
            rotations_per_orientation = 1
            shears = 1
            channel_sets = ["DAK"]

            [cnn.train]
            learning_rate = 0.001
            batch_size = 8
            max_steps = 4
            eval_every = 4
            patience = 3

            [gbm]
            k_folds = 3
            min_features = 84

            [gbm.boost]
            n_trees = 5
            max_depth = 2
        "#;
        runcfg::parse_run_config(text).unwrap()
    }

    #[test]
    fn full_pipeline_runs_then_skips_and_stays_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let ctx = RunContext::new(smoke_config(), dir.path()).unwrap();

        let outcomes = run_all(&ctx).unwrap();
        assert_eq!(outcomes.len(), 10);
        assert!(outcomes.iter().all(|(_, o)| *o == StageOutcome::Ran));

        for rel in [
            "findings.csv",
            "prep/split.json",
            "prep/masks.json",
            "samples/dak.samples.json",
            "features/features.csv",
            "features/selection.json",
            "models/cnn_dak.model.json",
            "models/gbm_000.model.json",
            "models/zoo_summary.csv",
            "ensemble/weights.json",
            "predictions/ensemble.val.csv",
            "eval/metrics.json",
            "eval/roc.svg",
        ] {
            assert!(ctx.path(rel).exists(), "missing output {rel}");
        }

        let before = snapshot_tree(dir.path()).unwrap();
        let outcomes = run_all(&ctx).unwrap();
        assert!(outcomes.iter().all(|(_, o)| *o == StageOutcome::Skipped));
        let after = snapshot_tree(dir.path()).unwrap();
        assert_eq!(before.len(), after.len());
        for (path, bytes) in &before {
            assert_eq!(Some(bytes), after.get(path), "{path} changed on rerun");
        }

        let text = fs::read_to_string(ctx.path("eval/metrics.json")).unwrap();
        let report: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(report["ensemble_auc"].as_f64().unwrap().is_finite());
    }

    #[test]
    fn changing_the_seed_invalidates_completed_stages() {
        let dir = tempfile::tempdir().unwrap();
        let ctx = RunContext::new(smoke_config(), dir.path()).unwrap();
        assert_eq!(stage_phantom(&ctx).unwrap(), StageOutcome::Ran);
        assert_eq!(stage_phantom(&ctx).unwrap(), StageOutcome::Skipped);

        let mut cfg = smoke_config();
        cfg.seed = 12;
        let ctx2 = RunContext::new(cfg, dir.path()).unwrap();
        assert_eq!(stage_phantom(&ctx2).unwrap(), StageOutcome::Ran);
    }

    #[test]
    fn stages_demand_their_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let ctx = RunContext::new(smoke_config(), dir.path()).unwrap();
        let err = stage_preprocess(&ctx).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let err = stage_train_cnn(&ctx).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let err = stage_select_ensemble(&ctx).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn unknown_stage_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let ctx = RunContext::new(RunConfig::default(), dir.path()).unwrap();
        let err = run_stage(&ctx, "trian-cnn").unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn error_classification_maps_to_exit_codes() {
        assert_eq!(PipelineError::from(RunConfigError::Invalid("x".into())).exit_code(), 1);
        assert_eq!(
            PipelineError::from(MetricsError::NonFiniteScore(0)).exit_code(),
            3
        );
        assert_eq!(PipelineError::from(MetricsError::SingleClassLabels).exit_code(), 2);
        assert_eq!(
            PipelineError::from(GbmError::InvalidConfig("x".into())).exit_code(),
            1
        );
        assert_eq!(
            PipelineError::from(XmasNetError::NonFiniteGradient("x".into())).exit_code(),
            3
        );
    }
}
