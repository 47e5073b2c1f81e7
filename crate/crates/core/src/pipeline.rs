//! End-to-end run: correspondence warp, per-layer inversion, selection, and
//! a single-owner write phase.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::RunConfig;
use crate::correspondence::{centralize, correlation_matrix, warp_patches, WarpConfig};
use crate::error::{Error, Result};
use crate::features::{extract_features, ExtractorWeights};
use crate::generator::{build_generator, GeneratorArchitecture, GeneratorSpec};
use crate::image::Image;
use crate::inversion::{downsample, invert, HypothesisConfig, InversionHypothesis, InversionSettings};
use crate::io::{load_image, save_image};
use crate::numerics::{derive_seed, AdamConfig};
use crate::report::{
    build_report, hypothesis_file, to_canonical_string, HypothesisEntry, ReportInput, FINAL_FILE, REPORT_FILE,
    WARPED_FILE,
};
use crate::selection::{reference_from_generator, reference_from_images, select_best, CropSampler, FidStats, SelectionReport};

const TARGET_EXTRACTOR_TAG: u64 = 0x5447_5445_5854; // "TGTEXT"
const HYPOTHESIS_TAG: u64 = 0x4859_504f; // "HYPO"
const CROP_TAG: u64 = 0x4352_4f50; // "CROP"
const REFERENCE_SEED_TAG: u64 = 0x5245_4653; // "REFS"

/// Frozen networks of a run, all derived from config seeds.
#[derive(Clone, Debug)]
pub struct Models {
    pub source_extractor: ExtractorWeights,
    /// Also used for the perceptual distance and FID embeddings.
    pub target_extractor: ExtractorWeights,
    pub generator: GeneratorSpec,
}

impl Models {
    pub fn build(cfg: &RunConfig) -> Result<Self> {
        let source_extractor = ExtractorWeights::new(cfg.extractor_seed, &cfg.extractor_widths)?;
        let target_extractor = if cfg.separate_extractors {
            ExtractorWeights::new(derive_seed(cfg.extractor_seed, TARGET_EXTRACTOR_TAG), &cfg.extractor_widths)?
        } else {
            source_extractor.clone()
        };
        let generator = build_generator(
            cfg.generator_seed,
            &GeneratorArchitecture {
                latent_dim: cfg.latent_dim,
                layer_count: cfg.generator_layers,
                base_resolution: cfg.base_resolution,
                channels: None,
            },
        )?;
        Ok(Self {
            source_extractor,
            target_extractor,
            generator,
        })
    }
}

/// RGB copy of `image` box-pooled to `size x size`.
pub fn fit_to_guide(image: &Image, size: usize) -> Result<Image> {
    let rgb = image.to_rgb();
    let (h, w) = (rgb.height(), rgb.width());
    if h != w || size == 0 || h % size != 0 {
        return Err(Error::Indivisible {
            op: "fit_to_guide",
            height: h,
            width: w,
            divisor: size,
        });
    }
    if h == size {
        Ok(rgb)
    } else {
        downsample(&rgb, h / size)
    }
}

/// Target rearranged to the source layout at guide resolution.
pub fn warped_guide(cfg: &RunConfig, models: &Models, source: &Image, target: &Image) -> Result<Image> {
    let size = cfg.guide_resolution();
    let (source, target) = (fit_to_guide(source, size)?, fit_to_guide(target, size)?);
    let fs = centralize(&extract_features(&source, &models.source_extractor)?)?;
    let ft = centralize(&extract_features(&target, &models.target_extractor)?)?;
    let m = correlation_matrix(&fs, &ft, cfg.warp_epsilon)?;
    warp_patches(
        &m,
        &target,
        &WarpConfig {
            temperature: cfg.warp_temperature,
            epsilon_norm: cfg.warp_epsilon,
        },
    )
}

pub fn crop_sampler(cfg: &RunConfig) -> CropSampler {
    CropSampler {
        count: cfg.fid_crops,
        seed: derive_seed(cfg.master_seed, CROP_TAG),
        embed_size: cfg.fid_embed_size,
    }
}

pub fn hypothesis_config(cfg: &RunConfig, layer: usize) -> HypothesisConfig {
    HypothesisConfig {
        composing_layer: layer,
        code_count: cfg.code_count,
        seed: derive_seed(derive_seed(cfg.master_seed, HYPOTHESIS_TAG), layer as u64),
        steps: cfg.steps,
        distance: cfg.distance,
    }
}

fn reference_images(dir: &Path) -> Result<Vec<Image>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm" || x == "pgm"))
        .collect();
    paths.sort();
    paths.iter().map(load_image).collect()
}

/// Reference statistics and their description.
pub fn reference_stats(cfg: &RunConfig, models: &Models, sampler: &CropSampler) -> Result<(FidStats, String)> {
    match &cfg.reference_dir {
        Some(dir) => {
            let images = reference_images(dir)?;
            let stats = reference_from_images(&images, cfg.reference_samples, sampler, &models.target_extractor)?;
            let desc = format!(
                "{} crops cycled over {} images in {}, one crop per draw",
                cfg.reference_samples,
                images.len(),
                dir.display()
            );
            Ok((stats, desc))
        }
        None => {
            let seed = derive_seed(cfg.master_seed, REFERENCE_SEED_TAG);
            let stats = reference_from_generator(&models.generator, cfg.reference_samples, seed, sampler, &models.target_extractor)?;
            let desc = format!(
                "{} seeded samples of the frozen generator (seed {seed}), one crop per sample",
                cfg.reference_samples
            );
            Ok((stats, desc))
        }
    }
}

/// Everything a run produced so far; enough to write a partial report.
#[derive(Clone, Debug, Default)]
pub struct RunState {
    pub warped: Option<Image>,
    /// One slot per configured layer, in config order.
    pub hypotheses: Vec<Option<std::result::Result<InversionHypothesis, String>>>,
    pub selection: Option<SelectionReport>,
    pub reference_description: Option<String>,
}

/// Runs every stage on in-memory inputs, recording progress into `state`.
pub fn execute(cfg: &RunConfig, source: &Image, target: &Image, state: &mut RunState) -> Result<()> {
    cfg.validate()?;
    state.hypotheses = vec![None; cfg.layers.len()];
    let models = Models::build(cfg)?;
    let guide = warped_guide(cfg, &models, source, target)?;
    state.warped = Some(guide.clone());

    let extractor = cfg.distance.needs_extractor().then_some(&models.target_extractor);
    let settings = InversionSettings {
        factor: cfg.factor,
        adam: AdamConfig {
            lr: cfg.learning_rate,
            ..AdamConfig::default()
        },
        perceptual_weight: cfg.perceptual_weight,
        extractor,
    };
    let results: Vec<Result<InversionHypothesis>> = cfg
        .layers
        .par_iter()
        .map(|&n| invert(&models.generator, &hypothesis_config(cfg, n), &guide, &settings))
        .collect();
    let mut first_error = None;
    for (slot, r) in state.hypotheses.iter_mut().zip(results) {
        *slot = Some(r.map_err(|e| {
            let msg = e.to_string();
            first_error.get_or_insert(e);
            msg
        }));
    }
    if let Some(e) = first_error {
        return Err(e);
    }

    let sampler = crop_sampler(cfg);
    let (reference, desc) = reference_stats(cfg, &models, &sampler)?;
    state.reference_description = Some(desc.clone());
    let hypotheses: Vec<InversionHypothesis> = state
        .hypotheses
        .iter()
        .map(|h| h.clone().expect("filled").expect("no failures"))
        .collect();
    let selection = select_best(hypotheses, &reference, &models.target_extractor, &sampler, desc)?;
    for (slot, h) in state.hypotheses.iter_mut().zip(&selection.hypotheses) {
        *slot = Some(Ok(h.clone()));
    }
    state.selection = Some(selection);
    Ok(())
}

/// The JSON report for `state`, partial when `error` is set.
pub fn report_for(cfg: &RunConfig, state: &RunState, error: Option<&Error>) -> Result<serde_json::Value> {
    let hypotheses = cfg
        .layers
        .iter()
        .enumerate()
        .map(|(i, &layer)| {
            let mut entry = HypothesisEntry {
                layer,
                code_count: cfg.code_count,
                initial_loss: None,
                final_loss: None,
                k_n: None,
                error: Some("not run".into()),
            };
            match state.hypotheses.get(i).and_then(Option::as_ref) {
                Some(Ok(h)) => {
                    entry.initial_loss = Some(h.initial_loss);
                    entry.final_loss = Some(h.final_loss);
                    entry.k_n = h.fid_score;
                    entry.error = None;
                }
                Some(Err(e)) => entry.error = Some(e.clone()),
                None => {}
            }
            entry
        })
        .collect();
    build_report(&ReportInput {
        config: cfg,
        hypotheses,
        chosen_index: state.selection.as_ref().map(|s| s.chosen_index),
        reference_description: state.reference_description.clone(),
        crop_procedure: crop_sampler(cfg).describe(),
        warped_written: state.warped.is_some(),
        error: error.map(|e| e.to_string()),
    })
}

/// Writes every produced image and the report into `dir`.
pub fn write_outputs(dir: &Path, cfg: &RunConfig, state: &RunState, error: Option<&Error>) -> Result<serde_json::Value> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if let Some(w) = &state.warped {
        save_image(w, dir.join(WARPED_FILE))?;
    }
    for h in state.hypotheses.iter().flatten().flatten() {
        save_image(&h.output, dir.join(hypothesis_file(h.config.composing_layer)))?;
    }
    if let Some(s) = &state.selection {
        save_image(&s.final_image, dir.join(FINAL_FILE))?;
    }
    let report = report_for(cfg, state, error)?;
    let path = dir.join(REPORT_FILE);
    std::fs::write(&path, to_canonical_string(&report)?).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

/// Result of a successful run.
#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub warped: Image,
    pub selection: SelectionReport,
    pub report: serde_json::Value,
}

impl PipelineOutput {
    pub fn chosen(&self) -> &InversionHypothesis {
        &self.selection.hypotheses[self.selection.chosen_index]
    }
}

fn finish(state: RunState, report: serde_json::Value) -> PipelineOutput {
    PipelineOutput {
        warped: state.warped.expect("complete run"),
        selection: state.selection.expect("complete run"),
        report,
    }
}

/// Runs on in-memory images without touching the filesystem.
pub fn run_in_memory(cfg: &RunConfig, source: &Image, target: &Image) -> Result<PipelineOutput> {
    let mut state = RunState::default();
    execute(cfg, source, target, &mut state)?;
    let report = report_for(cfg, &state, None)?;
    Ok(finish(state, report))
}

/// Loads the configured inputs, runs, and writes outputs to
/// `cfg.output_dir`. On failure the outputs produced so far are written
/// with a partial report before the error is returned.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineOutput> {
    let mut state = RunState::default();
    let outcome = (|| {
        let source_path = cfg
            .source_path
            .as_ref()
            .ok_or_else(|| Error::Config("source_path is required".into()))?;
        let target_path = cfg
            .target_path
            .as_ref()
            .ok_or_else(|| Error::Config("target_path is required".into()))?;
        let source = load_image(source_path)?;
        let target = load_image(target_path)?;
        execute(cfg, &source, &target, &mut state)
    })();
    match outcome {
        Ok(()) => {
            let report = write_outputs(&cfg.output_dir, cfg, &state, None)?;
            Ok(finish(state, report))
        }
        Err(e) => {
            // The original error matters more than a failure to record it.
            let _ = write_outputs(&cfg.output_dir, cfg, &state, Some(&e));
            Err(e)
        }
    }
}
