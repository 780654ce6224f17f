use ovseg::cluster::{cluster_features, partition_agreement, write_label_png};
use ovseg::dataio::{read_panoptic, PanopticMap, Vocabulary};
use ovseg::decoder::DecoderConfig;
use ovseg::fixtures::{init_weights, synth_bundle, FeatureBundle, ModelWeights, BACKBONE_STRIDE};
use ovseg::gradcheck::{run_gradcheck, GradcheckConfig};
use ovseg::inference::semantic_project;
use ovseg::ldp::{LdpConfig, Pooling};
use ovseg::losses::{Gammas, IouLossKind, LossConfig};
use ovseg::matching::CostWeights;
use ovseg::metrics::{pq_accumulate, pq_report, MiouReport, PqAccumulator, PqReport, SemanticAccumulator};
use ovseg::pipeline::{run_image, vocabulary_overlap, EnsembleMode, PipelineConfig};
use ovseg::pyramid::FpnConfig;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::{create_dir, panoptic_paths, synonyms, write_json, write_map, write_text, Dataset};
use crate::error::CliError;

/// Runs `f` over `items` on a pool of `jobs` threads, results in input order.
fn par_map<T: Sync, R: Send>(
    jobs: usize,
    items: &[T],
    f: impl Fn(usize, &T) -> Result<R, CliError> + Sync + Send,
) -> Result<Vec<R>, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Config(format!("--jobs: {e}")))?;
    pool.install(|| items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect::<Vec<_>>())
        .into_iter()
        .collect()
}

/// Seed of the `index`-th item derived from the run seed.
pub fn item_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(index as u64)
}

pub fn pipeline_config(cfg: &RunConfig, weights: &ModelWeights) -> PipelineConfig {
    let m = &cfg.model;
    let ensemble = if cfg.flags.geometric_baseline {
        EnsembleMode::Geometric
    } else if let Some(v) = cfg.flags.force_se_conf {
        EnsembleMode::ForcedSeConf(v)
    } else {
        EnsembleMode::Mase
    };
    PipelineConfig {
        fpn: FpnConfig {
            activations: m.fpn_activations,
        },
        decoder: DecoderConfig {
            layers: m.layers.unwrap_or(weights.decoder.layers.len()),
            positional_encoding: m.positional_encoding,
            mask_threshold: m.mask_threshold,
        },
        ldp: LdpConfig {
            pooling: if cfg.flags.hard_pooling {
                Pooling::Hard {
                    threshold: m.hard_pool_threshold,
                }
            } else {
                Pooling::Soft
            },
            min_area: m.min_mask_area,
            ..LdpConfig::default()
        },
        alpha: m.alpha,
        beta: m.beta,
        tau: m.tau,
        tau_clip: m.tau_clip,
        ensemble,
        fusion: cfg.fusion,
    }
}

fn load_weights(cfg: &RunConfig) -> Result<ModelWeights, CliError> {
    let weights = match &cfg.paths.weights {
        Some(dir) => ModelWeights::load(dir)?,
        None => init_weights(cfg.seed, &cfg.arch)?,
    };
    Ok(weights)
}

pub fn infer(cfg: &RunConfig, jobs: usize) -> Result<(), CliError> {
    let data = Dataset::new(&cfg.paths.data);
    let images = data.images()?;
    let weights = load_weights(cfg)?;
    let pcfg = pipeline_config(cfg, &weights);
    let syn = synonyms(cfg.paths.synonyms.as_deref())?;
    let pred_dir = cfg.pred_dir();
    let debug_dir = cfg.paths.out.join("debug");
    create_dir(&pred_dir)?;
    create_dir(&debug_dir)?;
    par_map(jobs, &images, |_, image| {
        let bundle = FeatureBundle::load(&data.bundle_dir(image))?;
        let overlap = vocabulary_overlap(&bundle.vocabulary, &syn);
        let result = run_image(&bundle, &weights, &overlap, &pcfg)?;
        write_map(&pred_dir, image, &result.panoptic)?;
        write_json(&debug_dir.join(format!("{image}.json")), &result.debug)
    })?;
    println!("wrote {} predictions to {}", images.len(), pred_dir.display());
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: usize,
    pub panoptic: PqReport,
    pub semantic: MiouReport,
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        format!(
            "images: {}\n{}mIoU: {:.4}\n",
            self.images,
            self.panoptic.to_table(),
            self.semantic.miou
        )
    }
}

fn score_image(
    pred: &PanopticMap,
    gt: &PanopticMap,
    vocab: &Vocabulary,
    is_seen: &[bool],
) -> Result<(PqAccumulator, SemanticAccumulator), CliError> {
    pred.validate(vocab)?;
    gt.validate(vocab)?;
    let mut pq = PqAccumulator::new(vocab, is_seen.to_vec())?;
    pq_accumulate(&mut pq, pred, gt, vocab)?;
    let mut sem = SemanticAccumulator::new(vocab.len());
    sem.add(&semantic_project(pred, vocab)?, &semantic_project(gt, vocab)?)?;
    Ok((pq, sem))
}

pub fn evaluate(cfg: &RunConfig, jobs: usize) -> Result<EvalReport, CliError> {
    let data = Dataset::new(&cfg.paths.data);
    let images = data.images()?;
    let vocab = data.vocabulary()?;
    let is_seen = vocabulary_overlap(&vocab, &synonyms(cfg.paths.synonyms.as_deref())?);
    let pred_dir = cfg.pred_dir();
    let parts = par_map(jobs, &images, |_, image| {
        let (png, json) = panoptic_paths(&pred_dir, image);
        let pred = read_panoptic(&png, &json)?;
        score_image(&pred, &data.read_gt(image)?, &vocab, &is_seen)
    })?;
    let mut pq = PqAccumulator::new(&vocab, is_seen.clone())?;
    let mut sem = SemanticAccumulator::new(vocab.len());
    for (p, s) in &parts {
        pq.merge(p)?;
        sem.merge(s)?;
    }
    let report = EvalReport {
        images: images.len(),
        panoptic: pq_report(&pq, &vocab),
        semantic: sem.report(),
    };
    create_dir(&cfg.paths.out)?;
    write_json(&cfg.paths.out.join("report.json"), &report)?;
    let table = report.to_table();
    write_text(&cfg.paths.out.join("report.txt"), &table)?;
    print!("{table}");
    Ok(report)
}

pub fn gradcheck(cfg: &RunConfig) -> Result<(), CliError> {
    let l = &cfg.loss;
    let gcfg = GradcheckConfig {
        seed: cfg.seed,
        cases: cfg.gradcheck.cases,
        step: cfg.gradcheck.step,
        tolerance: cfg.gradcheck.tolerance,
        loss: LossConfig {
            gammas: Gammas {
                a: l.gamma_a,
                b: l.gamma_b,
                c: l.gamma_c,
            },
            iou_kind: if cfg.flags.literal_eq2 {
                IouLossKind::LiteralMse
            } else {
                IouLossKind::Regression
            },
            dice_in_mask_loss: cfg.flags.dice_in_loss,
            matching: CostWeights {
                class: l.lambda_cls,
                bce: l.lambda_bce,
                dice: l.lambda_dice,
            },
        },
    };
    let report = run_gradcheck(&gcfg)?;
    create_dir(&cfg.paths.out)?;
    write_json(&cfg.paths.out.join("gradcheck.json"), &report)?;
    print!("{}", report.to_table());
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::GradcheckFailed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterEntry {
    pub image: String,
    pub k: usize,
    /// Pixel agreement with the ground-truth segments, best label matching.
    pub sam_agreement: f64,
    pub clip_agreement: f64,
}

fn segment_labels(gt: &PanopticMap) -> Vec<usize> {
    let ids: Vec<u32> = gt.segments.iter().map(|s| s.id).collect();
    gt.segment_ids
        .iter()
        .map(|id| ids.iter().position(|s| s == id).map_or(ids.len(), |p| p))
        .collect()
}

pub fn cluster(cfg: &RunConfig, jobs: usize) -> Result<Vec<ClusterEntry>, CliError> {
    let data = Dataset::new(&cfg.paths.data);
    let images = data.images()?;
    let dir = cfg.paths.out.join("cluster");
    create_dir(&dir)?;
    let entries = par_map(jobs, &images, |i, image| {
        let bundle = FeatureBundle::load(&data.bundle_dir(image))?;
        let gt = data.read_gt(image)?;
        let k = cfg.cluster.k.unwrap_or(gt.segments.len().max(1));
        let (h, w) = (bundle.image_h, bundle.image_w);
        let truth = segment_labels(&gt);
        let seed = item_seed(cfg.seed, i);
        let sam = cluster_features(&bundle.f_sam, k, seed, cfg.cluster.max_iters)?.upsample(h, w, BACKBONE_STRIDE);
        let clip_map = cluster_features(&bundle.f_clip, k, seed, cfg.cluster.max_iters)?;
        let clip_stride = h.div_ceil(clip_map.height);
        let clip = clip_map.upsample(h, w, clip_stride);
        write_label_png(&sam, h, w, &dir.join(format!("{image}_sam.png")))?;
        write_label_png(&clip, h, w, &dir.join(format!("{image}_clip.png")))?;
        Ok(ClusterEntry {
            image: image.clone(),
            k,
            sam_agreement: partition_agreement(&sam, &truth)?,
            clip_agreement: partition_agreement(&clip, &truth)?,
        })
    })?;
    write_json(&dir.join("report.json"), &entries)?;
    for e in &entries {
        println!(
            "{}: k={} sam agreement {:.4}, clip agreement {:.4}",
            e.image, e.k, e.sam_agreement, e.clip_agreement
        );
    }
    Ok(entries)
}

pub fn synth(cfg: &RunConfig, jobs: usize) -> Result<(), CliError> {
    let out = &cfg.paths.out;
    let data = Dataset::new(out);
    let spec = &cfg.synth.spec;
    let names: Vec<String> = (0..cfg.synth.images).map(|i| format!("img_{i:04}")).collect();
    create_dir(&out.join("gt"))?;
    let vocabs = par_map(jobs, &names, |i, image| {
        let (bundle, gt) = synth_bundle(item_seed(cfg.seed, i), spec)?;
        bundle.save(&data.bundle_dir(image))?;
        let pan = gt.to_panoptic(&bundle.vocabulary)?;
        write_map(&out.join("gt"), image, &pan)?;
        Ok(bundle.vocabulary)
    })?;
    let vocab = &vocabs[0];
    vocab.write_json(&data.vocabulary_path())?;
    let seen = vocab.seen_names().map(<[String]>::to_vec).unwrap_or_default();
    write_json(&data.train_names_path(), &seen)?;
    println!("wrote {} synthetic images to {}", names.len(), out.display());
    Ok(())
}
