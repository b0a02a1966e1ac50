//! End-to-end localization: multi-scale CAM, coarse mask, prompts and
//! refinement, plus the train / evaluate drivers behind the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cam::{cams_from_outputs, aggregate_maps, write_camf, CamClass, CamMap};
use crate::cgsr::{binarize_coarse_mask, generate_prompts, refine, PromptMode, PromptSet, Refiner};
use crate::config::RunConfig;
use crate::data::{load_eval, load_training, synth_forgery_generate, DatasetLayout, ManipSample};
use crate::error::{Error, Result};
use crate::eval::{image_auc, pixel_f1, AblationRow, AblationTable, DatasetScores};
use crate::imgproc::{write_mask, BinaryMask, EdgeOperator, Image};
use crate::model::{accuracy, batch_tensor, train_epoch, EpochStats, Example, Model, ModelConfig, TrainOptions};
use crate::tensor::optim::{AdamWConfig, OptimState};

/// Inference settings bound to a trained model.
pub struct Localizer<'a> {
    pub model: &'a Model<f32>,
    pub scales: Vec<usize>,
    pub rho: f64,
    pub mode: PromptMode,
    pub refiner: Refiner,
}

/// Mode-independent part of a localization.
#[derive(Clone, Debug)]
pub struct Analysis {
    pub score: f64,
    pub cam: CamMap,
}

#[derive(Clone, Debug)]
pub struct Localization {
    pub score: f64,
    pub cam: CamMap,
    pub coarse: BinaryMask,
    pub prompts: PromptSet,
    pub mask: BinaryMask,
    pub refine_error: Option<String>,
}

impl<'a> Localizer<'a> {
    pub fn from_config(model: &'a Model<f32>, cfg: &RunConfig) -> Result<Self> {
        Ok(Self {
            model,
            scales: cfg.scales.clone(),
            rho: cfg.rho,
            mode: cfg.prompt_mode,
            refiner: cfg.build_refiner()?,
        })
    }

    /// Image score at the model's native size and the manipulated-class CAM
    /// aggregated over all scales at image resolution.
    pub fn analyze(&self, img: &Image) -> Result<Analysis> {
        if self.scales.is_empty() {
            return Err(Error::InvalidArgument("scale list is empty".into()));
        }
        let native = self.model.config.input_size;
        let mut score = None;
        let mut maps = Vec::with_capacity(self.scales.len());
        for &s in &self.scales {
            self.model.config.check_input(s)?;
            let (tape, out) = self.model.run(batch_tensor(&[img], s)?)?;
            if s == native {
                let sc = crate::model::image_scores(tape.value(out.conv_logits), tape.value(out.trans_logits));
                score = Some(sc[0]);
            }
            maps.push(cams_from_outputs(self.model, &tape, &out, 0, CamClass::Manipulated)?.fused);
        }
        let score = match score {
            Some(s) => s,
            None => self.model.predict(batch_tensor(&[img], native)?)?[0],
        };
        let cam = aggregate_maps(&maps, img.width(), img.height())?;
        Ok(Analysis { score, cam })
    }

    pub fn finish(&self, img: &Image, a: &Analysis, mode: PromptMode) -> Result<Localization> {
        let coarse = binarize_coarse_mask(&a.cam, self.rho, img.width(), img.height())?;
        let prompts = generate_prompts(&a.cam, &coarse, mode)?;
        let out = refine(img, &prompts, &coarse, &self.refiner)?;
        Ok(Localization {
            score: a.score,
            cam: a.cam.clone(),
            coarse,
            prompts,
            mask: out.mask,
            refine_error: out.error,
        })
    }

    pub fn localize(&self, img: &Image) -> Result<Localization> {
        let a = self.analyze(img)?;
        self.finish(img, &a, self.mode)
    }
}

fn gt_mask(s: &ManipSample) -> BinaryMask {
    s.mask
        .clone()
        .unwrap_or_else(|| BinaryMask::empty(s.image.width(), s.image.height()))
}

/// Per-image scores and localizations of a whole split.
pub struct SplitResults {
    pub scores: Vec<f64>,
    pub localizations: Vec<Localization>,
}

pub fn localize_split(loc: &Localizer, samples: &[ManipSample]) -> Result<SplitResults> {
    let mut scores = Vec::with_capacity(samples.len());
    let mut localizations = Vec::with_capacity(samples.len());
    for s in samples {
        let l = loc.localize(&s.image)?;
        scores.push(l.score);
        localizations.push(l);
    }
    Ok(SplitResults { scores, localizations })
}

/// Mean per-image F1 over the manipulated samples.
pub fn manipulated_p_f1(samples: &[ManipSample], masks: &[BinaryMask]) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (s, m) in samples.iter().zip(masks) {
        if s.label {
            sum += pixel_f1(m, &gt_mask(s))?;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Dataset("no manipulated images to localize".into()));
    }
    Ok(sum / n as f64)
}

pub fn score_split(name: &str, samples: &[ManipSample], results: &SplitResults) -> Result<DatasetScores> {
    let labels: Vec<bool> = samples.iter().map(|s| s.label).collect();
    let both = labels.iter().any(|&l| l) && labels.iter().any(|&l| !l);
    let i_auc = if both { Some(image_auc(&results.scores, &labels)?) } else { None };
    let masks: Vec<BinaryMask> = results.localizations.iter().map(|l| l.mask.clone()).collect();
    let correct = results.scores.iter().zip(&labels).filter(|(s, l)| (**s >= 0.5) == **l).count();
    Ok(DatasetScores {
        name: name.to_string(),
        images: samples.len(),
        i_auc,
        p_f1: manipulated_p_f1(samples, &masks)?,
        accuracy: correct as f64 / samples.len().max(1) as f64,
    })
}

/// P-F1 of each prompt mode on the manipulated samples, sharing one CAM
/// pass per image.
pub fn ablate_prompt_modes(loc: &Localizer, samples: &[ManipSample]) -> Result<AblationTable> {
    let manip: Vec<&ManipSample> = samples.iter().filter(|s| s.label).collect();
    if manip.is_empty() {
        return Err(Error::Dataset("no manipulated images to localize".into()));
    }
    let analyses = manip.iter().map(|s| loc.analyze(&s.image)).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for mode in PromptMode::ALL {
        let mut sum = 0.0;
        for (s, a) in manip.iter().zip(&analyses) {
            let l = loc.finish(&s.image, a, mode)?;
            sum += pixel_f1(&l.mask, &gt_mask(s))?;
        }
        rows.push(AblationRow {
            setting: mode.label().to_string(),
            p_f1: sum / manip.len() as f64,
            i_auc: None,
        });
    }
    Ok(AblationTable {
        name: "prompt".into(),
        rows,
    })
}

/// Model variants compared by a training ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainingAblation {
    /// With and without the edge path.
    Cabl,
    /// Edge path on the first third, two thirds and all of the blocks.
    Depth,
    /// Sobel against Prewitt.
    Operator,
}

impl TrainingAblation {
    pub fn name(self) -> &'static str {
        match self {
            TrainingAblation::Cabl => "cabl",
            TrainingAblation::Depth => "depth",
            TrainingAblation::Operator => "operator",
        }
    }

    /// Labelled model configurations derived from `base`.
    pub fn variants(self, base: &ModelConfig) -> Vec<(String, ModelConfig)> {
        let with = |f: &dyn Fn(&mut ModelConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            TrainingAblation::Cabl => vec![
                ("without CABL".into(), with(&|c| c.cabl_depth = 0)),
                ("with CABL".into(), base.clone()),
            ],
            TrainingAblation::Depth => {
                let l = base.num_blocks;
                let mut depths = vec![(l / 3).max(1), (2 * l / 3).max(1), l];
                depths.dedup();
                depths
                    .into_iter()
                    .map(|k| (format!("blocks 1-{k}"), with(&|c| c.cabl_depth = k)))
                    .collect()
            }
            TrainingAblation::Operator => [EdgeOperator::Sobel, EdgeOperator::Prewitt]
                .into_iter()
                .map(|op| (format!("{op:?}"), with(&|c| c.edge_operator = op)))
                .collect(),
        }
    }
}

impl std::str::FromStr for TrainingAblation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cabl" => Ok(TrainingAblation::Cabl),
            "depth" => Ok(TrainingAblation::Depth),
            "operator" => Ok(TrainingAblation::Operator),
            _ => Err(Error::InvalidArgument(format!("unknown ablation {s:?}"))),
        }
    }
}

/// Trains one model per variant and scores each on `val`.
pub fn ablate_training(
    cfg: &RunConfig,
    kind: TrainingAblation,
    train: &[Example],
    val: &[ManipSample],
    mut on_epoch: impl FnMut(&str, &EpochLog),
) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for (setting, model_cfg) in kind.variants(&cfg.model_config()) {
        let (model, _) = train_model(cfg, model_cfg, train, |e| on_epoch(&setting, e))?;
        let loc = Localizer::from_config(&model, cfg)?;
        let scores = score_split(&setting, val, &localize_split(&loc, val)?)?;
        rows.push(AblationRow {
            setting,
            p_f1: scores.p_f1,
            i_auc: scores.i_auc,
        });
    }
    Ok(AblationTable {
        name: kind.name().into(),
        rows,
    })
}

/// Loss and accuracy of every epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub accuracy: f64,
}

impl TrainLog {
    /// Number of epochs whose mean loss exceeds the previous epoch's.
    pub fn loss_increases(&self) -> usize {
        self.epochs.windows(2).filter(|w| w[1].mean_loss > w[0].mean_loss).count()
    }
}

/// Trains a fresh model from image-level labels only.
pub fn train_model(cfg: &RunConfig, model_cfg: ModelConfig, data: &[Example], mut on_epoch: impl FnMut(&EpochLog)) -> Result<(Model<f32>, TrainLog)> {
    let mut model = Model::<f32>::new(model_cfg, cfg.seed)?;
    let mut opt = OptimState::new(
        &model.params,
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.wd,
            ..AdamWConfig::default()
        },
    );
    let opts = TrainOptions {
        batch_size: cfg.batch,
        rescale: Some(cfg.rescale),
    };
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        opt.config.lr = cfg.lr_schedule.rate(cfg.lr, epoch, cfg.epochs);
        let EpochStats { mean_loss, accuracy } =
            train_epoch(&mut model, data, &mut opt, cfg.seed.wrapping_mul(1_000_003).wrapping_add(epoch as u64), &opts)?;
        let e = EpochLog {
            epoch,
            lr: opt.config.lr,
            mean_loss,
            accuracy,
        };
        on_epoch(&e);
        log.epochs.push(e);
    }
    Ok((model, log))
}

/// Image accuracy of `model` on `data` with the fused score.
pub fn corpus_accuracy(model: &Model<f32>, data: &[Example]) -> Result<f64> {
    accuracy(model, data)
}

/// `root/train` when present, else `root`.
pub fn train_layout(root: &Path) -> DatasetLayout {
    split_layout(root, "train")
}

/// `root/val` when present, else `root`.
pub fn val_layout(root: &Path) -> DatasetLayout {
    split_layout(root, "val")
}

fn split_layout(root: &Path, split: &str) -> DatasetLayout {
    let sub = root.join(split);
    DatasetLayout::new(if sub.is_dir() { sub } else { root.to_path_buf() })
}

/// Writes `root/train` and `root/val` synthetic splits.
pub fn synth_splits(cfg: &RunConfig, root: &Path) -> Result<(DatasetLayout, DatasetLayout)> {
    let train = synth_forgery_generate(root.join("train"), cfg.synth_train, cfg.synth_size, cfg.seed)?;
    let val = synth_forgery_generate(root.join("val"), cfg.synth_val, cfg.synth_size, cfg.seed.wrapping_add(7919))?;
    Ok((train, val))
}

pub fn load_train_split(root: &Path) -> Result<Vec<Example>> {
    load_training(&train_layout(root))
}

pub fn load_val_split(root: &Path) -> Result<Vec<ManipSample>> {
    load_eval(&val_layout(root))
}

fn stem(name: &str) -> String {
    Path::new(name)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| name.to_string())
}

/// Writes `cam/<name>.camf` (+ sidecar) and `masks/<name>.png` for each
/// localization. Returns the written mask paths.
pub fn write_localizations(out: &Path, names: &[String], locs: &[Localization], scales: &[usize]) -> Result<Vec<PathBuf>> {
    let cam_dir = out.join("cam");
    let mask_dir = out.join("masks");
    for d in [&cam_dir, &mask_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut written = Vec::with_capacity(names.len());
    for (name, l) in names.iter().zip(locs) {
        let s = stem(name);
        write_camf(&cam_dir.join(format!("{s}.camf")), &l.cam, scales)?;
        let p = mask_dir.join(format!("{s}.png"));
        write_mask(&p, &l.mask)?;
        written.push(p);
    }
    Ok(written)
}
