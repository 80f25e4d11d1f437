use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use noisyleaf::augment::{apply_train_pipeline_traced, image_rng, Image};
use noisyleaf::dataset::{LabeledSet, UnlabeledSet};
use noisyleaf::ensemble::{ensemble_predict, Ensemble};
use noisyleaf::io::data::{load_image, load_unlabeled, write_labeled_set};
use noisyleaf::io::{load_checkpoint, load_dataset, save_checkpoint, write_predictions_csv, Checkpoint, DatasetManifest, RngState, RunConfig, RunReport};
use noisyleaf::metrics::{MetricsReport, PredictionMatrix};
use noisyleaf::nn::{build_model, init_rng, Model};
use noisyleaf::optim::{self, train_supervised, Preprocessing};
use noisyleaf::scaling::{apply_scaling, constraint_value, flops_estimate, grid_search_coefficients, scale_model_spec};
use noisyleaf::selftrain::noisy_student_loop;
use noisyleaf::synthetic::{generate, render};
use noisyleaf::Error;

use crate::Common;

pub enum CliError {
    Usage(String),
    Run(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn load_config(common: &Common) -> CliResult<RunConfig> {
    let cfg = match &common.config {
        None => RunConfig::default(),
        Some(path) if !path.is_file() => {
            return Err(CliError::Usage(format!("--config {}: no such file", path.display())));
        }
        Some(path) => RunConfig::load(path).map_err(|e| CliError::Usage(format!("--config {}: {e}", path.display())))?,
    };
    Ok(match common.seed {
        Some(seed) => cfg.with_seed(seed),
        None => cfg,
    })
}

fn out_dir(common: &Common) -> CliResult<&Path> {
    let dir = common.out.as_path();
    fs::create_dir_all(dir).map_err(|e| CliError::Run(Error::Io {
        path: dir.to_owned(),
        source: e,
    }))?;
    Ok(dir)
}

struct Data {
    train: LabeledSet,
    val: LabeledSet,
    unlabeled: Option<UnlabeledSet>,
}

fn load_data(cfg: &RunConfig) -> CliResult<Data> {
    match &cfg.data.manifest {
        Some(m) => {
            let d = load_dataset(m)?;
            Ok(Data {
                train: d.train,
                val: d.val,
                unlabeled: d.unlabeled,
            })
        }
        None => {
            let all = generate(&cfg.data.synthetic)?;
            let (train, val) = all.stratified_split(cfg.data.train_fraction, cfg.data.synthetic.seed)?;
            Ok(Data {
                train,
                val,
                unlabeled: None,
            })
        }
    }
}

fn write_report(report: &RunReport, dir: &Path) -> CliResult<()> {
    let (txt, _) = report.write(dir, "report")?;
    log::info!("report written to {}", txt.display());
    Ok(())
}

fn new_model(cfg: &RunConfig) -> CliResult<(Model, RngState)> {
    let mut rng = init_rng(cfg.seed);
    let model = build_model(&cfg.model_spec()?, &mut rng)?;
    Ok((model, RngState::capture(&rng)))
}

pub fn train(common: &Common) -> CliResult<()> {
    let cfg = load_config(common)?;
    let dir = out_dir(common)?;
    let data = load_data(&cfg)?;
    let (model, rng) = new_model(&cfg)?;
    let train_cfg = cfg.train_config();
    let prep = Preprocessing::augmented(cfg.augment_config()?);
    let out = train_supervised(model, &data.train, Some(&data.val), &train_cfg, &prep)?;

    let ckpt_path = dir.join("model.ckpt");
    save_checkpoint(
        &ckpt_path,
        &Checkpoint {
            model: out.model.clone(),
            optimizer: Some(out.optimizer_state),
            train_config: Some(train_cfg),
            rng: Some(rng),
        },
    )?;
    let mut report = RunReport::new("train", &cfg);
    report.note("parameters", out.model.num_parameters());
    report.note("train_examples", data.train.len());
    report.note("val_examples", data.val.len());
    report.note("best_epoch", out.best_epoch);
    report.note("checkpoint", ckpt_path.display());
    report.metrics = Some(out.report);
    write_report(&report, dir)
}

pub fn selftrain(common: &Common) -> CliResult<()> {
    let cfg = load_config(common)?;
    let dir = out_dir(common)?;
    let data = load_data(&cfg)?;
    let (labeled, unlabeled) = match data.unlabeled {
        Some(u) => (data.train, u),
        None => {
            let keep = 1.0 - cfg.data.hide_label_fraction;
            let (labeled, hidden) = data.train.stratified_split(keep, cfg.seed)?;
            (labeled, hidden.to_unlabeled())
        }
    };
    let st = cfg.selftrain_config();
    let out = noisy_student_loop(
        &labeled,
        &unlabeled,
        Some(&data.val),
        &cfg.model_spec()?,
        &cfg.augment,
        &st,
    )?;
    let ckpt_path = dir.join("model.ckpt");
    save_checkpoint(&ckpt_path, &Checkpoint::from_model(out.model.clone()))?;

    let mut report = RunReport::new("selftrain", &cfg);
    report.note("labeled_examples", labeled.len());
    report.note("unlabeled_examples", unlabeled.len());
    report.note("pseudo_label_passes", out.pseudo_label_passes);
    report.note("checkpoint", ckpt_path.display());
    report.metrics = out.iterations.last().map(|r| r.metrics.clone());
    report.iterations = out.iterations;
    write_report(&report, dir)
}

fn evaluate_on(model: &Model, set: &LabeledSet, cfg: &RunConfig) -> CliResult<(PredictionMatrix, MetricsReport)> {
    let preds = optim::predict(model, set.images(), &cfg.augment)?;
    let metrics = MetricsReport::evaluate(&preds, set.labels())?;
    Ok((preds, metrics))
}

pub fn evaluate(common: &Common, checkpoint: &Path) -> CliResult<()> {
    let cfg = load_config(common)?;
    let dir = out_dir(common)?;
    let model = load_checkpoint(checkpoint)?.model;
    let data = load_data(&cfg)?;
    let (_, metrics) = evaluate_on(&model, &data.val, &cfg)?;
    let mut report = RunReport::new("evaluate", &cfg);
    report.note("checkpoint", checkpoint.display());
    report.note("val_examples", data.val.len());
    report.metrics = Some(metrics);
    write_report(&report, dir)
}

pub fn predict(
    common: &Common,
    checkpoint: &Path,
    ids: Option<&Path>,
    images: Option<&Path>,
) -> CliResult<()> {
    let cfg = load_config(common)?;
    let dir = out_dir(common)?;
    let model = load_checkpoint(checkpoint)?.model;
    let (names, imgs): (Vec<String>, Vec<Arc<Image>>) = match (ids, images) {
        (Some(ids), Some(images)) => {
            let set = load_unlabeled(ids, images)?;
            (set.ids().to_vec(), set.images().to_vec())
        }
        _ => {
            let data = load_data(&cfg)?;
            (data.val.ids().to_vec(), data.val.images().to_vec())
        }
    };
    let preds = optim::predict(&model, &imgs, &cfg.augment)?;
    let path = dir.join("predictions.csv");
    write_predictions_csv(&path, &names, &preds)?;
    log::info!("{} predictions written to {}", names.len(), path.display());
    Ok(())
}


pub fn ensemble(common: &Common, checkpoints: &[PathBuf], weights: Option<Vec<f64>>) -> CliResult<()> {
    let cfg = load_config(common)?;
    let dir = out_dir(common)?;
    let members: Vec<Model> = checkpoints
        .iter()
        .map(|p| load_checkpoint(p).map(|c| c.model))
        .collect::<Result<_, _>>()?;
    let mut e = Ensemble::new(members)?;
    if let Some(w) = weights {
        e = e.with_weights(w).map_err(|err| CliError::Usage(format!("--weights: {err}")))?;
    }
    let data = load_data(&cfg)?;
    let mut report = RunReport::new("ensemble", &cfg);
    for (path, m) in checkpoints.iter().zip(e.members()) {
        let (_, metrics) = evaluate_on(m, &data.val, &cfg)?;
        report.note(&format!("member {}", path.display()), format!("mean_auc {:.6}", metrics.mean_auc));
    }
    let preds = ensemble_predict(&e, data.val.images(), &cfg.augment)?;
    write_predictions_csv(&dir.join("predictions.csv"), data.val.ids(), &preds)?;
    report.metrics = Some(MetricsReport::evaluate(&preds, data.val.labels())?);
    write_report(&report, dir)
}

pub fn augment_preview(common: &Common, image: Option<&Path>, count: usize) -> CliResult<()> {
    let cfg = load_config(common)?;
    let dir = out_dir(common)?;
    let source = match image {
        Some(p) => load_image(p)?,
        None => render(2, &cfg.data.synthetic, &mut image_rng(cfg.seed, 0))?,
    };
    let aug = cfg.augment_config()?;
    let mut report = RunReport::new("augment-preview", &cfg);
    for i in 0..count {
        let (img, trace) = apply_train_pipeline_traced(&source, &aug, &mut image_rng(cfg.seed, i as u64))?;
        // Undo normalization so the PNG shows the augmented pixels.
        let pixels = img
            .pixels()
            .iter()
            .enumerate()
            .map(|(k, v)| v * aug.channel_std[k % 3] + aug.channel_mean[k % 3])
            .collect();
        let shown = Image::new(img.height(), img.width(), 3, pixels)?;
        let name = format!("preview_{i:03}.png");
        noisyleaf::io::data::save_image_png(&dir.join(&name), &shown)?;
        report.note(&name, format!("{trace:?}"));
    }
    write_report(&report, dir)
}

pub fn scale_search(common: &Common, top: usize) -> CliResult<()> {
    let cfg = load_config(common)?;
    let dir = out_dir(common)?;
    let s = &cfg.scaling;
    let base = cfg.model_spec()?;
    let found = grid_search_coefficients(s.grid_step, s.tolerance, None)?;
    let mut report = RunReport::new("scale-search", &cfg);
    report.note("candidates", found.len());
    report.note("base_parameters", base.parameter_count());
    for (rank, c) in found.iter().take(top).enumerate() {
        let dims = apply_scaling(c)?;
        let scaled = scale_model_spec(&base, &dims)?;
        report.note(
            &format!("rank {rank}"),
            format!(
                "alpha {:.4} beta {:.4} gamma {:.4} | constraint {:.6} | flops x{:.4} | params {} | resolution {}",
                c.alpha,
                c.beta,
                c.gamma,
                constraint_value(c),
                flops_estimate(&dims, 1.0)?,
                scaled.parameter_count(),
                scaled.input_resolution
            ),
        );
    }
    write_report(&report, dir)
}

pub fn make_synthetic(common: &Common) -> CliResult<()> {
    let cfg = load_config(common)?;
    let dir = out_dir(common)?;
    let set = generate(&cfg.data.synthetic)?;
    write_labeled_set(dir, &set)?;
    // A config next to the data, pointing at it.
    let mut run = cfg.clone();
    run.data.manifest = Some(DatasetManifest {
        labels_csv: PathBuf::from("labels.csv"),
        images_dir: PathBuf::from("images"),
        unlabeled_csv: None,
        train_fraction: cfg.data.train_fraction,
        split_seed: cfg.data.synthetic.seed,
    });
    let path = dir.join("config.toml");
    fs::write(&path, run.to_toml()?).map_err(|e| CliError::Run(Error::Io {
        path: path.clone(),
        source: e,
    }))?;
    log::info!("{} images and {} written under {}", set.len(), path.display(), dir.display());
    Ok(())
}
