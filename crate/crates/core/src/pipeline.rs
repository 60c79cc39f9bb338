//! End-to-end surrogate training: simulate, fit, save.

use std::fmt::Write as _;
use std::path::Path;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::surrogate::{
    classifier_accuracy, generate_dataset, save_weights, train_classifier, train_linear,
    train_residual_net, ClassifierReport, Dataset, ExcitationPlan, ResidualReport, Split,
    SurrogateModel,
};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingReport {
    pub samples: usize,
    pub train_samples: usize,
    pub positive_fraction: f64,
    pub residual: ResidualReport,
    pub classifier: ClassifierReport,
    /// Test-split figures of the final model.
    pub test_mae: f64,
    pub test_accuracy: f64,
    pub seconds: f64,
}

impl TrainingReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let last = |v: &[f64]| v.last().copied().unwrap_or(f64::NAN);
        let _ = writeln!(s, "samples = {}", self.samples);
        let _ = writeln!(s, "train_samples = {}", self.train_samples);
        let _ = writeln!(s, "zbar_positive_fraction = {:.4}", self.positive_fraction);
        let _ = writeln!(
            s,
            "lstm_final_loss = {:.4e}",
            last(&self.residual.epoch_loss)
        );
        let _ = writeln!(s, "val_mae_linear = {:.4e}", self.residual.val_mae_linear);
        let _ = writeln!(s, "val_mae = {:.4e}", self.residual.val_mae);
        let _ = writeln!(
            s,
            "classifier_final_loss = {:.4e}",
            last(&self.classifier.epoch_loss)
        );
        let _ = writeln!(s, "val_accuracy = {:.4}", self.classifier.val_accuracy);
        let _ = writeln!(s, "test_mae = {:.4e}", self.test_mae);
        let _ = writeln!(s, "test_accuracy = {:.4}", self.test_accuracy);
        let _ = writeln!(s, "seconds = {:.1}", self.seconds);
        s
    }
}

/// Mean absolute error of the full predictor on one split, normalised y.
pub fn split_mae(model: &SurrogateModel, ds: &Dataset, split: Split) -> f64 {
    let idx = ds.indices(split);
    if idx.is_empty() {
        return f64::NAN;
    }
    let mut flat = vec![0.0; ds.theta_dim()];
    let total: f64 = idx
        .iter()
        .map(|&i| {
            flat.copy_from_slice(ds.row(i));
            model.norm.normalize_flat(&mut flat);
            let (lin, res) = model.components_raw(&flat);
            let target = model
                .norm
                .normalize(crate::surrogate::Signal::Y, ds.y_next[i]);
            (lin + res - target).abs()
        })
        .sum();
    total / idx.len() as f64
}

/// Fits the three surrogate parts on an existing dataset.
pub fn fit_surrogate(ds: &Dataset, cfg: &Config) -> Result<(SurrogateModel, TrainingReport)> {
    let start = std::time::Instant::now();
    let norm = ds.fit_normalizer()?;
    let (x, y) = ds.normalized(Split::Train, &norm);
    let linear = train_linear(&x, &y, ds.theta_dim())?;
    drop(x);
    let (net, residual) = train_residual_net(ds, &norm, &linear, &cfg.train)?;
    let (classifier, creport) = train_classifier(ds, &norm, &cfg.train)?;
    let model = SurrogateModel {
        n_hist: ds.n_hist,
        norm,
        linear,
        net,
        classifier,
    };
    let report = TrainingReport {
        samples: ds.len(),
        train_samples: ds.indices(Split::Train).len(),
        positive_fraction: creport.positive_fraction,
        test_mae: split_mae(&model, ds, Split::Test),
        test_accuracy: classifier_accuracy(&model.classifier, ds, Split::Test, &model.norm),
        residual,
        classifier: creport,
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}

/// Simulates the excitation plan and fits the surrogate.
pub fn train(cfg: &Config) -> Result<(SurrogateModel, Dataset, TrainingReport)> {
    let start = std::time::Instant::now();
    let plan = ExcitationPlan::random(&cfg.dataset, &cfg.plant);
    log::info!(
        "simulating {} trajectories ({} samples expected)",
        plan.trajectories.len(),
        cfg.dataset.expected_samples()
    );
    let ds = generate_dataset(&cfg.plant, &cfg.integrator, &plan, &cfg.dataset)?;
    log::info!("dataset ready: {} samples", ds.len());
    let (model, mut report) = fit_surrogate(&ds, cfg)?;
    report.seconds = start.elapsed().as_secs_f64();
    Ok((model, ds, report))
}

/// [`train`], then writes weights.txt, dataset.csv and report.txt to `out`.
pub fn train_pipeline(cfg: &Config, out: &Path) -> Result<TrainingReport> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let (model, ds, report) = train(cfg)?;
    save_weights(&model, &out.join("weights.txt"))?;
    ds.save_csv(&out.join("dataset.csv"))?;
    let path = out.join("report.txt");
    std::fs::write(&path, report.to_text()).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}
