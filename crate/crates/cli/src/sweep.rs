//! Experiment sweeps along the paper's axes: dosage, momentum error and
//! detector resolution.

use std::io::Write;

use anyhow::{bail, Result};
use log::info;
use mutomo_core::metrics::EvalReport;
use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{build_split, Conditions, Split};
use crate::methods::{reconstruct, score, Method};
use crate::model::Model;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Axis {
    Dosage,
    MomentumError,
    /// Pixels per detector side; 0 stands for ideal resolution.
    DetectorResolution,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Dosage => "dosage",
            Axis::MomentumError => "momentum_error",
            Axis::DetectorResolution => "detector_resolution",
        }
    }
}

/// One CSV row: a method scored under one condition.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Row {
    pub method: String,
    pub axis: String,
    pub axis_value: String,
    pub dosage: usize,
    pub mse: f64,
    pub mae: f64,
    pub psnr: f64,
    pub seconds: f64,
}

impl Row {
    pub fn new(method: Method, axis: &str, axis_value: &str, dosage: usize, r: &EvalReport) -> Self {
        Row {
            method: method.name().into(),
            axis: axis.into(),
            axis_value: axis_value.into(),
            dosage,
            mse: r.mse,
            mae: r.mae,
            psnr: r.psnr_mean,
            seconds: r.seconds,
        }
    }
}

pub fn conditions_for(config: &RunConfig, axis: Axis, value: f64) -> Result<Conditions> {
    let mut c = Conditions::of(config);
    let whole = value >= 0.0 && value.fract() == 0.0 && value <= u32::MAX as f64;
    match axis {
        Axis::Dosage => {
            if !whole || value == 0.0 {
                bail!("dosage {value} is not a positive whole number");
            }
            c.dosage = value as usize;
        }
        Axis::MomentumError => {
            if !(value >= 0.0 && value.is_finite()) {
                bail!("momentum error {value} must be a non-negative fraction");
            }
            c.simulation.detector.momentum_error = value;
        }
        Axis::DetectorResolution => {
            if !whole {
                bail!("detector resolution {value} is not a whole number of pixels");
            }
            c.simulation.detector.pixels_per_side = (value > 0.0).then_some(value as u32);
        }
    }
    c.simulation.validate()?;
    Ok(c)
}

#[derive(Debug, Clone)]
pub struct SweepPlan {
    pub axis: Axis,
    pub values: Vec<f64>,
    pub methods: Vec<Method>,
    /// Fine-tune the model on training data generated under each condition
    /// before scoring it there.
    pub finetune: bool,
}

/// Rows ordered by value, then by method as listed.
pub fn run_sweep(config: &RunConfig, plan: &SweepPlan, model: Option<&Model>) -> Result<Vec<Row>> {
    let neural = plan.methods.contains(&Method::Munet);
    if neural && model.is_none() {
        bail!("sweeping munet needs a trained model; pass --checkpoint");
    }
    if plan.finetune && !neural {
        bail!("--finetune only applies to munet");
    }
    let mut rows = Vec::new();
    for &value in &plan.values {
        let cond = conditions_for(config, plan.axis, value)?;
        info!("{} = {value}: simulating test split", plan.axis.name());
        let test = build_split(config, Split::Test, &cond)?;
        let tuned = match (model, plan.finetune) {
            (Some(m), true) => {
                let mut m = m.clone();
                let train = build_split(config, Split::Train, &cond)?;
                let val = build_split(config, Split::Val, &cond)?;
                info!("{} = {value}: fine-tuning for {} epochs", plan.axis.name(), config.train.finetune_epochs);
                m.fit(config, &train, &val, config.train.finetune_epochs, None)?;
                Some(m)
            }
            (m, _) => m.cloned(),
        };
        for &method in &plan.methods {
            let (grids, seconds) = reconstruct(method, &test, config, tuned.as_ref())?;
            let report = score(&grids, &test, config.metrics.peak, seconds)?;
            info!("{} = {value}: {} psnr {:.3}", plan.axis.name(), method.name(), report.psnr_mean);
            rows.push(Row::new(method, plan.axis.name(), &format!("{value}"), cond.dosage, &report));
        }
    }
    Ok(rows)
}

pub fn write_csv(out: impl Write, rows: &[Row]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(["method", "axis", "axis_value", "dosage", "mse", "mae", "psnr", "seconds"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
