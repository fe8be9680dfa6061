//! `gen-data` and `train` subcommands.

use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, ValueEnum};
use serde_json::{json, Value};

use pltm::datagen::{build_classifier_dataset, build_regressor_dataset, GenConfig};
use pltm::dataset::{Dataset, DatasetKind};
use pltm::error::{Error, Result};
use pltm::nn::{
    save_model, train as train_net, FactorizedModel, ModelKind, NormBounds, TrainConfig, TrainLog,
};
use pltm::trace::Direction;

use crate::{dir_label, load_lens, path_dir, DirArg};

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Classifier,
    Regressor,
}

#[derive(Args)]
pub struct GenDataArgs {
    /// Builtin lens name or prescription file path.
    #[arg(long)]
    pub lens: String,
    #[arg(long, value_enum)]
    pub direction: DirArg,
    /// Reflection path id.
    #[arg(long, default_value_t = 0)]
    pub path_id: u64,
    /// `classifier`: balanced valid/invalid set with boundary oversampling;
    /// `regressor`: valid-only MCMC set with oracle outputs.
    #[arg(long, value_enum)]
    pub kind: KindArg,
    /// Total record count.
    #[arg(long)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Parallel MCMC chains over the valid manifold.
    #[arg(long, default_value_t = 16)]
    pub chains: usize,
    /// Discarded steps per chain before collection.
    #[arg(long, default_value_t = 1000)]
    pub burn_in: usize,
    /// Uniform-rejection tries allowed when seeding each chain.
    #[arg(long, default_value_t = 1_000_000)]
    pub seed_budget: u64,
    /// Output file (default: the conventional per-path directory under
    /// --out-dir).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
}

pub fn gen_data(args: GenDataArgs) -> Result<Value> {
    if args.samples == 0 {
        return Err(Error::Dataset("--samples must be positive".into()));
    }
    let lens = load_lens(&args.lens)?;
    let direction: Direction = args.direction.into();
    let cfg = GenConfig {
        seed: args.seed,
        chains: args.chains,
        burn_in: args.burn_in,
        seed_budget: args.seed_budget,
        ..GenConfig::default()
    };
    eprintln!(
        "gen-data: {} {} path {} ({} records)...",
        lens.name,
        dir_label(direction),
        args.path_id,
        args.samples
    );
    let t0 = Instant::now();
    let ds = match args.kind {
        KindArg::Classifier => {
            build_classifier_dataset(&lens, args.path_id, direction, args.samples, &cfg)?
        }
        KindArg::Regressor => {
            build_regressor_dataset(&lens, args.path_id, direction, args.samples, &cfg)?
        }
    };
    let seconds = t0.elapsed().as_secs_f64();

    let kind_name = match args.kind {
        KindArg::Classifier => "classifier",
        KindArg::Regressor => "regressor",
    };
    let out = args.out.unwrap_or_else(|| {
        path_dir(&args.out_dir, &lens, direction, args.path_id)
            .join(format!("{kind_name}-{}.pltm", args.samples))
    });
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    ds.save(&out)?;

    let valid = ds.records.iter().filter(|r| r.is_valid()).count();
    Ok(json!({
        "command": "gen-data",
        "lens": lens.name,
        "direction": dir_label(direction),
        "path_id": args.path_id,
        "kind": kind_name,
        "file": out,
        "records": ds.records.len(),
        "valid": valid,
        "valid_fraction": valid as f64 / ds.records.len() as f64,
        "norm_min": ds.header.norm_min,
        "norm_max": ds.header.norm_max,
        "seconds": seconds,
        "records_per_sec": ds.records.len() as f64 / seconds,
    }))
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum ScheduleArg {
    /// 40-epoch regressor schedule for individual ghost paths.
    PerPath,
    /// Long regressor schedule with a fine-tune phase for the
    /// all-transmission path.
    FullTransmit,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Balanced classifier dataset (.pltm).
    #[arg(long)]
    pub classifier_data: PathBuf,
    /// Valid-only regressor dataset (.pltm).
    #[arg(long)]
    pub regressor_data: PathBuf,
    #[arg(long, value_enum, default_value_t = ScheduleArg::PerPath)]
    pub schedule: ScheduleArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Override the classifier epoch count.
    #[arg(long)]
    pub classifier_epochs: Option<usize>,
    /// Override the regressor epoch count.
    #[arg(long)]
    pub regressor_epochs: Option<usize>,
    /// Output model file (default: `model.model` next to the regressor
    /// dataset).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Last logged row for a split, keyed by column name.
fn final_metrics(log: &TrainLog, split: &str) -> Value {
    log.rows
        .iter()
        .rev()
        .find(|(_, s, _)| s == split)
        .map(|(epoch, _, vals)| {
            let mut obj = serde_json::Map::new();
            obj.insert("epoch".into(), json!(epoch));
            for (name, v) in log.columns.iter().zip(vals) {
                obj.insert(name.clone(), json!(v));
            }
            Value::Object(obj)
        })
        .unwrap_or(Value::Null)
}

pub fn train(args: TrainArgs) -> Result<Value> {
    let cds = Dataset::load(&args.classifier_data)?;
    let rds = Dataset::load(&args.regressor_data)?;
    if cds.header.kind != DatasetKind::Classifier {
        return Err(Error::Training(format!(
            "{} is not a classifier dataset",
            args.classifier_data.display()
        )));
    }
    if rds.header.kind != DatasetKind::Regressor {
        return Err(Error::Training(format!(
            "{} is not a regressor dataset",
            args.regressor_data.display()
        )));
    }
    if (cds.header.lens_hash, cds.header.path_id, cds.header.direction)
        != (rds.header.lens_hash, rds.header.path_id, rds.header.direction)
    {
        return Err(Error::Training(
            "classifier and regressor datasets describe different (lens, path, direction) triples"
                .into(),
        ));
    }

    let mut ccfg = TrainConfig::classifier(args.seed);
    if let Some(e) = args.classifier_epochs {
        ccfg.epochs = e;
    }
    let mut rcfg = match args.schedule {
        ScheduleArg::PerPath => TrainConfig::per_path_regressor(args.seed),
        ScheduleArg::FullTransmit => TrainConfig::full_transmit_regressor(args.seed),
    };
    if let Some(e) = args.regressor_epochs {
        rcfg.epochs = e;
    }

    eprintln!(
        "train: classifier on {} records ({} epochs)...",
        cds.records.len(),
        ccfg.epochs
    );
    let t0 = Instant::now();
    let (cnet, clog) = train_net(ModelKind::Classifier, &cds, &ccfg)?;
    let c_seconds = t0.elapsed().as_secs_f64();

    eprintln!(
        "train: regressor on {} records ({} epochs)...",
        rds.records.iter().filter(|r| r.is_valid()).count(),
        rcfg.epochs
    );
    let t1 = Instant::now();
    let (rnet, rlog) = train_net(ModelKind::Regressor, &rds, &rcfg)?;
    let r_seconds = t1.elapsed().as_secs_f64();

    let model = FactorizedModel::new(
        cnet,
        rnet,
        NormBounds::from_dataset(&cds),
        NormBounds::from_dataset(&rds),
        rds.header.lens_hash,
        rds.header.path_id,
        rds.header.direction,
    )?;
    let out = args.out.unwrap_or_else(|| {
        args.regressor_data
            .parent()
            .unwrap_or_else(|| std::path::Path::new("."))
            .join("model.model")
    });
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    save_model(&model, &out)?;
    let clog_path = out.with_extension("classifier.csv");
    let rlog_path = out.with_extension("regressor.csv");
    std::fs::write(&clog_path, clog.to_csv())?;
    std::fs::write(&rlog_path, rlog.to_csv())?;

    Ok(json!({
        "command": "train",
        "model": out,
        "lens_hash": format!("{:016x}", rds.header.lens_hash),
        "direction": dir_label(rds.header.direction),
        "path_id": rds.header.path_id,
        "classifier": {
            "records": cds.records.len(),
            "epochs": ccfg.epochs,
            "seconds": c_seconds,
            "final_train": final_metrics(&clog, "train"),
            "final_val": final_metrics(&clog, "val"),
            "log": clog_path,
        },
        "regressor": {
            "records": rds.records.len(),
            "epochs": rcfg.epochs,
            "schedule": format!("{:?}", args.schedule),
            "seconds": r_seconds,
            "final_train": final_metrics(&rlog, "train"),
            "final_val": final_metrics(&rlog, "val"),
            "log": rlog_path,
        },
    }))
}
