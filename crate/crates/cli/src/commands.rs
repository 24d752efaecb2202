use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use kws_core::audio::{class_weights, read_wav, Split};
use kws_core::cost::{
    check_capabilities, describe_spec, layer_macs, mfcc_macs, param_count, spec_cost,
    AcceleratorLimits,
};
use kws_core::data::{evaluate, LabeledSet};
use kws_core::mfcc::MfccConfig;
use kws_core::prepare::{
    load_prepared, prepare_speech_commands, prepare_synthetic, save_prepared, PrepareOptions,
    Prepared,
};
use kws_core::quant::{export_int8, load_model, qat_train, save_model, write_model};
use kws_core::search::{evolutionary_search, fixed_subset, SupernetFitness};
use kws_core::supernet::{build_supernet, load_checkpoint, save_checkpoint, SubnetSpec, Supernet};
use serde_json::json;

use crate::config::{usage, Overrides, RunConfig};

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum ExportFormat {
    Kwsq,
    Json,
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// Pretty JSON on stdout. A closed pipe (`kws cost | head`) is not an error.
fn print_json(value: &impl serde::Serialize) -> Result<()> {
    let mut out = std::io::stdout().lock();
    let r = serde_json::to_writer_pretty(&mut out, value)
        .map_err(std::io::Error::from)
        .and_then(|()| writeln!(out))
        .and_then(|()| out.flush());
    match r {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn load_data(cfg: &RunConfig) -> Result<Prepared> {
    let p = load_prepared(cfg.cache_path()?)?;
    if p.n_classes() != cfg.supernet.n_classes {
        return Err(usage(format!(
            "cache has {} classes but supernet.n_classes is {}",
            p.n_classes(),
            cfg.supernet.n_classes
        )));
    }
    Ok(p)
}

fn weights_for(p: &Prepared, train: &LabeledSet) -> Result<Vec<f32>> {
    Ok(class_weights(
        &train.class_counts(p.n_classes()),
        p.index.unknown_class,
    )?)
}

fn load_supernet(path: &Path, cfg: &RunConfig) -> Result<Supernet> {
    if !path.exists() {
        return Err(usage(format!("checkpoint {} not found", path.display())));
    }
    let sn = load_checkpoint(path)?;
    sn.check_compatible(&cfg.supernet)
        .map_err(|e| usage(format!("{}: {e}", path.display())))?;
    Ok(sn)
}

/// A bare spec, or the best spec of a search report.
fn load_spec(path: &Path) -> Result<SubnetSpec> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    let v: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let spec = v.pointer("/best/spec").cloned().unwrap_or(v);
    serde_json::from_value(spec)
        .map_err(|e| usage(format!("{}: not a subnet spec: {e}", path.display())))
}

pub fn prepare(
    o: &Overrides,
    data: Option<PathBuf>,
    synthetic: Option<Vec<usize>>,
    keywords: Option<Vec<String>>,
    unknown_cap: Option<f64>,
) -> Result<()> {
    let cfg = RunConfig::resolve(o)?;
    let cache = cfg
        .cache
        .clone()
        .ok_or_else(|| usage("no cache path: pass --cache"))?;
    let prepared = match synthetic.as_deref() {
        Some(&[classes, per_class]) => {
            prepare_synthetic(classes, per_class, cfg.seed).map_err(|e| usage(e.to_string()))?
        }
        Some(_) => bail!(usage("--synthetic takes N_CLASSES N_PER_CLASS")),
        None => {
            let root = data
                .or(cfg.data.clone())
                .ok_or_else(|| usage("pass --data DIR or --synthetic"))?;
            if !root.is_dir() {
                return Err(usage(format!(
                    "dataset directory {} not found",
                    root.display()
                )));
            }
            let mut opts = PrepareOptions {
                seed: cfg.seed,
                unknown_cap,
                ..PrepareOptions::default()
            };
            if let Some(k) = keywords {
                opts.keywords = k.into_iter().map(|w| w.to_ascii_lowercase()).collect();
            }
            prepare_speech_commands(&root, &opts)?
        }
    };
    save_prepared(&prepared, &cache)?;
    let report = json!({
        "cache": cache,
        "records": prepared.records.len(),
        "class_names": prepared.index.class_names,
        "counts": prepared.index.counts,
        "skipped": prepared.index.skipped,
        "config_hash": prepared.index.config_hash,
    });
    print_json(&report)?;
    Ok(())
}

pub fn train_supernet(
    o: &Overrides,
    out: Option<PathBuf>,
    log: Option<PathBuf>,
    resume: Option<PathBuf>,
) -> Result<()> {
    let cfg = RunConfig::resolve(o)?;
    let data = load_data(&cfg)?;
    let train = data.split(Split::Train);
    let val = data.split(Split::Val);
    let weights = weights_for(&data, &train)?;
    let out = out.unwrap_or_else(|| cfg.out_dir.join("supernet.ofa"));
    let log_path = log.unwrap_or_else(|| with_suffix(&out, ".csv"));
    let mut sn = match &resume {
        Some(p) => load_supernet(p, &cfg)?,
        None => build_supernet(&cfg.supernet, cfg.seed)?,
    };
    let mut csv = create(&log_path)?;
    writeln!(csv, "# run config hash {:016x}", cfg.hash())?;
    writeln!(csv, "epoch,stage,loss,val_accuracy")?;
    let mut io_err = None;
    kws_core::supernet::train_supernet(
        &mut sn,
        &train,
        Some(&val),
        &weights,
        &cfg.train,
        cfg.seed,
        |l| {
            let acc = l.val_accuracy.map(|a| a.to_string()).unwrap_or_default();
            if let Err(e) = writeln!(csv, "{},{},{},{}", l.epoch, l.stage, l.loss, acc)
                .and_then(|_| csv.flush())
            {
                io_err.get_or_insert(e);
            }
        },
    )?;
    if let Some(e) = io_err {
        return Err(e).context("writing training log");
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    save_checkpoint(&sn, &out)?;
    log::info!("checkpoint written to {}", out.display());
    Ok(())
}

pub fn search(
    o: &Overrides,
    ckpt: &Path,
    constraint_bytes: Option<u64>,
    out: Option<PathBuf>,
    history: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = RunConfig::resolve(o)?;
    if let Some(b) = constraint_bytes {
        cfg.constraint.max_weight_bytes = b;
        cfg.validate()?;
    }
    let sn = load_supernet(ckpt, &cfg)?;
    let data = load_data(&cfg)?;
    let train = data.split(Split::Train);
    let val = data.split(Split::Val);
    let fitness = SupernetFitness::new(&sn, &train, &val, &cfg.search)?;
    let out = out.unwrap_or_else(|| cfg.out_dir.join("search.json"));
    let hist_path = history.unwrap_or_else(|| with_suffix(&out, ".jsonl"));
    let mut hist = create(&hist_path)?;
    let mut io_err = None;
    let result = evolutionary_search(&sn.config, &fitness, &cfg.constraint, &cfg.search, |r| {
        let line = serde_json::to_string(r).map_err(std::io::Error::other);
        if let Err(e) = line
            .and_then(|l| writeln!(hist, "{l}"))
            .and_then(|_| hist.flush())
        {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e).context("writing search history");
    }
    let feasible = result.audit.iter().filter(|a| a.feasible).count();
    let report = json!({
        "config_hash": cfg.hash(),
        "supernet_config_hash": kws_core::binio::config_hash(&sn.config),
        "constraint": cfg.constraint,
        "search": cfg.search,
        "best": result.best,
        "history": result.history,
        "evaluations": result.evaluations,
        "audited": result.audit.len(),
        "audit_feasible": feasible,
        "val_indices": fixed_subset(val.len(), cfg.search.eval_samples, cfg.search.seed ^ 0x5EED_0001),
    });
    write_json(&out, &report)?;
    log::info!("search report written to {}", out.display());
    Ok(())
}

pub fn qat(
    o: &Overrides,
    ckpt: &Path,
    spec_path: &Path,
    out: Option<PathBuf>,
    log: Option<PathBuf>,
) -> Result<()> {
    let cfg = RunConfig::resolve(o)?;
    let sn = load_supernet(ckpt, &cfg)?;
    let spec = load_spec(spec_path)?;
    spec.validate(&sn.config)
        .map_err(|e| usage(format!("{}: {e}", spec_path.display())))?;
    let data = load_data(&cfg)?;
    let train = data.split(Split::Train);
    let val = data.split(Split::Val);
    let weights = weights_for(&data, &train)?;
    let mut net = sn.extract_subnet(&spec)?;
    let calib: Vec<_> = fixed_subset(train.len(), 256, cfg.seed)
        .chunks(64)
        .map(|c| {
            train
                .batch(c, sn.config.input_channels, sn.config.input_len, None)
                .map(|b| b.0)
        })
        .collect::<kws_core::Result<_>>()?;
    net.recalibrate_bn(&calib)?;
    let out = out.unwrap_or_else(|| cfg.out_dir.join("model.kwsq"));
    let log_path = log.unwrap_or_else(|| with_suffix(&out, ".csv"));
    let mut csv = create(&log_path)?;
    writeln!(csv, "# run config hash {:016x}", cfg.hash())?;
    writeln!(csv, "epoch,lr,quantized,loss,val_accuracy")?;
    let mut io_err = None;
    let outcome = qat_train(
        &net,
        &train,
        Some(&val),
        &weights,
        &cfg.qat,
        cfg.seed,
        |l| {
            let acc = l.val_accuracy.map(|a| a.to_string()).unwrap_or_default();
            let r = writeln!(
                csv,
                "{},{:e},{},{},{}",
                l.epoch, l.lr, l.quantized, l.loss, acc
            );
            if let Err(e) = r.and_then(|_| csv.flush()) {
                io_err.get_or_insert(e);
            }
        },
    )?;
    if let Some(e) = io_err {
        return Err(e).context("writing QAT log");
    }
    let model = export_int8(&outcome, &sn.config)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    save_model(&model, &out)?;
    let summary = json!({
        "model": out,
        "params": model.param_count(),
        "param_bytes_int8": model.param_bytes(),
        "final_val_accuracy": outcome.logs.last().and_then(|l| l.val_accuracy),
        "config_hash": model.descriptor.config_hash,
    });
    print_json(&summary)?;
    Ok(())
}

pub fn eval(o: &Overrides, model_path: &Path, split: &str) -> Result<()> {
    let cfg = RunConfig::resolve(o)?;
    let split: Split = split
        .parse()
        .map_err(|e: kws_core::Error| usage(e.to_string()))?;
    if !model_path.exists() {
        return Err(usage(format!("model {} not found", model_path.display())));
    }
    let model = load_model(model_path)?;
    let data = load_prepared(cfg.cache_path()?)?;
    if data.n_classes() != model.descriptor.config.n_classes {
        return Err(usage("model and cache disagree on the class count"));
    }
    let set = data.split(split);
    let report = evaluate(&model.to_network()?, &set, &model.quant_spec(), 64)?;
    let out = json!({
        "split": split,
        "accuracy": report.accuracy,
        "total": report.total(),
        "class_names": data.index.class_names,
        "confusion": report.confusion,
    });
    print_json(&out)?;
    Ok(())
}

pub fn mfcc(wav: &Path, out: &Path) -> Result<()> {
    if !wav.exists() {
        return Err(usage(format!("{} not found", wav.display())));
    }
    let samples = read_wav(wav)?;
    let feats = kws_core::mfcc::mfcc(&samples, &MfccConfig::default())?;
    let mut w = create(out)?;
    for row in feats {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn cost(o: &Overrides, spec_path: Option<&Path>) -> Result<()> {
    let supernet = match &o.config {
        Some(p) => RunConfig::load(p)?.supernet,
        None => Default::default(),
    };
    supernet.validate().map_err(|e| usage(e.to_string()))?;
    let spec = match spec_path {
        Some(p) => load_spec(p)?,
        None => supernet.max_spec(),
    };
    spec.validate(&supernet).map_err(|e| usage(e.to_string()))?;
    let layers = describe_spec(&supernet, &spec);
    let per_layer: Vec<_> = layers
        .iter()
        .map(|l| json!({"layer": l, "macs": layer_macs(l)}))
        .collect();
    let c = spec_cost(&supernet, &spec, 8);
    let mfcc_cfg = MfccConfig::default();
    let report = json!({
        "per_layer": per_layer,
        "total_macs": c.macs,
        "param_count": c.params,
        "param_count_folded": param_count(&supernet, &spec, false),
        "param_bytes_int8": c.param_bytes,
        "violations": check_capabilities(&layers, &AcceleratorLimits::default()),
        "mfcc": mfcc_macs(&mfcc_cfg, mfcc_cfg.sample_rate as usize)?,
        "config_hash": kws_core::binio::config_hash(&supernet),
    });
    print_json(&report)?;
    Ok(())
}

pub fn export(model_path: &Path, out: &Path, format: ExportFormat) -> Result<()> {
    if !model_path.exists() {
        return Err(usage(format!("model {} not found", model_path.display())));
    }
    let model = load_model(model_path)?;
    match format {
        ExportFormat::Kwsq => {
            let mut w = create(out)?;
            w.write_all(&write_model(&model)?)?;
            w.flush()?;
        }
        ExportFormat::Json => {
            let layers: Vec<_> = model
                .layers
                .iter()
                .map(|l| json!({"exponent": l.exponent, "shape": l.shape, "weights": l.weights, "bias": l.bias}))
                .collect();
            write_json(
                out,
                &json!({"descriptor": model.descriptor, "layers": layers}),
            )?;
        }
    }
    print_json(
        &json!({"params": model.param_count(), "param_bytes_int8": model.param_bytes(), "out": out}),
    )?;
    Ok(())
}
