use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use loadcast::condition::{Conditioner, ThetaDraw};
use loadcast::cvae::CvaeModel;
use loadcast::data::{self, Example, NormalizationManifest, Part};
use loadcast::embeddings::EmbeddingTable;
use loadcast::forecast::{self, Provenance, QuantileFan};
use loadcast::metrics::{self, CvaeEvalSettings, EvalReport};
use loadcast::pipeline::{self, ModelKind, Variant};
use loadcast::qrnn::QrnnModel;
use loadcast::training::TrainingLog;
use loadcast::{Error, Result};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;

pub const NORMALIZATION: &str = "normalization.json";
pub const EMBEDDINGS: &str = "embeddings.csv";
pub const EMBEDDINGS_META: &str = "embeddings_meta.json";
pub const TRAINING_LOG: &str = "training_log.csv";
pub const FORECAST_DIR: &str = "forecast";

pub fn checkpoint_name(kind: ModelKind) -> &'static str {
    match kind {
        ModelKind::GuideVae => "guide_vae.json",
        ModelKind::Qrnn => "qrnn.json",
    }
}

fn model_label(kind: ModelKind) -> &'static str {
    match kind {
        ModelKind::GuideVae => "GUIDE-VAE",
        ModelKind::Qrnn => "QRNN",
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact(path))
    }
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    let (panel, truth) = data::synth(&cfg.synth)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    panel.write_csv(&cfg.out_dir.join("panel.csv"))?;
    write_json(&cfg.out_dir.join("synth_truth.json"), &truth)?;
    println!("wrote {} entities x {} days to {}", panel.entities.len(), cfg.synth.days, cfg.out_dir.display());
    Ok(())
}

pub fn embed(cfg: &RunConfig) -> Result<()> {
    let e = &cfg.experiment;
    let prepared = pipeline::prepare(cfg.load_dataset()?, e.test_days, e.lookback_days)?;
    let table = prepared
        .embeddings(&e.embedding)?
        .ok_or_else(|| Error::Config("embedding.size is 0; nothing to embed".into()))?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    table.save(&cfg.out_dir.join(EMBEDDINGS), &cfg.out_dir.join(EMBEDDINGS_META))?;
    println!("embedded {} entities (K = {}, tau = {:.4})", table.len(), table.size(), table.meta.tau);
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let e = &cfg.experiment;
    let prepared = pipeline::prepare(cfg.load_dataset()?, e.test_days, e.lookback_days)?;
    let table = prepared.embeddings(&e.embedding)?;
    let conditioner = prepared.conditioner(table.as_ref(), e.lookback_days)?;
    let (log, save): (TrainingLog, Box<dyn Fn(&Path) -> Result<()>>) = match cfg.model {
        ModelKind::GuideVae => {
            let (m, log) = pipeline::train_cvae(&prepared, &conditioner, e)?;
            println!("GUIDE-VAE with {} parameters", m.num_params());
            (log, Box::new(move |p| m.save_json(p)))
        }
        ModelKind::Qrnn => {
            let (m, log) = pipeline::train_qrnn(&prepared, &conditioner, e)?;
            println!("QRNN with {} parameters", m.num_params());
            (log, Box::new(move |p| m.save_json(p)))
        }
    };
    let dir = &cfg.out_dir;
    std::fs::create_dir_all(dir)?;
    save(&dir.join(checkpoint_name(cfg.model)))?;
    write_json(&dir.join(NORMALIZATION), &prepared.manifest)?;
    if let Some(t) = &table {
        t.save(&dir.join(EMBEDDINGS), &dir.join(EMBEDDINGS_META))?;
    }
    log.write_csv(&dir.join(TRAINING_LOG))?;
    write_json(&dir.join("config.json"), cfg)?;
    println!(
        "trained {} epochs, best {} at epoch {} (initial {})",
        log.records.len(),
        log.best_val,
        log.best_epoch,
        log.initial_val
    );
    Ok(())
}

/// Normalized test examples, conditioner and manifest rebuilt from a
/// training run's artifacts.
struct Context {
    manifest: NormalizationManifest,
    conditioner: Conditioner,
    examples: Vec<Example>,
}

fn load_context(cfg: &RunConfig) -> Result<Context> {
    let dir = &cfg.out_dir;
    let e = &cfg.experiment;
    let raw = cfg.load_dataset()?;
    let manifest: NormalizationManifest =
        serde_json::from_slice(&std::fs::read(require(dir.join(NORMALIZATION))?)?)?;
    let normalized = manifest.normalize_dataset(&raw)?;
    let split = data::split(&normalized, e.test_days)?;
    let table = if e.embedding.size > 0 {
        Some(EmbeddingTable::load(
            &require(dir.join(EMBEDDINGS))?,
            &require(dir.join(EMBEDDINGS_META))?,
        )?)
    } else {
        None
    };
    let ids: Vec<String> = normalized.entities.iter().map(|e| e.id.clone()).collect();
    let mut examples = data::make_examples(&normalized, &split, Part::Test, e.lookback_days);
    if let Some(wanted) = &cfg.entities {
        for id in wanted {
            if normalized.entity_index(id).is_none() || table.as_ref().is_some_and(|t| t.get(id).is_none()) {
                return Err(Error::UnknownEntity(id.clone()));
            }
        }
        let wanted: BTreeSet<&str> = wanted.iter().map(String::as_str).collect();
        examples.retain(|ex| wanted.contains(ex.entity_id.as_str()));
    }
    // only the entities that are forecast need an embedding
    let used: BTreeSet<&str> = examples.iter().map(|ex| ex.entity_id.as_str()).collect();
    let cond_ids: Vec<String> = ids
        .iter()
        .map(|id| match (&table, used.contains(id.as_str())) {
            (Some(t), false) if t.get(id).is_none() => t.entries()[0].entity_id.clone(),
            _ => id.clone(),
        })
        .collect();
    let conditioner = Conditioner::new(&cond_ids, table.as_ref(), e.lookback_days * normalized.profile_len)?;
    if let Some(n) = cfg.forecast_days {
        examples.retain(|ex| ex.day < split.entities[ex.entity].val_end + n);
    }
    Ok(Context {
        manifest,
        conditioner,
        examples,
    })
}

enum Loaded {
    Cvae(CvaeModel),
    Qrnn(QrnnModel),
}

fn load_model(cfg: &RunConfig) -> Result<Loaded> {
    let path = require(cfg.out_dir.join(checkpoint_name(cfg.model)))?;
    Ok(match cfg.model {
        ModelKind::GuideVae => Loaded::Cvae(CvaeModel::load_json(&path)?),
        ModelKind::Qrnn => Loaded::Qrnn(QrnnModel::load_json(&path)?),
    })
}

fn csv_writer(path: &Path, header: &str) -> Result<BufWriter<File>> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{header}")?;
    Ok(w)
}

fn write_labeled_rows<W: Write>(w: &mut W, entity: &str, date: &str, label: &str, values: &[f64]) -> Result<()> {
    write!(w, "{entity},{date},{label}")?;
    for v in values {
        write!(w, ",{v}")?;
    }
    writeln!(w)?;
    Ok(())
}

fn steps(dim: usize) -> String {
    (0..dim).map(|t| format!("t{t}")).collect::<Vec<_>>().join(",")
}

struct DayArtifacts {
    record: String,
    ensemble: forecast::Ensemble,
    fan: QuantileFan,
    best_index: usize,
    best_trace: Vec<f64>,
    band: loadcast::lowrank::CovarianceBand,
    sigma_fan: Vec<Vec<f64>>,
}

pub fn forecast(cfg: &RunConfig) -> Result<()> {
    let model = load_model(cfg)?;
    let ctx = load_context(cfg)?;
    if ctx.examples.is_empty() {
        return Err(Error::Config("no test days selected".into()));
    }
    let e = &cfg.experiment;
    let dim = ctx.examples[0].target.len();
    let out = cfg.out_dir.join(FORECAST_DIR);
    std::fs::create_dir_all(&out)?;
    let mut fans = csv_writer(&out.join("fans.csv"), &forecast::fan_csv_header(dim))?;
    let mut fans_phys = csv_writer(&out.join("fans_physical.csv"), &forecast::fan_csv_header(dim))?;
    let mut truths = csv_writer(&out.join("truths.csv"), &format!("entity,day,{}", steps(dim)))?;
    let date = |ex: &Example| ex.date.to_string();
    for ex in &ctx.examples {
        writeln!(
            truths,
            "{},{},{}",
            ex.entity_id,
            date(ex),
            ex.target.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
        )?;
    }

    match &model {
        Loaded::Qrnn(m) => {
            for ex in &ctx.examples {
                let fan = m.predict(&ctx.conditioner.condition_for(ex, ThetaDraw::Mean))?;
                forecast::write_fan_rows(&mut fans, &ex.entity_id, &date(ex), &fan)?;
                let phys = fan.map_values(|t, v| ctx.manifest.denormalize_at(t, v));
                forecast::write_fan_rows(&mut fans_phys, &ex.entity_id, &date(ex), &phys)?;
            }
        }
        Loaded::Cvae(m) => {
            let mut mixtures = BufWriter::new(File::create(out.join("mixtures.jsonl"))?);
            let mut ensembles = csv_writer(&out.join("ensembles.csv"), &forecast::ensemble_csv_header(dim))?;
            let mut bands = csv_writer(&out.join("bands.csv"), &forecast::band_csv_header(dim))?;
            let mut best = csv_writer(&out.join("best_traces.csv"), &format!("entity,day,sample,{}", steps(dim)))?;
            let mut sigma = csv_writer(&out.join("sigma_fans.csv"), &format!("entity,day,alpha,{}", steps(dim)))?;
            for chunk in ctx.examples.chunks(32) {
                let produced: Vec<Result<DayArtifacts>> = chunk
                    .par_iter()
                    .map(|ex| {
                        let prov = Provenance {
                            entity_id: ex.entity_id.clone(),
                            entity: ex.entity,
                            day: ex.day,
                            date: date(ex),
                            seed: e.seed,
                        };
                        let c = ctx.conditioner.condition_for(ex, ThetaDraw::Mean);
                        let day = forecast::forecast_day(m, &c, e.samples, &e.levels, prov)?;
                        let (best_index, trace) = forecast::best_trace(&day.ensemble.samples, &ex.target)?;
                        let best_trace = trace.to_vec();
                        let (_, comp) = day.mixture.best_component(&ex.target)?;
                        let half = cfg.band_half_width.min(dim - 1);
                        Ok(DayArtifacts {
                            record: serde_json::to_string(&day.mixture.to_record())?,
                            band: comp.covariance_band(half)?,
                            sigma_fan: forecast::sigma_fan(comp, &cfg.sigma_alphas),
                            ensemble: day.ensemble,
                            fan: day.fan,
                            best_index,
                            best_trace,
                        })
                    })
                    .collect();
                for (ex, a) in chunk.iter().zip(produced) {
                    let a = a?;
                    let d = date(ex);
                    writeln!(mixtures, "{}", a.record)?;
                    forecast::write_ensemble_rows(&mut ensembles, &a.ensemble)?;
                    forecast::write_fan_rows(&mut fans, &ex.entity_id, &d, &a.fan)?;
                    let phys = a.fan.map_values(|t, v| ctx.manifest.denormalize_at(t, v));
                    forecast::write_fan_rows(&mut fans_phys, &ex.entity_id, &d, &phys)?;
                    forecast::write_band_rows(&mut bands, &ex.entity_id, &d, &a.band)?;
                    write_labeled_rows(&mut best, &ex.entity_id, &d, &a.best_index.to_string(), &a.best_trace)?;
                    for (alpha, row) in cfg.sigma_alphas.iter().zip(&a.sigma_fan) {
                        write_labeled_rows(&mut sigma, &ex.entity_id, &d, &alpha.to_string(), row)?;
                    }
                }
            }
            for w in [&mut ensembles, &mut bands, &mut best, &mut sigma] {
                w.flush()?;
            }
            mixtures.flush()?;
        }
    }
    fans.flush()?;
    fans_phys.flush()?;
    truths.flush()?;
    println!("forecast {} entity-days into {}", ctx.examples.len(), out.display());
    Ok(())
}

pub fn evaluate(cfg: &RunConfig, fan_file: Option<&Path>) -> Result<()> {
    let model = load_model(cfg)?;
    let ctx = load_context(cfg)?;
    if ctx.examples.is_empty() {
        return Err(Error::Config("no test days selected".into()));
    }
    let e = &cfg.experiment;
    let dict_size = |m: &CvaeModel| {
        if m.basis().is_learned() {
            m.basis().learnable_len() / m.target_dim()
        } else {
            0
        }
    };
    let mut report = match fan_file {
        Some(path) => {
            let table = forecast::read_fan_csv(&require(path.to_path_buf())?)?;
            let fans = ctx
                .examples
                .iter()
                .map(|ex| {
                    table
                        .get(&(ex.entity_id.clone(), ex.date.to_string()))
                        .cloned()
                        .ok_or_else(|| Error::Data(format!("fan file has no rows for {} on {}", ex.entity_id, ex.date)))
                })
                .collect::<Result<Vec<_>>>()?;
            let dict = match &model {
                Loaded::Cvae(m) => Some(dict_size(m)),
                Loaded::Qrnn(_) => None,
            };
            let mut r = EvalReport::from_fans(
                model_label(cfg.model),
                ctx.conditioner.embed_size(),
                dict,
                &fans,
                &ctx.examples,
                Some(&ctx.manifest),
            )?;
            if let Loaded::Cvae(m) = &model {
                let set = loadcast::condition::ConditionedSet {
                    examples: &ctx.examples,
                    conditioner: &ctx.conditioner,
                };
                r.all = Some(metrics::average_log_likelihood(m, &set, e.is_samples, e.seed)?);
                r.is_samples = Some(e.is_samples);
            }
            r
        }
        None => match &model {
            Loaded::Cvae(m) => {
                let settings = CvaeEvalSettings {
                    levels: &e.levels,
                    samples: e.samples,
                    is_samples: e.is_samples,
                    seed: e.seed,
                    manifest: Some(&ctx.manifest),
                };
                metrics::evaluate_cvae(m, &ctx.conditioner, &ctx.examples, &settings)?
            }
            Loaded::Qrnn(m) => metrics::evaluate_qrnn(m, &ctx.conditioner, &ctx.examples, Some(&ctx.manifest))?,
        },
    };
    if let Loaded::Cvae(m) = &model {
        report.dict_size = Some(dict_size(m));
    }
    let stem = match cfg.model {
        ModelKind::GuideVae => "report_guide_vae",
        ModelKind::Qrnn => "report_qrnn",
    };
    write_json(&cfg.out_dir.join(format!("{stem}.json")), &report)?;
    let mut md = report.to_markdown();
    md.push_str("\nScores in normalized units. ");
    if let Some(p) = &report.physical {
        md.push_str(&format!(
            "In original units: QuantileLoss {:.4}, Interval {:.4}, InterCover {:.4}.\n",
            p.quantile_loss, p.interval, p.inter_cover
        ));
    }
    std::fs::write(cfg.out_dir.join(format!("{stem}.md")), &md)?;
    print!("{md}");
    Ok(())
}

#[derive(Serialize)]
struct AblationRow {
    label: String,
    variant: Variant,
    report: Option<EvalReport>,
    error: Option<String>,
}

#[derive(Serialize)]
struct AblationOutput {
    rows: Vec<AblationRow>,
    summary: pipeline::OrderingSummary,
}

/// Returns whether every variant succeeded.
pub fn ablate(cfg: &RunConfig) -> Result<bool> {
    let e = &cfg.experiment;
    let prepared = pipeline::prepare(cfg.load_dataset()?, e.test_days, e.lookback_days)?;
    let (k, v) = (e.embedding.size, e.network.dict_size);
    let variants = pipeline::ablation_grid(k, v);
    let mut rows = Vec::new();
    for var in &variants {
        eprintln!("running {}", var.label());
        let r = pipeline::run_variant(&prepared, e, *var).map(|r| r.report);
        if let Err(err) = &r {
            eprintln!("  failed: {err}");
        }
        rows.push((*var, r));
    }
    let summary = pipeline::summarize(&rows, k, v);
    let complete = rows.iter().all(|(_, r)| r.is_ok());
    let mut md = String::from("| Model | K | V | QuantileLoss | Interval | InterCover | ALL |\n|---|---|---|---|---|---|---|\n");
    for (var, r) in &rows {
        match r {
            Ok(rep) => md.push_str(metrics::markdown_table(std::slice::from_ref(rep)).lines().nth(2).unwrap_or_default()),
            Err(err) => md.push_str(&format!(
                "| {} | {} | {} | FAILED: {} | | | |",
                model_label(var.kind),
                var.embed_size,
                if var.kind == ModelKind::Qrnn { "−".to_string() } else { var.dict_size.to_string() },
                err.to_string().replace('|', "/")
            )),
        }
        md.push('\n');
    }
    let show = |b: Option<bool>| b.map_or("n/a".to_string(), |b| b.to_string());
    md.push_str(&format!(
        "\nfull model beats K=0,V=0 on QuantileLoss, Interval and ALL: {}\nfull model beats QRNN on QuantileLoss and Interval: {}\nALL gain from dictionary alone: {}\nALL gain from embedding alone: {}\n",
        show(summary.full_beats_plain),
        show(summary.full_beats_qrnn),
        summary.dictionary_gain.map_or("n/a".into(), |g| format!("{g:.4}")),
        summary.embedding_gain.map_or("n/a".into(), |g| format!("{g:.4}")),
    ));
    let output = AblationOutput {
        rows: rows
            .into_iter()
            .map(|(variant, r)| {
                let (report, error) = match r {
                    Ok(rep) => (Some(rep), None),
                    Err(e) => (None, Some(e.to_string())),
                };
                AblationRow {
                    label: variant.label(),
                    variant,
                    report,
                    error,
                }
            })
            .collect(),
        summary,
    };
    std::fs::create_dir_all(&cfg.out_dir)?;
    write_json(&cfg.out_dir.join("ablation.json"), &output)?;
    std::fs::write(cfg.out_dir.join("ablation.md"), &md)?;
    print!("{md}");
    Ok(complete)
}
