use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use covalign::align::{align_offline, align_pseudo_online, AlignmentMode, ReferenceKind};
use covalign::dsp::{preprocess_set, PreprocessConfig};
use covalign::harness::{
    learning_curves_csv, paired_accuracies, read_results_csv, run_ensembles, run_individual_models,
    run_shared_pipelines, summarize, write_results_csv, ExperimentConfig, IndividualModel, IndividualRun,
    PipelineResult, PipelineSpec, SourceKey, TransferReport,
};
use covalign::neural::{load_checkpoint, save_checkpoint, TrainHistory};
use covalign::seed::derive_seed;
use covalign::stats::{significance_matrix, PermutationMode};
use covalign::synth::{make_benchmark, BenchmarkConfig, ShiftLevel};
use covalign::trialdata::trim_to_multiple;
use covalign::Dataset;
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{FileConfig, RunManifest};
use crate::{
    AlignArgs, CliError, EnsembleArgs, Kind, Mode, PermMode, PreprocessArgs, Preset, ReportArgs, Shift, Source,
    StatsArgs, SynthArgs, TrainIndividualArgs, TrainOpts, TrainSharedArgs,
};

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Other(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

fn usage(e: covalign::Error) -> CliError {
    CliError::Usage(e.to_string())
}

fn load_dataset(manifest: &Path) -> Result<Dataset, CliError> {
    let ds = Dataset::load(manifest)?;
    info!("loaded {} subjects from {}", ds.subjects.len(), manifest.display());
    Ok(ds)
}

fn saved_files(ds: &Dataset, dir: &Path) -> Vec<PathBuf> {
    let mut out = vec![dir.join("manifest.json")];
    out.extend(ds.subjects.iter().map(|s| dir.join(format!("subject_{:03}.eegb", s.subject_id))));
    out
}

pub fn synth(a: SynthArgs, file: &FileConfig) -> Result<(), CliError> {
    let mut bc = file.layer("benchmark", BenchmarkConfig::default())?;
    if let Some(n) = a.subjects {
        bc.n_subjects = n;
    }
    if let Some(n) = a.trials_per_class {
        bc.trials_per_class = n;
    }
    if let Some(s) = a.shift {
        bc.shift = match s {
            Shift::None => ShiftLevel::None,
            Shift::Weak => ShiftLevel::Weak,
            Shift::Strong => ShiftLevel::Strong,
        };
    }
    if let Some(c) = a.channels {
        bc.channels = c;
    }
    if let Some(t) = a.samples {
        bc.samples = t;
    }
    if let Some(fs) = a.fs {
        bc.fs = fs;
    }
    if let Some(d) = a.drift {
        bc.session_drift = Some(d);
    }
    if bc.n_subjects < 2 || bc.trials_per_class == 0 || bc.channels == 0 || bc.samples == 0 {
        return Err(CliError::Usage(
            "need at least two subjects and positive trials, channels and samples".into(),
        ));
    }
    let ds = make_benchmark(&bc, a.seed)?;
    create_dir(&a.out)?;
    ds.save(&a.out)?;
    let mut m = RunManifest::new("synth", &json!({ "benchmark": bc, "seed": a.seed }), Some(a.seed))?;
    m.outputs = saved_files(&ds, &a.out);
    m.write(&a.out)?;
    println!("wrote {} subjects to {}", ds.subjects.len(), a.out.display());
    Ok(())
}

pub fn preprocess(a: PreprocessArgs, file: &FileConfig) -> Result<(), CliError> {
    let mut pc = file.layer("preprocess", PreprocessConfig::default())?;
    if let Some(v) = a.low {
        pc.low_hz = v;
    }
    if let Some(v) = a.high {
        pc.high_hz = v;
    }
    if let Some(v) = a.taps {
        pc.n_taps = v;
    }
    if let Some(v) = a.resample_to {
        pc.resample_to = Some(v);
    }
    if a.no_resample {
        pc.resample_to = None;
    }
    let ds = load_dataset(&a.input)?;
    let subjects = ds
        .subjects
        .iter()
        .map(|s| preprocess_set(s, &pc))
        .collect::<covalign::Result<Vec<_>>>()?;
    let out = Dataset::new(ds.name.clone(), subjects)?;
    create_dir(&a.out)?;
    out.save(&a.out)?;
    let mut m = RunManifest::new("preprocess", &pc, None)?;
    m.inputs = vec![a.input];
    m.outputs = saved_files(&out, &a.out);
    m.write(&a.out)
}

pub fn align(a: AlignArgs, file: &FileConfig) -> Result<(), CliError> {
    let mut ec = file.layer("experiment", ExperimentConfig::default())?;
    if let Some(g) = a.group_size {
        ec.group_size = g;
    }
    if let Some(s) = a.seed {
        ec.seed = s;
    }
    let mode = match a.mode {
        Mode::Offline => AlignmentMode::OfflineGrouped,
        Mode::Online => AlignmentMode::PseudoOnline,
        Mode::None => AlignmentMode::None,
    };
    let kind = match a.kind {
        Kind::Ea => ReferenceKind::Euclidean,
        Kind::Ra => ReferenceKind::Riemannian,
    };
    let policy = ec.policy(mode, kind);
    policy.validate().map_err(usage)?;
    let ds = load_dataset(&a.input)?;
    let mut subjects = Vec::with_capacity(ds.subjects.len());
    for s in &ds.subjects {
        let aligned = match mode {
            AlignmentMode::OfflineGrouped => {
                let trimmed = trim_to_multiple(s, policy.group_size, derive_seed(ec.seed, &["trim", &s.subject_id.to_string()]))?;
                align_offline(&trimmed, &policy)?
            }
            AlignmentMode::PseudoOnline => {
                let (calib, rest) = align_pseudo_online(s, &policy)?;
                let mut trials = calib.trials;
                trials.extend(rest.trials);
                s.with_trials(trials)
            }
            AlignmentMode::None => s.clone(),
        };
        subjects.push(aligned);
    }
    let out = Dataset::new(ds.name.clone(), subjects)?;
    create_dir(&a.out)?;
    out.save(&a.out)?;
    let mut m = RunManifest::new("align", &json!({ "policy": policy, "seed": ec.seed }), Some(ec.seed))?;
    m.inputs = vec![a.input];
    m.outputs = saved_files(&out, &a.out);
    m.write(&a.out)
}

fn experiment(opts: &TrainOpts, file: &FileConfig) -> Result<ExperimentConfig, CliError> {
    let base = match opts.preset {
        Preset::Full => ExperimentConfig::default(),
        Preset::Desk => ExperimentConfig::desk_scale(0),
    };
    let mut c = file.layer("experiment", base)?;
    if let Some(s) = opts.seed {
        c.seed = s;
    }
    if let Some(v) = opts.lr {
        c.train.learning_rate = v;
    }
    if let Some(v) = opts.weight_decay {
        c.train.weight_decay = v;
    }
    if let Some(v) = opts.epochs {
        c.train.max_epochs = v;
    }
    if let Some(v) = opts.patience {
        c.train.patience = v;
    }
    if let Some(v) = opts.batch_size {
        c.train.batch_size = v;
    }
    if let Some(v) = opts.group_size {
        c.group_size = v;
    }
    c.validate().map_err(usage)?;
    Ok(c)
}

fn print_means(results: &[PipelineResult]) {
    for s in summarize(results) {
        println!("{:<20} {:6.2}% ± {:5.2} (n={})", s.pipeline, 100.0 * s.mean, 100.0 * s.std, s.n);
    }
}

pub fn train_shared(a: TrainSharedArgs, file: &FileConfig) -> Result<(), CliError> {
    let cfg = experiment(&a.train, file)?;
    let names: Vec<String> = if a.pipelines.is_empty() {
        PipelineSpec::STANDARD.iter().map(|s| s.to_string()).collect()
    } else {
        a.pipelines.clone()
    };
    let specs = names
        .iter()
        .map(|n| PipelineSpec::standard(n.trim()).map_err(usage))
        .collect::<Result<Vec<_>, _>>()?;
    let ds = load_dataset(&a.input)?;
    let run = run_shared_pipelines(&ds, &specs, &cfg)?;
    create_dir(&a.out)?;
    let results = a.out.join("results.csv");
    let folds = a.out.join("folds.json");
    let curves = a.out.join("learning_curves.csv");
    write_results_csv(&run.results, &results)?;
    write_json(&folds, &run.folds)?;
    write_text(&curves, &learning_curves_csv(&run.bases))?;
    let mut m = RunManifest::new("train-shared", &json!({ "experiment": cfg, "pipelines": names }), Some(cfg.seed))?;
    m.inputs = vec![a.input];
    m.outputs = vec![results, folds, curves];
    m.write(&a.out)?;
    print_means(&run.results);
    Ok(())
}

fn source_key(s: Source) -> SourceKey {
    match s {
        Source::None => SourceKey::None,
        Source::Ea => SourceKey::Euclidean,
        Source::Ra => SourceKey::Riemannian,
    }
}

/// Everything about an individual-model run except the weights, which live
/// in per-subject checkpoints.
#[derive(Serialize, Deserialize)]
struct IndividualIndex {
    source: SourceKey,
    config: ExperimentConfig,
    failed: Vec<u32>,
    report: TransferReport,
    models: Vec<IndexEntry>,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    subject: u32,
    self_accuracy: f64,
    checkpoint: String,
    history: TrainHistory,
}

const INDEX_FILE: &str = "individual.json";

pub fn train_individual(a: TrainIndividualArgs, file: &FileConfig) -> Result<(), CliError> {
    let cfg = experiment(&a.train, file)?;
    let source = source_key(a.source);
    let ds = load_dataset(&a.input)?;
    let run = run_individual_models(&ds, source, &cfg)?;
    let ckpt_dir = a.out.join("checkpoints");
    create_dir(&ckpt_dir)?;
    let mut outputs = Vec::new();
    let mut entries = Vec::new();
    for m in &run.models {
        let name = format!("subject_{:03}.ckpt", m.subject);
        let path = ckpt_dir.join(&name);
        save_checkpoint(&m.model, cfg.seed, &path)?;
        outputs.push(path);
        entries.push(IndexEntry {
            subject: m.subject,
            self_accuracy: m.self_accuracy,
            checkpoint: format!("checkpoints/{name}"),
            history: m.history.clone(),
        });
    }
    let index = IndividualIndex {
        source,
        config: cfg.clone(),
        failed: run.failed.clone(),
        report: run.report.clone(),
        models: entries,
    };
    let index_path = a.out.join(INDEX_FILE);
    write_json(&index_path, &index)?;

    let r = &run.report;
    let mut transfer = String::from("donor,receiver,accuracy\n");
    for (i, s) in r.subjects.iter().enumerate() {
        for (j, t) in r.subjects.iter().enumerate() {
            transfer.push_str(&format!("{s},{t},{}\n", r.acc[(i, j)]));
        }
    }
    let transfer_path = a.out.join("transfer.csv");
    write_text(&transfer_path, &transfer)?;
    outputs.push(index_path);
    outputs.push(transfer_path);

    let mut m = RunManifest::new("train-individual", &json!({ "experiment": cfg, "source": source }), Some(cfg.seed))?;
    m.inputs = vec![a.input];
    m.outputs = outputs;
    m.write(&a.out)?;
    println!(
        "{} models, mean transferability {:.2}%",
        run.models.len(),
        100.0 * r.mean_transferability()
    );
    Ok(())
}

fn load_individual(dir: &Path) -> Result<(IndividualRun, ExperimentConfig), CliError> {
    let path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let index: IndividualIndex =
        serde_json::from_str(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
    let models = index
        .models
        .into_iter()
        .map(|e| {
            Ok(IndividualModel {
                subject: e.subject,
                model: load_checkpoint(dir.join(&e.checkpoint))?,
                history: e.history,
                self_accuracy: e.self_accuracy,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let run = IndividualRun {
        source: index.source,
        models,
        failed: index.failed,
        report: index.report,
    };
    Ok((run, index.config))
}

pub fn ensemble(a: EnsembleArgs, file: &FileConfig) -> Result<(), CliError> {
    let (run, stored) = load_individual(&a.models)?;
    let mut cfg = file.layer("experiment", stored)?;
    if let Some(g) = a.group_size {
        cfg.group_size = g;
    }
    cfg.validate().map_err(usage)?;
    let n = run.models.len();
    if a.k.iter().any(|&k| k == 0 || k >= n) {
        return Err(CliError::Usage(format!("ensemble sizes must lie in 1..{n}")));
    }
    let ds = load_dataset(&a.input)?;
    let ens = run_ensembles(&ds, &run, &a.k, !a.unweighted, &cfg)?;
    create_dir(&a.out)?;
    let results = a.out.join("results.csv");
    let folds = a.out.join("ensemble_folds.json");
    write_results_csv(&ens.results, &results)?;
    write_json(&folds, &ens.folds)?;
    let mut m = RunManifest::new(
        "ensemble",
        &json!({ "experiment": cfg, "k": a.k, "weighted": !a.unweighted }),
        Some(cfg.seed),
    )?;
    m.inputs = vec![a.input, a.models.join(INDEX_FILE)];
    m.outputs = vec![results, folds];
    m.write(&a.out)?;
    print_means(&ens.results);
    Ok(())
}

/// Concatenates result files; a pipeline may span files but each
/// (pipeline, subject) pair must appear once.
fn load_results(paths: &[PathBuf]) -> Result<Vec<PipelineResult>, CliError> {
    let mut merged: Vec<PipelineResult> = Vec::new();
    for p in paths {
        for r in read_results_csv(p)? {
            match merged.iter_mut().find(|m| m.pipeline == r.pipeline) {
                Some(m) => {
                    for s in r.per_subject {
                        if m.per_subject.iter().any(|x| x.subject == s.subject) {
                            return Err(CliError::Invalid(format!(
                                "{}: duplicate result for {} / subject {}",
                                p.display(),
                                m.pipeline,
                                s.subject
                            )));
                        }
                        m.per_subject.push(s);
                    }
                }
                None => merged.push(r),
            }
        }
    }
    if merged.is_empty() {
        return Err(CliError::Invalid("no results in the given files".into()));
    }
    Ok(merged)
}

fn matrix_csv(path: &Path, names: &[String], m: &covalign::Mat<f64>) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let io = |e: csv::Error| CliError::Io(format!("{}: {e}", path.display()));
    let mut header = vec![String::new()];
    header.extend(names.iter().cloned());
    w.write_record(&header).map_err(io)?;
    for (i, name) in names.iter().enumerate() {
        let mut row = vec![name.clone()];
        row.extend((0..names.len()).map(|j| m[(i, j)].to_string()));
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn stats(a: StatsArgs) -> Result<(), CliError> {
    let results = load_results(&a.results)?;
    let pairs = paired_accuracies(&results)?;
    let mode = match a.mode {
        PermMode::Auto => PermutationMode::Auto,
        PermMode::Exhaustive => PermutationMode::Exhaustive,
        PermMode::MonteCarlo => PermutationMode::MonteCarlo,
    };
    let sig = significance_matrix(&pairs, mode, a.n_perm, a.seed)?;
    create_dir(&a.out)?;
    let p_path = a.out.join("significance_p.csv");
    let smd_path = a.out.join("significance_smd.csv");
    let json_path = a.out.join("significance.json");
    matrix_csv(&p_path, &sig.names, &sig.p_values)?;
    matrix_csv(&smd_path, &sig.names, &sig.smd)?;
    write_json(&json_path, &sig)?;
    let mut m = RunManifest::new(
        "stats",
        &json!({ "mode": format!("{mode:?}"), "n_perm": a.n_perm, "seed": a.seed }),
        Some(a.seed),
    )?;
    m.inputs = a.results;
    m.outputs = vec![p_path, smd_path, json_path];
    m.write(&a.out)
}

#[derive(Debug, Deserialize)]
struct CurveRow {
    #[allow(dead_code)]
    target: u32,
    source: String,
    epoch: usize,
    train_loss: f64,
    val_loss: f64,
    val_acc: f64,
}

/// Mean learning curve per source alignment across folds. Folds stop at
/// different epochs, so `n_folds` shrinks along the curve.
fn mean_curves(paths: &[PathBuf]) -> Result<String, CliError> {
    let mut acc: BTreeMap<(String, usize), (usize, f64, f64, f64)> = BTreeMap::new();
    for p in paths {
        let mut rdr = csv::Reader::from_path(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
        for row in rdr.deserialize() {
            let r: CurveRow = row.map_err(|e| CliError::Invalid(format!("{}: {e}", p.display())))?;
            let slot = acc.entry((r.source, r.epoch)).or_insert((0, 0.0, 0.0, 0.0));
            slot.0 += 1;
            slot.1 += r.train_loss;
            slot.2 += r.val_loss;
            slot.3 += r.val_acc;
        }
    }
    let mut out = String::from("source,epoch,n_folds,train_loss,val_loss,val_acc\n");
    for ((source, epoch), (n, tl, vl, va)) in acc {
        let k = n as f64;
        out.push_str(&format!("{source},{epoch},{n},{},{},{}\n", tl / k, vl / k, va / k));
    }
    Ok(out)
}

pub fn report(a: ReportArgs) -> Result<(), CliError> {
    let results = load_results(&a.results)?;
    let summary = summarize(&results);
    create_dir(&a.out)?;

    let mut table = String::from("pipeline,n,mean,std\n");
    let mut md = String::from("| Pipeline | Subjects | Accuracy (%) |\n|---|---|---|\n");
    for s in &summary {
        table.push_str(&format!("{},{},{},{}\n", s.pipeline, s.n, s.mean, s.std));
        md.push_str(&format!("| {} | {} | {:.2} ± {:.2} |\n", s.pipeline, s.n, 100.0 * s.mean, 100.0 * s.std));
    }
    let table_path = a.out.join("table.csv");
    let md_path = a.out.join("table.md");
    let dist_path = a.out.join("distributions.csv");
    write_text(&table_path, &table)?;
    write_text(&md_path, &md)?;
    write_results_csv(&results, &dist_path)?;
    let mut outputs = vec![table_path, md_path, dist_path];
    if !a.curves.is_empty() {
        let path = a.out.join("curves_mean.csv");
        write_text(&path, &mean_curves(&a.curves)?)?;
        outputs.push(path);
    }
    let mut m = RunManifest::new("report", &json!({ "results": a.results, "curves": a.curves }), None)?;
    m.inputs = a.results.iter().chain(&a.curves).cloned().collect();
    m.outputs = outputs;
    m.write(&a.out)?;
    print!("{md}");
    Ok(())
}
