use std::fs;
use std::path::{Path, PathBuf};

use fastsep::eval::{
    accuracy_table, bss_eval_with, per_scene_table, runtime_report, score_table, SceneScores, Table,
};
use fastsep::models::NeuralBundle;
use fastsep::room::{save_corpus, toy_corpus, toy_scene, Scene, ToyCorpusConfig};
use fastsep::separation::{separate, Method, PipelineOutput, SeparationTrace};
use fastsep::signal::{read_wav, write_wav, SampleFormat, Waveform};
use log::info;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::CliError;

fn required<'a>(value: &'a Option<PathBuf>, what: &str) -> Result<&'a PathBuf, CliError> {
    value
        .as_ref()
        .ok_or_else(|| CliError::Usage(format!("{what} is required")))
}

fn load_model(config: &RunConfig, methods: &[Method]) -> Result<Option<NeuralBundle>, CliError> {
    if !methods.contains(&Method::Fmvae) {
        return Ok(None);
    }
    let path = config
        .model
        .as_ref()
        .ok_or_else(|| CliError::Usage("--model is required for the fmvae method".into()))?;
    let bundle = NeuralBundle::load(path).map_err(|e| CliError::Model(format!("{}: {e}", path.display())))?;
    let bins = config.stft_config()?.num_bins();
    if bundle.freq_bins != bins {
        return Err(CliError::Model(format!(
            "{} expects {} frequency bins but the STFT settings give {bins}",
            path.display(),
            bundle.freq_bins
        )));
    }
    Ok(Some(bundle))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_table(dir: &Path, stem: &str, table: &Table) -> Result<(), CliError> {
    write_text(&dir.join(format!("{stem}.csv")), &table.to_csv())?;
    write_text(&dir.join(format!("{stem}.txt")), &table.to_text())
}

fn write_trace(path: &Path, trace: &SeparationTrace) -> Result<(), CliError> {
    write_text(path, &trace.to_jsonl())
}

/// Scene directories named `scene_<k>`, one per seed `seed + k`.
pub fn simulate(config: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let out = required(&config.output, "--out")?;
    let layout = config.layout()?;
    let sim = &config.simulation;
    config.write_resolved(out)?;
    let dirs: Vec<PathBuf> = (0..sim.scenes).map(|k| out.join(format!("scene_{k:03}"))).collect();
    dirs.par_iter()
        .enumerate()
        .try_for_each(|(k, dir)| -> Result<(), CliError> {
            let scene = toy_scene(
                &layout,
                sim.rt60,
                sim.classes,
                sim.duration,
                config.sample_rate,
                config.seed + k as u64,
            )?;
            scene.save(dir)?;
            info!("wrote {} (labels {:?})", dir.display(), scene.labels);
            Ok(())
        })?;
    Ok(dirs)
}

fn mixture_path(input: &Path) -> PathBuf {
    if input.is_dir() {
        input.join("mixture.wav")
    } else {
        input.to_path_buf()
    }
}

pub fn separate_cmd(config: &RunConfig) -> Result<PipelineOutput, CliError> {
    let method = config.separation.method;
    let bundle = load_model(config, &[method])?;
    let input = required(&config.input, "--input")?;
    let out = required(&config.output, "--out")?;
    let path = mixture_path(input);
    let mixture = read_wav(&path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    if mixture.sample_rate() != config.sample_rate {
        return Err(CliError::Input(format!(
            "{} is sampled at {} Hz, configuration says {}",
            path.display(),
            mixture.sample_rate(),
            config.sample_rate
        )));
    }
    let result = separate(&mixture, bundle.as_ref(), &config.pipeline(method)?)?;
    config.write_resolved(out)?;
    for (j, ch) in result.estimates.channels().iter().enumerate() {
        let wav = Waveform::mono(ch.clone(), mixture.sample_rate())?;
        let p = out.join(format!("est{j}.wav"));
        write_wav(&p, &wav, SampleFormat::Float32)?;
    }
    write_trace(&out.join("trace.jsonl"), &result.trace)?;
    if let Some(init) = &result.init_trace {
        write_trace(&out.join("init_trace.jsonl"), init)?;
    }
    if let Some(steps) = &result.steps {
        write_text(
            &out.join("steps.json"),
            &serde_json::to_string_pretty(steps).expect("counts serialize"),
        )?;
    }
    Ok(result)
}

/// Subdirectories of `root` holding a `scene.json`, sorted by name.
pub fn scene_dirs(root: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| CliError::io(root, e))?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.join("scene.json").is_file())
        .collect();
    if root.join("scene.json").is_file() {
        dirs.push(root.to_path_buf());
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(CliError::Input(format!("no scene directories under {}", root.display())));
    }
    Ok(dirs)
}

pub struct Evaluation {
    pub summary: Table,
    pub accuracy: Table,
    pub runtime: Table,
}

struct SceneResult {
    name: String,
    method: Method,
    scores: fastsep::eval::BssScores,
    trace: SeparationTrace,
    labels: Vec<usize>,
}

pub fn evaluate(config: &RunConfig) -> Result<Evaluation, CliError> {
    let methods = config.evaluation.methods.clone();
    let bundle = load_model(config, &methods)?;
    let root = required(&config.input, "--scenes")?;
    let out = config.output.clone().unwrap_or_else(|| root.join("results"));
    let dirs = scene_dirs(root)?;
    let reference = config.separation.reference_channel;
    let jobs: Vec<(PathBuf, Method)> = dirs
        .iter()
        .flat_map(|d| methods.iter().map(move |&m| (d.clone(), m)))
        .collect();
    let results: Vec<SceneResult> = jobs
        .par_iter()
        .map(|(dir, method)| -> Result<SceneResult, CliError> {
            let scene = Scene::load(dir)?;
            let sep = separate(&scene.mixture, bundle.as_ref(), &config.pipeline(*method)?)?;
            let scores = bss_eval_with(
                sep.estimates.channels(),
                &scene.references(reference),
                config.evaluation.filter_length,
            )?;
            let name = dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into());
            info!("{name} {method}: SDR {:.2?}", scores.sdr);
            Ok(SceneResult {
                name,
                method: *method,
                scores,
                trace: sep.trace,
                labels: scene.labels,
            })
        })
        .collect::<Result<_, _>>()?;

    config.write_resolved(&out)?;
    let traces_dir = out.join("traces");
    fs::create_dir_all(&traces_dir).map_err(|e| CliError::io(&traces_dir, e))?;
    for r in &results {
        write_trace(&traces_dir.join(format!("{}_{}.jsonl", r.name, r.method)), &r.trace)?;
    }
    let scores: Vec<SceneScores> = results
        .iter()
        .map(|r| SceneScores {
            scene: r.name.clone(),
            method: r.method.to_string(),
            scores: r.scores.clone(),
        })
        .collect();
    let summary = score_table(&scores);
    let with_classes: Vec<(String, &SeparationTrace, Vec<usize>, Vec<usize>)> = results
        .iter()
        .filter(|r| r.trace.records.iter().any(|rec| !rec.class_posteriors.is_empty()))
        .map(|r| (r.method.to_string(), &r.trace, r.labels.clone(), r.scores.permutation.clone()))
        .collect();
    let accuracy = accuracy_table(&with_classes)?;
    let runtime = runtime_report(&results.iter().map(|r| &r.trace).collect::<Vec<_>>());
    write_table(&out, "summary", &summary)?;
    write_table(&out, "scores", &per_scene_table(&scores))?;
    write_table(&out, "accuracy", &accuracy)?;
    write_table(&out, "runtime", &runtime)?;
    Ok(Evaluation {
        summary,
        accuracy,
        runtime,
    })
}

pub fn inspect_model(path: &Path) -> Result<serde_json::Value, CliError> {
    let bundle = NeuralBundle::load(path).map_err(|e| CliError::Model(format!("{}: {e}", path.display())))?;
    Ok(bundle.describe())
}

pub fn corpus(config: &RunConfig) -> Result<usize, CliError> {
    let out = required(&config.output, "--out")?;
    let c = &config.corpus;
    let cfg = ToyCorpusConfig {
        classes: c.classes,
        utterances_per_class: c.utterances_per_class,
        duration: c.duration,
        sample_rate: config.sample_rate,
        seed: config.seed,
    };
    let utterances = toy_corpus(&cfg)?;
    save_corpus(out, &utterances, config.sample_rate)?;
    config.write_resolved(out)?;
    Ok(utterances.len())
}
