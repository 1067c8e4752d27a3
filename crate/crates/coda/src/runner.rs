//! Experiment orchestration: deterministic data preparation, training loops
//! with CSV metric logs, evaluation, JSD analysis, head-count sweeps and the
//! four-variant ablation preset.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::analysis::{avg_jsd_report, write_heatmap_csv, write_report_summary, DiversityReport};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{ExperimentConfig, TaskKind};
use crate::data::{ingest_corpus, ingest_tsv, lm_batches, seq2seq_batches, synth_task};
use crate::model::{generate_greedy, Architecture, ModelConfig, ModelParams, VariantKind, EOS_ID};
use crate::training::{evaluate_perplexity, train_step, Batch, TrainState};
use crate::{Error, Result};

/// Everything a training or analysis run needs, derived deterministically
/// from (config, seed).
pub struct TaskData {
    pub model_cfg: ModelConfig,
    pub train_batches: Vec<Batch>,
    pub valid_batches: Vec<Batch>,
    /// Raw (source, target) pairs for greedy-decode accuracy, seq2seq only.
    pub valid_pairs: Vec<(Vec<usize>, Vec<usize>)>,
}

pub fn prepare_task(cfg: &ExperimentConfig, seed: u64) -> Result<TaskData> {
    prepare_task_with(cfg, cfg.variant, seed, cfg.heads, cfg.d_model)
}

fn prepare_task_with(
    cfg: &ExperimentConfig,
    variant: VariantKind,
    seed: u64,
    heads: usize,
    d_model: usize,
) -> Result<TaskData> {
    let build_cfg = |vocab: usize| -> ModelConfig {
        let mut mc = cfg.model_config(vocab);
        mc.variant = variant;
        mc.heads = heads;
        mc.d_model = d_model;
        mc.seed = seed;
        mc
    };
    match cfg.task {
        TaskKind::Copy | TaskKind::Reverse => {
            let kind = cfg.task.synth_kind().expect("synthetic task");
            let range = (cfg.synth_min_len, cfg.synth_max_len);
            let train = synth_task(kind, cfg.vocab, range, cfg.synth_count, seed)?;
            let valid = synth_task(kind, cfg.vocab, range, 64, seed ^ 0x5EED_5EED)?;
            let model_cfg = build_cfg(cfg.vocab);
            Ok(TaskData {
                model_cfg,
                train_batches: seq2seq_batches(&train, cfg.batch_size),
                valid_batches: seq2seq_batches(&valid, cfg.batch_size),
                valid_pairs: valid,
            })
        }
        TaskKind::LmText => {
            let path = cfg.data_path.as_ref().expect("validated");
            let corpus = ingest_corpus(path, cfg.tokenizer)?;
            let model_cfg = build_cfg(corpus.vocab.len());
            Ok(TaskData {
                model_cfg,
                train_batches: lm_batches(&corpus.train, cfg.seq_len, cfg.batch_size),
                valid_batches: lm_batches(&corpus.valid, cfg.seq_len, cfg.batch_size),
                valid_pairs: Vec::new(),
            })
        }
        TaskKind::Seq2SeqTsv => {
            let path = cfg.data_path.as_ref().expect("validated");
            let corpus = ingest_tsv(path, cfg.tokenizer)?;
            let model_cfg = build_cfg(corpus.vocab.len());
            Ok(TaskData {
                model_cfg,
                train_batches: seq2seq_batches(&corpus.train, cfg.batch_size),
                valid_batches: seq2seq_batches(&corpus.valid, cfg.batch_size),
                valid_pairs: corpus.valid,
            })
        }
    }
}

/// Fraction of target tokens (target followed by EOS) reproduced by greedy
/// decoding, over at most `limit` pairs.
pub fn token_accuracy(
    cfg: &ModelConfig,
    params: &ModelParams,
    pairs: &[(Vec<usize>, Vec<usize>)],
    limit: usize,
) -> Result<f64> {
    let mut matched = 0usize;
    let mut total = 0usize;
    for (src, tgt) in pairs.iter().take(limit.max(1)) {
        let mut expected = tgt.clone();
        expected.push(EOS_ID);
        let out = generate_greedy(cfg, params, src, expected.len())?;
        for (i, &want) in expected.iter().enumerate() {
            total += 1;
            if out.get(i) == Some(&want) {
                matched += 1;
            }
        }
    }
    Ok(matched as f64 / total.max(1) as f64)
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub model_cfg: ModelConfig,
    pub steps: u64,
    pub final_loss: f64,
    /// Validation PPL (lm) or greedy token accuracy (seq2seq).
    pub final_metric: f64,
    pub checkpoint: Option<PathBuf>,
}

fn eval_metric(task: &TaskData, params: &ModelParams) -> Result<f64> {
    match task.model_cfg.architecture {
        Architecture::Lm => evaluate_perplexity(&task.model_cfg, params, &task.valid_batches),
        Architecture::Seq2Seq => {
            token_accuracy(&task.model_cfg, params, &task.valid_pairs, 32)
        }
    }
}

/// Core training loop. When `out_dir` is set, writes an append-only
/// `metrics.csv` and periodic checkpoints there.
pub fn train_loop(
    cfg: &ExperimentConfig,
    task: &TaskData,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut state = TrainState::new(&task.model_cfg, seed)?;
    let train_cfg = cfg.train_config();
    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
            let path = dir.join("metrics.csv");
            let mut f = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| io_err(&path, e))?;
            if f.metadata().map(|m| m.len() == 0).unwrap_or(true) {
                writeln!(f, "step,loss,grad_norm,wall_time").map_err(|e| io_err(&path, e))?;
            }
            Some((f, path))
        }
        None => None,
    };
    let started = Instant::now();
    let mut final_loss = f64::NAN;
    let mut stop = false;
    let checkpoint_path = out_dir.map(|d| d.join("checkpoint.ckpt"));
    while state.step < cfg.max_steps && !stop {
        let batch = &task.train_batches[(state.step as usize) % task.train_batches.len()];
        let metrics = train_step(&mut state, &task.model_cfg, &train_cfg, batch)?;
        final_loss = metrics.loss;
        if let Some((f, path)) = log.as_mut() {
            writeln!(
                f,
                "{},{:.6},{:.6},{:.3}",
                state.step,
                metrics.loss,
                metrics.grad_norm,
                started.elapsed().as_secs_f64()
            )
            .map_err(|e| io_err(path, e))?;
        }
        if state.step % cfg.eval_interval == 0 || state.step == cfg.max_steps {
            if let Some(path) = &checkpoint_path {
                save_checkpoint(&state, path)?;
            }
            if let Some(target) = cfg.stop_accuracy {
                if task.model_cfg.architecture == Architecture::Seq2Seq {
                    let acc =
                        token_accuracy(&task.model_cfg, &state.params, &task.valid_pairs, 32)?;
                    if acc >= target {
                        stop = true;
                    }
                }
            }
        }
    }
    let final_metric = eval_metric(task, &state.params)?;
    if let Some(path) = &checkpoint_path {
        save_checkpoint(&state, path)?;
    }
    Ok(TrainOutcome {
        steps: state.step,
        state,
        model_cfg: task.model_cfg.clone(),
        final_loss,
        final_metric,
        checkpoint: checkpoint_path,
    })
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.display().to_string(), source }
}

/// Creates the `.incomplete` sentinel, runs `f`, removes the sentinel on
/// success. Partial artifacts stay flagged on failure.
fn with_sentinel<T>(dir: &Path, f: impl FnOnce() -> Result<T>) -> Result<T> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let sentinel = dir.join(".incomplete");
    fs::write(&sentinel, b"").map_err(|e| io_err(&sentinel, e))?;
    let out = f()?;
    fs::remove_file(&sentinel).map_err(|e| io_err(&sentinel, e))?;
    Ok(out)
}

pub fn run_train(cfg: &ExperimentConfig, seed: u64) -> Result<TrainOutcome> {
    let out_dir = cfg.out_dir.clone();
    with_sentinel(&out_dir, || {
        let task = prepare_task(cfg, seed)?;
        let outcome = train_loop(cfg, &task, seed, Some(&out_dir))?;
        let metric_name = match task.model_cfg.architecture {
            Architecture::Lm => "val_ppl",
            Architecture::Seq2Seq => "token_accuracy",
        };
        println!(
            "trained {} for {} steps: loss {:.4}, {} {:.4}",
            task.model_cfg.variant.name(),
            outcome.steps,
            outcome.final_loss,
            metric_name,
            outcome.final_metric
        );
        Ok(outcome)
    })
}

pub fn run_eval(cfg: &ExperimentConfig, checkpoint: &Path, seed: u64) -> Result<f64> {
    let task = prepare_task(cfg, seed)?;
    if !checkpoint.exists() {
        return Err(Error::Checkpoint(format!(
            "checkpoint not found: {}",
            checkpoint.display()
        )));
    }
    let state = load_checkpoint(checkpoint, &task.model_cfg)?;
    let metric = eval_metric(&task, &state.params)?;
    match task.model_cfg.architecture {
        Architecture::Lm => println!("val_ppl {metric:.6}"),
        Architecture::Seq2Seq => println!("token_accuracy {metric:.6}"),
    }
    Ok(metric)
}

pub fn run_analyze(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    seed: u64,
) -> Result<DiversityReport> {
    let out_dir = cfg.out_dir.clone();
    with_sentinel(&out_dir, || {
        let task = prepare_task(cfg, seed)?;
        let params = match checkpoint {
            Some(path) => {
                if !path.exists() {
                    return Err(Error::Checkpoint(format!(
                        "checkpoint not found: {}",
                        path.display()
                    )));
                }
                load_checkpoint(path, &task.model_cfg)?.params
            }
            None => TrainState::new(&task.model_cfg, seed)?.params,
        };
        let report = avg_jsd_report(&task.model_cfg, &params, &task.valid_batches, cfg.row_mode)?;
        for mat in &report.matrices {
            write_heatmap_csv(&out_dir, mat)?;
        }
        write_report_summary(&out_dir, &report, cfg.hash())?;
        println!("avg_jsd {:.6} over {} samples", report.avg_jsd, report.sample_count);
        Ok(report)
    })
}

#[derive(Debug, Clone)]
pub struct SweepCell {
    pub variant: VariantKind,
    pub heads: usize,
    pub d_model: usize,
    pub params_total: usize,
    pub final_metric: f64,
    pub avg_jsd: f64,
}

/// Head-count sweep. With `constant_budget` the model width stays fixed so
/// the per-head dimension shrinks as the head count grows; otherwise the
/// per-head dimension is held constant and width scales.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    heads_list: &[usize],
    constant_budget: bool,
) -> Result<Vec<SweepCell>> {
    for &h in heads_list {
        let d_model = if constant_budget { cfg.d_model } else { h * (cfg.d_model / cfg.heads) };
        if h == 0 || d_model % h != 0 {
            return Err(Error::Config(format!(
                "heads {h} does not divide d_model {d_model}"
            )));
        }
    }
    let out_dir = cfg.out_dir.clone();
    with_sentinel(&out_dir, || {
        let seed = cfg.seeds[0];
        let mut cells = Vec::new();
        for &h in heads_list {
            let d_model =
                if constant_budget { cfg.d_model } else { h * (cfg.d_model / cfg.heads) };
            for variant in VariantKind::ALL {
                let task = prepare_task_with(cfg, variant, seed, h, d_model)?;
                let outcome = train_loop(cfg, &task, seed, None)?;
                let report = avg_jsd_report(
                    &task.model_cfg,
                    &outcome.state.params,
                    &task.valid_batches,
                    cfg.row_mode,
                )?;
                cells.push(SweepCell {
                    variant,
                    heads: h,
                    d_model,
                    params_total: outcome.state.params.total_scalars(),
                    final_metric: outcome.final_metric,
                    avg_jsd: report.avg_jsd,
                });
            }
        }
        let path = out_dir.join("sweep.csv");
        let mut body = String::from("variant,heads,d_model,params,final_metric,avg_jsd\n");
        for c in &cells {
            body.push_str(&format!(
                "{},{},{},{},{:.6},{:.6}\n",
                c.variant.name(),
                c.heads,
                c.d_model,
                c.params_total,
                c.final_metric,
                c.avg_jsd
            ));
        }
        fs::write(&path, body).map_err(|e| io_err(&path, e))?;
        Ok(cells)
    })
}

#[derive(Debug, Clone)]
pub struct AblateCell {
    pub variant: VariantKind,
    pub seed: u64,
    pub final_metric: f64,
    pub avg_jsd: f64,
}

/// The four-variant ablation preset: shared data, seeds and budget.
pub fn run_ablate(cfg: &ExperimentConfig) -> Result<Vec<AblateCell>> {
    let out_dir = cfg.out_dir.clone();
    with_sentinel(&out_dir, || {
        let mut cells = Vec::new();
        for variant in VariantKind::ALL {
            for &seed in &cfg.seeds {
                let task = prepare_task_with(cfg, variant, seed, cfg.heads, cfg.d_model)?;
                let outcome = train_loop(cfg, &task, seed, None)?;
                let report = avg_jsd_report(
                    &task.model_cfg,
                    &outcome.state.params,
                    &task.valid_batches,
                    cfg.row_mode,
                )?;
                println!(
                    "ablate {} seed {}: metric {:.4}, avg_jsd {:.4}",
                    variant.name(),
                    seed,
                    outcome.final_metric,
                    report.avg_jsd
                );
                cells.push(AblateCell {
                    variant,
                    seed,
                    final_metric: outcome.final_metric,
                    avg_jsd: report.avg_jsd,
                });
            }
        }
        let path = out_dir.join("ablate.csv");
        let mut body = String::from("variant,seed,final_metric,avg_jsd\n");
        for c in &cells {
            body.push_str(&format!(
                "{},{},{:.6},{:.6}\n",
                c.variant.name(),
                c.seed,
                c.final_metric,
                c.avg_jsd
            ));
        }
        fs::write(&path, body).map_err(|e| io_err(&path, e))?;
        Ok(cells)
    })
}
