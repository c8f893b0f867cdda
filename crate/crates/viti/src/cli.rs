//! The `viti` command line: data generation, model/probe training,
//! generation, evaluation, analysis, and report emission.
//!
//! Configuration precedence is flags > config file > built-in defaults.
//! The config file is flat TOML; every key mirrors a flag name. Artifacts
//! are written atomically and embed the resolved configuration plus a
//! format version. Exit codes: 0 success, 2 configuration/usage error,
//! 3 incompatible file version, 1 anything else.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::analysis::{
    ablation_suite, bench_prompts, overhead_benchmark, sweep, theorem1_check,
};
use crate::artifact::{write_csv, write_json, REPORT_FORMAT_VERSION};
use crate::error::{Result, VitiError};
use crate::perturb::{build_probe_dataset, load_probe_dataset, save_probe_dataset, NoiseSchedule};
use crate::runtime::{load_model, save_model, Model, ModelConfig, Prompt, VisualSpan};
use crate::synthtask::{
    eval_task, gen_dataset, load_dataset, save_dataset, train_toy_model, DatasetHeader,
    Perturbation, TaskConfig, TrainHyper, GRID_CELLS,
};
use crate::vnd::{load_bank, save_bank, train_probe_bank, ProbeBank, ProbeHyper};
use crate::vri::{viti_generate, InterventionConfig, VitiIntervenor};

/// Flat configuration file / override set. Any key may be omitted.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub out_dir: Option<PathBuf>,
    // intervention
    pub alpha0: Option<f32>,
    pub beta: Option<f64>,
    pub gate_threshold: Option<f32>,
    pub epsilon: Option<f32>,
    // noise schedule
    pub noise_total_steps: Option<usize>,
    pub noise_beta_start: Option<f64>,
    pub noise_beta_end: Option<f64>,
    // model dimensions
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub head_dim: Option<usize>,
    pub ffn_mult: Option<usize>,
    pub vocab_size: Option<usize>,
    pub max_seq: Option<usize>,
    // trainer
    pub lr: Option<f64>,
    pub epochs: Option<usize>,
    pub batch: Option<usize>,
    pub stop_acc: Option<f64>,
    pub gold_frac: Option<f64>,
    pub gold_tmax: Option<usize>,
    pub abstain_frac: Option<f64>,
    pub abstain_tmin: Option<usize>,
    pub unsure_weight: Option<f32>,
    pub modality_offset: Option<f32>,
    // probes
    pub probe_lr: Option<f64>,
    pub probe_epochs: Option<usize>,
    pub probe_l2: Option<f64>,
    pub probe_samples: Option<usize>,
    pub probe_mix: Option<f64>,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path)?;
        toml::from_str(&body).map_err(|e| VitiError::config("config", e.to_string()))
    }

    /// Overlay: any value present in `over` wins.
    pub fn overlaid(&self, over: &RunConfig) -> RunConfig {
        macro_rules! pick {
            ($($f:ident),* $(,)?) => {
                RunConfig { $($f: over.$f.clone().or_else(|| self.$f.clone())),* }
            };
        }
        pick!(
            seed, workers, out_dir, alpha0, beta, gate_threshold, epsilon, noise_total_steps,
            noise_beta_start, noise_beta_end, layers, heads, head_dim, ffn_mult, vocab_size,
            max_seq, lr, epochs, batch, stop_acc, gold_frac, gold_tmax, abstain_frac,
            abstain_tmin, unsure_weight, modality_offset, probe_lr, probe_epochs, probe_l2,
            probe_samples, probe_mix,
        )
    }
}

/// Fully resolved settings embedded into every artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Resolved {
    pub seed: u64,
    pub workers: usize,
    pub intervention: InterventionConfig,
    pub schedule: NoiseSchedule,
    pub model: ModelConfig,
    pub train: TrainHyper,
    pub probes: ProbeHyper,
    pub probe_samples: usize,
    pub probe_mix: f64,
}

/// Default toy model dimensions: shallow and head-rich so the top-beta
/// selection lands on the heads that read the scene at the answer pass.
pub fn default_model_config() -> ModelConfig {
    ModelConfig {
        layers: 2,
        heads: 10,
        head_dim: 8,
        ffn_mult: 4,
        vocab_size: crate::synthtask::vocab::VOCAB_SIZE,
        max_seq: 64,
    }
}

pub fn resolve(cfg: &RunConfig) -> Resolved {
    let seed = cfg.seed.unwrap_or(0);
    let base_model = default_model_config();
    let model = ModelConfig {
        layers: cfg.layers.unwrap_or(base_model.layers),
        heads: cfg.heads.unwrap_or(base_model.heads),
        head_dim: cfg.head_dim.unwrap_or(base_model.head_dim),
        ffn_mult: cfg.ffn_mult.unwrap_or(base_model.ffn_mult),
        vocab_size: cfg.vocab_size.unwrap_or(base_model.vocab_size),
        max_seq: cfg.max_seq.unwrap_or(base_model.max_seq),
    };
    let schedule = NoiseSchedule {
        total_steps: cfg.noise_total_steps.unwrap_or(1000),
        beta_start: cfg.noise_beta_start.unwrap_or(1e-4),
        beta_end: cfg.noise_beta_end.unwrap_or(NoiseSchedule::default().beta_end),
    };
    let train_default = TrainHyper::default();
    let train = TrainHyper {
        lr: cfg.lr.unwrap_or(train_default.lr),
        epochs: cfg.epochs.unwrap_or(train_default.epochs),
        batch: cfg.batch.unwrap_or(train_default.batch),
        seed,
        stop_acc: cfg.stop_acc.unwrap_or(train_default.stop_acc),
        gold_frac: cfg.gold_frac.unwrap_or(train_default.gold_frac),
        gold_tmax: cfg.gold_tmax.unwrap_or(train_default.gold_tmax),
        abstain_frac: cfg.abstain_frac.unwrap_or(train_default.abstain_frac),
        abstain_tmin: cfg.abstain_tmin.unwrap_or(train_default.abstain_tmin),
        unsure_weight: cfg.unsure_weight.unwrap_or(train_default.unsure_weight),
        modality_offset: cfg.modality_offset.unwrap_or(train_default.modality_offset),
    };
    let probe_default = ProbeHyper::default();
    let probes = ProbeHyper {
        lr: cfg.probe_lr.unwrap_or(probe_default.lr),
        epochs: cfg.probe_epochs.unwrap_or(probe_default.epochs),
        l2: cfg.probe_l2.unwrap_or(probe_default.l2),
        split_ratio: probe_default.split_ratio,
        seed,
    };
    Resolved {
        seed,
        workers: cfg.workers.unwrap_or(1),
        intervention: InterventionConfig {
            alpha0: cfg.alpha0.unwrap_or(0.20),
            beta: cfg.beta.unwrap_or(0.10),
            gate_threshold: cfg.gate_threshold.unwrap_or(0.5),
            epsilon: cfg.epsilon.unwrap_or(crate::vri::DEFAULT_EPSILON),
        },
        schedule,
        model,
        train,
        probes,
        probe_samples: cfg.probe_samples.unwrap_or(800),
        probe_mix: cfg.probe_mix.unwrap_or(0.5),
    }
}

// ---------------------------------------------------------------------------
// Command definitions
// ---------------------------------------------------------------------------

#[derive(Debug, Parser)]
#[command(name = "viti", about = "Visual inference-time intervention lab", version)]
pub struct Cli {
    /// Flat TOML config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by most subcommands; each maps to a RunConfig key.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub alpha0: Option<f32>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gate_threshold: Option<f32>,
    #[arg(long)]
    pub epsilon: Option<f32>,
    #[arg(long)]
    pub noise_total_steps: Option<usize>,
    #[arg(long)]
    pub noise_beta_start: Option<f64>,
    #[arg(long)]
    pub noise_beta_end: Option<f64>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub head_dim: Option<usize>,
    #[arg(long)]
    pub ffn_mult: Option<usize>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub max_seq: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub stop_acc: Option<f64>,
    #[arg(long)]
    pub gold_frac: Option<f64>,
    #[arg(long)]
    pub gold_tmax: Option<usize>,
    #[arg(long)]
    pub abstain_frac: Option<f64>,
    #[arg(long)]
    pub abstain_tmin: Option<usize>,
    #[arg(long)]
    pub unsure_weight: Option<f32>,
    #[arg(long)]
    pub modality_offset: Option<f32>,
    #[arg(long)]
    pub probe_lr: Option<f64>,
    #[arg(long)]
    pub probe_epochs: Option<usize>,
    #[arg(long)]
    pub probe_l2: Option<f64>,
    #[arg(long)]
    pub probe_samples: Option<usize>,
    #[arg(long)]
    pub probe_mix: Option<f64>,
}

impl Overrides {
    fn as_config(&self) -> RunConfig {
        RunConfig {
            seed: self.seed,
            workers: self.workers,
            out_dir: None,
            alpha0: self.alpha0,
            beta: self.beta,
            gate_threshold: self.gate_threshold,
            epsilon: self.epsilon,
            noise_total_steps: self.noise_total_steps,
            noise_beta_start: self.noise_beta_start,
            noise_beta_end: self.noise_beta_end,
            layers: self.layers,
            heads: self.heads,
            head_dim: self.head_dim,
            ffn_mult: self.ffn_mult,
            vocab_size: self.vocab_size,
            max_seq: self.max_seq,
            lr: self.lr,
            epochs: self.epochs,
            batch: self.batch,
            stop_acc: self.stop_acc,
            gold_frac: self.gold_frac,
            gold_tmax: self.gold_tmax,
            abstain_frac: self.abstain_frac,
            abstain_tmin: self.abstain_tmin,
            unsure_weight: self.unsure_weight,
            modality_offset: self.modality_offset,
            probe_lr: self.probe_lr,
            probe_epochs: self.probe_epochs,
            probe_l2: self.probe_l2,
            probe_samples: self.probe_samples,
            probe_mix: self.probe_mix,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a QA dataset file.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        size: usize,
        #[arg(long, default_value_t = 0.6)]
        mix_existence: f64,
        #[arg(long, default_value_t = 0.2)]
        mix_color: f64,
        #[arg(long, default_value_t = 0.2)]
        mix_count: f64,
        #[arg(long, default_value_t = true)]
        adversarial: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train the toy model on a dataset and write a checkpoint.
    TrainModel {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train head probes from a probe dataset (building it first when the
    /// file does not exist, which requires --model and --data).
    TrainProbes {
        /// Probe dataset file; created when missing.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Decode prompts with the intervention and write a trace report.
    Generate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        probes: PathBuf,
        #[arg(long)]
        prompt_file: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 1)]
        max_new: usize,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Evaluate on a dataset, optionally perturbed and/or intervened.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        probes: Option<PathBuf>,
        /// Apply the intervention (requires --probes).
        #[arg(long, default_value_t = false)]
        intervene: bool,
        /// Gaussian noise step applied to eval inputs (0 = clean).
        #[arg(long, default_value_t = 0)]
        perturb_steps: usize,
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Empirical Theorem-1 check.
    Theorem1 {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        probes: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 8)]
        projections: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Cartesian sweep over alpha0 and beta.
    Sweep {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        probes: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated alpha0 values.
        #[arg(long, default_value = "0.0,0.05,0.1,0.2,0.3")]
        alpha0_grid: String,
        /// Comma-separated beta values.
        #[arg(long, default_value = "0.05,0.1,0.25,0.5,1.0")]
        beta_grid: String,
        /// Flat CSV output (alpha0,beta,score).
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Component ablation table.
    Ablate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        probes: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Latency overhead benchmark (V-ITI vs greedy).
    Bench {
        /// Checkpoint to benchmark; a random model is built when omitted.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        probes: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        repeats: usize,
        #[arg(long, default_value_t = 256)]
        context: usize,
        #[arg(long, default_value_t = 32)]
        max_new: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Pivot a sweep CSV into a heatmap-ready table (alpha0 rows, beta
    /// columns).
    Report {
        #[arg(long, name = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

// ---------------------------------------------------------------------------
// Report payloads
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
struct ReportEnvelope<T: Serialize> {
    format_version: u32,
    config: Resolved,
    #[serde(flatten)]
    body: T,
}

fn enveloped<T: Serialize>(resolved: &Resolved, body: T) -> ReportEnvelope<T> {
    ReportEnvelope {
        format_version: REPORT_FORMAT_VERSION,
        config: resolved.clone(),
        body,
    }
}

#[derive(Debug, Serialize)]
struct GenerateReportBody {
    prompts: usize,
    traces: Vec<TraceSummary>,
}

#[derive(Debug, Serialize)]
struct TraceSummary {
    tokens: Vec<u32>,
    gate_fires_per_step: Vec<usize>,
    visual_mass_per_step: Vec<f32>,
    latency_us_per_step: Vec<u64>,
}

// ---------------------------------------------------------------------------
// Execution
// ---------------------------------------------------------------------------

fn load_bank_checked(model: &Model, path: &Path) -> Result<ProbeBank> {
    let bank = load_bank(path)?;
    if bank.config_hash != crate::runtime::config_hash(&model.config) {
        return Err(VitiError::Compatibility(format!(
            "probe bank {} does not match the model config",
            path.display()
        )));
    }
    Ok(bank)
}

fn parse_grid<T: std::str::FromStr>(name: &str, s: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<T>()
                .map_err(|_| VitiError::config(name, format!("bad grid entry `{v}`")))
        })
        .collect()
}

/// Execute a parsed command line. Returns the process exit code.
pub fn run(cli: Cli) -> Result<()> {
    let file_cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::GenData {
            out,
            size,
            mix_existence,
            mix_color,
            mix_count,
            adversarial,
            overrides,
        } => {
            let resolved = resolve(&file_cfg.overlaid(&overrides.as_config()));
            let task = TaskConfig {
                mix: (mix_existence, mix_color, mix_count),
                adversarial,
            };
            let samples = gen_dataset(resolved.seed, size, &task)?;
            let header = DatasetHeader {
                format_version: 1,
                seed: resolved.seed,
                size: samples.len(),
                mix: task.mix,
                adversarial: task.adversarial,
                grid_cells: GRID_CELLS,
            };
            save_dataset(&header, &samples, &out)?;
            println!("wrote {} samples to {}", samples.len(), out.display());
            Ok(())
        }
        Command::TrainModel { data, out, overrides } => {
            let resolved = resolve(&file_cfg.overlaid(&overrides.as_config()));
            let (_, samples) = load_dataset(&data)?;
            let model = train_toy_model(&samples, resolved.model, &resolved.train, &resolved.schedule)?;
            save_model(&model, &out)?;
            let report = eval_task(&model, &samples[..samples.len().min(300)], None, None)?;
            println!(
                "trained model -> {} (clean existence acc {:.3}, overall {:.3})",
                out.display(),
                report.existence.accuracy,
                report.overall_accuracy
            );
            Ok(())
        }
        Command::TrainProbes {
            dataset,
            out,
            model,
            data,
            overrides,
        } => {
            let resolved = resolve(&file_cfg.overlaid(&overrides.as_config()));
            let probe_data = if dataset.exists() {
                load_probe_dataset(&dataset)?
            } else {
                let model_path = model.ok_or_else(|| {
                    VitiError::config("model", "required to build a missing probe dataset")
                })?;
                let data_path = data.ok_or_else(|| {
                    VitiError::config("data", "required to build a missing probe dataset")
                })?;
                let model = load_model(&model_path)?;
                let (_, samples) = load_dataset(&data_path)?;
                let take = samples.len().min(resolved.probe_samples);
                let prompts: Vec<Prompt> = samples[..take].iter().map(|s| s.prompt()).collect();
                let ds = build_probe_dataset(
                    &model,
                    &prompts,
                    &resolved.schedule,
                    resolved.probe_mix,
                    resolved.seed,
                )?;
                save_probe_dataset(&ds, &dataset)?;
                ds
            };
            let bank = train_probe_bank(&probe_data, &resolved.probes, resolved.workers)?;
            save_bank(&bank, &out)?;
            let accs = bank.sorted_accuracies();
            println!(
                "trained {} probes -> {} (peak val acc {:.3}, median {:.3})",
                bank.probes.len(),
                out.display(),
                accs[0],
                accs[accs.len() / 2]
            );
            Ok(())
        }
        Command::Generate {
            model,
            probes,
            prompt_file,
            report,
            max_new,
            overrides,
        } => {
            let resolved = resolve(&file_cfg.overlaid(&overrides.as_config()));
            let model = load_model(&model)?;
            let bank = load_bank_checked(&model, &probes)?;
            let (_, samples) = load_dataset(&prompt_file)?;
            let mut traces = Vec::new();
            for s in &samples {
                let trace = viti_generate(&model, &s.prompt(), &bank, resolved.intervention, max_new)?;
                traces.push(TraceSummary {
                    tokens: trace.tokens.clone(),
                    gate_fires_per_step: trace
                        .steps
                        .iter()
                        .map(|st| st.gates.iter().filter(|g| g.fired).count())
                        .collect(),
                    visual_mass_per_step: trace.steps.iter().map(|st| st.visual_mass).collect(),
                    latency_us_per_step: trace.steps.iter().map(|st| st.wall_us).collect(),
                });
            }
            let body = GenerateReportBody {
                prompts: samples.len(),
                traces,
            };
            write_json(&report, &enveloped(&resolved, body))?;
            println!("wrote generation report to {}", report.display());
            Ok(())
        }
        Command::Eval {
            model,
            data,
            probes,
            intervene,
            perturb_steps,
            report,
            overrides,
        } => {
            let resolved = resolve(&file_cfg.overlaid(&overrides.as_config()));
            let model = load_model(&model)?;
            let (_, samples) = load_dataset(&data)?;
            let bank = match &probes {
                Some(p) => Some(load_bank_checked(&model, p)?),
                None => None,
            };
            let intervenor = if intervene {
                let bank = bank.as_ref().ok_or_else(|| {
                    VitiError::config("probes", "required when --intervene is set")
                })?;
                Some(VitiIntervenor::new(&model, bank, resolved.intervention)?)
            } else {
                None
            };
            let perturbation = if perturb_steps > 0 {
                Some(Perturbation::fixed(
                    resolved.schedule,
                    perturb_steps,
                    resolved.seed,
                ))
            } else {
                None
            };
            let result = eval_task(&model, &samples, intervenor.as_ref(), perturbation.as_ref())?;
            println!(
                "existence acc {:.3} f1 {:.3} | color {:.3} | count {:.3} | overall {:.3} | mass {:.3}",
                result.existence.accuracy,
                result.existence.f1,
                result.color_accuracy,
                result.count_accuracy,
                result.overall_accuracy,
                result.mean_visual_mass,
            );
            if let Some(path) = report {
                write_json(&path, &enveloped(&resolved, result))?;
                println!("wrote eval report to {}", path.display());
            }
            Ok(())
        }
        Command::Theorem1 {
            model,
            probes,
            data,
            projections,
            out,
            overrides,
        } => {
            let resolved = resolve(&file_cfg.overlaid(&overrides.as_config()));
            let model = load_model(&model)?;
            let bank = load_bank_checked(&model, &probes)?;
            let (_, samples) = load_dataset(&data)?;
            let report = theorem1_check(
                &model,
                &bank,
                resolved.intervention,
                &samples,
                projections,
                &resolved.schedule,
                resolved.seed,
            )?;
            println!(
                "theorem1: {} pairs, satisfied {:.3}, gated {} ({})",
                report.pairs,
                report.satisfied_fraction,
                report.gated_activations,
                if report.inconclusive { "inconclusive" } else { "ok" }
            );
            write_json(&out, &enveloped(&resolved, report))?;
            Ok(())
        }
        Command::Sweep {
            model,
            probes,
            data,
            alpha0_grid,
            beta_grid,
            out,
            report,
            overrides,
        } => {
            let resolved = resolve(&file_cfg.overlaid(&overrides.as_config()));
            let model = load_model(&model)?;
            let bank = load_bank_checked(&model, &probes)?;
            let (_, samples) = load_dataset(&data)?;
            let alphas: Vec<f32> = parse_grid("alpha0_grid", &alpha0_grid)?;
            let betas: Vec<f64> = parse_grid("beta_grid", &beta_grid)?;
            let steps = default_perturb_cycle(&resolved.schedule);
            let result = sweep(
                &model,
                &bank,
                &samples,
                &alphas,
                &betas,
                resolved.intervention,
                &resolved.schedule,
                &steps,
                resolved.seed,
            )?;
            write_csv(&out, "alpha0,beta,score", &result.csv_rows())?;
            println!(
                "sweep best: alpha0 {} beta {} score {:.3} (baseline {:.3}) -> {}",
                result.best.alpha0,
                result.best.beta,
                result.best.score,
                result.baseline_score,
                out.display()
            );
            if let Some(path) = report {
                write_json(&path, &enveloped(&resolved, result))?;
            }
            Ok(())
        }
        Command::Ablate {
            model,
            probes,
            data,
            out,
            overrides,
        } => {
            let resolved = resolve(&file_cfg.overlaid(&overrides.as_config()));
            let model = load_model(&model)?;
            let bank = load_bank_checked(&model, &probes)?;
            let (_, samples) = load_dataset(&data)?;
            let steps = default_perturb_cycle(&resolved.schedule);
            let table = ablation_suite(
                &model,
                &bank,
                &samples,
                resolved.intervention,
                &resolved.schedule,
                &steps,
                resolved.seed,
            )?;
            for row in &table.rows {
                println!(
                    "{:>9}: clean exi {:.3} | perturbed exi {:.3}",
                    row.name, row.clean.existence.accuracy, row.perturbed.existence.accuracy
                );
            }
            write_json(&out, &enveloped(&resolved, table))?;
            Ok(())
        }
        Command::Bench {
            model,
            probes,
            repeats,
            context,
            max_new,
            out,
            overrides,
        } => {
            let resolved = resolve(&file_cfg.overlaid(&overrides.as_config()));
            let model = match model {
                Some(p) => load_model(&p)?,
                None => {
                    let mut cfg = resolved.model;
                    cfg.max_seq = cfg.max_seq.max(context + max_new);
                    Model::init(cfg, &mut crate::linalg::Rng::new(resolved.seed))?
                }
            };
            if model.config.max_seq < context + max_new {
                return Err(VitiError::config(
                    "context",
                    format!(
                        "context {} + max_new {} exceeds model max_seq {}",
                        context, max_new, model.config.max_seq
                    ),
                ));
            }
            let bank = match probes {
                Some(p) => load_bank_checked(&model, &p)?,
                None => synthetic_bank(&model, resolved.seed),
            };
            let span = VisualSpan::new(1, 1 + (context / 2).max(1));
            let prompts = bench_prompts(&model, context, span, 4, resolved.seed)?;
            let report = overhead_benchmark(
                &model,
                &bank,
                resolved.intervention,
                &prompts,
                max_new,
                repeats,
            )?;
            println!(
                "greedy {:.1} us/tok | viti {:.1} us/tok | ratio {:.3}",
                report.greedy_us_per_token, report.viti_us_per_token, report.ratio
            );
            write_json(&out, &enveloped(&resolved, report))?;
            Ok(())
        }
        Command::Report { input, out } => pivot_sweep_csv(&input, &out),
    }
}

/// Default noise steps cycled over perturbed evaluations: quartiles of the
/// schedule, matching the degradation-curve grid without its clean row.
pub fn default_perturb_cycle(schedule: &NoiseSchedule) -> Vec<usize> {
    let t = schedule.total_steps;
    vec![t / 4, t / 2, 3 * t / 4, t]
}

/// Random probe bank compatible with a model; used by `bench` when no
/// trained bank is supplied (latency does not depend on probe quality).
pub fn synthetic_bank(model: &Model, seed: u64) -> ProbeBank {
    let mut rng = crate::linalg::Rng::new(seed ^ 0xbeef);
    let cfg = &model.config;
    let probes = (0..cfg.layers * cfg.heads)
        .map(|i| crate::vnd::Probe {
            layer: i / cfg.heads,
            head: i % cfg.heads,
            theta: (0..cfg.head_dim).map(|_| rng.normal()).collect(),
            bias: rng.normal(),
            val_accuracy: rng.uniform() as f32,
        })
        .collect();
    ProbeBank {
        probes,
        layers: cfg.layers,
        heads: cfg.heads,
        head_dim: cfg.head_dim,
        config_hash: crate::runtime::config_hash(cfg),
        meta: crate::vnd::BankMeta {
            seed,
            split_ratio: 0.8,
            epochs: 0,
            lr: 0.0,
            l2: 0.0,
        },
    }
}

/// Pivot `alpha0,beta,score` rows into a heatmap table: alpha0 down the
/// rows, beta across the columns.
fn pivot_sweep_csv(input: &Path, out: &Path) -> Result<()> {
    let body = std::fs::read_to_string(input)?;
    let mut lines = body.lines();
    let header = lines.next().unwrap_or_default();
    if header.trim() != "alpha0,beta,score" {
        return Err(VitiError::config(
            "in",
            format!("expected sweep CSV header, got `{header}`"),
        ));
    }
    let mut alphas: Vec<String> = Vec::new();
    let mut betas: Vec<String> = Vec::new();
    let mut cells: std::collections::BTreeMap<(String, String), String> = Default::default();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(VitiError::config("in", format!("bad sweep row `{line}`")));
        }
        let (a, b, s) = (parts[0].to_string(), parts[1].to_string(), parts[2].to_string());
        if !alphas.contains(&a) {
            alphas.push(a.clone());
        }
        if !betas.contains(&b) {
            betas.push(b.clone());
        }
        cells.insert((a, b), s);
    }
    let mut rows = Vec::with_capacity(alphas.len());
    for a in &alphas {
        let mut row = vec![a.clone()];
        for b in &betas {
            row.push(cells.get(&(a.clone(), b.clone())).cloned().unwrap_or_default());
        }
        rows.push(row.join(","));
    }
    let header = std::iter::once("alpha0/beta".to_string())
        .chain(betas.iter().cloned())
        .collect::<Vec<_>>()
        .join(",");
    write_csv(out, &header, &rows)?;
    println!("wrote pivoted sweep to {}", out.display());
    Ok(())
}

/// Map an error to its process exit code.
pub fn exit_code(err: &VitiError) -> i32 {
    match err {
        VitiError::Version(_) => 3,
        VitiError::Config { .. } | VitiError::Input(_) => 2,
        _ => 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_flags_file_defaults() {
        // three-way override matrix on a representative key set
        let file: RunConfig = toml::from_str(
            "seed = 7\nalpha0 = 0.5\nheads = 6\n",
        )
        .unwrap();
        let flags = RunConfig {
            alpha0: Some(0.9),
            ..Default::default()
        };
        let merged = file.overlaid(&flags);
        let r = resolve(&merged);
        assert_eq!(r.intervention.alpha0, 0.9); // flag wins
        assert_eq!(r.seed, 7); // file wins over default
        assert_eq!(r.model.heads, 6); // file wins over default
        assert_eq!(r.model.layers, default_model_config().layers); // default
        assert_eq!(r.intervention.beta, 0.10); // default
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let r: std::result::Result<RunConfig, _> = toml::from_str("bogus_key = 1\n");
        assert!(r.is_err());
    }

    #[test]
    fn resolved_config_roundtrips_through_toml() {
        let cfg = RunConfig {
            seed: Some(3),
            alpha0: Some(0.25),
            noise_beta_end: Some(0.005),
            ..Default::default()
        };
        let text = toml::to_string(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        let again = toml::to_string(&back).unwrap();
        assert_eq!(text, again);
    }

    #[test]
    fn grid_parsing() {
        let g: Vec<f32> = parse_grid("alpha0_grid", "0.0, 0.1,0.2").unwrap();
        assert_eq!(g, vec![0.0, 0.1, 0.2]);
        assert!(parse_grid::<f32>("alpha0_grid", "0.1,x").is_err());
    }
}
