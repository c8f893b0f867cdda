//! End-to-end pipeline: generate data, train the toy model, build the probe
//! dataset, train probes, then measure degradation, recovery, ablations, and
//! the Theorem-1 check.
//!
//! Knobs can be overridden through environment variables (SEED, TRAIN_SIZE,
//! EPOCHS, BETA_END, GOLD_FRAC, GOLD_TMAX, ABSTAIN_FRAC, ABSTAIN_TMIN,
//! UNSURE_W, PROBE_N, EVAL_N, LAYERS, HEADS, HEAD_DIM).

use std::time::Instant;

use viti::analysis::{degradation_curve, spearman, theorem1_check};
use viti::cli::default_model_config;
use viti::perturb::{build_probe_dataset, NoiseSchedule};
use viti::runtime::Prompt;
use viti::synthtask::{
    eval_task, gen_dataset, train_toy_model, Perturbation, QuestionKind, TaskConfig, TrainHyper,
};
use viti::vnd::{train_probe_bank, ProbeHyper};
use viti::vri::{GatePolicy, InterventionConfig, MixTarget, VitiIntervenor};

fn env_f64(name: &str, default: f64) -> f64 {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}
fn env_usize(name: &str, default: usize) -> usize {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() -> viti::Result<()> {
    let t0 = Instant::now();
    let seed = env_usize("SEED", 0) as u64;
    let mut model_cfg = default_model_config();
    model_cfg.layers = env_usize("LAYERS", model_cfg.layers);
    model_cfg.heads = env_usize("HEADS", model_cfg.heads);
    model_cfg.head_dim = env_usize("HEAD_DIM", model_cfg.head_dim);
    let schedule = NoiseSchedule {
        total_steps: 1000,
        beta_start: 1e-4,
        beta_end: env_f64("BETA_END", NoiseSchedule::default().beta_end),
    };
    let hyper = TrainHyper {
        seed,
        epochs: env_usize("EPOCHS", TrainHyper::default().epochs),
        gold_frac: env_f64("GOLD_FRAC", TrainHyper::default().gold_frac),
        gold_tmax: env_usize("GOLD_TMAX", TrainHyper::default().gold_tmax),
        abstain_frac: env_f64("ABSTAIN_FRAC", TrainHyper::default().abstain_frac),
        abstain_tmin: env_usize("ABSTAIN_TMIN", TrainHyper::default().abstain_tmin),
        unsure_weight: env_f64("UNSURE_W", TrainHyper::default().unsure_weight as f64) as f32,
        ..Default::default()
    };
    let train_size = env_usize("TRAIN_SIZE", 2000);
    let probe_n = env_usize("PROBE_N", 800);
    let eval_n = env_usize("EVAL_N", 360);
    let task = TaskConfig::default();

    let train_set = gen_dataset(seed + 1, train_size, &task)?;
    let model = train_toy_model(&train_set, model_cfg, &hyper, &schedule)?;
    let clean = eval_task(&model, &train_set[..300.min(train_set.len())], None, None)?;
    println!(
        "[train {:.0}s] clean(train): exist {:.3} color {:.3} count {:.3}",
        t0.elapsed().as_secs_f64(),
        clean.existence.accuracy,
        clean.color_accuracy,
        clean.count_accuracy
    );

    let eval_set = gen_dataset(seed + 99, eval_n, &task)?;
    let exist_eval: Vec<_> = eval_set
        .iter()
        .filter(|s| s.kind == QuestionKind::Existence)
        .cloned()
        .collect();
    let clean_eval = eval_task(&model, &eval_set, None, None)?;
    println!(
        "clean(eval): exist {:.3} f1 {:.3} color {:.3} count {:.3} overall {:.3}",
        clean_eval.existence.accuracy,
        clean_eval.existence.f1,
        clean_eval.color_accuracy,
        clean_eval.count_accuracy,
        clean_eval.overall_accuracy
    );

    // degradation curve
    let steps = [0, 250, 500, 750, 1000];
    let curve = degradation_curve(&model, &exist_eval, &steps, &schedule, seed + 7)?;
    let accs: Vec<f64> = curve.iter().map(|p| p.existence_accuracy).collect();
    let masses: Vec<f64> = curve.iter().map(|p| p.visual_attention_mass).collect();
    let rho = spearman(
        &steps.iter().map(|&s| s as f64).collect::<Vec<_>>(),
        &accs,
    );
    println!(
        "degrade acc {:?} rho {:.2}",
        accs.iter().map(|a| (a * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
        rho
    );
    println!(
        "mass {:?} drop {:+.3} | unsure {:?}",
        masses.iter().map(|a| (a * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
        masses[0] - masses[masses.len() - 1],
        curve.iter().map(|p| (p.unsure_rate * 100.0).round() / 100.0).collect::<Vec<_>>()
    );

    // probes
    let t1 = Instant::now();
    let probe_samples = gen_dataset(seed + 5, probe_n, &task)?;
    let prompts: Vec<Prompt> = probe_samples.iter().map(|s| s.prompt()).collect();
    let ds = build_probe_dataset(&model, &prompts, &schedule, 0.5, seed + 13)?;
    let bank = train_probe_bank(&ds, &ProbeHyper { seed, ..Default::default() }, 4)?;
    let accs_sorted = bank.sorted_accuracies();
    let top_n = ((0.1 * accs_sorted.len() as f64).round() as usize).max(1);
    let top_mean: f32 = accs_sorted[..top_n].iter().sum::<f32>() / top_n as f32;
    println!(
        "[probes {:.0}s] peak {:.3} top10%mean {:.3} median {:.3}",
        t1.elapsed().as_secs_f64(),
        accs_sorted[0],
        top_mean,
        accs_sorted[accs_sorted.len() / 2]
    );

    // recovery at the final noise step, 3 eval-noise seeds
    let cfg = InterventionConfig::default();
    let full = VitiIntervenor::new(&model, &bank, cfg)?;
    let wo_vnd = VitiIntervenor::new(&model, &bank, cfg)?.with_gate_policy(GatePolicy::AlwaysOn);
    let lw = wo_vnd.selected_layerwide();
    let wo_vnd = wo_vnd.with_selected(lw);
    let wo_vri = VitiIntervenor::new(&model, &bank, cfg)?.with_mix_target(MixTarget::ProbeDirection);
    {
        let mut sel: Vec<_> = full.selected().iter().copied().collect();
        sel.sort();
        println!("selected heads: {sel:?}");
    }

    let mut gains = Vec::new();
    for noise_seed in [seed + 7, seed + 17, seed + 27] {
        let p1000 = Perturbation::fixed(schedule, schedule.total_steps, noise_seed);
        let base = eval_task(&model, &exist_eval, None, Some(&p1000))?;
        let viti = eval_task(&model, &exist_eval, Some(&full), Some(&p1000))?;
        gains.push((
            base.existence.accuracy,
            viti.existence.accuracy,
            base.unsure_rate,
            viti.gate_fires_per_sample,
        ));
    }
    let mean_base: f64 = gains.iter().map(|g| g.0).sum::<f64>() / gains.len() as f64;
    let mean_viti: f64 = gains.iter().map(|g| g.1).sum::<f64>() / gains.len() as f64;
    println!(
        "t=1000 recovery: base {:.3} viti {:.3} gain {:+.1}pts (unsure@base {:.2}, fires/sample {:.1})",
        mean_base,
        mean_viti,
        100.0 * (mean_viti - mean_base),
        gains[0].2,
        gains[0].3
    );

    // ablations at t=1000 and mixed severities
    for (name, steps) in [
        ("t1000", vec![schedule.total_steps]),
        ("mixed", vec![250, 500, 750, 1000]),
    ] {
        let p = Perturbation {
            schedule,
            steps: steps.clone(),
            seed: seed + 7,
        };
        let b = eval_task(&model, &exist_eval, None, Some(&p))?.existence.accuracy;
        let f = eval_task(&model, &exist_eval, Some(&full), Some(&p))?.existence.accuracy;
        let n = eval_task(&model, &exist_eval, Some(&wo_vnd), Some(&p))?.existence.accuracy;
        let r = eval_task(&model, &exist_eval, Some(&wo_vri), Some(&p))?.existence.accuracy;
        println!(
            "{name}: base {b:.3} full {f:.3} wovnd {n:.3} ({:+.1}) wovri {r:.3} ({:+.1})",
            100.0 * (f - n),
            100.0 * (f - r)
        );
    }
    let cf = eval_task(&model, &exist_eval, Some(&full), None)?.existence.accuracy;
    let cn = eval_task(&model, &exist_eval, Some(&wo_vnd), None)?.existence.accuracy;
    println!(
        "clean: base {:.3} full {cf:.3} wovnd {cn:.3} (over-intervention {})",
        clean_eval.existence.accuracy,
        if cn <= cf { "ok" } else { "VIOLATED" }
    );

    // theorem 1
    let t2 = Instant::now();
    let th = theorem1_check(&model, &bank, cfg, &eval_set, 8, &schedule, seed + 3)?;
    println!(
        "[theorem1 {:.0}s] pairs {} satisfied {:.3} gated {}{}",
        t2.elapsed().as_secs_f64(),
        th.pairs,
        th.satisfied_fraction,
        th.gated_activations,
        if th.inconclusive { " (inconclusive)" } else { "" }
    );
    println!("total {:.0}s", t0.elapsed().as_secs_f64());
    Ok(())
}
