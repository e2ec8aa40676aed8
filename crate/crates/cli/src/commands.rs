use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use lwi_core::align::{align_and_fuse_with_report, FusionConfig, FusionReport};
use lwi_core::continual::{
    activation_levels, activations_csv, eval_task_agnostic, eval_task_aware, pairwise_overlaps, run_lwi_with,
    MetricsLog, StepOutcome,
};
use lwi_core::data::{Task, TaskStream};
use lwi_core::net::{load_checkpoint, save_checkpoint, Model, FORMAT_VERSION};
use serde::Serialize;

use crate::config::{DataConfig, ExperimentConfig, Profile};
use crate::error::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.json";

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    checkpoint_format: u32,
    seed: u64,
    profile: Profile,
    tasks: usize,
    data: &'a DataConfig,
    run: &'a lwi_core::continual::RunConfig,
    checkpoints: Vec<String>,
    metrics: Vec<&'static str>,
}

fn checkpoint_name(step: usize) -> String {
    format!("step-{step}.lwi")
}

fn fusion_rows(out: &mut String, step: usize, report: &FusionReport) {
    for l in &report.layers {
        writeln!(
            out,
            "{step},{},{},{:.6},{:.6},{},{}",
            l.layer,
            l.deep,
            report.k,
            l.score,
            l.converged,
            l.iterations
        )
        .unwrap();
    }
}

/// Runs the experiment described by `config_path`. Writes one checkpoint per
/// step, the metric CSVs, `fusion.csv` and a manifest into the output
/// directory (`out` overrides the configured one).
pub fn cmd_run(config_path: &Path, out: Option<&Path>) -> CliResult<(PathBuf, MetricsLog)> {
    let cfg = ExperimentConfig::from_path(config_path)?;
    let stream = cfg.load_stream()?;
    let dir = out.map_or_else(|| cfg.output_path(), Path::to_path_buf);
    let ckpt_dir = dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| CliError::runtime(format!("cannot create {}: {e}", ckpt_dir.display())))?;

    let mut fusion_csv = String::from("step,layer,deep,k,score,converged,iterations\n");
    let mut checkpoints = Vec::new();
    let (_, log) = run_lwi_with(&stream, &cfg.run, |outcome: StepOutcome<'_>| {
        let step = outcome.step + 1;
        let name = checkpoint_name(step);
        save_checkpoint(outcome.model, ckpt_dir.join(&name))?;
        checkpoints.push(format!("checkpoints/{name}"));
        if let Some(report) = outcome.fusion {
            fusion_rows(&mut fusion_csv, step, report);
        }
        Ok(())
    })
    .map_err(CliError::classify)?;

    log.write_csv(&dir).map_err(CliError::runtime)?;
    let write = |name: &str, body: &str| {
        fs::write(dir.join(name), body).map_err(|e| CliError::runtime(format!("cannot write {name}: {e}")))
    };
    write("fusion.csv", &fusion_csv)?;
    let manifest = Manifest {
        tool: "lwi",
        version: env!("CARGO_PKG_VERSION"),
        checkpoint_format: FORMAT_VERSION,
        seed: cfg.seed,
        profile: cfg.profile,
        tasks: stream.len(),
        data: &cfg.data,
        run: &cfg.run,
        checkpoints,
        metrics: vec!["acc_matrix.csv", "agnostic.csv", "forgetting.csv", "activations.csv", "fusion.csv"],
    };
    write(MANIFEST, &(serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n"))?;

    for (s, row) in log.acc_matrix.iter().enumerate() {
        let mean = row.iter().sum::<f64>() / row.len() as f64;
        let fgt = if s == 0 { String::from("-") } else { format!("{:.2}", log.forgetting[s - 1]) };
        println!(
            "step {}/{}  task-aware {mean:.2}  task-agnostic {:.2}  forgetting {fgt}",
            s + 1,
            stream.len(),
            log.agnostic_acc[s]
        );
    }
    println!("wrote {}", dir.display());
    Ok((dir, log))
}

pub fn load_model(path: &Path) -> CliResult<Model> {
    load_checkpoint(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

/// Fuses two checkpoints and writes the result to `out`.
pub fn cmd_fuse(old: &Path, new: &Path, cfg: &FusionConfig, out: &Path) -> CliResult<FusionReport> {
    let model_old = load_model(old)?;
    let model_new = load_model(new)?;
    let (fused, report) = align_and_fuse_with_report(&model_old, &model_new, cfg).map_err(CliError::classify)?;
    save_checkpoint(&fused, out).map_err(|e| CliError::runtime(format!("{}: {e}", out.display())))?;
    println!("k = {:.6}", report.k);
    for l in &report.layers {
        let branch = if l.deep { "deep (min-similarity)" } else { "shallow (max-similarity)" };
        println!("layer {}  {branch}  score {:.6}", l.layer, l.score);
    }
    println!("wrote {}", out.display());
    Ok(report)
}

/// Loads the data of an experiment config, keeping the first `tasks` tasks.
pub fn load_eval_stream(data_config: &Path, tasks: Option<usize>) -> CliResult<Vec<Task>> {
    let cfg = ExperimentConfig::from_path(data_config)?;
    let TaskStream { tasks: mut all } = cfg.load_stream()?;
    if let Some(n) = tasks {
        if n == 0 || n > all.len() {
            return Err(CliError::usage(format!("--tasks must be between 1 and {}", all.len())));
        }
        all.truncate(n);
    }
    Ok(all)
}

pub struct EvalResult {
    pub aware: Option<Vec<f64>>,
    pub agnostic: Option<f64>,
}

pub fn cmd_eval(ckpt: &Path, data_config: &Path, aware: bool, agnostic: bool, tasks: Option<usize>, out: &Path) -> CliResult<EvalResult> {
    let model = load_model(ckpt)?;
    let tasks = load_eval_stream(data_config, tasks)?;
    let (aware, agnostic) = if aware || agnostic { (aware, agnostic) } else { (true, true) };
    let result = EvalResult {
        aware: aware.then(|| eval_task_aware(&model, &tasks)).transpose().map_err(CliError::usage)?,
        agnostic: agnostic.then(|| eval_task_agnostic(&model, &tasks)).transpose().map_err(CliError::usage)?,
    };

    let mut csv = String::from("mode,task,accuracy\n");
    if let Some(acc) = &result.aware {
        println!("task-aware accuracy (%)");
        for (t, a) in acc.iter().enumerate() {
            println!("  task {}  {a:.6}", t + 1);
            writeln!(csv, "aware,{},{a:.6}", t + 1).unwrap();
        }
        let mean = acc.iter().sum::<f64>() / acc.len() as f64;
        println!("  mean    {mean:.6}");
        writeln!(csv, "aware,mean,{mean:.6}").unwrap();
    }
    if let Some(a) = result.agnostic {
        println!("task-agnostic accuracy (%)  {a:.6}");
        writeln!(csv, "agnostic,all,{a:.6}").unwrap();
    }
    fs::write(out, csv).map_err(|e| CliError::runtime(format!("{}: {e}", out.display())))?;
    println!("wrote {}", out.display());
    Ok(result)
}

pub fn cmd_activations(ckpt: &Path, data_config: &Path, top_k: usize, tasks: Option<usize>, out_dir: &Path) -> CliResult<()> {
    if top_k == 0 {
        return Err(CliError::usage("--top-k must be at least 1"));
    }
    let model = load_model(ckpt)?;
    let tasks = load_eval_stream(data_config, tasks)?;
    if model.heads.len() < tasks.len() {
        return Err(CliError::usage(format!(
            "checkpoint has {} heads but {} tasks are probed",
            model.heads.len(),
            tasks.len()
        )));
    }
    let levels: Vec<Vec<f64>> = tasks
        .iter()
        .enumerate()
        .map(|(t, task)| activation_levels(&model, &task.test, t))
        .collect::<lwi_core::Result<_>>()
        .map_err(CliError::usage)?;
    let pairs = pairwise_overlaps(&levels, top_k).map_err(CliError::usage)?;

    let mut overlap = String::from("task_a,task_b,overlap\n");
    for (a, b, v) in &pairs {
        writeln!(overlap, "{},{},{v:.6}", a + 1, b + 1).unwrap();
        println!("tasks {} and {}  top-{top_k} overlap {v:.6}", a + 1, b + 1);
    }
    fs::create_dir_all(out_dir).map_err(|e| CliError::runtime(format!("{}: {e}", out_dir.display())))?;
    let write = |name: &str, body: String| {
        fs::write(out_dir.join(name), body).map_err(|e| CliError::runtime(format!("cannot write {name}: {e}")))
    };
    write("activations.csv", activations_csv(&levels))?;
    write("overlap.csv", overlap)?;
    println!("wrote {}", out_dir.display());
    Ok(())
}
