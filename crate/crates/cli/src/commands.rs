use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use cram_core::checkpoint::Checkpoint;
use cram_core::data::{
    gen_classification, gen_inpainting, load_dataset, mask_side, save_dataset, Sample, DEFAULT_OCCLUSION,
};
use cram_core::losses::LossReport;
use cram_core::render::{inpainting_panels, overlay, Raster, PANELS};
use cram_core::train::{fit, usable, Evaluation, Summary, Trainer};
use cram_core::verify::run_all;
use cram_core::{Error, Task};

use crate::settings::{RunConfig, Settings};
use crate::{CheckArgs, Failure, GenArgs, RenderArgs, ReportArgs, TrainArgs};

const KNOWN_KEYS: &[&str] = &[
    "task",
    "n",
    "canvas",
    "seed",
    "occlusion",
    "classes",
    "out",
    "data",
    "eval_data",
    "epochs",
    "steps",
    "batch_size",
    "glimpses",
    "glimpse_size",
    "hidden",
    "z_dim",
    "gv_dim",
    "mlp_dim",
    "filters",
    "downsample",
    "cls_hidden",
    "gen_channels",
    "disc_channels",
    "disc_hidden",
    "lr",
    "alpha",
    "beta",
    "eval_interval",
    "clue_scale",
    "seeds",
];

pub const LOG_FILE: &str = "metrics.log";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

type Outcome = Result<(), Failure>;

pub fn gen(s: &Settings, a: GenArgs) -> Outcome {
    s.check_keys(KNOWN_KEYS)?;
    let task = s.task(a.task)?;
    let n: usize = s.or(a.n, "n", 1000)?;
    let canvas: usize = s.or(a.canvas, "canvas", 32)?;
    let seed = s.seed(a.seed)?;
    let occlusion: f64 = s.or(a.occlusion, "occlusion", DEFAULT_OCCLUSION)?;
    let classes: usize = s.or(a.classes, "classes", 4)?;
    let out: PathBuf = s.or(a.out, "out", PathBuf::from(format!("{}.crd", task.as_str())))?;
    if n == 0 {
        return Err(Failure::Usage("--n must be positive".into()));
    }
    let usage = |e: Error| match e {
        Error::Diff(cram_core::error::DiffError::Io(_)) => Failure::from(e),
        other => Failure::Usage(other.to_string()),
    };
    let samples: Vec<Sample> = match task {
        Task::Classification => gen_classification(n, canvas, classes, seed)
            .map_err(usage)?
            .into_iter()
            .map(Sample::Classification)
            .collect(),
        Task::Inpainting => gen_inpainting(n, canvas, occlusion, seed)
            .map_err(usage)?
            .into_iter()
            .map(Sample::Inpainting)
            .collect(),
    };
    save_dataset(&samples, &out)?;
    println!("wrote {} {} samples to {}", samples.len(), task.as_str(), out.display());
    if task == Task::Inpainting {
        let side = mask_side(canvas, occlusion).map_err(usage)?;
        println!("mask side {side} ({} of {} pixels)", side * side, canvas * canvas);
    }
    Ok(())
}

fn run_config(s: &Settings, a: &TrainArgs, task: Task) -> Result<RunConfig, Failure> {
    let data: PathBuf = s
        .pick(a.data.clone(), "data")?
        .ok_or_else(|| Failure::Usage("--data is required".into()))?;
    let c = RunConfig {
        task,
        data,
        eval_data: s.pick(a.eval_data.clone(), "eval_data")?,
        out: s.or(a.out.clone(), "out", PathBuf::from("run"))?,
        seed: s.seed(a.seed)?,
        epochs: s.or(a.epochs, "epochs", 10)?,
        steps: s.pick(a.steps, "steps")?,
        batch_size: s.or(a.batch_size, "batch_size", 32)?,
        n_glimpses: s.or(a.glimpses, "glimpses", 4)?,
        glimpse_size: s.or(a.glimpse_size, "glimpse_size", 0)?,
        hidden_size: s.or(a.hidden, "hidden", 256)?,
        z_dim: s.or(a.z_dim, "z_dim", 128)?,
        gv_dim: s.or(a.gv_dim, "gv_dim", 128)?,
        mlp_dim: s.or(a.mlp_dim, "mlp_dim", 128)?,
        filters: s.or(a.filters, "filters", 16)?,
        downsample: s.or(a.downsample, "downsample", 4)?,
        classes: s.or(a.classes, "classes", 4)?,
        cls_hidden: s.or(a.cls_hidden, "cls_hidden", 128)?,
        gen_channels: s.or(a.gen_channels, "gen_channels", 64)?,
        disc_channels: s.or(a.disc_channels, "disc_channels", 16)?,
        disc_hidden: s.or(a.disc_hidden, "disc_hidden", 64)?,
        lr: s.or(a.lr, "lr", cram_core::optim::DEFAULT_LR)?,
        alpha: s.or(a.alpha, "alpha", 100.0)?,
        beta: s.or(a.beta, "beta", 1.0)?,
        eval_interval: s.or(a.eval_interval, "eval_interval", 100)?,
        clue_scale: s.or(a.clue_scale, "clue_scale", 1.0)?,
    };
    c.validate()?;
    Ok(c)
}

fn dataset(path: &Path, task: Task) -> Result<Vec<Sample>, Failure> {
    let samples = load_dataset(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
    usable(samples, task).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

/// `step` is the log index of the update just evaluated.
fn eval_line(step: u64, e: &Evaluation) -> String {
    let mut s = format!("eval step={step} coverage={:.4}", e.coverage);
    if let Some(a) = e.accuracy {
        s += &format!(" acc={a:.4}");
    }
    if let Some(l) = e.masked_l1 {
        s += &format!(" masked_l1={l:.4}");
    }
    s
}

fn summary_line(s: &Summary, steps: u64) -> String {
    let mut line = format!("summary steps={steps}");
    if let Some((step, e)) = s.best() {
        line += &format!(" best_step={}", step - 1);
        match (e.accuracy, e.masked_l1) {
            (Some(a), _) => line += &format!(" best_acc={a:.4}"),
            (_, Some(l)) => line += &format!(" best_masked_l1={l:.4}"),
            _ => {}
        }
        line += &format!(" coverage={:.4}", e.coverage);
    }
    line
}

pub fn train(s: &Settings, a: TrainArgs) -> Outcome {
    s.check_keys(KNOWN_KEYS)?;
    let resumed = match &a.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
            Some(Trainer::from_checkpoint(&ckpt).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?)
        }
        None => None,
    };
    let task = match &resumed {
        Some(t) => t.task(),
        None => s.task(a.task.clone())?,
    };
    let rc = run_config(s, &a, task)?;
    let train_set = dataset(&rc.data, task)?;
    let eval_set = rc.eval_data.as_deref().map(|p| dataset(p, task)).transpose()?;
    let first = train_set[0].image().shape().to_vec();
    if first[1] != first[2] {
        return Err(Failure::Io(format!(
            "images must be square, got {}x{}",
            first[1], first[2]
        )));
    }

    let mut trainer = match resumed {
        Some(mut t) => {
            if rc.steps.is_some() || s.pick(a.epochs, "epochs")?.is_some() {
                t.cfg.steps = rc.total_steps(train_set.len());
            }
            let want = t.model.cfg.encoder.image_hw;
            if want != (first[1], first[2]) {
                return Err(Failure::Io(format!(
                    "checkpoint expects {}x{} images, dataset has {}x{}",
                    want.0, want.1, first[1], first[2]
                )));
            }
            t
        }
        None => Trainer::new(&rc.model(first[1], first[0])?, rc.train(train_set.len()))?,
    };

    fs::create_dir_all(&rc.out)?;
    let log_path = rc.out.join(LOG_FILE);
    let ckpt_path = rc.out.join(CHECKPOINT_FILE);
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(a.resume.is_some())
        .truncate(a.resume.is_none())
        .open(&log_path)?;
    let mut log = BufWriter::new(file);
    println!(
        "training {} from step {} to {} ({} samples, batch {}, lr {})",
        task.as_str(),
        trainer.step,
        trainer.cfg.steps,
        train_set.len(),
        trainer.cfg.batch_size,
        trainer.cfg.lr
    );

    let mut on_eval = |t: &Trainer, e: &Evaluation| -> cram_core::Result<()> {
        t.checkpoint().save(&ckpt_path)?;
        println!("{}", eval_line(t.step - 1, e));
        Ok(())
    };
    let total = trainer.cfg.steps;
    let mut evals = Vec::new();
    let mut last = None;
    let mut stages = vec![total];
    if let Some(p) = a.poison_step.filter(|&p| p > trainer.step && p < total) {
        stages.insert(0, p);
    }
    for stop in stages {
        if stop != total {
            trainer.cfg.steps = stop;
        }
        let result = fit(&mut trainer, &train_set, eval_set.as_deref(), &mut log, &mut on_eval);
        log.flush()?;
        match result {
            Ok(sum) => {
                evals.extend(sum.evals);
                last = sum.last.or(last);
            }
            Err(e @ Error::NonFinite { .. }) => {
                let healthy = match trainer.step {
                    0 => "none".to_string(),
                    k => (k - 1).to_string(),
                };
                return Err(Failure::NonFinite(format!(
                    "{e}; last healthy step {healthy}; last checkpoint in {}",
                    ckpt_path.display()
                )));
            }
            Err(e) => return Err(e.into()),
        }
        if stop != total {
            trainer.cfg.steps = total;
            let p = &mut trainer.model.main.params_mut()[0];
            p.value = p.value.map(|_| f32::NAN);
        }
    }
    let summary = Summary { last, evals };
    println!("wrote {} and {}", log_path.display(), ckpt_path.display());
    println!("{}", summary_line(&summary, trainer.step));
    Ok(())
}

pub fn check(s: &Settings, a: CheckArgs) -> Outcome {
    s.check_keys(KNOWN_KEYS)?;
    let seeds: u64 = s.or(a.seeds, "seeds", 20)?;
    if seeds == 0 {
        return Err(Failure::Usage("--seeds must be positive".into()));
    }
    let report = run_all(seeds, a.fault.as_deref())?;
    for c in &report.cases {
        println!(
            "{:<24} max_rel_err={:.3e} tol={:e} skipped={}/{} {}",
            c.name,
            c.max_error,
            c.tolerance,
            c.skipped,
            c.probes,
            if c.passed() { "PASS" } else { "FAIL" }
        );
    }
    for p in &report.properties {
        println!(
            "property {:<28} {} ({})",
            p.name,
            if p.passed { "PASS" } else { "FAIL" },
            p.detail
        );
    }
    let failures = report.failures();
    println!(
        "checked {} differentiable ops over {seeds} seeds and {} sampler properties: {} failing",
        report.cases.len(),
        report.properties.len(),
        failures.len()
    );
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!("failing checks: {}", failures.join(", "))))
    }
}

fn save(r: &Raster, dir: &Path, stem: &str) -> Result<PathBuf, Failure> {
    let path = dir.join(format!("{stem}.{}", r.extension()));
    r.save(&path)?;
    Ok(path)
}

pub fn render(a: RenderArgs) -> Outcome {
    let ckpt = Checkpoint::load(&a.checkpoint).map_err(|e| Failure::Io(format!("{}: {e}", a.checkpoint.display())))?;
    let mut model = Trainer::from_checkpoint(&ckpt)
        .map_err(|e| Failure::Io(format!("{}: {e}", a.checkpoint.display())))?
        .model;
    let task = model.cfg.task;
    let data = dataset(&a.data, task)?;
    let want = model.cfg.encoder.image_hw;
    let got = data[0].image().shape();
    if (got[1], got[2]) != want {
        return Err(Failure::Io(format!(
            "checkpoint expects {}x{} images, dataset has {}x{}",
            want.0, want.1, got[1], got[2]
        )));
    }
    fs::create_dir_all(&a.out)?;
    let scale = a.scale.max(1);
    for (i, sample) in data.iter().take(a.count).enumerate() {
        let (out, state) = model.predict(sample.image(), sample.clue().mask())?;
        match sample {
            Sample::Classification(c) => {
                let predicted = (0..out.numel()).fold(0, |m, j| if out.data()[j] > out.data()[m] { j } else { m });
                let r = overlay(&c.image, &state.taus, scale)?;
                let path = save(&r, &a.out, &format!("sample{i:03}_overlay"))?;
                println!(
                    "sample {i}: label {} predicted {predicted} -> {}",
                    c.label,
                    path.display()
                );
            }
            Sample::Inpainting(p) => {
                let panels = inpainting_panels(&p.original, &p.contaminated, &out, p.clue.mask())?;
                let mut paths = Vec::new();
                for (k, r) in panels.iter().enumerate() {
                    let stem = format!("sample{i:03}_{}_{}", k + 1, PANELS[k]);
                    paths.push(save(&r.upscale(scale), &a.out, &stem)?.display().to_string());
                }
                println!("sample {i}: {}", paths.join(" "));
            }
        }
    }
    Ok(())
}

pub fn report(a: ReportArgs) -> Outcome {
    let text = fs::read_to_string(&a.log).map_err(|e| Failure::Io(format!("{}: {e}", a.log.display())))?;
    let mut records = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let r: LossReport = line
            .parse()
            .map_err(|e| Failure::Io(format!("{}:{}: {e}", a.log.display(), n + 1)))?;
        records.push(r);
    }
    let (Some(first), Some(last)) = (records.first(), records.last()) else {
        return Err(Failure::Io(format!("{}: no records", a.log.display())));
    };
    println!("records {} (steps {}..{})", records.len(), first.step, last.step);
    println!("first {first}");
    println!("last  {last}");
    println!("coverage {:.4} -> {:.4}", first.coverage, last.coverage);
    let best = records
        .iter()
        .filter_map(|r| r.acc.map(|a| (r.step, a)))
        .reduce(|m, x| if x.1 > m.1 { x } else { m });
    if let Some((step, acc)) = best {
        println!("best acc {acc:.4} at step {step}");
    }
    let tail = &records[records.len() - records.len().div_ceil(10)..];
    let mean = tail.iter().map(|r| r.total).sum::<f64>() / tail.len() as f64;
    println!("mean total over last {} steps {mean:.6}", tail.len());
    Ok(())
}
