//! Training loops, evaluation and resumable trainer state.

use std::fmt::Write as _;
use std::io::Write;

use cram_diff::{Graph, Mode, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{get, model_from_text, model_to_text, parse_kv, ModelConfig, Task, TrainConfig};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::losses::{active_pixels, clue_loss, gan_losses, recon_loss, LossReport};
use crate::model::{Head, Model};
use crate::optim::Adam;

const EVAL_CHUNK: usize = 64;

/// Which parameter sets an inpainting step updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Both,
    Critics,
    Generator,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    /// Mean glimpse clue coverage.
    pub coverage: f64,
    pub accuracy: Option<f64>,
    /// Mean absolute error over clue pixels.
    pub masked_l1: Option<f64>,
}

impl Evaluation {
    /// The headline number of the task: accuracy or masked L1.
    pub fn metric(&self) -> f64 {
        self.accuracy.or(self.masked_l1).unwrap_or(f64::NAN)
    }
}

/// Sample indices of the batch for `step`; a pure function of its inputs,
/// so a resumed run draws the same batches.
pub fn batch_indices(seed: u64, step: u64, n: usize, batch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    (0..batch).map(|_| rng.gen_range(0..n)).collect()
}

/// Checks that every sample belongs to `task` and drops inpainting samples
/// whose clue is empty.
pub fn usable(samples: Vec<Sample>, task: Task) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(samples.len());
    for (i, s) in samples.into_iter().enumerate() {
        match (&s, task) {
            (Sample::Classification(_), Task::Classification) => out.push(s),
            (Sample::Inpainting(p), Task::Inpainting) => {
                if p.clue.active() == 0 {
                    log::warn!("skipping sample {i}: clue has no active pixels");
                } else {
                    out.push(s);
                }
            }
            _ => {
                return Err(Error::data(format!(
                    "sample {i} does not belong to the {} task",
                    task.as_str()
                )))
            }
        }
    }
    if out.is_empty() {
        return Err(Error::data("dataset is empty"));
    }
    Ok(out)
}

struct Batch {
    image: Tensor<f32>,
    clue: Tensor<f32>,
    labels: Vec<usize>,
    original: Option<Tensor<f32>>,
}

fn make_batch(samples: &[&Sample]) -> Result<Batch> {
    let images: Vec<&Tensor<f32>> = samples.iter().map(|s| s.image()).collect();
    let clues: Vec<&Tensor<f32>> = samples.iter().map(|s| s.clue().mask()).collect();
    let mut labels = Vec::new();
    let mut originals = Vec::new();
    for s in samples {
        match s {
            Sample::Classification(c) => labels.push(c.label),
            Sample::Inpainting(p) => originals.push(&p.original),
        }
    }
    Ok(Batch {
        image: Tensor::stack(&images)?,
        clue: Tensor::stack(&clues)?,
        labels,
        original: if originals.is_empty() {
            None
        } else {
            Some(Tensor::stack(&originals)?)
        },
    })
}

fn scalar(g: &Graph<f32>, v: Var) -> f64 {
    g.value(v).item() as f64
}

/// Model, optimizers and step counter of one run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model<f32>,
    pub cfg: TrainConfig,
    pub opt: Adam<f32>,
    pub opt_disc: Adam<f32>,
    pub step: u64,
}

impl Trainer {
    /// Fresh run; the model is initialized from `cfg.seed`.
    pub fn new(model: &ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(model, cfg.seed)?;
        let opt = Adam::new(&model.main, cfg.lr);
        let opt_disc = Adam::new(&model.disc, cfg.lr);
        Ok(Trainer {
            model,
            cfg,
            opt,
            opt_disc,
            step: 0,
        })
    }

    pub fn task(&self) -> Task {
        self.model.cfg.task
    }

    /// One optimizer step on a batch drawn from `data`.
    pub fn step(&mut self, data: &[Sample]) -> Result<LossReport> {
        self.step_phase(data, Phase::Both)
    }

    /// Like [`Trainer::step`], restricted to one side of the adversarial
    /// game. Classification ignores the phase.
    pub fn step_phase(&mut self, data: &[Sample], phase: Phase) -> Result<LossReport> {
        if data.is_empty() {
            return Err(Error::data("dataset is empty"));
        }
        let idx = batch_indices(self.cfg.seed, self.step, data.len(), self.cfg.batch_size);
        let picked: Vec<&Sample> = idx.iter().map(|&i| &data[i]).collect();
        let batch = make_batch(&picked)?;
        let report = match self.task() {
            Task::Classification => self.classification_step(&batch)?,
            Task::Inpainting => self.inpainting_step(&batch, phase)?,
        };
        self.step += 1;
        Ok(report)
    }

    fn encoder_inputs(&self, g: &mut Graph<f32>, batch: &Batch) -> (Var, Var, Var) {
        let image = g.constant(batch.image.clone());
        let clue = g.constant(batch.clue.clone());
        let scale = self.cfg.clue_scale;
        let fed = if scale == 1.0 {
            clue
        } else {
            g.constant(batch.clue.map(|v| v * scale))
        };
        (image, clue, fed)
    }

    fn classification_step(&mut self, batch: &Batch) -> Result<LossReport> {
        let mut g = Graph::new();
        let (image, clue, fed) = self.encoder_inputs(&mut g, batch);
        let Model {
            encoder, head, main, ..
        } = &mut self.model;
        let Head::Classifier(cls) = head else {
            return Err(Error::config("classification step on an inpainting model"));
        };
        let (out, logits) = {
            let mut p = main.bind(Mode::Train, true);
            let out = encoder.forward(&mut g, &mut p, image, fed)?;
            let logits = cls.forward(&mut g, &mut p, out.z)?;
            (out, logits)
        };
        let ce = g.softmax_cross_entropy(logits, &batch.labels)?;
        let lc = clue_loss(&mut g, clue, &out.taus, encoder.cfg.glimpse_hw)?;
        let loss = g.add(lc, ce)?;
        let grads = g.backward(loss)?;
        main.zero_grad();
        main.accumulate(&g, &grads);
        self.opt.step(main)?;
        let (l_clue, l_task) = (scalar(&g, lc), scalar(&g, ce));
        Ok(LossReport {
            step: self.step,
            l_clue,
            l_task,
            l_d_local: 0.0,
            l_d_global: 0.0,
            total: l_clue + l_task,
            coverage: -l_clue,
            acc: None,
        })
    }

    fn inpainting_step(&mut self, batch: &Batch, phase: Phase) -> Result<LossReport> {
        let (alpha, beta) = (self.cfg.alpha, self.cfg.beta);
        let mut g = Graph::new();
        let (image, clue, fed) = self.encoder_inputs(&mut g, batch);
        let truth = g.constant(batch.original.clone().expect("inpainting batch"));
        let Model {
            encoder,
            head,
            critics,
            main,
            disc,
            ..
        } = &mut self.model;
        let (Head::Generator(gen), Some(critics)) = (head, critics) else {
            return Err(Error::config("inpainting step on a classification model"));
        };
        let (out, fake) = {
            let mut p = main.bind(Mode::Train, true);
            let out = encoder.forward(&mut g, &mut p, image, fed)?;
            let fake = gen.forward(&mut g, &mut p, out.z)?;
            (out, fake)
        };
        let lc = clue_loss(&mut g, clue, &out.taus, encoder.cfg.glimpse_hw)?;
        let recon = recon_loss(&mut g, fake, truth, clue)?;
        let weighted = g.scale(recon, alpha as f32);
        let mut loss = g.add(lc, weighted)?;
        let mut adv = None;
        if beta > 0.0 {
            let mut frozen = disc.clone();
            let gl = gan_losses(
                &mut g,
                critics,
                &mut disc.bind(Mode::Train, true),
                &mut frozen.bind(Mode::Train, false),
                truth,
                fake,
                clue,
            )?;
            let wg = g.scale(gl.g_loss, beta as f32);
            loss = g.add(loss, wg)?;
            adv = Some(gl);
        }

        if phase != Phase::Critics {
            let grads = g.backward(loss)?;
            main.zero_grad();
            main.accumulate(&g, &grads);
            self.opt.step(main)?;
        }
        if let (Some(gl), true) = (adv, phase != Phase::Generator) {
            let d_total = g.add(gl.d_local, gl.d_global)?;
            let grads = g.backward(d_total)?;
            disc.zero_grad();
            disc.accumulate(&g, &grads);
            self.opt_disc.step(disc)?;
        }

        let l_clue = scalar(&g, lc);
        let g_loss = adv.map_or(0.0, |gl| scalar(&g, gl.g_loss));
        let l_task = alpha * scalar(&g, recon) + beta * g_loss;
        Ok(LossReport {
            step: self.step,
            l_clue,
            l_task,
            l_d_local: adv.map_or(0.0, |gl| scalar(&g, gl.d_local)),
            l_d_global: adv.map_or(0.0, |gl| scalar(&g, gl.d_global)),
            total: l_clue + l_task,
            coverage: -l_clue,
            acc: None,
        })
    }

    /// Inference-mode pass over `data` in fixed-size chunks.
    pub fn evaluate(&mut self, data: &[Sample]) -> Result<Evaluation> {
        if data.is_empty() {
            return Err(Error::data("evaluation set is empty"));
        }
        let task = self.task();
        let mut coverage = 0.0;
        let mut correct = 0usize;
        let mut abs_sum = 0.0f64;
        let mut active = 0usize;
        for chunk in data.chunks(EVAL_CHUNK) {
            let refs: Vec<&Sample> = chunk.iter().collect();
            let batch = make_batch(&refs)?;
            let mut g = Graph::new();
            let (image, clue, fed) = self.encoder_inputs(&mut g, &batch);
            let Model {
                encoder, head, main, ..
            } = &mut self.model;
            let mut p = main.bind(Mode::Infer, false);
            let out = encoder.forward(&mut g, &mut p, image, fed)?;
            let lc = clue_loss(&mut g, clue, &out.taus, encoder.cfg.glimpse_hw)?;
            coverage -= scalar(&g, lc) * chunk.len() as f64;
            match head {
                Head::Classifier(cls) => {
                    let logits = cls.forward(&mut g, &mut p, out.z)?;
                    let l = g.value(logits);
                    let k = l.shape()[1];
                    for (b, row) in l.data().chunks(k).enumerate() {
                        let best = (0..k).fold(0, |m, j| if row[j] > row[m] { j } else { m });
                        if best == batch.labels[b] {
                            correct += 1;
                        }
                    }
                }
                Head::Generator(gen) => {
                    let fake = gen.forward(&mut g, &mut p, out.z)?;
                    let f = g.value(fake);
                    let truth = batch.original.as_ref().expect("inpainting batch");
                    let plane = batch.clue.numel() / chunk.len();
                    let per = f.numel() / chunk.len();
                    for (i, (&a, &b)) in f.data().iter().zip(truth.data()).enumerate() {
                        let (s, r) = (i / per, i % per);
                        if batch.clue.data()[s * plane + r % plane] == 1.0 {
                            abs_sum += (a - b).abs() as f64;
                        }
                    }
                    let channels = per / plane;
                    active += active_pixels(&batch.clue) * channels;
                }
            }
        }
        let n = data.len() as f64;
        Ok(Evaluation {
            coverage: coverage / n,
            accuracy: (task == Task::Classification).then(|| correct as f64 / n),
            masked_l1: (task == Task::Inpainting).then(|| if active == 0 { 0.0 } else { abs_sum / active as f64 }),
        })
    }

    fn header(&self) -> String {
        let mut s = model_to_text(&self.model.cfg);
        let c = &self.cfg;
        let _ = writeln!(s, "seed = {}", c.seed);
        let _ = writeln!(s, "steps = {}", c.steps);
        let _ = writeln!(s, "batch_size = {}", c.batch_size);
        let _ = writeln!(s, "lr = {}", c.lr);
        let _ = writeln!(s, "alpha = {}", c.alpha);
        let _ = writeln!(s, "beta = {}", c.beta);
        let _ = writeln!(s, "eval_interval = {}", c.eval_interval);
        let _ = writeln!(s, "clue_scale = {}", c.clue_scale);
        let _ = writeln!(s, "step = {}", self.step);
        let _ = writeln!(s, "adam_step = {}", self.opt.step);
        let _ = writeln!(s, "adam_disc_step = {}", self.opt_disc.step);
        s
    }

    /// Everything needed to continue this run bit-exactly.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut entries = Vec::new();
        for (prefix, store, opt) in [
            ("main", &self.model.main, &self.opt),
            ("disc", &self.model.disc, &self.opt_disc),
        ] {
            for (i, p) in store.params().iter().enumerate() {
                entries.push((format!("{prefix}/{}", p.name), p.value.clone()));
                entries.push((format!("{prefix}.adam_m/{}", p.name), opt.m[i].clone()));
                entries.push((format!("{prefix}.adam_v/{}", p.name), opt.v[i].clone()));
            }
            for (name, st) in store.stats() {
                let n = st.mean.len();
                entries.push((
                    format!("{prefix}.bn_mean/{name}"),
                    Tensor::new(&[n], st.mean.clone()).expect("length"),
                ));
                entries.push((
                    format!("{prefix}.bn_var/{name}"),
                    Tensor::new(&[n], st.var.clone()).expect("length"),
                ));
            }
        }
        Checkpoint {
            header: self.header(),
            entries,
        }
    }

    /// Rebuilds a trainer from [`Trainer::checkpoint`] output.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let kv = parse_kv(&ckpt.header)?;
        let model_cfg = model_from_text(&ckpt.header)?;
        let need = |key: &str| Error::config(format!("checkpoint header lacks `{key}`"));
        let cfg = TrainConfig {
            seed: get(&kv, "seed")?.ok_or_else(|| need("seed"))?,
            steps: get(&kv, "steps")?.ok_or_else(|| need("steps"))?,
            batch_size: get(&kv, "batch_size")?.ok_or_else(|| need("batch_size"))?,
            lr: get(&kv, "lr")?.ok_or_else(|| need("lr"))?,
            alpha: get(&kv, "alpha")?.ok_or_else(|| need("alpha"))?,
            beta: get(&kv, "beta")?.ok_or_else(|| need("beta"))?,
            eval_interval: get(&kv, "eval_interval")?.ok_or_else(|| need("eval_interval"))?,
            clue_scale: get(&kv, "clue_scale")?.ok_or_else(|| need("clue_scale"))?,
        };
        let mut t = Trainer::new(&model_cfg, cfg)?;
        t.step = get(&kv, "step")?.ok_or_else(|| need("step"))?;
        t.opt.step = get(&kv, "adam_step")?.ok_or_else(|| need("adam_step"))?;
        t.opt_disc.step = get(&kv, "adam_disc_step")?.ok_or_else(|| need("adam_disc_step"))?;
        let Trainer {
            model, opt, opt_disc, ..
        } = &mut t;
        restore(ckpt, "main", &mut model.main, opt)?;
        restore(ckpt, "disc", &mut model.disc, opt_disc)?;
        Ok(t)
    }
}

fn restore(ckpt: &Checkpoint, prefix: &str, store: &mut ParamStore<f32>, opt: &mut Adam<f32>) -> Result<()> {
    let fetch = |kind: &str, name: &str, shape: &[usize]| -> Result<Tensor<f32>> {
        let key = format!("{prefix}{kind}/{name}");
        let t = ckpt
            .get(&key)
            .ok_or_else(|| Error::data(format!("checkpoint lacks `{key}`")))?;
        if t.shape() != shape {
            return Err(Error::data(format!(
                "checkpoint entry `{key}` has shape {:?}, model expects {shape:?}",
                t.shape()
            )));
        }
        Ok(t.clone())
    };
    for (i, p) in store.params_mut().iter_mut().enumerate() {
        let shape = p.value.shape().to_vec();
        p.value = fetch("", &p.name, &shape)?;
        opt.m[i] = fetch(".adam_m", &p.name, &shape)?;
        opt.v[i] = fetch(".adam_v", &p.name, &shape)?;
    }
    for (name, st) in store.stats_mut() {
        let n = st.mean.len();
        st.mean = fetch(".bn_mean", name, &[n])?.into_data();
        st.var = fetch(".bn_var", name, &[n])?.into_data();
    }
    Ok(())
}

/// Outcome of [`fit`].
#[derive(Clone, Debug)]
pub struct Summary {
    pub last: Option<LossReport>,
    pub evals: Vec<(u64, Evaluation)>,
}

impl Summary {
    /// Highest accuracy or lowest masked L1 seen at an evaluation.
    pub fn best(&self) -> Option<(u64, Evaluation)> {
        self.evals.iter().copied().reduce(|a, b| {
            let better = match (a.1.accuracy, b.1.accuracy) {
                (Some(x), Some(y)) => y > x,
                _ => b.1.metric() < a.1.metric(),
            };
            if better {
                b
            } else {
                a
            }
        })
    }
}

/// Trains until `trainer.cfg.steps`, writing one metrics line per step.
/// Every `eval_interval` steps and after the last one, `eval` (or the
/// training set) is evaluated and `on_eval` runs.
pub fn fit(
    trainer: &mut Trainer,
    train: &[Sample],
    eval: Option<&[Sample]>,
    log: &mut dyn Write,
    mut on_eval: impl FnMut(&Trainer, &Evaluation) -> Result<()>,
) -> Result<Summary> {
    let mut summary = Summary {
        last: None,
        evals: Vec::new(),
    };
    while trainer.step < trainer.cfg.steps {
        let mut report = trainer.step(train)?;
        let done = trainer.step;
        if done.is_multiple_of(trainer.cfg.eval_interval) || done == trainer.cfg.steps {
            let e = trainer.evaluate(eval.unwrap_or(train))?;
            report.acc = e.accuracy;
            summary.evals.push((done, e));
            on_eval(trainer, &e)?;
        }
        writeln!(log, "{report}")?;
        summary.last = Some(report);
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::EncoderConfig;
    use crate::data::{gen_classification, gen_inpainting};

    fn tiny(task: Task, hw: usize) -> ModelConfig {
        let mut m = ModelConfig::new(
            task,
            EncoderConfig {
                image_hw: (hw, hw),
                glimpse_hw: (6, 6),
                n_glimpses: 2,
                hidden_size: 12,
                z_dim: 8,
                gv_dim: 8,
                context_channels: 4,
                loc_channels: 4,
                what_channels: 4,
                mlp_dim: 12,
                ..EncoderConfig::default()
            },
        );
        m.cls_hidden = 12;
        m.gen_channels = 16;
        m.disc_channels = 4;
        m.disc_hidden = 8;
        m
    }

    fn cls_data(n: usize, seed: u64) -> Vec<Sample> {
        gen_classification(n, 16, 4, seed)
            .unwrap()
            .into_iter()
            .map(Sample::Classification)
            .collect()
    }

    fn inp_data(n: usize, seed: u64) -> Vec<Sample> {
        gen_inpainting(n, 16, 0.0625, seed)
            .unwrap()
            .into_iter()
            .map(Sample::Inpainting)
            .collect()
    }

    fn train_cfg(batch: usize) -> TrainConfig {
        TrainConfig {
            seed: 3,
            steps: 4,
            batch_size: batch,
            lr: 1e-3,
            eval_interval: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn batches_depend_only_on_seed_and_step() {
        assert_eq!(batch_indices(1, 5, 10, 8), batch_indices(1, 5, 10, 8));
        assert_ne!(batch_indices(1, 5, 10, 8), batch_indices(1, 6, 10, 8));
        assert_ne!(batch_indices(1, 5, 10, 8), batch_indices(2, 5, 10, 8));
        assert!(batch_indices(9, 0, 3, 50).iter().all(|&i| i < 3));
    }

    #[test]
    fn empty_and_mismatched_datasets_are_rejected() {
        assert!(usable(Vec::new(), Task::Classification).is_err());
        assert!(usable(cls_data(2, 0), Task::Inpainting).is_err());
        let mut t = Trainer::new(&tiny(Task::Classification, 16), train_cfg(4)).unwrap();
        assert!(t.step(&[]).is_err());
    }

    #[test]
    fn empty_clues_are_skipped() {
        let mut data = inp_data(3, 1);
        if let Sample::Inpainting(p) = &mut data[1] {
            p.clue = crate::data::ClueImage::zeros(16, 16);
        }
        let kept = usable(data, Task::Inpainting).unwrap();
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn classification_total_is_the_sum_of_terms() {
        let data = cls_data(16, 0);
        let mut t = Trainer::new(&tiny(Task::Classification, 16), train_cfg(8)).unwrap();
        for _ in 0..3 {
            let r = t.step(&data).unwrap();
            assert!((r.total - (r.l_clue + r.l_task)).abs() < 1e-6);
            assert!((0.0..=1.0).contains(&r.coverage));
            assert_eq!((r.l_d_local, r.l_d_global), (0.0, 0.0));
        }
        assert_eq!(t.step, 3);
    }

    #[test]
    fn inpainting_total_is_the_weighted_sum() {
        let data = inp_data(16, 0);
        let mut t = Trainer::new(&tiny(Task::Inpainting, 16), train_cfg(8)).unwrap();
        let r = t.step(&data).unwrap();
        assert!(r.l_d_local > 0.0 && r.l_d_global > 0.0);
        assert!((r.total - (r.l_clue + r.l_task)).abs() < 1e-6);
    }

    fn params(s: &ParamStore<f32>) -> Vec<Vec<u32>> {
        s.params()
            .iter()
            .map(|p| p.value.data().iter().map(|v| v.to_bits()).collect())
            .collect()
    }

    #[test]
    fn critic_and_generator_steps_touch_disjoint_parameters() {
        let data = inp_data(16, 2);
        let mut t = Trainer::new(&tiny(Task::Inpainting, 16), train_cfg(8)).unwrap();
        let (m0, d0) = (params(&t.model.main), params(&t.model.disc));
        t.step_phase(&data, Phase::Critics).unwrap();
        let (m1, d1) = (params(&t.model.main), params(&t.model.disc));
        assert_eq!(m1, m0);
        assert_ne!(d1, d0);
        t.step_phase(&data, Phase::Generator).unwrap();
        assert_eq!(params(&t.model.disc), d1);
        assert_ne!(params(&t.model.main), m1);
    }

    #[test]
    fn zero_beta_never_moves_the_critics() {
        let data = inp_data(16, 4);
        let cfg = TrainConfig {
            beta: 0.0,
            alpha: 1.0,
            ..train_cfg(8)
        };
        let mut t = Trainer::new(&tiny(Task::Inpainting, 16), cfg).unwrap();
        let d0 = params(&t.model.disc);
        for _ in 0..3 {
            let r = t.step(&data).unwrap();
            assert_eq!((r.l_d_local, r.l_d_global), (0.0, 0.0));
        }
        assert_eq!(params(&t.model.disc), d0);
    }

    #[test]
    fn evaluation_reports_task_metrics() {
        let mut c = Trainer::new(&tiny(Task::Classification, 16), train_cfg(4)).unwrap();
        let e = c.evaluate(&cls_data(70, 5)).unwrap();
        assert!(e.accuracy.is_some() && e.masked_l1.is_none());
        assert!((0.0..=1.0).contains(&e.coverage));
        let mut i = Trainer::new(&tiny(Task::Inpainting, 16), train_cfg(4)).unwrap();
        let e = i.evaluate(&inp_data(5, 5)).unwrap();
        assert!(e.masked_l1.unwrap() > 0.0 && e.accuracy.is_none());
    }

    #[test]
    fn fit_logs_one_parseable_line_per_step() {
        let data = cls_data(16, 7);
        let mut t = Trainer::new(&tiny(Task::Classification, 16), train_cfg(4)).unwrap();
        let mut log = Vec::new();
        let mut evals = 0;
        let s = fit(&mut t, &data, None, &mut log, |_, _| {
            evals += 1;
            Ok(())
        })
        .unwrap();
        let text = String::from_utf8(log).unwrap();
        let lines: Vec<LossReport> = text.lines().map(|l| l.parse().unwrap()).collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(evals, 2);
        assert!(lines[1].acc.is_some() && lines[0].acc.is_none());
        assert_eq!(s.evals.len(), 2);
        assert!(s.best().is_some());
    }

    #[test]
    fn checkpoint_restores_the_trainer_exactly() {
        let data = inp_data(16, 8);
        let mut t = Trainer::new(&tiny(Task::Inpainting, 16), train_cfg(4)).unwrap();
        t.step(&data).unwrap();
        let ckpt = t.checkpoint();
        let back = Trainer::from_checkpoint(&Checkpoint::decode(&ckpt.encode()).unwrap()).unwrap();
        assert_eq!(back.checkpoint(), ckpt);
        assert_eq!(back.step, 1);
        assert_eq!(back.opt, t.opt);
    }
}
