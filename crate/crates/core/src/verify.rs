//! Finite-difference registry and sampler property suite behind `cram check`.

use cram_diff::gradcheck::{op_cases, probe_indices, random_tensor, weighted_sum, GradCheck, Probes};
use cram_diff::{Graph, Mode, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::EncoderConfig;
use crate::decoders::Discriminator;
use crate::encoder::Encoder;
use crate::error::Result;
use crate::losses::{clue_loss, gan_losses, recon_loss, Critics};
use crate::sampler::{bilinear_sample, extract_glimpse, make_grid, AffineParams, SamplerGraph};

#[derive(Clone, Copy)]
enum Runner {
    Engine(fn(&GradCheck, u64) -> cram_diff::Result<f64>),
    Model(fn(&GradCheck, u64) -> Result<f64>),
}

/// One differentiable operation (or composite) under test.
#[derive(Clone, Copy)]
pub struct Case {
    pub name: &'static str,
    pub tolerance: f64,
    runner: Runner,
}

impl Case {
    fn model(name: &'static str, tolerance: f64, f: fn(&GradCheck, u64) -> Result<f64>) -> Self {
        Case {
            name,
            tolerance,
            runner: Runner::Model(f),
        }
    }

    /// Maximum relative error for one seed.
    pub fn run(&self, check: &GradCheck, seed: u64) -> Result<f64> {
        match self.runner {
            Runner::Engine(f) => Ok(f(check, seed)?),
            Runner::Model(f) => f(check, seed),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub name: &'static str,
    pub max_error: f64,
    pub tolerance: f64,
    pub seeds: u64,
    pub probes: usize,
    pub skipped: usize,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.max_error <= self.tolerance
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PropertyResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default)]
pub struct CheckReport {
    pub cases: Vec<CaseResult>,
    pub properties: Vec<PropertyResult>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(CaseResult::passed) && self.properties.iter().all(|p| p.passed)
    }

    pub fn failures(&self) -> Vec<&'static str> {
        self.cases
            .iter()
            .filter(|c| !c.passed())
            .map(|c| c.name)
            .chain(self.properties.iter().filter(|p| !p.passed).map(|p| p.name))
            .collect()
    }
}

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn scaled(t: Tensor<f64>, k: f64) -> Tensor<f64> {
    t.map(|v| v * k)
}

fn binary(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 })
}

/// Compares parameter gradients of `f` with central differences, probing
/// at most `limit` entries of every parameter tensor. Errors are relative
/// to the largest gradient over the whole store, so tensors whose gradient
/// is identically zero (a bias feeding batch norm) are held to that scale.
pub fn check_params<F>(check: &GradCheck, limit: usize, store: &ParamStore<f64>, f: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &mut ParamStore<f64>, bool) -> Result<Var>,
{
    let mut tracked = store.clone();
    let mut g = Graph::new();
    if let Some(op) = &check.fault {
        g.inject_fault(op);
    }
    let loss = f(&mut g, &mut tracked, true)?;
    let grads = g.backward(loss)?;
    tracked.zero_grad();
    tracked.accumulate(&g, &grads);

    let base_sig = g.branch_signature();
    let eval = |s: &mut ParamStore<f64>| -> Result<(f64, bool)> {
        let mut g = Graph::new();
        let l = f(&mut g, s, true)?;
        Ok((g.value(l).item(), g.branch_signature() == base_sig))
    };
    let mut probes = Probes::default();
    for (i, p) in store.params().iter().enumerate() {
        for j in probe_indices(p.value.numel(), Some(limit)) {
            let mut probe = store.clone();
            let base = p.value.data()[j];
            let mut vals = p.value.data().to_vec();
            let id = probe.find(&p.name).expect("own parameter");
            vals[j] = base + check.step;
            probe.set_value(id, Tensor::new(p.value.shape(), vals.clone())?)?;
            let (plus, same_plus) = eval(&mut probe)?;
            vals[j] = base - check.step;
            probe.set_value(id, Tensor::new(p.value.shape(), vals)?)?;
            let (minus, same_minus) = eval(&mut probe)?;
            let analytic = tracked.params()[i].grad.data()[j];
            probes.push(analytic, plus, minus, check.step, same_plus && same_minus);
        }
    }
    Ok(check.finish(&probes))
}

fn unroll_config() -> EncoderConfig {
    EncoderConfig {
        image_hw: (16, 16),
        channels: 1,
        glimpse_hw: (5, 5),
        n_glimpses: 2,
        hidden_size: 5,
        z_dim: 3,
        gv_dim: 4,
        downsample: 4,
        context_channels: 2,
        loc_channels: 2,
        what_channels: 2,
        mlp_dim: 4,
        batch_norm: true,
    }
}

fn bilinear_case(check: &GradCheck, seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed);
    let image = random_tensor(&[2, 2, 7, 6], &mut rng);
    let grid = scaled(random_tensor(&[2, 5, 4, 2], &mut rng), 0.6);
    let ws: u64 = rng.gen();
    check.run(&[image, grid], |g, v| {
        let y = g.bilinear_sample(v[0], v[1])?;
        Ok(weighted_sum(g, y, &mut rng_for(ws))?)
    })
}

fn affine_grid_case(check: &GradCheck, seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed);
    let raw = random_tensor(&[3, 3], &mut rng);
    let ws: u64 = rng.gen();
    check.run(&[raw], |g, v| {
        let tau = g.squash_tau(v[0])?;
        let grid = g.affine_grid(tau, 4, 5)?;
        Ok(weighted_sum(g, grid, &mut rng_for(ws))?)
    })
}

fn glimpse_tau_case(check: &GradCheck, seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed);
    let image = random_tensor(&[2, 1, 9, 9], &mut rng);
    let raw = random_tensor(&[2, 3], &mut rng);
    let ws: u64 = rng.gen();
    check.run(&[image, raw], |g, v| {
        let tau = g.squash_tau(v[1])?;
        let y = g.glimpse(v[0], tau, (4, 4))?;
        Ok(weighted_sum(g, y, &mut rng_for(ws))?)
    })
}

fn clue_loss_case(check: &GradCheck, seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed);
    let clue = binary(&[2, 1, 8, 8], &mut rng);
    let raws = [random_tensor(&[2, 3], &mut rng), random_tensor(&[2, 3], &mut rng)];
    check.run(&raws, |g, v| {
        let c = g.constant(clue.clone());
        let t0 = g.squash_tau(v[0])?;
        let t1 = g.squash_tau(v[1])?;
        clue_loss(g, c, &[t0, t1], (4, 4))
    })
}

fn recon_case(check: &GradCheck, seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed);
    let gen = random_tensor(&[2, 2, 5, 5], &mut rng);
    let truth = random_tensor(&[2, 2, 5, 5], &mut rng);
    let mut clue = binary(&[2, 1, 5, 5], &mut rng);
    if clue.sum() == 0.0 {
        clue = Tensor::ones(clue.shape());
    }
    check.run(&[gen], |g, v| {
        let t = g.constant(truth.clone());
        let c = g.constant(clue.clone());
        recon_loss(g, v[0], t, c)
    })
}

fn gan_case(check: &GradCheck, seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed);
    let mut store = ParamStore::new();
    let critics = Critics {
        local: Discriminator::local(&mut store, 1, 2, 3, (16, 16), false, &mut rng),
        global: Discriminator::global(&mut store, 1, 2, 3, (16, 16), false, &mut rng),
    };
    let real = random_tensor(&[2, 1, 16, 16], &mut rng);
    let fake = scaled(random_tensor(&[2, 1, 16, 16], &mut rng), 0.5);
    let clue = binary(&[2, 1, 16, 16], &mut rng);
    let outer = check;
    let check = check.clone().limit(48);
    // The critic terms see a detached fake, so the fake is checked through
    // the generator term alone.
    let score = |g: &mut Graph<f64>, real: Var, fake: Var, with_critics: bool| {
        let mut s = store.clone();
        let mut f = store.clone();
        let c = g.constant(clue.clone());
        let l = gan_losses(
            g,
            &critics,
            &mut s.bind(Mode::Train, false),
            &mut f.bind(Mode::Train, false),
            real,
            fake,
            c,
        )?;
        if !with_critics {
            return Ok::<_, crate::Error>(l.g_loss);
        }
        let d = g.add(l.d_local, l.d_global)?;
        Ok(g.add(d, l.g_loss)?)
    };
    let real_err = check.run(std::slice::from_ref(&real), |g, v| {
        let f = g.constant(fake.clone());
        score(g, v[0], f, true)
    })?;
    let fake_err = check.run(std::slice::from_ref(&fake), |g, v| {
        let r = g.constant(real.clone());
        score(g, r, v[0], false)
    })?;
    let input_err = real_err.max(fake_err);
    let param_err = check_params(&check, 6, &store, |g, s, track| {
        let mut frozen = s.clone();
        let r = g.constant(real.clone());
        let f = g.constant(fake.clone());
        let c = g.constant(clue.clone());
        let l = gan_losses(
            g,
            &critics,
            &mut s.bind(Mode::Train, track),
            &mut frozen.bind(Mode::Train, false),
            r,
            f,
            c,
        )?;
        Ok(g.add(l.d_local, l.d_global)?)
    })?;
    outer.probes.set(check.probes.get());
    outer.skipped.set(check.skipped.get());
    Ok(input_err.max(param_err))
}

fn encoder_unroll_case(check: &GradCheck, seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed);
    let cfg = unroll_config();
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, &cfg, &mut rng)?;
    // Nonzero localization head so the transforms depend on the state.
    let head = enc.localizer.final_layer().w;
    let shape = store.param(head).value.shape().to_vec();
    store.set_value(head, scaled(random_tensor(&shape, &mut rng), 0.5))?;
    let image = random_tensor(&[4, 1, 16, 16], &mut rng);
    let clue = binary(&[4, 1, 16, 16], &mut rng);
    let ws: u64 = rng.gen();
    let input_err = check.run(std::slice::from_ref(&image), |g, v| {
        let mut s = store.clone();
        let c = g.constant(clue.clone());
        let out = enc.forward(g, &mut s.bind(Mode::Train, false), v[0], c)?;
        Ok::<_, crate::Error>(weighted_sum(g, out.z, &mut rng_for(ws))?)
    })?;
    let param_err = check_params(check, 4, &store, |g, s, track| {
        let x = g.constant(image.clone());
        let c = g.constant(clue.clone());
        let out = enc.forward(g, &mut s.bind(Mode::Train, track), x, c)?;
        Ok(weighted_sum(g, out.z, &mut rng_for(ws))?)
    })?;
    Ok(input_err.max(param_err))
}

/// Every registered differentiable operation.
pub fn registry() -> Vec<Case> {
    let mut cases: Vec<Case> = op_cases()
        .into_iter()
        .map(|c| Case {
            name: c.name,
            tolerance: c.tolerance,
            runner: Runner::Engine(c.run),
        })
        .collect();
    cases.extend([
        Case::model("bilinear_sample", 1e-4, bilinear_case),
        Case::model("affine_grid", 1e-4, affine_grid_case),
        Case::model("glimpse_tau", 1e-4, glimpse_tau_case),
        Case::model("clue_loss", 1e-4, clue_loss_case),
        Case::model("recon_loss", 1e-4, recon_case),
        Case::model("gan_losses", 1e-4, gan_case),
        Case::model("encoder_unroll_n2", 1e-3, encoder_unroll_case),
    ]);
    cases
}

/// Runs `case` over seeds `0..seeds`.
pub fn run_case(case: &Case, check: &GradCheck, seeds: u64) -> Result<CaseResult> {
    let (p0, s0) = (check.probes.get(), check.skipped.get());
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        worst = worst.max(case.run(check, seed)?);
    }
    Ok(CaseResult {
        name: case.name,
        max_error: worst,
        tolerance: case.tolerance,
        seeds,
        probes: check.probes.get() - p0,
        skipped: check.skipped.get() - s0,
    })
}

fn property(name: &'static str, passed: bool, detail: String) -> PropertyResult {
    PropertyResult { name, passed, detail }
}

/// Sampler properties checked on fixed random inputs.
pub fn sampler_properties(seed: u64) -> Result<Vec<PropertyResult>> {
    let mut rng = rng_for(seed);
    let mut out = Vec::new();

    let image = random_tensor(&[3, 9, 7], &mut rng);
    let same = extract_glimpse(&image, AffineParams::IDENTITY, 1, (9, 7))?;
    let err = same
        .pixels
        .data()
        .iter()
        .zip(image.data())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    out.push(property(
        "identity_reproduces_image",
        err <= 1e-6,
        format!("max |diff| {err:e}"),
    ));

    let g: Tensor<f64> = make_grid(AffineParams::new(0.5, 0.2, -0.1), 3, 3)?;
    let want = |i: usize, j: usize| {
        let xt = -1.0 + j as f64;
        let yt = -1.0 + i as f64;
        (0.5 * xt + 0.2, 0.5 * yt - 0.1)
    };
    let exact = (0..3).all(|i| {
        (0..3).all(|j| {
            let (x, y) = want(i, j);
            g.at(&[i, j, 0]) == x && g.at(&[i, j, 1]) == y
        })
    });
    out.push(property(
        "make_grid_closed_form",
        exact,
        "s=0.5, t=(0.2,-0.1) on 3x3".into(),
    ));

    let mut valid = true;
    for _ in 0..1000 {
        let r = |rng: &mut ChaCha8Rng| rng.gen_range(-50.0..50.0);
        valid &= AffineParams::squash(r(&mut rng), r(&mut rng), r(&mut rng)).is_valid();
    }
    for extreme in [-1e6, 1e6] {
        valid &= AffineParams::squash(extreme, extreme, -extreme).is_valid();
    }
    out.push(property(
        "squash_stays_valid",
        valid,
        "1000 random + extreme raw outputs".into(),
    ));

    let far = make_grid::<f64>(AffineParams::new(0.5, 0.0, 0.0), 2, 2)?.map(|v| v + 5.0);
    let outside = bilinear_sample(&image, &far)?;
    let zero = outside.data().iter().all(|&v| v == 0.0);
    out.push(property(
        "outside_samples_are_zero",
        zero,
        "grid shifted far off the image".into(),
    ));

    // Shifting tx by whole pixels equals shifting the image.
    let w = 11;
    let base = random_tensor(&[1, 8, w], &mut rng);
    let shifted = Tensor::from_fn(&[1, 8, w], |i| {
        let (y, x) = (i / w, i % w);
        if x + 2 < w {
            base.at(&[0, y, x + 2])
        } else {
            0.0
        }
    });
    let dx = 2.0 * 2.0 / (w - 1) as f64;
    let a = extract_glimpse(&base, AffineParams::new(0.3, 0.1 + dx, 0.0), 1, (5, 5))?;
    let b = extract_glimpse(&shifted, AffineParams::new(0.3, 0.1, 0.0), 1, (5, 5))?;
    let err = a
        .pixels
        .data()
        .iter()
        .zip(b.pixels.data())
        .fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
    out.push(property(
        "translation_equivariance",
        err <= 1e-9,
        format!("max |diff| {err:e}"),
    ));
    Ok(out)
}

/// Whole suite: every registered case over `seeds` seeds plus the sampler
/// properties. `fault` breaks the backward pass of the named operation.
pub fn run_all(seeds: u64, fault: Option<&str>) -> Result<CheckReport> {
    let check = GradCheck::default().fault(fault);
    let mut report = CheckReport::default();
    for case in registry() {
        report.cases.push(run_case(&case, &check, seeds)?);
    }
    report.properties = sampler_properties(0)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_names_are_unique_and_cover_the_required_ops() {
        let names: Vec<&str> = registry().iter().map(|c| c.name).collect();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        for need in [
            "matmul",
            "conv2d",
            "maxpool2d",
            "batchnorm",
            "elu",
            "sigmoid",
            "tanh",
            "lstm_cell",
            "softmax_cross_entropy",
            "bilinear_sample",
            "glimpse_tau",
            "encoder_unroll_n2",
        ] {
            assert!(names.contains(&need), "{need} missing");
        }
    }

    #[test]
    fn sampler_properties_hold() {
        for p in sampler_properties(3).unwrap() {
            assert!(p.passed, "{}: {}", p.name, p.detail);
        }
    }

    #[test]
    fn parameter_checker_catches_a_broken_op() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_f64(&[3], &[0.3, -0.7, 1.1]).unwrap());
        let f = |g: &mut Graph<f64>, s: &mut ParamStore<f64>, track: bool| -> Result<Var> {
            let w = s.bind(Mode::Train, track).param(g, id);
            let y = g.tanh(w);
            Ok(g.sum(y))
        };
        assert!(check_params(&GradCheck::default(), 8, &store, f).unwrap() < 1e-8);
        let broken = GradCheck::default().fault(Some("tanh"));
        assert!(check_params(&broken, 8, &store, f).unwrap() > 0.1);
    }

    #[test]
    fn new_cases_pass_on_a_few_seeds() {
        let check = GradCheck::default();
        for case in registry().iter().filter(|c| !c.name.starts_with("encoder")) {
            let r = run_case(case, &check, 2).unwrap();
            assert!(r.passed(), "{} {:e}", r.name, r.max_error);
        }
    }
}
