//! Clue, reconstruction and adversarial objectives.

use std::fmt;
use std::str::FromStr;

use cram_diff::{Bound, Graph, Scalar, Tensor, Var};

use crate::decoders::{mask, Discriminator};
use crate::error::{Error, Result};
use crate::sampler::{extract_glimpse, AffineParams, SamplerGraph};

pub const LOG_EPS: f64 = 1e-8;

/// `-(1/N) sum_n mean(glimpse(clue, tau_n))` for `clue[B x 1 x H x W]`
/// and one `[B x 3]` transform per step.
pub fn clue_loss<T: Scalar>(g: &mut Graph<T>, clue: Var, taus: &[Var], glimpse_hw: (usize, usize)) -> Result<Var> {
    if taus.is_empty() {
        return Err(Error::usage("clue loss needs at least one glimpse"));
    }
    let mut total: Option<Var> = None;
    for &tau in taus {
        let patch = g.glimpse(clue, tau, glimpse_hw)?;
        let m = g.mean(patch);
        total = Some(match total {
            None => m,
            Some(t) => g.add(t, m)?,
        });
    }
    let n = taus.len() as f64;
    Ok(g.scale(total.expect("non-empty"), T::lit(-1.0 / n)))
}

/// Mean fraction of glimpse pixels that fall on the clue, for one sample.
pub fn coverage<T: Scalar>(clue: &Tensor<T>, taus: &[AffineParams], glimpse_hw: (usize, usize)) -> Result<f64> {
    if taus.is_empty() {
        return Err(Error::usage("coverage needs at least one glimpse"));
    }
    let mut sum = 0.0;
    for (n, &tau) in taus.iter().enumerate() {
        let patch = extract_glimpse(clue, tau, n + 1, glimpse_hw)?;
        sum += patch.pixels.cast::<f64>().mean();
    }
    Ok(sum / taus.len() as f64)
}

/// Number of pixels with clue value 1.
pub fn active_pixels<T: Scalar>(clue: &Tensor<T>) -> usize {
    clue.data().iter().filter(|&&v| v == T::one()).count()
}

/// Masked L1 between `generated` and `truth` `[B x C x H x W]`, divided by
/// the number of masked values. `clue` is `[B x 1 x H x W]`.
pub fn recon_loss<T: Scalar>(g: &mut Graph<T>, generated: Var, truth: Var, clue: Var) -> Result<Var> {
    let channels = g.shape(generated)[1];
    let active = active_pixels(g.value(clue));
    if active == 0 {
        return Err(Error::data("reconstruction loss over an empty clue"));
    }
    let diff = g.sub(generated, truth)?;
    let masked = mask(g, diff, clue)?;
    let a = g.abs(masked);
    let s = g.sum(a);
    Ok(g.scale(s, T::lit(1.0 / (active * channels) as f64)))
}

/// `-mean(log D(real)) - mean(log(1 - D(fake)))` from `[B x 1]` scores.
pub fn d_loss<T: Scalar>(g: &mut Graph<T>, real: Var, fake: Var) -> Result<Var> {
    let eps = T::lit(LOG_EPS);
    let lr = g.log_clamped(real, eps);
    let lr = g.mean(lr);
    let nf = g.one_minus(fake);
    let lf = g.log_clamped(nf, eps);
    let lf = g.mean(lf);
    let s = g.add(lr, lf)?;
    Ok(g.neg(s))
}

/// Non-saturating generator term `-mean(log D(fake))`.
pub fn g_term<T: Scalar>(g: &mut Graph<T>, fake: Var) -> Var {
    let l = g.log_clamped(fake, T::lit(LOG_EPS));
    let l = g.mean(l);
    g.neg(l)
}

/// The local and global critics.
#[derive(Clone, Debug)]
pub struct Critics {
    pub local: Discriminator,
    pub global: Discriminator,
}

#[derive(Clone, Copy, Debug)]
pub struct GanLosses {
    pub d_local: Var,
    pub d_global: Var,
    /// Generator loss summed over both critics.
    pub g_loss: Var,
}

/// `[a; b]` along the batch axis.
fn batch_concat<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let mut shape = g.shape(a).to_vec();
    let n = g.value(a).numel();
    let fa = g.reshape(a, &[1, n])?;
    let fb = g.reshape(b, &[1, g.value(b).numel()])?;
    let joined = g.concat(&[fa, fb])?;
    shape[0] += g.shape(b)[0];
    Ok(g.reshape(joined, &shape)?)
}

/// Scores of `real` and `fake` from one pass over the joint batch.
pub fn score_pair<T: Scalar>(
    g: &mut Graph<T>,
    critic: &Discriminator,
    p: &mut Bound<T>,
    real: Var,
    fake: Var,
    clue: Option<Var>,
) -> Result<(Var, Var)> {
    let b = g.shape(real)[0];
    let x = batch_concat(g, real, fake)?;
    let scores = match clue {
        Some(c) => {
            let cc = batch_concat(g, c, c)?;
            critic.forward_masked(g, p, x, cc)?
        }
        None => critic.forward(g, p, x)?,
    };
    let row = g.reshape(scores, &[1, 2 * b])?;
    let r = g.slice(row, 0, b)?;
    let f = g.slice(row, b, b)?;
    Ok((g.reshape(r, &[b, 1])?, g.reshape(f, &[b, 1])?))
}

/// Adversarial losses for one batch.
///
/// Each critic scores real and fake images as one joint batch, so in
/// training mode both halves share batch-norm statistics. The critic losses
/// see a detached copy of `fake` through `train`, so they only reach critic
/// parameters. The generator loss scores `fake` through `frozen`, which
/// should bind the critics without tracking.
pub fn gan_losses<T: Scalar>(
    g: &mut Graph<T>,
    critics: &Critics,
    train: &mut Bound<T>,
    frozen: &mut Bound<T>,
    real: Var,
    fake: Var,
    clue: Var,
) -> Result<GanLosses> {
    let held = g.detach(fake);
    let (rl, fl) = score_pair(g, &critics.local, train, real, held, Some(clue))?;
    let d_local = d_loss(g, rl, fl)?;
    let (rg, fg) = score_pair(g, &critics.global, train, real, held, None)?;
    let d_global = d_loss(g, rg, fg)?;

    let (_, sl) = score_pair(g, &critics.local, frozen, real, fake, Some(clue))?;
    let (_, sg) = score_pair(g, &critics.global, frozen, real, fake, None)?;
    let gl = g_term(g, sl);
    let gg = g_term(g, sg);
    let g_loss = g.add(gl, gg)?;
    Ok(GanLosses {
        d_local,
        d_global,
        g_loss,
    })
}

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub step: u64,
    pub l_clue: f64,
    pub l_task: f64,
    pub l_d_local: f64,
    pub l_d_global: f64,
    pub total: f64,
    pub coverage: f64,
    pub acc: Option<f64>,
}

impl fmt::Display for LossReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} l_clue={} l_task={} l_d_local={} l_d_global={} total={} coverage={}",
            self.step, self.l_clue, self.l_task, self.l_d_local, self.l_d_global, self.total, self.coverage
        )?;
        if let Some(a) = self.acc {
            write!(f, " acc={a}")?;
        }
        Ok(())
    }
}

impl FromStr for LossReport {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        const KEYS: [&str; 7] = [
            "step",
            "l_clue",
            "l_task",
            "l_d_local",
            "l_d_global",
            "total",
            "coverage",
        ];
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 7 && fields.len() != 8 {
            return Err(Error::data(format!(
                "metrics line has {} fields: `{line}`",
                fields.len()
            )));
        }
        let mut vals = [0.0f64; 7];
        let mut step = 0u64;
        for (i, key) in KEYS.iter().enumerate() {
            let v = fields[i]
                .strip_prefix(key)
                .and_then(|r| r.strip_prefix('='))
                .ok_or_else(|| Error::data(format!("expected `{key}=` in `{line}`")))?;
            if i == 0 {
                step = v.parse().map_err(|_| Error::data(format!("bad step `{v}`")))?;
            } else {
                vals[i] = v
                    .parse()
                    .map_err(|_| Error::data(format!("bad value `{v}` for {key}")))?;
            }
        }
        let acc = match fields.get(7) {
            None => None,
            Some(f) => {
                let v = f
                    .strip_prefix("acc=")
                    .ok_or_else(|| Error::data(format!("expected `acc=` in `{line}`")))?;
                Some(v.parse().map_err(|_| Error::data(format!("bad accuracy `{v}`")))?)
            }
        };
        Ok(LossReport {
            step,
            l_clue: vals[1],
            l_task: vals[2],
            l_d_local: vals[3],
            l_d_global: vals[4],
            total: vals[5],
            coverage: vals[6],
            acc,
        })
    }
}
