//! Clue-conditioned recurrent glimpse encoder.

use cram_diff::nn::{ConvBlock, Dense, Linear, Lstm};
use cram_diff::{Bound, Graph, LstmState, Mode, Padding, ParamStore, Scalar, Tensor, Var};
use rand::Rng;

use crate::config::EncoderConfig;
use crate::error::{Error, Result};
use crate::sampler::{AffineParams, GlimpsePatch, SamplerGraph};

/// Spatial size after `layers` stride-2 "same" reductions.
pub fn reduced(n: usize, layers: usize) -> usize {
    (0..layers).fold(n, |n, _| n.div_ceil(2))
}

#[allow(clippy::too_many_arguments)]
fn conv_stack<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    in_ch: usize,
    ch: usize,
    k: usize,
    stride: usize,
    bn: bool,
    rng: &mut R,
) -> Vec<ConvBlock> {
    (0..3)
        .map(|i| {
            let cin = if i == 0 { in_ch } else { ch };
            ConvBlock::new(store, &format!("{name}.conv{i}"), cin, ch, k, stride, bn, rng)
        })
        .collect()
}

/// Initial recurrent state from a downsampled view of image and clue.
#[derive(Clone, Debug)]
pub struct ContextNet {
    image: Vec<ConvBlock>,
    clue: Vec<ConvBlock>,
    c_head: (Dense, Linear),
    h_head: (Dense, Linear),
    factor: usize,
}

impl ContextNet {
    fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &EncoderConfig, rng: &mut R) -> Self {
        let ch = cfg.context_channels;
        let bn = cfg.batch_norm;
        let image = conv_stack(store, "enc.context.image", cfg.channels, ch, 3, 1, bn, rng);
        let clue = conv_stack(store, "enc.context.clue", 1, ch, 3, 1, bn, rng);
        let (h, w) = (cfg.image_hw.0 / cfg.downsample, cfg.image_hw.1 / cfg.downsample);
        let flat = 2 * ch * reduced(h, 3) * reduced(w, 3);
        let mut head = |name: &str| {
            (
                Dense::new(store, &format!("enc.context.{name}0"), flat, cfg.mlp_dim, bn, rng),
                Linear::new(
                    store,
                    &format!("enc.context.{name}1"),
                    cfg.mlp_dim,
                    cfg.hidden_size,
                    rng,
                ),
            )
        };
        let c_head = head("c");
        let h_head = head("h");
        ContextNet {
            image,
            clue,
            c_head,
            h_head,
            factor: cfg.downsample,
        }
    }

    fn branch<T: Scalar>(g: &mut Graph<T>, p: &mut Bound<T>, stack: &[ConvBlock], x: Var) -> Result<Var> {
        let mut y = x;
        for layer in stack {
            y = layer.forward(g, p, y)?;
            y = g.maxpool2d(y, 3, 2, Padding::Same)?;
        }
        Ok(g.flatten(y)?)
    }

    /// `(c0, h0)` for the second recurrent layer.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &mut Bound<T>, image: Var, clue: Var) -> Result<LstmState> {
        let xi = g.avgpool2d(image, self.factor)?;
        let xc = g.avgpool2d(clue, self.factor)?;
        let fi = Self::branch(g, p, &self.image, xi)?;
        let fc = Self::branch(g, p, &self.clue, xc)?;
        let f = g.concat(&[fi, fc])?;
        let c = self.c_head.0.forward(g, p, f)?;
        let c = self.c_head.1.forward(g, p, c)?;
        let h = self.h_head.0.forward(g, p, f)?;
        let h = self.h_head.1.forward(g, p, h)?;
        Ok(LstmState { c, h })
    }

    pub fn final_layers(&self) -> [&Linear; 2] {
        [&self.c_head.1, &self.h_head.1]
    }
}

/// Predicts each glimpse's transform from fixed image/clue features and
/// the top recurrent state.
#[derive(Clone, Debug)]
pub struct Localizer {
    image: Vec<ConvBlock>,
    clue: Vec<ConvBlock>,
    state: [Dense; 2],
    head: (Dense, Linear),
}

impl Localizer {
    fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &EncoderConfig, rng: &mut R) -> Self {
        let ch = cfg.loc_channels;
        let bn = cfg.batch_norm;
        let m = cfg.mlp_dim;
        let image = conv_stack(store, "enc.loc.image", cfg.channels, ch, 5, 2, bn, rng);
        let clue = conv_stack(store, "enc.loc.clue", 1, ch, 5, 2, bn, rng);
        let state = [
            Dense::new(store, "enc.loc.state0", cfg.hidden_size, m, bn, rng),
            Dense::new(store, "enc.loc.state1", m, m, bn, rng),
        ];
        let flat = 2 * ch * reduced(cfg.image_hw.0, 3) * reduced(cfg.image_hw.1, 3);
        let head = (
            Dense::new(store, "enc.loc.head0", flat + m, m, bn, rng),
            Linear::zeros(store, "enc.loc.head1", m, 3),
        );
        Localizer {
            image,
            clue,
            state,
            head,
        }
    }

    /// Image and clue features, shared by every step of one pass.
    pub fn features<T: Scalar>(&self, g: &mut Graph<T>, p: &mut Bound<T>, image: Var, clue: Var) -> Result<Var> {
        let mut fi = image;
        for layer in &self.image {
            fi = layer.forward(g, p, fi)?;
        }
        let mut fc = clue;
        for layer in &self.clue {
            fc = layer.forward(g, p, fc)?;
        }
        let fi = g.flatten(fi)?;
        let fc = g.flatten(fc)?;
        Ok(g.concat(&[fi, fc])?)
    }

    /// Squashed `(s, tx, ty)` as `[B x 3]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &mut Bound<T>, features: Var, r2: LstmState) -> Result<Var> {
        let r = self.state[0].forward(g, p, r2.h)?;
        let r = self.state[1].forward(g, p, r)?;
        let x = g.concat(&[features, r])?;
        let x = self.head.0.forward(g, p, x)?;
        let raw = self.head.1.forward(g, p, x)?;
        g.squash_tau(raw)
    }

    pub fn final_layer(&self) -> &Linear {
        &self.head.1
    }
}

/// Fuses what was seen with where it was seen.
#[derive(Clone, Debug)]
pub struct GlimpseNet {
    what_cnn: Vec<ConvBlock>,
    what: Dense,
    where_: Linear,
}

impl GlimpseNet {
    fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &EncoderConfig, rng: &mut R) -> Self {
        let ch = cfg.what_channels;
        let what_cnn = conv_stack(store, "enc.glimpse.cnn", cfg.channels, ch, 3, 2, cfg.batch_norm, rng);
        let flat = ch * reduced(cfg.glimpse_hw.0, 3) * reduced(cfg.glimpse_hw.1, 3);
        GlimpseNet {
            what_cnn,
            what: Dense::new(store, "enc.glimpse.what", flat, cfg.gv_dim, cfg.batch_norm, rng),
            where_: Linear::new(store, "enc.glimpse.where", 3, cfg.gv_dim, rng),
        }
    }

    pub fn what<T: Scalar>(&self, g: &mut Graph<T>, p: &mut Bound<T>, patch: Var) -> Result<Var> {
        let mut y = patch;
        for layer in &self.what_cnn {
            y = layer.forward(g, p, y)?;
        }
        let y = g.flatten(y)?;
        Ok(self.what.forward(g, p, y)?)
    }

    pub fn where_<T: Scalar>(&self, g: &mut Graph<T>, p: &mut Bound<T>, tau: Var) -> Result<Var> {
        let y = self.where_.forward(g, p, tau)?;
        Ok(g.elu(y))
    }

    /// `what(patch) * where(tau)`, `[B x gv_dim]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &mut Bound<T>, patch: Var, tau: Var) -> Result<Var> {
        let a = self.what(g, p, patch)?;
        let b = self.where_(g, p, tau)?;
        Ok(g.mul(a, b)?)
    }

    pub fn where_layer(&self) -> &Linear {
        &self.where_
    }
}

/// Graph handles produced by one encoder pass over a batch.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `[B x z_dim]`
    pub z: Var,
    /// One `[B x 3]` transform per step.
    pub taus: Vec<Var>,
    /// One `[B x C x Hg x Wg]` patch per step.
    pub patches: Vec<Var>,
    pub layer1: LstmState,
    pub layer2: LstmState,
}

/// Recurrent state and glimpse record of one sample.
#[derive(Clone, Debug)]
pub struct EncoderState<T> {
    /// `(c, h)` of the first recurrent layer.
    pub layer1: (Tensor<T>, Tensor<T>),
    pub layer2: (Tensor<T>, Tensor<T>),
    pub taus: Vec<AffineParams>,
    pub patches: Vec<GlimpsePatch<T>>,
}

impl EncoderOutput {
    /// Transforms of sample `b`, in step order.
    pub fn taus_of<T: Scalar>(&self, g: &Graph<T>, b: usize) -> Vec<AffineParams> {
        self.taus
            .iter()
            .map(|&t| AffineParams::from_slice(&g.value(t).data()[b * 3..b * 3 + 3]))
            .collect()
    }

    pub fn state<T: Scalar>(&self, g: &Graph<T>, b: usize) -> EncoderState<T> {
        let row = |v: Var| g.value(v).index_axis0(b);
        let taus = self.taus_of(g, b);
        let patches = self
            .patches
            .iter()
            .zip(&taus)
            .enumerate()
            .map(|(n, (&p, &tau))| GlimpsePatch {
                pixels: g.value(p).index_axis0(b),
                step_index: n + 1,
                tau,
            })
            .collect();
        EncoderState {
            layer1: (row(self.layer1.c), row(self.layer1.h)),
            layer2: (row(self.layer2.c), row(self.layer2.h)),
            taus,
            patches,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub context: ContextNet,
    pub localizer: Localizer,
    pub glimpse: GlimpseNet,
    pub lstm1: Lstm,
    pub lstm2: Lstm,
    pub z_head: Linear,
}

impl Encoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: &EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let context = ContextNet::new(store, cfg, rng);
        let localizer = Localizer::new(store, cfg, rng);
        let glimpse = GlimpseNet::new(store, cfg, rng);
        let lstm1 = Lstm::new(store, "enc.lstm1", cfg.gv_dim, cfg.hidden_size, rng);
        let lstm2 = Lstm::new(store, "enc.lstm2", cfg.hidden_size, cfg.hidden_size, rng);
        let z_head = Linear::new(store, "enc.z", 2 * cfg.hidden_size, cfg.z_dim, rng);
        Ok(Encoder {
            cfg: cfg.clone(),
            context,
            localizer,
            glimpse,
            lstm1,
            lstm2,
            z_head,
        })
    }

    fn check_inputs<T: Scalar>(&self, g: &Graph<T>, image: Var, clue: Var) -> Result<usize> {
        let (h, w) = self.cfg.image_hw;
        let is = g.shape(image);
        if is.len() != 4 || is[1..] != [self.cfg.channels, h, w] {
            return Err(Error::data(format!(
                "image shape {is:?} does not match [B x {} x {h} x {w}]",
                self.cfg.channels
            )));
        }
        let cs = g.shape(clue);
        if cs != [is[0], 1, h, w] {
            return Err(Error::data(format!("clue shape {cs:?} does not match image {is:?}")));
        }
        Ok(is[0])
    }

    /// Unrolls all glimpse steps for `image[B x C x H x W]` and
    /// `clue[B x 1 x H x W]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &mut Bound<T>,
        image: Var,
        clue: Var,
    ) -> Result<EncoderOutput> {
        let batch = self.check_inputs(g, image, clue)?;
        let mut r2 = self.context.forward(g, p, image, clue)?;
        let mut r1 = LstmState::zeros(g, batch, self.cfg.hidden_size);
        let features = self.localizer.features(g, p, image, clue)?;
        let mut taus = Vec::with_capacity(self.cfg.n_glimpses);
        let mut patches = Vec::with_capacity(self.cfg.n_glimpses);
        for _ in 0..self.cfg.n_glimpses {
            let tau = self.localizer.forward(g, p, features, r2)?;
            let patch = g.glimpse(image, tau, self.cfg.glimpse_hw)?;
            let gv = self.glimpse.forward(g, p, patch, tau)?;
            r1 = self.lstm1.step(g, p, gv, r1)?;
            r2 = self.lstm2.step(g, p, r1.h, r2)?;
            taus.push(tau);
            patches.push(patch);
        }
        let top = g.concat(&[r1.h, r2.h])?;
        let z = self.z_head.forward(g, p, top)?;
        Ok(EncoderOutput {
            z,
            taus,
            patches,
            layer1: r1,
            layer2: r2,
        })
    }

    /// Inference pass over one `[C x H x W]` image and `[1 x H x W]` clue.
    pub fn encode<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        image: &Tensor<T>,
        clue: &Tensor<T>,
    ) -> Result<(Tensor<T>, EncoderState<T>)> {
        let mut g = Graph::new();
        let x = g.constant(Tensor::stack(&[image])?);
        let c = g.constant(Tensor::stack(&[clue])?);
        let out = self.forward(&mut g, &mut store.bind(Mode::Infer, false), x, c)?;
        Ok((g.value(out.z).index_axis0(0), out.state(&g, 0)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use cram_diff::gradcheck::GradCheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            image_hw: (16, 16),
            channels: 1,
            glimpse_hw: (6, 6),
            n_glimpses: 2,
            hidden_size: 6,
            z_dim: 4,
            gv_dim: 5,
            downsample: 4,
            context_channels: 2,
            loc_channels: 2,
            what_channels: 2,
            mlp_dim: 5,
            batch_norm: false,
        }
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn binary(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 })
    }

    fn build(cfg: &EncoderConfig, seed: u64) -> (ParamStore<f64>, Encoder) {
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (store, enc)
    }

    #[test]
    fn zero_glimpses_is_a_config_error() {
        let cfg = EncoderConfig {
            n_glimpses: 0,
            ..tiny()
        };
        let mut store = ParamStore::<f64>::new();
        assert!(Encoder::new(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn one_glimpse_records_one_tau_and_patch() {
        let cfg = EncoderConfig {
            n_glimpses: 1,
            ..tiny()
        };
        let (mut store, enc) = build(&cfg, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (z, state) = enc
            .encode(
                &mut store,
                &random(&[1, 16, 16], &mut rng),
                &binary(&[1, 16, 16], &mut rng),
            )
            .unwrap();
        assert_eq!(z.shape(), &[4]);
        assert_eq!(state.taus.len(), 1);
        assert_eq!(state.patches.len(), 1);
        assert_eq!(state.patches[0].pixels.shape(), &[1, 6, 6]);
        assert_eq!(state.patches[0].step_index, 1);
    }

    #[test]
    fn first_transform_is_centered_half_zoom() {
        let (mut store, enc) = build(&tiny(), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (_, state) = enc
            .encode(
                &mut store,
                &random(&[1, 16, 16], &mut rng),
                &binary(&[1, 16, 16], &mut rng),
            )
            .unwrap();
        for tau in &state.taus {
            assert_eq!(*tau, AffineParams::new(0.525, 0.0, 0.0));
        }
    }

    #[test]
    fn context_with_zero_inputs_and_zero_heads_yields_biases() {
        let (mut store, enc) = build(&tiny(), 4);
        for lin in enc.context.final_layers() {
            let w = store.param(lin.w).value.shape().to_vec();
            store.set_value(lin.w, Tensor::zeros(&w)).unwrap();
            store
                .set_value(lin.b, Tensor::from_fn(&[6], |i| i as f64 * 0.1 - 0.2))
                .unwrap();
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 16, 16]));
        let c = g.constant(Tensor::zeros(&[1, 1, 16, 16]));
        let s = enc
            .context
            .forward(&mut g, &mut store.bind(Mode::Infer, false), x, c)
            .unwrap();
        let bias: Vec<f64> = (0..6).map(|i| i as f64 * 0.1 - 0.2).collect();
        assert_eq!(g.value(s.c).data(), bias.as_slice());
        assert_eq!(g.value(s.h).data(), bias.as_slice());
    }

    #[test]
    fn different_images_give_different_context() {
        for seed in 0..5 {
            let (mut store, enc) = build(&tiny(), seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let clue = binary(&[1, 1, 16, 16], &mut rng);
            let mut h0 = Vec::new();
            for _ in 0..2 {
                let mut g = Graph::new();
                let x = g.constant(random(&[1, 1, 16, 16], &mut rng));
                let c = g.constant(clue.clone());
                let s = enc
                    .context
                    .forward(&mut g, &mut store.bind(Mode::Infer, false), x, c)
                    .unwrap();
                h0.push(g.value(s.h).clone());
            }
            assert_ne!(h0[0], h0[1]);
        }
    }

    #[test]
    fn context_gradient_reaches_every_conv_layer() {
        let (mut store, enc) = build(&tiny(), 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut g = Graph::new();
        let x = g.constant(random(&[2, 1, 16, 16], &mut rng));
        let c = g.constant(binary(&[2, 1, 16, 16], &mut rng));
        let s = enc
            .context
            .forward(&mut g, &mut store.bind(Mode::Infer, true), x, c)
            .unwrap();
        let sq = g.mul(s.h, s.h).unwrap();
        let l = g.sum(sq);
        let grads = g.backward(l).unwrap();
        store.accumulate(&g, &grads);
        for p in store
            .params()
            .iter()
            .filter(|p| p.name.starts_with("enc.context.") && p.name.contains("conv"))
        {
            assert!(p.grad.max_abs() > 0.0, "{} has no gradient", p.name);
        }
    }

    #[test]
    fn localization_is_deterministic_and_state_sensitive() {
        for seed in 0..5 {
            let (mut store, enc) = build(&tiny(), seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // Give the zero-initialized head some weight so the state matters.
            let w = enc.localizer.final_layer().w;
            store.set_value(w, random(&[5, 3], &mut rng)).unwrap();
            let img = random(&[1, 1, 16, 16], &mut rng);
            let clue = binary(&[1, 1, 16, 16], &mut rng);
            let h_a = random(&[1, 6], &mut rng);
            let h_b = h_a.map(|v| v + 0.3);
            let mut taus = Vec::new();
            for h in [&h_a, &h_a, &h_b] {
                let mut g = Graph::new();
                let mut p = store.bind(Mode::Infer, false);
                let x = g.constant(img.clone());
                let c = g.constant(clue.clone());
                let f = enc.localizer.features(&mut g, &mut p, x, c).unwrap();
                let r2 = LstmState {
                    c: g.constant(Tensor::zeros(&[1, 6])),
                    h: g.constant(h.clone()),
                };
                let t = enc.localizer.forward(&mut g, &mut p, f, r2).unwrap();
                taus.push(g.value(t).clone());
            }
            assert_eq!(taus[0], taus[1]);
            assert_ne!(taus[0], taus[2]);
        }
    }

    #[test]
    fn where_gate_controls_glimpse_vector() {
        let (mut store, enc) = build(&tiny(), 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let patch = random(&[2, 1, 6, 6], &mut rng);
        let tau = Tensor::from_f64(&[2, 3], &[0.5, 0.1, -0.2, 0.9, 0.0, 0.3]).unwrap();
        let run = |store: &mut ParamStore<f64>| {
            let mut g = Graph::new();
            let mut p = store.bind(Mode::Infer, false);
            let x = g.constant(patch.clone());
            let t = g.constant(tau.clone());
            let gv = enc.glimpse.forward(&mut g, &mut p, x, t).unwrap();
            let what = enc.glimpse.what(&mut g, &mut p, x).unwrap();
            (g.value(gv).clone(), g.value(what).clone())
        };
        let lin = enc.glimpse.where_layer().clone();
        store.set_value(lin.w, Tensor::zeros(&[3, 5])).unwrap();
        store.set_value(lin.b, Tensor::zeros(&[5])).unwrap();
        let (gv, _) = run(&mut store);
        assert!(gv.data().iter().all(|&v| v == 0.0));
        store.set_value(lin.b, Tensor::ones(&[5])).unwrap();
        let (gv, what) = run(&mut store);
        assert_eq!(gv, what);
    }

    #[test]
    fn glimpse_embedding_matches_finite_differences() {
        let (store, enc) = build(&tiny(), 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let patch = random(&[2, 1, 6, 6], &mut rng);
        let tau = Tensor::from_f64(&[2, 3], &[0.5, 0.1, -0.2, 0.9, 0.0, 0.3]).unwrap();
        let err = GradCheck::default()
            .run(&[patch, tau], |g, v| {
                let mut p = store.clone();
                let gv = enc.glimpse.forward(g, &mut p.bind(Mode::Train, false), v[0], v[1])?;
                let sq = g.mul(gv, gv)?;
                Ok::<_, Error>(g.sum(sq))
            })
            .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn mismatched_clue_is_a_data_error() {
        let (mut store, enc) = build(&tiny(), 0);
        let r = enc.encode(&mut store, &Tensor::zeros(&[1, 16, 16]), &Tensor::zeros(&[1, 8, 8]));
        assert!(matches!(r, Err(Error::Diff(crate::error::DiffError::Data(_)))));
    }

    #[test]
    fn encoding_is_deterministic() {
        let (mut store, enc) = build(&tiny(), 11);
        let (mut store2, enc2) = build(&tiny(), 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let img = random(&[1, 16, 16], &mut rng);
        let clue = binary(&[1, 16, 16], &mut rng);
        let (a, _) = enc.encode(&mut store, &img, &clue).unwrap();
        let (b, _) = enc2.encode(&mut store2, &img, &clue).unwrap();
        assert_eq!(a, b);
    }
}
