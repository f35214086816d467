//! Task heads: classifier, generator and the two discriminators.

use cram_diff::nn::{BatchNorm, ConvBlock, Dense, Linear, UpConv};
use cram_diff::{Bound, Graph, ParamStore, Scalar, Tensor, Var};
use rand::Rng;

use crate::encoder::reduced;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Classifier {
    hidden: [Dense; 2],
    out: Linear,
}

impl Classifier {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        z_dim: usize,
        hidden: usize,
        classes: usize,
        batch_norm: bool,
        rng: &mut R,
    ) -> Self {
        Classifier {
            hidden: [
                Dense::new(store, "cls.fc0", z_dim, hidden, batch_norm, rng),
                Dense::new(store, "cls.fc1", hidden, hidden, batch_norm, rng),
            ],
            out: Linear::new(store, "cls.fc2", hidden, classes, rng),
        }
    }

    /// Raw logits `[B x K]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &mut Bound<T>, z: Var) -> Result<Var> {
        let x = self.hidden[0].forward(g, p, z)?;
        let x = self.hidden[1].forward(g, p, x)?;
        Ok(self.out.forward(g, p, x)?)
    }

    pub fn layers(&self) -> [&Linear; 3] {
        [&self.hidden[0].linear, &self.hidden[1].linear, &self.out]
    }
}

/// Projects z to a 4x4 seed and doubles it with stride-2 transposed
/// convolutions; sizes that are not `4 * 2^k` are generated at the next
/// such size and center-cropped.
#[derive(Clone, Debug)]
pub struct Generator {
    seed: Linear,
    seed_norm: Option<BatchNorm>,
    hidden: Vec<(UpConv, Option<BatchNorm>)>,
    out: UpConv,
    seed_channels: usize,
    full: usize,
    out_hw: (usize, usize),
}

impl Generator {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        z_dim: usize,
        seed_channels: usize,
        out_channels: usize,
        out_hw: (usize, usize),
        batch_norm: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let side = out_hw.0.max(out_hw.1);
        if side < 8 {
            return Err(Error::config(format!(
                "generator needs at least 8x8 output, got {out_hw:?}"
            )));
        }
        let full = side.next_power_of_two();
        let ups = full.trailing_zeros() as usize - 2;
        let seed = Linear::new(store, "gen.seed", z_dim, seed_channels * 16, rng);
        let seed_norm = batch_norm.then(|| BatchNorm::new(store, "gen.seed.bn", seed_channels));
        let width = |i: usize| (seed_channels >> i).max(8).min(seed_channels);
        let hidden = (0..ups - 1)
            .map(|i| {
                let name = format!("gen.up{i}");
                let up = UpConv::new(store, &name, width(i), width(i + 1), !batch_norm, rng);
                let bn = batch_norm.then(|| BatchNorm::new(store, &format!("{name}.bn"), width(i + 1)));
                (up, bn)
            })
            .collect();
        let out = UpConv::new(
            store,
            &format!("gen.up{}", ups - 1),
            width(ups - 1),
            out_channels,
            true,
            rng,
        );
        Ok(Generator {
            seed,
            seed_norm,
            hidden,
            out,
            seed_channels,
            full,
            out_hw,
        })
    }

    /// Images `[B x C x H x W]` in `(-1, 1)`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &mut Bound<T>, z: Var) -> Result<Var> {
        let b = g.shape(z)[0];
        let x = self.seed.forward(g, p, z)?;
        let mut x = g.reshape(x, &[b, self.seed_channels, 4, 4])?;
        if let Some(bn) = &self.seed_norm {
            x = bn.forward(g, p, x)?;
        }
        x = g.elu(x);
        for (up, bn) in &self.hidden {
            x = up.forward(g, p, x)?;
            if let Some(bn) = bn {
                x = bn.forward(g, p, x)?;
            }
            x = g.elu(x);
        }
        x = self.out.forward(g, p, x)?;
        x = g.tanh(x);
        let (h, w) = self.out_hw;
        if (h, w) != (self.full, self.full) {
            x = g.crop2d(x, (self.full - h) / 2, (self.full - w) / 2, h, w)?;
        }
        Ok(x)
    }
}

/// Convolutional critic ending in a single sigmoid unit.
#[derive(Clone, Debug)]
pub struct Discriminator {
    convs: Vec<ConvBlock>,
    hidden: Dense,
    out: Linear,
}

impl Discriminator {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        layers: usize,
        in_channels: usize,
        channels: usize,
        hidden: usize,
        hw: (usize, usize),
        batch_norm: bool,
        rng: &mut R,
    ) -> Self {
        let convs = (0..layers)
            .map(|i| {
                let cin = if i == 0 { in_channels } else { channels };
                ConvBlock::new(store, &format!("{name}.conv{i}"), cin, channels, 5, 2, batch_norm, rng)
            })
            .collect();
        let flat = channels * reduced(hw.0, layers) * reduced(hw.1, layers);
        Discriminator {
            convs,
            hidden: Dense::new(store, &format!("{name}.fc0"), flat, hidden, batch_norm, rng),
            out: Linear::new(store, &format!("{name}.fc1"), hidden, 1, rng),
        }
    }

    /// Four-layer critic that sees only the clue region.
    pub fn local<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        in_channels: usize,
        channels: usize,
        hidden: usize,
        hw: (usize, usize),
        batch_norm: bool,
        rng: &mut R,
    ) -> Self {
        Self::new(store, "dlocal", 4, in_channels, channels, hidden, hw, batch_norm, rng)
    }

    /// Three-layer critic over the whole image.
    pub fn global<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        in_channels: usize,
        channels: usize,
        hidden: usize,
        hw: (usize, usize),
        batch_norm: bool,
        rng: &mut R,
    ) -> Self {
        Self::new(store, "dglobal", 3, in_channels, channels, hidden, hw, batch_norm, rng)
    }

    /// Probability `[B x 1]` that `x` is real.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &mut Bound<T>, x: Var) -> Result<Var> {
        let mut y = x;
        for c in &self.convs {
            y = c.forward(g, p, y)?;
        }
        let y = g.flatten(y)?;
        let y = self.hidden.forward(g, p, y)?;
        let y = self.out.forward(g, p, y)?;
        Ok(g.sigmoid(y))
    }

    /// Scores `image * clue`; the clue broadcasts over image channels.
    pub fn forward_masked<T: Scalar>(&self, g: &mut Graph<T>, p: &mut Bound<T>, image: Var, clue: Var) -> Result<Var> {
        let masked = mask(g, image, clue)?;
        self.forward(g, p, masked)
    }

    pub fn final_layer(&self) -> &Linear {
        &self.out
    }
}

/// `image[B x C x H x W] * clue[B x 1 x H x W]`.
pub fn mask<T: Scalar>(g: &mut Graph<T>, image: Var, clue: Var) -> Result<Var> {
    let c = g.shape(image)[1];
    let clue = if c == 1 {
        clue
    } else {
        let copies = vec![clue; c];
        g.concat(&copies)?
    };
    Ok(g.mul(image, clue)?)
}

/// Generated pixels where the clue is set, original pixels elsewhere.
/// Every channel of `generated`/`original` shares the `[1 x H x W]` clue.
pub fn composite<T: Scalar>(generated: &Tensor<T>, original: &Tensor<T>, clue: &Tensor<T>) -> Result<Tensor<T>> {
    let s = generated.shape();
    if s != original.shape() || s.len() < 2 {
        return Err(cram_diff::Error::shape("composite", s, original.shape()).into());
    }
    let plane = s[s.len() - 2] * s[s.len() - 1];
    if clue.numel() != plane {
        return Err(cram_diff::Error::shape("composite", s, clue.shape()).into());
    }
    let data = generated
        .data()
        .iter()
        .zip(original.data())
        .enumerate()
        .map(|(i, (&gv, &ov))| if clue.data()[i % plane] == T::one() { gv } else { ov })
        .collect();
    Ok(Tensor::new(s, data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use cram_diff::gradcheck::GradCheck;
    use cram_diff::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn zero_classifier_outputs_final_bias() {
        let mut store = ParamStore::<f64>::new();
        let cls = Classifier::new(&mut store, 5, 6, 3, true, &mut ChaCha8Rng::seed_from_u64(0));
        for lin in cls.layers() {
            store.fill(&store.param(lin.w).name.clone(), 0.0);
        }
        store
            .set_value(cls.out.b, Tensor::from_f64(&[3], &[0.5, -1.0, 2.0]).unwrap())
            .unwrap();
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[2, 5]));
        let y = cls.forward(&mut g, &mut store.bind(Mode::Train, false), z).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let mut store = ParamStore::<f64>::new();
        let cls = Classifier::new(&mut store, 5, 6, 4, false, &mut ChaCha8Rng::seed_from_u64(0));
        store.fill(&store.param(cls.out.w).name.clone(), 0.0);
        let mut g = Graph::new();
        let z = g.constant(Tensor::ones(&[3, 5]));
        let y = cls.forward(&mut g, &mut store.bind(Mode::Train, false), z).unwrap();
        let l = g.softmax_cross_entropy(y, &[0, 3, 1]).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn classifier_gradient_matches_finite_differences() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cls = Classifier::new(&mut store, 5, 6, 3, true, &mut rng);
        let z = random(&[4, 5], &mut rng);
        let err = GradCheck::default()
            .run(&[z], |g, v| {
                let mut s = store.clone();
                let y = cls.forward(g, &mut s.bind(Mode::Train, false), v[0])?;
                Ok::<_, Error>(g.softmax_cross_entropy(y, &[0, 2, 1, 2])?)
            })
            .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn generator_shapes_and_range() {
        for (hw, bn) in [((32, 32), true), ((16, 16), false), ((24, 24), true), ((8, 12), false)] {
            let mut store = ParamStore::<f32>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let gen = Generator::new(&mut store, 6, 16, 1, hw, bn, &mut rng).unwrap();
            let mut g = Graph::new();
            let z = g.constant(Tensor::from_fn(&[2, 6], |i| (i as f32 * 0.7).sin() * 3.0));
            let y = gen.forward(&mut g, &mut store.bind(Mode::Train, false), z).unwrap();
            assert_eq!(g.shape(y), &[2, 1, hw.0, hw.1]);
            assert!(g.value(y).data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        let mut store = ParamStore::<f32>::new();
        assert!(Generator::new(&mut store, 6, 16, 1, (4, 4), true, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn masked_l1_gradient_reaches_z() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::<f64>::new();
            let gen = Generator::new(&mut store, 6, 8, 1, (16, 16), true, &mut rng).unwrap();
            let mut g = Graph::new();
            let z = g.input(random(&[2, 6], &mut rng));
            let y = gen.forward(&mut g, &mut store.bind(Mode::Train, true), z).unwrap();
            let truth = g.constant(random(&[2, 1, 16, 16], &mut rng));
            let m = crate::data::center_mask(16, 4).mask().cast::<f64>();
            let m = g.constant(Tensor::stack(&[&m, &m]).unwrap());
            let d = g.sub(y, truth).unwrap();
            let d = mask(&mut g, d, m).unwrap();
            let d = g.abs(d);
            let l = g.sum(d);
            let dz = g.backward(l).unwrap().wrt(&g, z);
            assert!(dz.max_abs() > 0.0);
        }
    }

    fn discriminators(seed: u64, bn: bool) -> (ParamStore<f64>, Discriminator, Discriminator) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = Discriminator::local(&mut store, 1, 3, 4, (16, 16), bn, &mut rng);
        let gl = Discriminator::global(&mut store, 1, 3, 4, (16, 16), bn, &mut rng);
        (store, l, gl)
    }

    #[test]
    fn zeroed_final_layer_scores_one_half() {
        let (mut store, l, gl) = discriminators(0, true);
        for d in [&l, &gl] {
            store.set_value(d.final_layer().w, Tensor::zeros(&[4, 1])).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let x = g.constant(random(&[3, 1, 16, 16], &mut rng));
        let c = g.constant(
            crate::data::center_mask(16, 4)
                .mask()
                .cast::<f64>()
                .reshape(&[1, 1, 16, 16])
                .unwrap(),
        );
        let c = g.concat(&[c, c, c]).unwrap();
        let c = g.reshape(c, &[3, 1, 16, 16]).unwrap();
        let mut p = store.bind(Mode::Train, false);
        let a = l.forward_masked(&mut g, &mut p, x, c).unwrap();
        let b = gl.forward(&mut g, &mut p, x).unwrap();
        assert!(g.value(a).data().iter().chain(g.value(b).data()).all(|&v| v == 0.5));
    }

    #[test]
    fn zero_clue_makes_local_score_image_independent() {
        let (mut store, l, _) = discriminators(3, false);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut scores = Vec::new();
        for _ in 0..3 {
            let mut g = Graph::new();
            let x = g.constant(random(&[1, 1, 16, 16], &mut rng));
            let c = g.constant(Tensor::zeros(&[1, 1, 16, 16]));
            let y = l
                .forward_masked(&mut g, &mut store.bind(Mode::Infer, false), x, c)
                .unwrap();
            scores.push(g.value(y).item());
        }
        assert!(scores.iter().all(|&s| s == scores[0]));
    }

    #[test]
    fn scores_stay_strictly_inside_unit_interval() {
        for seed in 0..20 {
            let (mut store, l, gl) = discriminators(seed, true);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 50);
            let mut g = Graph::new();
            let x = g.constant(random(&[2, 1, 16, 16], &mut rng).map(|v| v * 5.0));
            let c = g.constant(Tensor::ones(&[2, 1, 16, 16]));
            let mut p = store.bind(Mode::Train, false);
            let a = l.forward_masked(&mut g, &mut p, x, c).unwrap();
            let b = gl.forward(&mut g, &mut p, x).unwrap();
            assert!(g
                .value(a)
                .data()
                .iter()
                .chain(g.value(b).data())
                .all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn local_gradient_through_mask_matches_finite_differences() {
        let (store, l, _) = discriminators(5, true);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&[2, 1, 16, 16], &mut rng);
        let c = crate::data::center_mask(16, 8).mask().cast::<f64>();
        let c = Tensor::stack(&[&c, &c]).unwrap();
        let err = GradCheck::default()
            .limit(64)
            .run(&[x], |g, v| {
                let mut s = store.clone();
                let cv = g.constant(c.clone());
                let y = l.forward_masked(g, &mut s.bind(Mode::Train, false), v[0], cv)?;
                let y = g.log_clamped(y, 1e-8);
                Ok::<_, Error>(g.sum(y))
            })
            .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn composite_masking_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let gen = random(&[1, 32, 32], &mut rng).cast::<f32>();
        let orig = random(&[1, 32, 32], &mut rng).cast::<f32>();
        let zero = Tensor::<f32>::zeros(&[1, 32, 32]);
        let one = Tensor::<f32>::ones(&[1, 32, 32]);
        assert_eq!(composite(&gen, &orig, &zero).unwrap(), orig);
        assert_eq!(composite(&gen, &orig, &one).unwrap(), gen);
        let m = crate::data::center_mask(32, 8);
        let c = composite(&gen, &orig, m.mask()).unwrap();
        for k in 0..1024 {
            let want = if m.mask().data()[k] == 1.0 {
                gen.data()[k]
            } else {
                orig.data()[k]
            };
            assert_eq!(c.data()[k].to_bits(), want.to_bits());
        }
    }
}
