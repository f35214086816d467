//! Encoder plus task head, with the critics in a separate store.

use cram_diff::{Graph, Mode, ParamStore, Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, Task};
use crate::decoders::{Classifier, Discriminator, Generator};
use crate::encoder::{Encoder, EncoderState};
use crate::error::Result;
use crate::losses::Critics;

#[derive(Clone, Debug)]
pub enum Head {
    Classifier(Classifier),
    Generator(Generator),
}

/// Network structure and parameters for one task.
///
/// `main` holds the encoder and task head; `disc` holds the critics and is
/// empty for classification.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub head: Head,
    pub critics: Option<Critics>,
    pub main: ParamStore<T>,
    pub disc: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    /// Deterministic initialization from `seed`.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = &cfg.encoder;
        let mut main = ParamStore::new();
        let mut disc = ParamStore::new();
        let encoder = Encoder::new(&mut main, e, &mut rng)?;
        let (head, critics) = match cfg.task {
            Task::Classification => (
                Head::Classifier(Classifier::new(
                    &mut main,
                    e.z_dim,
                    cfg.cls_hidden,
                    cfg.classes,
                    e.batch_norm,
                    &mut rng,
                )),
                None,
            ),
            Task::Inpainting => {
                let gen = Generator::new(
                    &mut main,
                    e.z_dim,
                    cfg.gen_channels,
                    e.channels,
                    e.image_hw,
                    e.batch_norm,
                    &mut rng,
                )?;
                let critics = Critics {
                    local: Discriminator::local(
                        &mut disc,
                        e.channels,
                        cfg.disc_channels,
                        cfg.disc_hidden,
                        e.image_hw,
                        e.batch_norm,
                        &mut rng,
                    ),
                    global: Discriminator::global(
                        &mut disc,
                        e.channels,
                        cfg.disc_channels,
                        cfg.disc_hidden,
                        e.image_hw,
                        e.batch_norm,
                        &mut rng,
                    ),
                };
                (Head::Generator(gen), Some(critics))
            }
        };
        Ok(Model {
            cfg: cfg.clone(),
            encoder,
            head,
            critics,
            main,
            disc,
        })
    }

    /// Inference on one sample: class logits `[K]` or a generated image
    /// `[C x H x W]`, with the glimpse record.
    pub fn predict(&mut self, image: &Tensor<T>, clue: &Tensor<T>) -> Result<(Tensor<T>, EncoderState<T>)> {
        let mut g = Graph::new();
        let x = g.constant(Tensor::stack(&[image])?);
        let c = g.constant(Tensor::stack(&[clue])?);
        let mut p = self.main.bind(Mode::Infer, false);
        let out = self.encoder.forward(&mut g, &mut p, x, c)?;
        let y = match &self.head {
            Head::Classifier(cls) => cls.forward(&mut g, &mut p, out.z)?,
            Head::Generator(gen) => gen.forward(&mut g, &mut p, out.z)?,
        };
        Ok((g.value(y).index_axis0(0), out.state(&g, 0)))
    }
}
