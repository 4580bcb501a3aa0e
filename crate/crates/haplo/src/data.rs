//! Procedural training data (colored shapes with template captions) and the
//! frozen random teacher networks used during warmup distillation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::HaploError;
use crate::language::Vocabulary;
use crate::model::{patchify, ModelConfig};
use crate::param::Parameter;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Square,
    Disk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quadrant {
    Tl,
    Tr,
    Bl,
    Br,
}

impl Shape {
    pub const ALL: [Shape; 2] = [Shape::Square, Shape::Disk];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Disk => "disk",
        }
    }
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    /// Channel values in the [-1, 1] pixel convention.
    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, -1.0, -1.0],
            Color::Green => [-1.0, 1.0, -1.0],
            Color::Blue => [-1.0, -1.0, 1.0],
            Color::Yellow => [1.0, 1.0, -1.0],
        }
    }
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [Quadrant::Tl, Quadrant::Tr, Quadrant::Bl, Quadrant::Br];

    pub fn word(self) -> &'static str {
        match self {
            Quadrant::Tl => "tl",
            Quadrant::Tr => "tr",
            Quadrant::Bl => "bl",
            Quadrant::Br => "br",
        }
    }

    /// (row, col) of the quadrant origin for a given image size.
    pub fn origin(self, image_size: usize) -> (usize, usize) {
        let half = image_size / 2;
        match self {
            Quadrant::Tl => (0, 0),
            Quadrant::Tr => (0, half),
            Quadrant::Bl => (half, 0),
            Quadrant::Br => (half, half),
        }
    }
}

/// Caption byte template; the learnable mapping is a pure function of the
/// image content.
pub fn caption_template(color: Color, shape: Shape, quadrant: Quadrant) -> String {
    format!("{} {} {}", color.word(), shape.word(), quadrant.word())
}

#[derive(Clone)]
pub struct Sample<T: Scalar> {
    /// [frames x C x H x W] pixels in [-1, 1].
    pub pixels: Tensor<T>,
    pub caption: Vec<usize>,
    pub color: Color,
    pub shape: Shape,
    pub quadrant: Quadrant,
}

pub struct SyntheticDataset<T: Scalar> {
    pub understanding: Vec<Sample<T>>,
    pub generation: Vec<Sample<T>>,
    pub seed: u64,
    /// Multiplier on patch latents; used to inject amplitude mismatches for
    /// the pre-scaling experiments.
    pub vision_scale: f64,
}

impl<T: Scalar> SyntheticDataset<T> {
    /// Clean patch latents of a sample, with the amplitude knob applied.
    pub fn latents(&self, sample: &Sample<T>, cfg: &ModelConfig) -> Tensor<T> {
        let p = patchify(&sample.pixels, cfg.patch_size).expect("samples match the config");
        if self.vision_scale == 1.0 {
            p
        } else {
            p.scale(T::from_f64(self.vision_scale))
        }
    }
}

/// Render one shape into a [frames x 3 x S x S] pixel tensor. The shape sits
/// inside its quadrant and drifts linearly (clamped to stay inside) across
/// frames.
fn render<T: Scalar>(
    cfg: &ModelConfig,
    color: Color,
    shape: Shape,
    quadrant: Quadrant,
) -> Tensor<T> {
    let s = cfg.image_size;
    let half = s / 2;
    let rgb = color.rgb();
    let mut data = vec![T::from_f64(-1.0); cfg.frames * 3 * s * s];
    // Shape bounding box: a margin-1 box inside the quadrant.
    let size = (half * 3 / 4).max(1);
    let max_off = half.saturating_sub(size + 1);
    let (oq_r, oq_c) = quadrant.origin(s);
    for f in 0..cfg.frames {
        let off = f.min(max_off);
        let (r0, c0) = (oq_r + 1 + off, oq_c + 1 + off);
        let centre = (size as f64 - 1.0) / 2.0;
        let radius = size as f64 / 2.0;
        for r in 0..size {
            for c in 0..size {
                let inside = match shape {
                    Shape::Square => true,
                    Shape::Disk => {
                        let dr = r as f64 - centre;
                        let dc = c as f64 - centre;
                        (dr * dr + dc * dc).sqrt() <= radius - 0.4
                    }
                };
                if !inside {
                    continue;
                }
                for ch in 0..3 {
                    let idx = ((f * 3 + ch) * s + (r0 + r)) * s + (c0 + c);
                    data[idx] = T::from_f64(rgb[ch]);
                }
            }
        }
    }
    Tensor::from_vec(vec![cfg.frames, 3, s, s], data)
}

/// Deterministic dataset: a seeded shuffle of all (color, shape, quadrant)
/// combinations, cycled to the requested sizes.
pub fn generate_synthetic<T: Scalar>(
    seed: u64,
    n_und: usize,
    n_gen: usize,
    cfg: &ModelConfig,
    vision_scale: f64,
) -> SyntheticDataset<T> {
    assert_eq!(cfg.channels, 3, "synthetic shapes are rendered in RGB");
    let mut combos = Vec::new();
    for &c in &Color::ALL {
        for &sh in &Shape::ALL {
            for &q in &Quadrant::ALL {
                combos.push((c, sh, q));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    combos.shuffle(&mut rng);

    let make = |count: usize, rng: &mut ChaCha8Rng| -> Vec<Sample<T>> {
        let _ = rng;
        (0..count)
            .map(|i| {
                let (color, shape, quadrant) = combos[i % combos.len()];
                Sample {
                    pixels: render(cfg, color, shape, quadrant),
                    caption: Vocabulary::encode(&caption_template(color, shape, quadrant)),
                    color,
                    shape,
                    quadrant,
                }
            })
            .collect()
    };
    let understanding = make(n_und, &mut rng);
    let generation = make(n_gen, &mut rng);
    SyntheticDataset {
        understanding,
        generation,
        seed,
        vision_scale,
    }
}

/// Two-layer SiLU MLP on row vectors.
pub struct Mlp<T: Scalar> {
    pub w1: Parameter<T>,
    pub w2: Parameter<T>,
}

impl<T: Scalar> Mlp<T> {
    fn new<R: Rng>(name: &str, d_in: usize, d_hidden: usize, d_out: usize, rng: &mut R) -> Self {
        Mlp {
            // Modest output scale: warmup distillation has to coexist with
            // the identity objective on text rows, so teacher targets stay
            // within reach of small student updates.
            w1: Parameter::new(
                format!("{name}.w1"),
                Tensor::randn(vec![d_in, d_hidden], 0.03, rng),
            ),
            w2: Parameter::new(
                format!("{name}.w2"),
                Tensor::randn(vec![d_hidden, d_out], 0.03, rng),
            ),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        x.matmul(&self.w1.tensor).silu().matmul(&self.w2.tensor)
    }
}

/// Frozen random networks standing in for the large pretrained teachers:
/// the pre-teacher maps clean patch latents to width-d features; the
/// post-teacher maps noised latents to a fixed epsilon target.
pub struct TeacherBundle<T: Scalar> {
    pub pre: Mlp<T>,
    pub post: Mlp<T>,
}

impl<T: Scalar> TeacherBundle<T> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden = 2 * cfg.d;
        let pre = Mlp::new("teacher.pre", cfg.d_lat(), hidden, cfg.d, &mut rng);
        let post = Mlp::new("teacher.post", cfg.d_lat(), hidden, cfg.d_lat(), &mut rng);
        for p in [&pre.w1, &pre.w2, &post.w1, &post.w2] {
            p.set_trainable(false);
        }
        TeacherBundle { pre, post }
    }

    /// Target features for the pre-decoder's vision rows, [L_v x d].
    pub fn pre_features(&self, latents: &Tensor<T>) -> Tensor<T> {
        self.pre.forward(latents)
    }

    /// Target noise estimate for the post-decoder's noise rows, [L_n x d_lat].
    pub fn post_eps(&self, x_t: &Tensor<T>) -> Tensor<T> {
        self.post.forward(x_t)
    }
}

/// Feature-space identity objective on text rows.
pub fn identity_loss<T: Scalar>(
    outputs: &Tensor<T>,
    inputs: &Tensor<T>,
) -> Result<Tensor<T>, HaploError> {
    if outputs.shape() != inputs.shape() {
        return Err(HaploError::Argument(format!(
            "identity loss shapes {:?} vs {:?}",
            outputs.shape(),
            inputs.shape()
        )));
    }
    Ok(outputs.mse(inputs))
}

/// MSE toward frozen teacher features.
pub fn distillation_loss<T: Scalar>(
    student: &Tensor<T>,
    teacher: &Tensor<T>,
) -> Result<Tensor<T>, HaploError> {
    if student.shape() != teacher.shape() {
        return Err(HaploError::Argument(format!(
            "distillation loss shapes {:?} vs {:?}",
            student.shape(),
            teacher.shape()
        )));
    }
    Ok(student.mse(&teacher.detach()))
}
