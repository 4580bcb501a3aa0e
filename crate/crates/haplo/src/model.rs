//! Model assembly: embeddings, the pre/base/post block stacks, connectors,
//! pre-scalers, and the two heads, with an understanding forward (text
//! logits) and a generation forward (noise prediction), plus checkpoint I/O
//! and incremental decoding sessions.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adaln::{AdaLNLayer, TimeEmbedding};
use crate::block::{block_forward, BlockConfig, BlockKV, HaploBlock, MaskSlice, RopePos};
use crate::connectors::{
    apply_prescaler, calibrate_prescaler, connector_forward, Connector, PreScaler,
};
use crate::diffusion::{timestep_embedding, NoiseSchedule};
use crate::error::HaploError;
use crate::language::{sample_token, Vocabulary};
use crate::masking::{build_mask, extend_mask_for_decoding, AttentionMask, TokenType, TokenTypeSequence};
use crate::param::Parameter;
use crate::tensor::{Scalar, Tensor};

pub const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub d_t: usize,
    pub n_pre: usize,
    pub n_base: usize,
    pub n_post: usize,
    pub vocab: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub frames: usize,
    pub channels: usize,
    pub adaln_groups: usize,
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ModelConfig {
    pub fn toy() -> Self {
        ModelConfig {
            d: 64,
            heads: 4,
            d_ff: 256,
            d_t: 64,
            n_pre: 2,
            n_base: 4,
            n_post: 2,
            vocab: Vocabulary::SIZE,
            image_size: 16,
            patch_size: 4,
            frames: 1,
            channels: 3,
            adaln_groups: 2,
            t_max: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }

    /// Latent width of one patch token.
    pub fn d_lat(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn visual_tokens(&self) -> usize {
        self.frames * self.tokens_per_frame()
    }

    pub fn validate(&self) -> Result<(), HaploError> {
        let bad = |msg: String| Err(HaploError::Config(msg));
        if self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.d % self.heads != 0 {
            return bad(format!("width {} not divisible by {} heads", self.d, self.heads));
        }
        let hd = self.d / self.heads;
        if hd % 4 != 0 && hd != 2 {
            return bad(format!("head width {hd} must be divisible by 4 (or be 2)"));
        }
        if self.d_t % 2 != 0 {
            return bad(format!("timestep width {} must be even", self.d_t));
        }
        if self.vocab < Vocabulary::SIZE {
            return bad(format!(
                "vocabulary {} too small for the {} byte+special tokens",
                self.vocab,
                Vocabulary::SIZE
            ));
        }
        for (label, n) in [
            ("n_pre", self.n_pre),
            ("n_base", self.n_base),
            ("n_post", self.n_post),
            ("frames", self.frames),
            ("channels", self.channels),
            ("adaln_groups", self.adaln_groups),
            ("t_max", self.t_max),
        ] {
            if n == 0 {
                return bad(format!("{label} must be at least 1"));
            }
        }
        if !(self.beta_start > 0.0 && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return bad(format!(
                "betas must satisfy 0 < {} <= {} < 1",
                self.beta_start, self.beta_end
            ));
        }
        Ok(())
    }

    fn block_config(&self) -> BlockConfig {
        BlockConfig {
            d: self.d,
            heads: self.heads,
            d_ff: self.d_ff,
            rope_enabled: true,
        }
    }
}

/// A run of blocks sharing AdaLN parameter groups round-robin: block i uses
/// group i mod n_groups.
pub struct Stack<T: Scalar> {
    pub groups: Vec<(AdaLNLayer<T>, AdaLNLayer<T>)>,
    pub blocks: Vec<HaploBlock<T>>,
}

impl<T: Scalar> Stack<T> {
    pub fn new<R: Rng>(
        name: &str,
        n_blocks: usize,
        n_groups: usize,
        cfg: BlockConfig,
        d_t: usize,
        rng: &mut R,
    ) -> Self {
        let used = n_groups.min(n_blocks);
        let eps = T::from_f64(LN_EPS);
        let groups: Vec<(AdaLNLayer<T>, AdaLNLayer<T>)> = (0..used)
            .map(|g| {
                (
                    AdaLNLayer::new(&format!("{name}.adaln.{g}.1"), cfg.d, d_t, eps, INIT_STD, rng),
                    AdaLNLayer::new(&format!("{name}.adaln.{g}.2"), cfg.d, d_t, eps, INIT_STD, rng),
                )
            })
            .collect();
        let blocks = (0..n_blocks)
            .map(|i| {
                let (a1, a2) = &groups[i % used];
                HaploBlock::new(
                    &format!("{name}.block.{i}"),
                    cfg,
                    a1.clone(),
                    a2.clone(),
                    INIT_STD,
                    rng,
                )
            })
            .collect();
        Stack { groups, blocks }
    }

    /// Shared AdaLN parameters once each, then block-local weights.
    pub fn params(&self) -> Vec<Parameter<T>> {
        let mut out = Vec::new();
        for (a1, a2) in &self.groups {
            out.extend(a1.params());
            out.extend(a2.params());
        }
        for b in &self.blocks {
            out.extend(b.local_params());
        }
        out
    }

    pub fn new_caches(&self) -> Vec<BlockKV<T>> {
        (0..self.blocks.len()).map(|_| BlockKV::default()).collect()
    }

    pub fn forward(
        &self,
        h: &Tensor<T>,
        slice: &MaskSlice,
        rope: &[RopePos],
        theta: &TimeEmbedding<T>,
        mut caches: Option<&mut Vec<BlockKV<T>>>,
    ) -> Tensor<T> {
        let mut h = h.clone();
        for (i, blk) in self.blocks.iter().enumerate() {
            let states = blk.states(theta);
            let cache = caches.as_mut().map(|c| &mut c[i]);
            h = block_forward(blk, &h, slice, rope, &states, cache);
        }
        h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Understanding,
    Generation,
}

/// One contiguous run of same-kind positions in a planned sequence.
pub enum Segment<T: Scalar> {
    /// Text-type positions carrying token ids (bytes and specials).
    Tokens(Vec<usize>),
    /// Clean visual latents, [rows x d_lat].
    Vision(Tensor<T>),
    /// Noised latents supplied at forward time; count of positions.
    Noise(usize),
    /// The single timestep-conditioning position.
    Timestep,
}

/// Fully laid-out input sequence: segments, per-position modality tags,
/// rotary positions, and loss bookkeeping.
pub struct SequencePlan<T: Scalar> {
    pub mode: Mode,
    pub segments: Vec<Segment<T>>,
    pub types: TokenTypeSequence,
    pub rope: Vec<RopePos>,
    /// Sequence indices of all Text-type positions, in order.
    pub text_rows: Vec<usize>,
    /// Aligned with `text_rows`: next-token target and whether it is
    /// supervised.
    pub ntp_targets: Vec<usize>,
    pub ntp_mask: Vec<bool>,
    /// Sequence indices of the noise positions (generation only).
    pub noise_rows: Vec<usize>,
}

impl<T: Scalar> SequencePlan<T> {
    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }
}

/// Rotary positions for one span of visual patches: frame-major row index
/// on the first axis, column on the second.
fn visual_rope(cfg: &ModelConfig) -> Vec<RopePos> {
    let g = cfg.grid();
    let mut out = Vec::with_capacity(cfg.visual_tokens());
    for f in 0..cfg.frames {
        for r in 0..g {
            for c in 0..g {
                out.push((f * g + r, c));
            }
        }
    }
    out
}

fn check_text_ids(ids: &[usize], vocab: usize) -> Result<(), HaploError> {
    for &id in ids {
        if id >= vocab {
            return Err(HaploError::Argument(format!(
                "token id {id} outside vocabulary of {vocab}"
            )));
        }
    }
    Ok(())
}

/// [BOS, BOI, vision patches, EOI, caption bytes, EOS]; the caption (and
/// its EOS) is supervised with next-token loss starting from the EOI row.
pub fn understanding_plan<T: Scalar>(
    cfg: &ModelConfig,
    vision: Tensor<T>,
    caption: &[usize],
) -> Result<SequencePlan<T>, HaploError> {
    build_understanding(cfg, vision, Some(caption))
}

/// Understanding prefix without any caption: the decode prompt.
pub fn prompt_plan<T: Scalar>(
    cfg: &ModelConfig,
    vision: Tensor<T>,
) -> Result<SequencePlan<T>, HaploError> {
    build_understanding(cfg, vision, None)
}

fn build_understanding<T: Scalar>(
    cfg: &ModelConfig,
    vision: Tensor<T>,
    caption: Option<&[usize]>,
) -> Result<SequencePlan<T>, HaploError> {
    let l_v = cfg.visual_tokens();
    if vision.shape() != vec![l_v, cfg.d_lat()] {
        return Err(HaploError::Argument(format!(
            "vision latents {:?} do not match the planned {} x {} span",
            vision.shape(),
            l_v,
            cfg.d_lat()
        )));
    }
    if let Some(c) = caption {
        check_text_ids(c, cfg.vocab)?;
    }

    let mut tags = vec![TokenType::Text, TokenType::Text];
    tags.extend(vec![TokenType::Vision; l_v]);
    tags.push(TokenType::Text); // EOI
    let idx_eoi = 2 + l_v;
    let n = caption.map(|c| c.len()).unwrap_or(0);
    if caption.is_some() {
        tags.extend(vec![TokenType::Text; n + 1]); // caption + EOS
    }
    let types = TokenTypeSequence::new(tags)?;

    let mut rope: Vec<RopePos> = vec![(0, 0), (1, 1)];
    rope.extend(visual_rope(cfg));
    for i in idx_eoi..types.len() {
        rope.push((i, i));
    }

    let mut segments = vec![Segment::Tokens(vec![Vocabulary::BOS, Vocabulary::BOI])];
    segments.push(Segment::Vision(vision));
    let mut tail = vec![Vocabulary::EOI];
    if let Some(c) = caption {
        tail.extend_from_slice(c);
        tail.push(Vocabulary::EOS);
    }
    segments.push(Segment::Tokens(tail));

    let text_rows: Vec<usize> = (0..types.len())
        .filter(|&i| types.tags()[i] == TokenType::Text)
        .collect();
    let mut ntp_targets = vec![Vocabulary::PAD; text_rows.len()];
    let mut ntp_mask = vec![false; text_rows.len()];
    if let Some(c) = caption {
        // Row idx_eoi predicts caption[0]; each caption row predicts its
        // successor; the last caption row predicts EOS.
        for (j, &row) in text_rows.iter().enumerate() {
            if row >= idx_eoi && row < idx_eoi + n + 1 {
                let k = row - idx_eoi;
                ntp_targets[j] = if k < n { c[k] } else { Vocabulary::EOS };
                ntp_mask[j] = true;
            }
        }
    }

    Ok(SequencePlan {
        mode: Mode::Understanding,
        segments,
        types,
        rope,
        text_rows,
        ntp_targets,
        ntp_mask,
        noise_rows: Vec::new(),
    })
}

/// [BOS, condition bytes, TS, BON, noise patches, EON]; the noise span is
/// filled from x_t at forward time.
pub fn generation_plan<T: Scalar>(
    cfg: &ModelConfig,
    condition: &[usize],
) -> Result<SequencePlan<T>, HaploError> {
    check_text_ids(condition, cfg.vocab)?;
    let l_n = cfg.visual_tokens();
    let n = condition.len();

    let mut tags = vec![TokenType::Text; n + 1];
    tags.push(TokenType::Timestep);
    tags.push(TokenType::Text); // BON
    tags.extend(vec![TokenType::Noise; l_n]);
    tags.push(TokenType::Text); // EON
    let types = TokenTypeSequence::new(tags)?;

    let noise_start = n + 3;
    let mut rope: Vec<RopePos> = (0..noise_start).map(|i| (i, i)).collect();
    rope.extend(visual_rope(cfg));
    let last = types.len() - 1;
    rope.push((last, last));

    let mut head = vec![Vocabulary::BOS];
    head.extend_from_slice(condition);
    let segments = vec![
        Segment::Tokens(head),
        Segment::Timestep,
        Segment::Tokens(vec![Vocabulary::BON]),
        Segment::Noise(l_n),
        Segment::Tokens(vec![Vocabulary::EON]),
    ];

    let text_rows: Vec<usize> = (0..types.len())
        .filter(|&i| types.tags()[i] == TokenType::Text)
        .collect();
    let ntp_targets = vec![Vocabulary::PAD; text_rows.len()];
    let ntp_mask = vec![false; text_rows.len()];
    let noise_rows = (noise_start..noise_start + l_n).collect();

    Ok(SequencePlan {
        mode: Mode::Generation,
        segments,
        types,
        rope,
        text_rows,
        ntp_targets,
        ntp_mask,
        noise_rows,
    })
}

// ---- patchification ----

/// Cut a [frames x C x H x W] pixel tensor into non-overlapping patches:
/// frame-major, raster order over the patch grid; each row flattens one
/// patch channel-major. d_lat = C * patch^2.
pub fn patchify<T: Scalar>(pixels: &Tensor<T>, patch: usize) -> Result<Tensor<T>, HaploError> {
    let shape = pixels.shape();
    if shape.len() != 4 {
        return Err(HaploError::Argument(format!(
            "patchify expects [frames x C x H x W], got rank {}",
            shape.len()
        )));
    }
    let (f, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if h % patch != 0 || w % patch != 0 {
        return Err(HaploError::Argument(format!(
            "image {h}x{w} not divisible by patch {patch}"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let d_lat = c * patch * patch;
    let src = pixels.data();
    let mut out = Vec::with_capacity(f * gh * gw * d_lat);
    for fr in 0..f {
        for pr in 0..gh {
            for pc in 0..gw {
                for ch in 0..c {
                    for r in 0..patch {
                        for cc in 0..patch {
                            let row = pr * patch + r;
                            let col = pc * patch + cc;
                            out.push(src[((fr * c + ch) * h + row) * w + col]);
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_vec(vec![f * gh * gw, d_lat], out))
}

/// Exact inverse of `patchify`.
pub fn unpatchify<T: Scalar>(
    latents: &Tensor<T>,
    frames: usize,
    channels: usize,
    height: usize,
    width: usize,
    patch: usize,
) -> Result<Tensor<T>, HaploError> {
    if height % patch != 0 || width % patch != 0 {
        return Err(HaploError::Argument(format!(
            "image {height}x{width} not divisible by patch {patch}"
        )));
    }
    let (gh, gw) = (height / patch, width / patch);
    let d_lat = channels * patch * patch;
    if latents.shape() != vec![frames * gh * gw, d_lat] {
        return Err(HaploError::Argument(format!(
            "latents {:?} do not unpatchify to {frames}x{channels}x{height}x{width} with patch {patch}",
            latents.shape()
        )));
    }
    let src = latents.data();
    let mut out = vec![T::zero(); frames * channels * height * width];
    for fr in 0..frames {
        for pr in 0..gh {
            for pc in 0..gw {
                let row_idx = (fr * gh + pr) * gw + pc;
                for ch in 0..channels {
                    for r in 0..patch {
                        for cc in 0..patch {
                            let v = src[row_idx * d_lat + (ch * patch + r) * patch + cc];
                            let row = pr * patch + r;
                            let col = pc * patch + cc;
                            out[((fr * channels + ch) * height + row) * width + col] = v;
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_vec(vec![frames, channels, height, width], out))
}

// ---- bundle ----

pub struct ModelBundle<T: Scalar> {
    pub cfg: ModelConfig,
    pub seed: u64,
    pub embed_text: Parameter<T>,
    pub embed_patch: Parameter<T>,
    pub embed_timestep: Parameter<T>,
    pub null_theta: Parameter<T>,
    pub pre: Stack<T>,
    pub base: Stack<T>,
    pub post: Stack<T>,
    pub pre_connector: Connector<T>,
    pub post_connector: Connector<T>,
    pub prescaler_pre: PreScaler,
    pub prescaler_post: PreScaler,
    pub head_text: Parameter<T>,
    pub head_noise: Parameter<T>,
    pub sched: NoiseSchedule<T>,
}

impl<T: Scalar> ModelBundle<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, HaploError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bcfg = cfg.block_config();
        let eps = T::from_f64(LN_EPS);

        let embed_text = Parameter::new(
            "embed.text",
            Tensor::randn(vec![cfg.vocab, cfg.d], INIT_STD, &mut rng),
        );
        let embed_patch = Parameter::new(
            "embed.patch",
            Tensor::randn(vec![cfg.d_lat(), cfg.d], INIT_STD, &mut rng),
        );
        let embed_timestep = Parameter::new(
            "embed.timestep",
            Tensor::randn(vec![cfg.d_t, cfg.d], INIT_STD, &mut rng),
        );
        let null_theta = Parameter::new(
            "embed.null_theta",
            Tensor::randn(vec![1, cfg.d_t], 1.0, &mut rng),
        );

        let pre = Stack::new("pre", cfg.n_pre, cfg.adaln_groups, bcfg, cfg.d_t, &mut rng);
        let base = Stack::new("base", cfg.n_base, cfg.adaln_groups, bcfg, cfg.d_t, &mut rng);
        let post = Stack::new("post", cfg.n_post, cfg.adaln_groups, bcfg, cfg.d_t, &mut rng);

        let pre_connector = Connector::new("connectors.pre", cfg.d, eps, INIT_STD, &mut rng);
        let post_connector = Connector::new("connectors.post", cfg.d, eps, INIT_STD, &mut rng);

        let head_text = Parameter::new(
            "heads.text",
            Tensor::randn(vec![cfg.d, cfg.vocab], INIT_STD, &mut rng),
        );
        let head_noise = Parameter::new(
            "heads.noise",
            Tensor::randn(vec![cfg.d, cfg.d_lat()], INIT_STD, &mut rng),
        );

        let sched = NoiseSchedule::linear(cfg.t_max, cfg.beta_start, cfg.beta_end);
        // Target RMS set from the text embedding table at init; calibration
        // scales other modalities toward it.
        let target = {
            let data: Vec<T> = embed_text.tensor.data();
            let mut sum = 0.0f64;
            for v in &data {
                sum += v.to_f64() * v.to_f64();
            }
            f64::sqrt(sum / data.len() as f64)
        };

        Ok(ModelBundle {
            cfg,
            seed,
            embed_text,
            embed_patch,
            embed_timestep,
            null_theta,
            pre,
            base,
            post,
            pre_connector,
            post_connector,
            prescaler_pre: PreScaler::identity(target),
            prescaler_post: PreScaler::identity(target),
            head_text,
            head_noise,
            sched,
        })
    }

    /// Every parameter exactly once, in a stable named order.
    pub fn parameters(&self) -> Vec<Parameter<T>> {
        let mut out = vec![
            self.embed_text.clone(),
            self.embed_patch.clone(),
            self.embed_timestep.clone(),
            self.null_theta.clone(),
        ];
        out.extend(self.pre.params());
        out.extend(self.pre_connector.params());
        out.extend(self.base.params());
        out.extend(self.post_connector.params());
        out.extend(self.post.params());
        out.push(self.head_text.clone());
        out.push(self.head_noise.clone());
        out
    }

    /// Closed-form trainable scalar count for a config; the census test
    /// asserts `parameters()` sums to this.
    pub fn expected_param_count(cfg: &ModelConfig) -> usize {
        let d = cfg.d;
        let d_lat = cfg.d_lat();
        let adaln_pair = 2 * (cfg.d_t * 6 * d + d * 2);
        let block = 4 * d * d + 2 * d * cfg.d_ff;
        let stack = |n: usize| cfg.adaln_groups.min(n) * adaln_pair + n * block;
        let connector = d * d + d * 2;
        cfg.vocab * d
            + d_lat * d
            + cfg.d_t * d
            + cfg.d_t
            + stack(cfg.n_pre)
            + stack(cfg.n_base)
            + stack(cfg.n_post)
            + 2 * connector
            + d * cfg.vocab
            + d * d_lat
    }

    pub fn null_embedding(&self) -> TimeEmbedding<T> {
        TimeEmbedding {
            theta: self.null_theta.tensor.clone(),
            null_flag: true,
        }
    }

    pub fn time_embedding(&self, t: usize) -> TimeEmbedding<T> {
        TimeEmbedding {
            theta: timestep_embedding(t, self.cfg.d_t),
            null_flag: false,
        }
    }

    /// Token-by-token input features, [L x d].
    pub fn embed_sequence(
        &self,
        plan: &SequencePlan<T>,
        x_t: Option<&Tensor<T>>,
        t: Option<usize>,
    ) -> Result<Tensor<T>, HaploError> {
        let mut parts = Vec::new();
        for seg in &plan.segments {
            match seg {
                Segment::Tokens(ids) => parts.push(self.embed_text.tensor.select_rows(ids)),
                Segment::Vision(latents) => {
                    parts.push(latents.matmul(&self.embed_patch.tensor))
                }
                Segment::Noise(count) => {
                    let x = x_t.ok_or_else(|| {
                        HaploError::Argument("plan has a noise span but no x_t given".into())
                    })?;
                    if x.shape() != vec![*count, self.cfg.d_lat()] {
                        return Err(HaploError::Argument(format!(
                            "x_t {:?} does not fill the {} x {} noise span",
                            x.shape(),
                            count,
                            self.cfg.d_lat()
                        )));
                    }
                    parts.push(x.matmul(&self.embed_patch.tensor));
                }
                Segment::Timestep => {
                    let t = t.ok_or_else(|| {
                        HaploError::Argument("plan has a timestep slot but no t given".into())
                    })?;
                    parts.push(
                        timestep_embedding::<T>(t, self.cfg.d_t)
                            .matmul(&self.embed_timestep.tensor),
                    );
                }
            }
        }
        let h = Tensor::concat_rows(&parts);
        assert_eq!(h.rows(), plan.len(), "segments disagree with type tags");
        Ok(h)
    }

    /// Pre-decoder, pre-connector, base-decoder on already-embedded rows;
    /// shared by full forwards and incremental decoding.
    fn understanding_trunk(
        &self,
        h: &Tensor<T>,
        slice: &MaskSlice,
        rope: &[RopePos],
        caches: Option<(&mut Vec<BlockKV<T>>, &mut Vec<BlockKV<T>>)>,
    ) -> Tensor<T> {
        let null = self.null_embedding();
        let (pre_kv, base_kv) = match caches {
            Some((p, b)) => (Some(p), Some(b)),
            None => (None, None),
        };
        let h = self.pre.forward(h, slice, rope, &null, pre_kv);
        let h = connector_forward(&self.pre_connector, &h);
        self.base.forward(&h, slice, rope, &null, base_kv)
    }

    /// Understanding mode: text logits at the plan's text rows,
    /// [#text rows x vocab].
    pub fn forward_understanding(&self, plan: &SequencePlan<T>) -> Result<Tensor<T>, HaploError> {
        if plan.mode != Mode::Understanding {
            return Err(HaploError::Argument(
                "plan is not in understanding layout".into(),
            ));
        }
        let h = self.embed_sequence(plan, None, None)?;
        let h = apply_prescaler(&self.prescaler_pre, &h, &plan.types);
        let mask = build_mask(&plan.types);
        let slice = MaskSlice::full(&mask);
        let h = self.understanding_trunk(&h, &slice, &plan.rope, None);
        Ok(h.select_rows(&plan.text_rows).matmul(&self.head_text.tensor))
    }

    /// Generation mode: predicted noise at the plan's noise rows, shaped
    /// like x_t.
    pub fn forward_generation(
        &self,
        plan: &SequencePlan<T>,
        x_t: &Tensor<T>,
        t: usize,
    ) -> Result<Tensor<T>, HaploError> {
        if plan.mode != Mode::Generation {
            return Err(HaploError::Argument(
                "plan is not in generation layout".into(),
            ));
        }
        if t < 1 || t > self.cfg.t_max {
            return Err(HaploError::Argument(format!(
                "timestep {} outside 1..={}",
                t, self.cfg.t_max
            )));
        }
        let h = self.embed_sequence(plan, Some(x_t), Some(t))?;
        let h = apply_prescaler(&self.prescaler_pre, &h, &plan.types);
        let mask = build_mask(&plan.types);
        let slice = MaskSlice::full(&mask);

        let null = self.null_embedding();
        let h = self.pre.forward(&h, &slice, &plan.rope, &null, None);
        let h = connector_forward(&self.pre_connector, &h);
        let h = self.base.forward(&h, &slice, &plan.rope, &null, None);
        let h = connector_forward(&self.post_connector, &h);
        let h = apply_prescaler(&self.prescaler_post, &h, &plan.types);
        let h = self.post.forward(&h, &slice, &plan.rope, &self.time_embedding(t), None);
        Ok(h.select_rows(&plan.noise_rows).matmul(&self.head_noise.tensor))
    }

    /// DDIM sampling of one visual span conditioned on a generation plan.
    pub fn generate_latents<R: Rng>(
        &self,
        plan: &SequencePlan<T>,
        steps: usize,
        rng: &mut R,
    ) -> Result<Tensor<T>, HaploError> {
        if steps == 0 || steps > self.cfg.t_max {
            return Err(HaploError::Argument(format!(
                "steps must be in 1..={}, got {steps}",
                self.cfg.t_max
            )));
        }
        let shape = vec![plan.noise_rows.len(), self.cfg.d_lat()];
        crate::diffusion::sample(&self.sched, shape, steps, rng, |x, t| {
            self.forward_generation(plan, x, t)
                .expect("sampler drives forward_generation within its own bounds")
        })
    }

    /// Calibrate both pre-scalers from embedded feature streams.
    pub fn calibrate_prescalers(
        &mut self,
        stream: &[(Tensor<T>, TokenTypeSequence)],
        required: &[TokenType],
    ) -> Result<(), HaploError> {
        calibrate_prescaler(&mut self.prescaler_pre, stream, required)?;
        calibrate_prescaler(&mut self.prescaler_post, stream, required)
    }
}

// ---- incremental decoding ----

/// One autoregressive decoding session: owns the growing mask and per-block
/// KV caches for the pre and base stacks.
pub struct DecodeSession<'a, T: Scalar> {
    bundle: &'a ModelBundle<T>,
    mask: AttentionMask,
    pre_kv: Vec<BlockKV<T>>,
    base_kv: Vec<BlockKV<T>>,
    len: usize,
}

impl<'a, T: Scalar> DecodeSession<'a, T> {
    /// Process the prompt prefix; returns the session and the logits row at
    /// the final prefix position.
    pub fn start(
        bundle: &'a ModelBundle<T>,
        plan: &SequencePlan<T>,
    ) -> Result<(Self, Vec<T>), HaploError> {
        if plan.mode != Mode::Understanding {
            return Err(HaploError::Argument(
                "decoding requires an understanding-layout plan".into(),
            ));
        }
        let h = bundle.embed_sequence(plan, None, None)?.detach();
        let h = apply_prescaler(&bundle.prescaler_pre, &h, &plan.types);
        let mask = build_mask(&plan.types);
        let slice = MaskSlice::full(&mask);
        let mut pre_kv = bundle.pre.new_caches();
        let mut base_kv = bundle.base.new_caches();
        let out = bundle.understanding_trunk(
            &h,
            &slice,
            &plan.rope,
            Some((&mut pre_kv, &mut base_kv)),
        );
        let last = out
            .select_rows(&[plan.len() - 1])
            .matmul(&bundle.head_text.tensor);
        let session = DecodeSession {
            bundle,
            mask,
            pre_kv,
            base_kv,
            len: plan.len(),
        };
        Ok((session, last.data()))
    }

    /// Append one text token; returns the logits row for the next position.
    pub fn step(&mut self, token: usize) -> Result<Vec<T>, HaploError> {
        if token >= self.bundle.cfg.vocab {
            return Err(HaploError::Argument(format!(
                "token id {token} outside vocabulary of {}",
                self.bundle.cfg.vocab
            )));
        }
        self.mask = extend_mask_for_decoding(&self.mask, TokenType::Text);
        let pos = self.len;
        self.len += 1;
        let row = self.bundle.embed_text.tensor.select_rows(&[token]).detach();
        let gamma = T::from_f64(if self.bundle.prescaler_pre.calibrated {
            self.bundle.prescaler_pre.gamma(TokenType::Text)
        } else {
            1.0
        });
        let row = row.scale(gamma);
        let slice = MaskSlice::tail(&self.mask, 1);
        let out = self.bundle.understanding_trunk(
            &row,
            &slice,
            &[(pos, pos)],
            Some((&mut self.pre_kv, &mut self.base_kv)),
        );
        Ok(out.matmul(&self.bundle.head_text.tensor).data())
    }
}

/// Autoregressive decode from an understanding prompt. Emits tokens until
/// EOS (included in the output) or `max_new`.
pub fn decode<T: Scalar, R: Rng>(
    bundle: &ModelBundle<T>,
    plan: &SequencePlan<T>,
    max_new: usize,
    temperature: f64,
    top_p: f64,
    rng: &mut R,
) -> Result<Vec<usize>, HaploError> {
    if temperature < 0.0 {
        return Err(HaploError::Argument(format!(
            "temperature must be non-negative, got {temperature}"
        )));
    }
    if !(top_p > 0.0 && top_p <= 1.0) {
        return Err(HaploError::Argument(format!(
            "top_p must be in (0, 1], got {top_p}"
        )));
    }
    let (mut session, mut logits) = DecodeSession::start(bundle, plan)?;
    let mut out = Vec::new();
    for _ in 0..max_new {
        let tok = sample_token(&logits, temperature, top_p, rng);
        out.push(tok);
        if tok == Vocabulary::EOS {
            break;
        }
        logits = session.step(tok)?;
    }
    Ok(out)
}

// ---- checkpoint I/O ----

const MAGIC: &[u8; 4] = b"HPLO";
const VERSION: u16 = 1;

fn metadata_string<T: Scalar>(bundle: &ModelBundle<T>) -> String {
    let c = &bundle.cfg;
    let mut lines = vec![
        format!("d={}", c.d),
        format!("heads={}", c.heads),
        format!("d_ff={}", c.d_ff),
        format!("d_t={}", c.d_t),
        format!("n_pre={}", c.n_pre),
        format!("n_base={}", c.n_base),
        format!("n_post={}", c.n_post),
        format!("vocab={}", c.vocab),
        format!("image_size={}", c.image_size),
        format!("patch_size={}", c.patch_size),
        format!("frames={}", c.frames),
        format!("channels={}", c.channels),
        format!("adaln_groups={}", c.adaln_groups),
        format!("t_max={}", c.t_max),
        format!("beta_start={:?}", c.beta_start),
        format!("beta_end={:?}", c.beta_end),
        format!("seed={}", bundle.seed),
    ];
    for (tag, ps) in [("pre", &bundle.prescaler_pre), ("post", &bundle.prescaler_post)] {
        lines.push(format!("prescaler.{tag}.calibrated={}", ps.calibrated));
        lines.push(format!("prescaler.{tag}.target_rms={:?}", ps.target_rms));
        for (label, g) in ps.gammas() {
            lines.push(format!("prescaler.{tag}.gamma.{label}={g:?}"));
        }
    }
    lines.join("\n") + "\n"
}

pub fn save_checkpoint<T: Scalar>(
    bundle: &ModelBundle<T>,
    path: &Path,
) -> Result<(), HaploError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let meta = metadata_string(bundle);
    w.write_all(&(meta.len() as u32).to_le_bytes())?;
    w.write_all(meta.as_bytes())?;
    for p in bundle.parameters() {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[T::DTYPE])?;
        let shape = p.tensor.shape();
        w.write_all(&[shape.len() as u8])?;
        for &e in &shape {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        let mut bytes = Vec::with_capacity(p.tensor.data().len() * T::WIDTH);
        for v in p.tensor.data() {
            v.write_le(&mut bytes);
        }
        w.write_all(&bytes)?;
    }
    w.flush()?;
    Ok(())
}

fn read_exact_fmt<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<(), HaploError> {
    r.read_exact(buf)
        .map_err(|_| HaploError::Format(format!("checkpoint truncated while reading {what}")))
}

fn meta_get<'m>(meta: &'m BTreeMap<String, String>, key: &str) -> Result<&'m str, HaploError> {
    meta.get(key)
        .map(|s| s.as_str())
        .ok_or_else(|| HaploError::Format(format!("checkpoint metadata missing key {key}")))
}

fn meta_parse<V: std::str::FromStr>(
    meta: &BTreeMap<String, String>,
    key: &str,
) -> Result<V, HaploError> {
    meta_get(meta, key)?
        .parse()
        .map_err(|_| HaploError::Format(format!("checkpoint metadata key {key} unparsable")))
}

fn load_prescaler(
    meta: &BTreeMap<String, String>,
    tag: &str,
) -> Result<PreScaler, HaploError> {
    let target: f64 = meta_parse(meta, &format!("prescaler.{tag}.target_rms"))?;
    let mut ps = PreScaler::identity(target);
    for t in TokenType::ALL {
        let g: f64 = meta_parse(meta, &format!("prescaler.{tag}.gamma.{}", t.label()))?;
        ps.set_gamma(t, g);
    }
    ps.calibrated = meta_parse(meta, &format!("prescaler.{tag}.calibrated"))?;
    Ok(ps)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ModelBundle<T>, HaploError> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact_fmt(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(HaploError::Format(format!(
            "bad checkpoint magic {magic:?}; expected {MAGIC:?}"
        )));
    }
    let mut ver = [0u8; 2];
    read_exact_fmt(&mut r, &mut ver, "version")?;
    let version = u16::from_le_bytes(ver);
    if version != VERSION {
        return Err(HaploError::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut len4 = [0u8; 4];
    read_exact_fmt(&mut r, &mut len4, "metadata length")?;
    let mut meta_bytes = vec![0u8; u32::from_le_bytes(len4) as usize];
    read_exact_fmt(&mut r, &mut meta_bytes, "metadata")?;
    let meta_text = String::from_utf8(meta_bytes)
        .map_err(|_| HaploError::Format("checkpoint metadata is not UTF-8".into()))?;
    let mut meta = BTreeMap::new();
    for line in meta_text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            meta.insert(k.to_string(), v.to_string());
        }
    }

    let cfg = ModelConfig {
        d: meta_parse(&meta, "d")?,
        heads: meta_parse(&meta, "heads")?,
        d_ff: meta_parse(&meta, "d_ff")?,
        d_t: meta_parse(&meta, "d_t")?,
        n_pre: meta_parse(&meta, "n_pre")?,
        n_base: meta_parse(&meta, "n_base")?,
        n_post: meta_parse(&meta, "n_post")?,
        vocab: meta_parse(&meta, "vocab")?,
        image_size: meta_parse(&meta, "image_size")?,
        patch_size: meta_parse(&meta, "patch_size")?,
        frames: meta_parse(&meta, "frames")?,
        channels: meta_parse(&meta, "channels")?,
        adaln_groups: meta_parse(&meta, "adaln_groups")?,
        t_max: meta_parse(&meta, "t_max")?,
        beta_start: meta_parse(&meta, "beta_start")?,
        beta_end: meta_parse(&meta, "beta_end")?,
    };
    let seed: u64 = meta_parse(&meta, "seed")?;
    let mut bundle = ModelBundle::<T>::new(cfg, seed)?;
    bundle.prescaler_pre = load_prescaler(&meta, "pre")?;
    bundle.prescaler_post = load_prescaler(&meta, "post")?;

    let by_name: HashMap<String, Parameter<T>> = bundle
        .parameters()
        .into_iter()
        .map(|p| (p.name.clone(), p))
        .collect();
    let mut filled = std::collections::HashSet::new();

    loop {
        let mut len2 = [0u8; 2];
        match r.read_exact(&mut len2) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let mut name_bytes = vec![0u8; u16::from_le_bytes(len2) as usize];
        read_exact_fmt(&mut r, &mut name_bytes, "parameter name")?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| HaploError::Format("parameter name is not UTF-8".into()))?;
        let mut dtype = [0u8; 1];
        read_exact_fmt(&mut r, &mut dtype, "dtype code")?;
        if dtype[0] != T::DTYPE {
            return Err(HaploError::Format(format!(
                "parameter {name} has dtype code {} but this build loads dtype {}",
                dtype[0],
                T::DTYPE
            )));
        }
        let mut rank = [0u8; 1];
        read_exact_fmt(&mut r, &mut rank, "rank")?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            let mut e4 = [0u8; 4];
            read_exact_fmt(&mut r, &mut e4, "extent")?;
            shape.push(u32::from_le_bytes(e4) as usize);
        }
        let count: usize = shape.iter().product();
        let mut bytes = vec![0u8; count * T::WIDTH];
        read_exact_fmt(&mut r, &mut bytes, &format!("values of {name}"))?;
        let mut values = Vec::with_capacity(count);
        for chunk in bytes.chunks_exact(T::WIDTH) {
            values.push(T::read_le(chunk));
        }

        let param = by_name.get(&name).ok_or_else(|| {
            HaploError::Format(format!("checkpoint names unknown parameter {name}"))
        })?;
        if param.tensor.shape() != shape {
            return Err(HaploError::Format(format!(
                "parameter {name} extents {:?} disagree with the configured {:?}",
                shape,
                param.tensor.shape()
            )));
        }
        param.tensor.set_data(&values);
        filled.insert(name);
    }

    if filled.len() != by_name.len() {
        let missing: Vec<&String> = by_name.keys().filter(|k| !filled.contains(*k)).collect();
        return Err(HaploError::Format(format!(
            "checkpoint is missing {} parameters, e.g. {:?}",
            missing.len(),
            missing.first()
        )));
    }
    Ok(bundle)
}

// ---- plan traces ----

fn join<I: std::fmt::Display>(items: impl Iterator<Item = I>) -> String {
    items.map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl<T: Scalar> SequencePlan<T> {
    /// Lossless line-based text form of a plan.
    pub fn to_trace(&self) -> String {
        let mut out = String::new();
        out.push_str(match self.mode {
            Mode::Understanding => "mode=understanding\n",
            Mode::Generation => "mode=generation\n",
        });
        let types: String = self.types.tags().iter().map(|t| t.to_char()).collect();
        out.push_str(&format!("types={types}\n"));
        out.push_str(&format!(
            "rope={}\n",
            join(self.rope.iter().map(|(a, b)| format!("{a}:{b}")))
        ));
        out.push_str(&format!("text_rows={}\n", join(self.text_rows.iter())));
        out.push_str(&format!("ntp_targets={}\n", join(self.ntp_targets.iter())));
        let mask: String = self
            .ntp_mask
            .iter()
            .map(|&b| if b { '1' } else { '0' })
            .collect();
        out.push_str(&format!("ntp_mask={mask}\n"));
        out.push_str(&format!("noise_rows={}\n", join(self.noise_rows.iter())));
        for seg in &self.segments {
            match seg {
                Segment::Tokens(ids) => {
                    out.push_str(&format!("segment=tokens:{}\n", join(ids.iter())))
                }
                Segment::Vision(t) => {
                    let vals = join(t.data().iter().map(|v| format!("{:?}", v.to_f64())));
                    out.push_str(&format!(
                        "segment=vision:{}x{}:{vals}\n",
                        t.rows(),
                        t.cols()
                    ));
                }
                Segment::Noise(n) => out.push_str(&format!("segment=noise:{n}\n")),
                Segment::Timestep => out.push_str("segment=timestep\n"),
            }
        }
        out
    }

    pub fn from_trace(text: &str) -> Result<Self, HaploError> {
        let bad = |msg: String| HaploError::Format(msg);
        let mut fields: HashMap<&str, &str> = HashMap::new();
        let mut segments = Vec::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("trace line without '=': {line:?}")))?;
            if k == "segment" {
                segments.push(v);
            } else {
                fields.insert(k, v);
            }
        }
        let get = |k: &str| {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| bad(format!("trace missing field {k}")))
        };
        let mode = match get("mode")? {
            "understanding" => Mode::Understanding,
            "generation" => Mode::Generation,
            other => return Err(bad(format!("unknown trace mode {other:?}"))),
        };
        let tags = get("types")?
            .chars()
            .map(TokenType::from_char)
            .collect::<Result<Vec<_>, _>>()?;
        let types = TokenTypeSequence::new(tags)?;

        let parse_usizes = |s: &str| -> Result<Vec<usize>, HaploError> {
            if s.is_empty() {
                return Ok(Vec::new());
            }
            s.split(',')
                .map(|p| p.parse().map_err(|_| bad(format!("bad integer {p:?}"))))
                .collect()
        };
        let rope = {
            let s = get("rope")?;
            let mut out = Vec::new();
            if !s.is_empty() {
                for pair in s.split(',') {
                    let (a, b) = pair
                        .split_once(':')
                        .ok_or_else(|| bad(format!("bad rope pair {pair:?}")))?;
                    out.push((
                        a.parse().map_err(|_| bad(format!("bad rope index {a:?}")))?,
                        b.parse().map_err(|_| bad(format!("bad rope index {b:?}")))?,
                    ));
                }
            }
            out
        };
        let text_rows = parse_usizes(get("text_rows")?)?;
        let ntp_targets = parse_usizes(get("ntp_targets")?)?;
        let ntp_mask = get("ntp_mask")?
            .chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                other => Err(bad(format!("bad mask character {other:?}"))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        let noise_rows = parse_usizes(get("noise_rows")?)?;

        let mut parsed_segments = Vec::new();
        for seg in segments {
            if seg == "timestep" {
                parsed_segments.push(Segment::Timestep);
            } else if let Some(rest) = seg.strip_prefix("tokens:") {
                parsed_segments.push(Segment::Tokens(parse_usizes(rest)?));
            } else if let Some(rest) = seg.strip_prefix("noise:") {
                parsed_segments.push(Segment::Noise(
                    rest.parse().map_err(|_| bad(format!("bad noise count {rest:?}")))?,
                ));
            } else if let Some(rest) = seg.strip_prefix("vision:") {
                let mut it = rest.splitn(2, ':');
                let dims = it.next().unwrap();
                let vals = it
                    .next()
                    .ok_or_else(|| bad("vision segment missing values".into()))?;
                let (r, c) = dims
                    .split_once('x')
                    .ok_or_else(|| bad(format!("bad vision dims {dims:?}")))?;
                let rows: usize = r.parse().map_err(|_| bad(format!("bad rows {r:?}")))?;
                let cols: usize = c.parse().map_err(|_| bad(format!("bad cols {c:?}")))?;
                let data = vals
                    .split(',')
                    .map(|v| {
                        v.parse::<f64>()
                            .map(T::from_f64)
                            .map_err(|_| bad(format!("bad float {v:?}")))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                if data.len() != rows * cols {
                    return Err(bad("vision segment value count mismatch".into()));
                }
                parsed_segments.push(Segment::Vision(Tensor::from_vec(vec![rows, cols], data)));
            } else {
                return Err(bad(format!("unknown segment {seg:?}")));
            }
        }

        Ok(SequencePlan {
            mode,
            segments: parsed_segments,
            types,
            rope,
            text_rows,
            ntp_targets,
            ntp_mask,
            noise_rows,
        })
    }
}
