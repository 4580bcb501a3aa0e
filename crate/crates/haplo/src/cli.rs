//! Command implementations behind the binary: staged training with
//! checkpoint plumbing, sampling to portable pixmaps, image captioning, and
//! mask inspection. Pure functions returning data; the binary does the
//! printing and exit-code mapping.

use std::io::{Read as _, Write as _};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Precision, RunConfig};
use crate::data::{generate_synthetic, TeacherBundle};
use crate::error::HaploError;
use crate::language::{sample_token, Vocabulary};
use crate::masking::{build_mask, TokenType, TokenTypeSequence};
use crate::model::{
    generation_plan, load_checkpoint, patchify, prompt_plan, save_checkpoint, unpatchify,
    DecodeSession, ModelBundle,
};
use crate::tensor::{Scalar, Tensor};
use crate::training::{run_stage, write_metrics_csv, StageId, StepRecord};

/// `<outdir>/<stage>.ckpt`.
pub fn checkpoint_path(out_dir: &Path, stage: StageId) -> PathBuf {
    out_dir.join(format!("{}.ckpt", stage.name()))
}

/// `<outdir>/<stage>.csv`.
pub fn metrics_path(out_dir: &Path, stage: StageId) -> PathBuf {
    out_dir.join(format!("{}.csv", stage.name()))
}

/// Run one training stage: load or initialize weights, train, write the
/// stage checkpoint and metrics CSV. Returns the step records.
pub fn cmd_train(
    stage: StageId,
    config: &RunConfig,
    resume: Option<&Path>,
) -> Result<Vec<StepRecord>, HaploError> {
    match config.precision {
        Precision::F32 => train_impl::<f32>(stage, config, resume),
        Precision::F64 => train_impl::<f64>(stage, config, resume),
    }
}

fn train_impl<T: Scalar>(
    stage: StageId,
    config: &RunConfig,
    resume: Option<&Path>,
) -> Result<Vec<StepRecord>, HaploError> {
    let seed = config.effective_seed()?;
    std::fs::create_dir_all(&config.out_dir)?;

    let missing: Vec<String> = stage
        .prerequisites()
        .iter()
        .map(|&p| checkpoint_path(&config.out_dir, p))
        .filter(|p| !p.exists())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(HaploError::Sequencing(format!(
            "stage {} is missing prerequisite checkpoints: {}",
            stage.name(),
            missing.join(", ")
        )));
    }
    let completed: Vec<StageId> = StageId::ALL
        .into_iter()
        .filter(|&s| checkpoint_path(&config.out_dir, s).exists())
        .collect();

    // Continue from the most recent earlier stage's checkpoint; warmups
    // may start from fresh weights.
    let this = StageId::ALL.iter().position(|&s| s == stage).unwrap();
    let mut bundle: ModelBundle<T> = if let Some(path) = resume {
        load_checkpoint(path)?
    } else if let Some(&prev) = StageId::ALL[..this]
        .iter()
        .rev()
        .find(|&&s| checkpoint_path(&config.out_dir, s).exists())
    {
        load_checkpoint(&checkpoint_path(&config.out_dir, prev))?
    } else {
        ModelBundle::new(config.model.clone(), seed)?
    };
    if bundle.cfg != config.model {
        return Err(HaploError::Config(
            "checkpoint model shape disagrees with the configured model".into(),
        ));
    }

    let data = generate_synthetic::<T>(
        config.data.seed,
        config.data.n_und,
        config.data.n_gen,
        &config.model,
        config.data.vision_scale,
    );
    let teachers = TeacherBundle::new(&config.model, config.teacher_seed);
    let plan = config.stage_plan(stage);
    let records = run_stage(&plan, &mut bundle, &data, &teachers, &completed, seed)?;
    write_metrics_csv(&metrics_path(&config.out_dir, stage), &plan, seed, &records)?;
    save_checkpoint(&bundle, &checkpoint_path(&config.out_dir, stage))?;
    Ok(records)
}

/// The scalar width code stored in a checkpoint's first parameter record,
/// so loads can dispatch on precision without trial and error.
pub fn checkpoint_dtype(path: &Path) -> Result<u8, HaploError> {
    let mut f = std::fs::File::open(path)?;
    let mut read = |n: usize| -> Result<Vec<u8>, HaploError> {
        let mut buf = vec![0u8; n];
        f.read_exact(&mut buf)
            .map_err(|_| HaploError::Format("checkpoint truncated before first record".into()))?;
        Ok(buf)
    };
    let magic = read(4)?;
    if magic != b"HPLO" {
        return Err(HaploError::Format("bad checkpoint magic".into()));
    }
    let _version = read(2)?;
    let meta_len = u32::from_le_bytes(read(4)?.try_into().unwrap()) as usize;
    let _meta = read(meta_len)?;
    let name_len = u16::from_le_bytes(read(2)?.try_into().unwrap()) as usize;
    let _name = read(name_len)?;
    Ok(read(1)?[0])
}

/// Map [-1, 1] pixels of one frame to 8-bit RGB rows; single-channel models
/// replicate gray into all three channels.
fn frame_to_rgb<T: Scalar>(
    pixels: &[T],
    channels: usize,
    hw: usize,
) -> Result<Vec<u8>, HaploError> {
    if channels != 1 && channels != 3 {
        return Err(HaploError::Argument(format!(
            "pixmap output supports 1 or 3 channels, model has {channels}"
        )));
    }
    let to_byte = |v: T| -> u8 {
        let x = (v.to_f64().clamp(-1.0, 1.0) + 1.0) / 2.0;
        (x * 255.0).round() as u8
    };
    let mut rgb = Vec::with_capacity(hw * 3);
    for i in 0..hw {
        for ch in 0..3 {
            let src = if channels == 3 { ch } else { 0 };
            rgb.push(to_byte(pixels[src * hw + i]));
        }
    }
    Ok(rgb)
}

/// Binary P6 pixmap, max value 255.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<(), HaploError> {
    assert_eq!(rgb.len(), width * height * 3);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P6\n{width} {height}\n255\n")?;
    f.write_all(rgb)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>), HaploError> {
    let bytes = std::fs::read(path)?;
    let bad = |msg: &str| HaploError::Format(format!("{}: {msg}", path.display()));
    // Header: three whitespace-separated fields after the magic, then one
    // whitespace byte, then binary data. Comments are not supported.
    if !bytes.starts_with(b"P6") {
        return Err(bad("not a binary P6 pixmap"));
    }
    let mut pos = 2;
    let mut fields = Vec::new();
    while fields.len() < 3 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("bad header"))?;
        fields.push(
            text.parse::<usize>()
                .map_err(|_| bad("non-numeric header field"))?,
        );
    }
    pos += 1; // single whitespace byte after maxval
    let (width, height, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(bad("only max value 255 is supported"));
    }
    let need = width * height * 3;
    if bytes.len() < pos + need {
        return Err(bad("pixel data truncated"));
    }
    Ok((width, height, bytes[pos..pos + need].to_vec()))
}

/// Generate latents for a text prompt and write one PPM per frame plus a
/// sidecar recording the prompt, steps, and seed. Returns the written paths.
pub fn cmd_sample(
    ckpt: &Path,
    prompt: &str,
    steps: usize,
    seed: u64,
    out: &Path,
) -> Result<Vec<PathBuf>, HaploError> {
    match checkpoint_dtype(ckpt)? {
        d if d == f32::DTYPE => sample_impl::<f32>(ckpt, prompt, steps, seed, out),
        d if d == f64::DTYPE => sample_impl::<f64>(ckpt, prompt, steps, seed, out),
        d => Err(HaploError::Format(format!("unknown scalar code {d}"))),
    }
}

fn sample_impl<T: Scalar>(
    ckpt: &Path,
    prompt: &str,
    steps: usize,
    seed: u64,
    out: &Path,
) -> Result<Vec<PathBuf>, HaploError> {
    let bundle: ModelBundle<T> = load_checkpoint(ckpt)?;
    let cfg = bundle.cfg.clone();
    let plan = generation_plan::<T>(&cfg, &Vocabulary::encode(prompt))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let latents = bundle.generate_latents(&plan, steps, &mut rng)?;
    let pixels = unpatchify(
        &latents,
        cfg.frames,
        cfg.channels,
        cfg.image_size,
        cfg.image_size,
        cfg.patch_size,
    )?;
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let data = pixels.data();
    let hw = cfg.image_size * cfg.image_size;
    let frame_len = cfg.channels * hw;
    let mut written = Vec::new();
    for f in 0..cfg.frames {
        let path = if cfg.frames == 1 {
            out.to_path_buf()
        } else {
            let stem = out.file_stem().unwrap_or_default().to_string_lossy();
            let ext = out.extension().map(|e| e.to_string_lossy().into_owned());
            let name = match ext {
                Some(e) => format!("{stem}-f{f}.{e}"),
                None => format!("{stem}-f{f}"),
            };
            out.with_file_name(name)
        };
        let rgb = frame_to_rgb(&data[f * frame_len..(f + 1) * frame_len], cfg.channels, hw)?;
        write_ppm(&path, cfg.image_size, cfg.image_size, &rgb)?;
        written.push(path);
    }
    let meta = PathBuf::from(format!("{}.meta", out.display()));
    std::fs::write(
        &meta,
        format!("prompt={prompt}\nsteps={steps}\nseed={seed}\n"),
    )?;
    written.push(meta);
    Ok(written)
}

/// Caption an image: embed it as the visual prefix, feed the optional text
/// prompt, then sample until the end marker. Returns the decoded text.
pub fn cmd_decode(
    ckpt: &Path,
    image: &Path,
    prompt: &str,
    temperature: f64,
    top_p: f64,
    max_new: usize,
    seed: u64,
) -> Result<String, HaploError> {
    match checkpoint_dtype(ckpt)? {
        d if d == f32::DTYPE => decode_impl::<f32>(ckpt, image, prompt, temperature, top_p, max_new, seed),
        d if d == f64::DTYPE => decode_impl::<f64>(ckpt, image, prompt, temperature, top_p, max_new, seed),
        d => Err(HaploError::Format(format!("unknown scalar code {d}"))),
    }
}

fn decode_impl<T: Scalar>(
    ckpt: &Path,
    image: &Path,
    prompt: &str,
    temperature: f64,
    top_p: f64,
    max_new: usize,
    seed: u64,
) -> Result<String, HaploError> {
    if temperature < 0.0 {
        return Err(HaploError::Argument("temperature must be >= 0".into()));
    }
    if !(top_p > 0.0 && top_p <= 1.0) {
        return Err(HaploError::Argument("top-p must be in (0, 1]".into()));
    }
    let bundle: ModelBundle<T> = load_checkpoint(ckpt)?;
    let cfg = bundle.cfg.clone();
    if cfg.frames != 1 {
        return Err(HaploError::Argument(
            "decode reads a single image; the model expects a multi-frame clip".into(),
        ));
    }
    let (w, h, rgb) = read_ppm(image)?;
    if w != cfg.image_size || h != cfg.image_size {
        return Err(HaploError::Argument(format!(
            "image is {w}x{h}, model expects {0}x{0}",
            cfg.image_size
        )));
    }
    let s = cfg.image_size;
    let from_byte = |b: u8| T::from_f64(b as f64 / 255.0 * 2.0 - 1.0);
    let mut data = vec![T::zero(); cfg.channels * s * s];
    for i in 0..s * s {
        if cfg.channels == 3 {
            for ch in 0..3 {
                data[ch * s * s + i] = from_byte(rgb[i * 3 + ch]);
            }
        } else {
            // Single-channel model: average the RGB triple.
            let g = (rgb[i * 3] as f64 + rgb[i * 3 + 1] as f64 + rgb[i * 3 + 2] as f64) / 3.0;
            data[i] = T::from_f64(g / 255.0 * 2.0 - 1.0);
        }
    }
    let pixels = Tensor::from_vec(vec![1, cfg.channels, s, s], data);
    let latents = patchify(&pixels, cfg.patch_size)?;
    let plan = prompt_plan(&cfg, latents)?;

    let (mut session, mut logits) = DecodeSession::start(&bundle, &plan)?;
    for &b in &Vocabulary::encode(prompt) {
        logits = session.step(b)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tokens = Vec::new();
    for _ in 0..max_new {
        let tok = sample_token(&logits, temperature, top_p, &mut rng);
        if tok == Vocabulary::EOS {
            break;
        }
        tokens.push(tok);
        logits = session.step(tok)?;
    }
    Ok(Vocabulary::decode(&tokens))
}

/// Render the attention allow-grid for a type string over T/V/S/N.
pub fn cmd_inspect_mask(types: &str) -> Result<String, HaploError> {
    let tags = types
        .chars()
        .map(TokenType::from_char)
        .collect::<Result<Vec<_>, _>>()?;
    let seq = TokenTypeSequence::new(tags)?;
    Ok(build_mask(&seq).render())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::StageOverrides;
    use crate::model::ModelConfig;

    fn tiny_run_config(dir: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model = ModelConfig {
            d: 8,
            heads: 2,
            d_ff: 16,
            d_t: 8,
            n_pre: 1,
            n_base: 1,
            n_post: 1,
            vocab: Vocabulary::SIZE,
            image_size: 4,
            patch_size: 2,
            frames: 1,
            channels: 3,
            adaln_groups: 1,
            t_max: 50,
            beta_start: 1e-4,
            beta_end: 2e-2,
        };
        cfg.out_dir = dir.to_path_buf();
        cfg.precision = Precision::F64;
        cfg.data.n_und = 4;
        cfg.data.n_gen = 4;
        for s in StageId::ALL {
            cfg.stages.insert(
                s.name(),
                StageOverrides {
                    steps: Some(3),
                    batch_size: Some(2),
                    ..Default::default()
                },
            );
        }
        cfg
    }

    #[test]
    fn ppm_round_trips_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        let rgb: Vec<u8> = (0..2 * 3 * 3).map(|i| (i * 7) as u8).collect();
        write_ppm(&path, 3, 2, &rgb).unwrap();
        let (w, h, back) = read_ppm(&path).unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(back, rgb);
        // Corrupt magic.
        std::fs::write(&path, b"P5\n3 2\n255\nxxx").unwrap();
        assert!(matches!(read_ppm(&path), Err(HaploError::Format(_))));
    }

    #[test]
    fn pixel_byte_mapping_is_exact_at_the_extremes() {
        let rgb = frame_to_rgb(&[-1.0f64, 1.0, 0.0, -1.0], 1, 4).unwrap();
        assert_eq!(&rgb[0..3], &[0, 0, 0]);
        assert_eq!(&rgb[3..6], &[255, 255, 255]);
        assert_eq!(rgb[6], 128); // 0.0 -> 127.5 rounds half away from zero
        assert!(frame_to_rgb(&[0.0f64; 8], 2, 4).is_err());
    }

    #[test]
    fn train_writes_stage_artifacts_and_enforces_prerequisites() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_run_config(dir.path());

        // Missing prerequisites name the expected files.
        let err = cmd_train(StageId::Unified, &cfg, None).unwrap_err();
        assert!(matches!(err, HaploError::Sequencing(_)));
        assert!(err.to_string().contains("align-3.ckpt"));

        let records = cmd_train(StageId::WarmupPre, &cfg, None).unwrap();
        assert_eq!(records.len(), 3);
        assert!(checkpoint_path(dir.path(), StageId::WarmupPre).exists());
        assert!(metrics_path(dir.path(), StageId::WarmupPre).exists());
        let csv = std::fs::read_to_string(metrics_path(dir.path(), StageId::WarmupPre)).unwrap();
        assert!(csv.starts_with("# stage=warmup-pre"));
    }

    #[test]
    fn full_pipeline_then_sample_and_decode() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_run_config(dir.path());
        for stage in StageId::ALL {
            cmd_train(stage, &cfg, None).unwrap();
        }
        let ckpt = checkpoint_path(dir.path(), StageId::Unified);
        assert_eq!(checkpoint_dtype(&ckpt).unwrap(), f64::DTYPE);

        // Sampling: deterministic in the seed, writes image + sidecar.
        let out = dir.path().join("samples/img.ppm");
        let written = cmd_sample(&ckpt, "red square tl", 5, 9, &out).unwrap();
        assert_eq!(written.len(), 2);
        let first = std::fs::read(&out).unwrap();
        cmd_sample(&ckpt, "red square tl", 5, 9, &out).unwrap();
        assert_eq!(std::fs::read(&out).unwrap(), first);
        let meta = std::fs::read_to_string(dir.path().join("samples/img.ppm.meta")).unwrap();
        assert!(meta.contains("prompt=red square tl") && meta.contains("seed=9"));
        assert!(matches!(
            cmd_sample(&ckpt, "x", 0, 1, &out),
            Err(HaploError::Argument(_))
        ));

        // Decoding the sampled image: greedy runs are identical.
        let a = cmd_decode(&ckpt, &out, "", 0.0, 1.0, 8, 0).unwrap();
        let b = cmd_decode(&ckpt, &out, "", 0.0, 1.0, 8, 1).unwrap();
        assert_eq!(a, b);

        // Resolution mismatch names the expected size.
        let wrong = dir.path().join("wrong.ppm");
        write_ppm(&wrong, 8, 8, &vec![0u8; 8 * 8 * 3]).unwrap();
        let err = cmd_decode(&ckpt, &wrong, "", 0.0, 1.0, 8, 0).unwrap_err();
        assert!(matches!(err, HaploError::Argument(_)));
        assert!(err.to_string().contains("4x4"));

        // Missing image is an I/O error.
        assert!(matches!(
            cmd_decode(&ckpt, &dir.path().join("gone.ppm"), "", 0.0, 1.0, 8, 0),
            Err(HaploError::Io(_))
        ));
    }

    #[test]
    fn training_continues_from_the_previous_stage_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_run_config(dir.path());
        cmd_train(StageId::WarmupPre, &cfg, None).unwrap();
        cmd_train(StageId::WarmupPost, &cfg, None).unwrap();
        // align-1 must start from warmup-post weights: its pre-stack output
        // reflects warmup-pre training, which a fresh init would not.
        cmd_train(StageId::Align1, &cfg, None).unwrap();
        let a1: ModelBundle<f64> =
            load_checkpoint(&checkpoint_path(dir.path(), StageId::Align1)).unwrap();
        let wp: ModelBundle<f64> =
            load_checkpoint(&checkpoint_path(dir.path(), StageId::WarmupPre)).unwrap();
        // warmup-pre trained pre.*; align-1 froze it, so the weights carry
        // through unchanged.
        let name = "pre.block.0.w_q";
        let find = |b: &ModelBundle<f64>| {
            b.parameters()
                .into_iter()
                .find(|p| p.name == name)
                .unwrap()
                .tensor
                .data()
        };
        assert_eq!(find(&a1), find(&wp));
    }

    #[test]
    fn inspect_mask_matches_layouts() {
        assert_eq!(cmd_inspect_mask("TTT").unwrap(), "#··\n##·\n###\n");
        assert_eq!(cmd_inspect_mask("VVV").unwrap(), "###\n###\n###\n");
        assert!(matches!(
            cmd_inspect_mask("TXV"),
            Err(HaploError::Argument(_))
        ));
    }
}
