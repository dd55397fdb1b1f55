use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::Ordering;

use clap::{Args, Parser, Subcommand};
use omnitok::checkpoint::{write_atomic, Checkpoint};
use omnitok::harness::{self, ExperimentReport, Stage};
use omnitok::head::{evaluate, Pooling};
use omnitok::tokenizer::audio::AudioInput;
use omnitok::tokenizer::point::PointCloud;
use omnitok::tokenizer::text::{Vocabulary, DEFAULT_MARKER};
use omnitok::tokenizer::{
    ImageInput, ImageSettings, MetaTokenizer, Modality, ModalityInput, PointSettings, VideoInput,
    VideoSettings,
};
use omnitok::{selftest, Error, Result, RunConfig, Tensor};

const CODE_USAGE: u8 = 1;
const CODE_DATA: u8 = 2;
const CODE_INVARIANT: u8 = 3;

#[derive(Args)]
struct Common {
    /// TOML run configuration; the built-in desk experiment when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the config's out_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true, value_parser = ["32", "64"])]
    precision: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train backbone, image tokenizer, and image head; write a checkpoint.
    Pretrain,
    /// Freeze a pretrained backbone and train the other modalities.
    Transfer,
    /// Dump the token sequence for one input file as CSV.
    Tokenize {
        #[arg(long)]
        modality: String,
        input: PathBuf,
        /// Vocabulary file for text; built from the input when omitted.
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Score a pretrained image model on freshly generated held-out images.
    Eval,
    /// Run the built-in gradient, sampling, shape, freeze, and checkpoint suites.
    Selftest {
        #[arg(long, hide = true)]
        corrupt_backward: bool,
    },
}

#[derive(Parser)]
#[command(
    name = "omnitok",
    version,
    about = "Shared frozen encoder over tokenized modalities"
)]
struct Root {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Argument(_) => CODE_USAGE,
        Error::Training(_) => CODE_INVARIANT,
        _ => CODE_DATA,
    }
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::desk(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    if let Some(p) = &c.precision {
        cfg.precision = p.parse().expect("validated by clap");
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| {
        Error::Config(format!(
            "cannot create output directory {}: {e}",
            dir.display()
        ))
    })?;
    let probe = dir.join(".omnitok-write-probe");
    fs::write(&probe, b"")
        .and_then(|_| fs::remove_file(&probe))
        .map_err(|e| {
            Error::Config(format!(
                "output directory {} is not writable: {e}",
                dir.display()
            ))
        })
}

fn default_checkpoint(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("pretrain.mtfc")
}

fn require_checkpoint(c: &Common, cfg: &RunConfig) -> Result<Checkpoint> {
    let path = c
        .checkpoint
        .clone()
        .unwrap_or_else(|| default_checkpoint(cfg));
    let ck = Checkpoint::load(&path)?;
    let (have, want) = (&ck.encoder, &cfg.encoder);
    for (field, a, b) in [
        ("encoder.depth", have.depth, want.depth),
        ("encoder.heads", have.heads, want.heads),
        ("encoder.dim", have.dim, want.dim),
        ("encoder.mlp_dim", have.mlp_dim, want.mlp_dim),
        ("encoder.n_max", have.n_max, want.n_max),
    ] {
        if a != b {
            return Err(Error::Load {
                field: field.into(),
                detail: format!("checkpoint has {a}, config has {b}"),
            });
        }
    }
    Ok(ck)
}

/// Image tokenizer (and any other stored slots) restored from a checkpoint.
fn restored_tokenizer(cfg: &RunConfig, ck: &Checkpoint) -> Result<MetaTokenizer> {
    let mut tok = harness::new_tokenizer(cfg)?;
    if cfg.image.is_some() && ck.tensors.id("tokenizer.image.cls").is_some() {
        harness::register_modality(&mut tok, cfg, Modality::Image)?;
        ck.restore(tok.params_mut(Modality::Image).expect("just registered"))?;
    }
    Ok(tok)
}

fn cmd_pretrain(c: &Common) -> Result<u8> {
    let cfg = load_config(c)?;
    prepare_out(&cfg.out_dir)?;
    let pre = harness::pretrain(&cfg)?;
    let ck = Checkpoint::capture(
        cfg.precision()?,
        &pre.encoder,
        pre.tokenizer
            .all_param_sets()
            .map(|(_, p)| p)
            .chain(std::iter::once(&pre.head.params)),
        Some(&pre.optimizer),
        cfg.seed,
    )?;
    let ck_path = c
        .checkpoint
        .clone()
        .unwrap_or_else(|| default_checkpoint(&cfg));
    ck.save(&ck_path)?;
    let metrics = cfg.out_dir.join(pre.report.metrics_file_name());
    write_atomic(&metrics, pre.report.metrics_csv().as_bytes())?;
    let r = &pre.report;
    println!(
        "pretrain image: train accuracy {:.3} (floor {:.2}) test accuracy {:.3} {}",
        r.train_accuracy,
        r.floor,
        r.test_accuracy,
        if r.passed() { "PASS" } else { "FAIL" }
    );
    println!("backbone digest {}", pre.encoder.digest());
    println!("checkpoint {}", ck_path.display());
    println!("metrics {}", metrics.display());
    Ok(0)
}

fn cmd_transfer(c: &Common) -> Result<u8> {
    let cfg = load_config(c)?;
    prepare_out(&cfg.out_dir)?;
    let ck = require_checkpoint(c, &cfg)?;
    let encoder = ck.build_encoder()?;
    let tokenizer = restored_tokenizer(&cfg, &ck)?;
    let start = std::time::Instant::now();
    let stages = harness::transfer(&cfg, &tokenizer, &encoder)?;
    let report = ExperimentReport {
        name: cfg.name.clone(),
        seed: cfg.seed,
        precision: cfg.precision()?,
        stages,
        frozen_digest: encoder.digest(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    report.write(&cfg.out_dir)?;
    print!("{}", report.summary());
    if !report.freeze_held() {
        eprintln!("invariant violated: frozen backbone digest changed during transfer");
        return Ok(CODE_INVARIANT);
    }
    Ok(0)
}

/// Whitespace-separated numbers; the first line holds the extents.
fn read_tensor_text(path: &Path) -> Result<Tensor> {
    let text = fs::read_to_string(path)?;
    let mut lines = text
        .lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
    let shape = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: empty tensor file", path.display())))?
        .split_whitespace()
        .map(|s| {
            s.parse::<usize>()
                .map_err(|e| Error::Data(format!("bad extent `{s}`: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let data = lines
        .flat_map(str::split_whitespace)
        .map(|s| {
            s.parse::<f64>()
                .map_err(|e| Error::Data(format!("bad value `{s}`: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::new(shape, data)
}

fn cmd_tokenize(c: &Common, modality: &str, input: &Path, vocab: Option<&Path>) -> Result<u8> {
    let modality: Modality = modality.parse()?;
    let mut cfg = load_config(c)?;
    let n_max = cfg.encoder.n_max;
    let image = cfg.image.get_or_insert_with(Default::default).clone();
    let mut tok = harness::new_tokenizer(&cfg)?;
    let x = match modality {
        Modality::Text => {
            let text = fs::read_to_string(input)?;
            let v = match vocab {
                Some(p) => Vocabulary::load(p, DEFAULT_MARKER)?,
                None => Vocabulary::build(&[text.as_str()], usize::MAX, DEFAULT_MARKER)?,
            };
            tok.register_text(v, n_max)?;
            ModalityInput::Text(text)
        }
        Modality::Image | Modality::Infrared | Modality::Xray => {
            let img = ImageInput::new(read_tensor_text(input)?)?;
            let settings = ImageSettings {
                channels: img.dims().0,
                patch: image.patch,
            };
            tok.register_image(settings, n_max)?;
            match modality {
                Modality::Infrared => ModalityInput::Infrared(img),
                Modality::Xray => ModalityInput::Xray(img),
                _ => ModalityInput::Image(img),
            }
        }
        Modality::Video => {
            let v = VideoInput::new(read_tensor_text(input)?)?;
            let settings = VideoSettings {
                channels: v.dims().1,
                t_patch: 2,
                patch: image.patch,
            };
            tok.register_video(settings, n_max)?;
            ModalityInput::Video(v)
        }
        Modality::Hyperspectral => {
            let cube = read_tensor_text(input)?;
            let bands = *cube.shape().last().expect("tensor has rank >= 1");
            tok.register_hyperspectral(bands, n_max)?;
            ModalityInput::Hyperspectral(cube)
        }
        Modality::PointCloud => {
            let cloud = PointCloud::load_xyz(input)?;
            let k = cfg.point_cloud.as_ref().map_or(8, |p| p.k);
            tok.register_point_cloud(
                PointSettings {
                    feature_dim: cloud.feature_dim(),
                    k,
                },
                n_max,
            )?;
            ModalityInput::PointCloud(cloud)
        }
        Modality::Audio => {
            let audio = AudioInput::load_wav(input)?;
            let mut a = cfg.audio.clone().unwrap_or_default();
            a.sample_rate = audio.sample_rate;
            tok.register_audio(harness::audio_settings(&a), n_max)?;
            ModalityInput::Audio(audio)
        }
        Modality::Fused => {
            return Err(Error::Argument(
                "fused inputs cannot be read from one file".into(),
            ))
        }
    };
    if let Some(p) = &c.checkpoint {
        let ck = Checkpoint::load(p)?;
        ck.restore(tok.params_mut(modality).expect("registered above"))?;
    }
    let seq = tok.tokenize(&x)?;
    let mut csv = String::from("token");
    for j in 0..seq.dim() {
        csv.push_str(&format!(",e{j}"));
    }
    csv.push('\n');
    for i in 0..seq.len() {
        csv.push_str(&i.to_string());
        for v in seq.embeddings().row(i) {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
    }
    eprintln!("{}: {} tokens x {}", seq.modality(), seq.len(), seq.dim());
    match &c.out {
        Some(p) => write_atomic(p, csv.as_bytes())?,
        None => print!("{csv}"),
    }
    Ok(0)
}

fn cmd_eval(c: &Common) -> Result<u8> {
    let cfg = load_config(c)?;
    let image = cfg
        .image
        .as_ref()
        .ok_or_else(|| Error::Config("eval needs an [image] section".into()))?;
    prepare_out(&cfg.out_dir)?;
    let ck = require_checkpoint(c, &cfg)?;
    let encoder = ck.build_encoder()?;
    let mut tok = harness::new_tokenizer(&cfg)?;
    let task = harness::build_task(&cfg, Modality::Image, &mut tok)?;
    ck.restore(
        tok.params_mut(Modality::Image)
            .expect("registered by build_task"),
    )?;
    let mut head = harness::new_head(&cfg, Stage::Pretrain, Modality::Image, image.classes)?;
    ck.restore(&mut head.params)?;
    let train = evaluate(&task.train, &tok, &encoder, &head, Pooling::Cls)?;
    let test = evaluate(&task.test, &tok, &encoder, &head, Pooling::Cls)?;
    let csv = format!(
        "split,samples,accuracy,mean_loss\ntrain,{},{},{}\ntest,{},{},{}\n",
        task.train.len(),
        train.accuracy,
        train.mean_loss,
        task.test.len(),
        test.accuracy,
        test.mean_loss
    );
    let path = cfg.out_dir.join("eval.csv");
    write_atomic(&path, csv.as_bytes())?;
    print!("{csv}");
    Ok(0)
}

fn cmd_selftest(corrupt: bool) -> Result<u8> {
    omnitok::ops::CORRUPT_GELU_BACKWARD.store(corrupt, Ordering::SeqCst);
    let suites = selftest::run_all();
    let mut failed = false;
    for s in &suites {
        let bad = s.failures.len();
        println!(
            "{:<12} {}/{} passed ({:.2} s)",
            s.name,
            s.checks - bad,
            s.checks,
            s.seconds
        );
        for f in s.failures.iter().take(5) {
            println!("  FAIL {}: {f}", s.name);
        }
        failed |= bad > 0;
    }
    if failed {
        let names: Vec<&str> = suites
            .iter()
            .filter(|s| !s.passed())
            .map(|s| s.name)
            .collect();
        eprintln!("selftest failed: {}", names.join(", "));
        return Ok(CODE_INVARIANT);
    }
    println!("all suites passed");
    Ok(0)
}

fn main() -> ExitCode {
    let root = match Root::try_parse() {
        Ok(r) => r,
        Err(e) => {
            let code = if e.use_stderr() { CODE_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let c = &root.common;
    let result = match &root.command {
        Command::Pretrain => cmd_pretrain(c),
        Command::Transfer => cmd_transfer(c),
        Command::Tokenize {
            modality,
            input,
            vocab,
        } => cmd_tokenize(c, modality, input, vocab.as_deref()),
        Command::Eval => cmd_eval(c),
        Command::Selftest { corrupt_backward } => cmd_selftest(*corrupt_backward),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
