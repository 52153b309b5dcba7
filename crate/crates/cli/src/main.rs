use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use layerdiff_core::backbone::Backbone;
use layerdiff_core::config::RunConfig;
use layerdiff_core::diffusion::{sample, Sidecar};
use layerdiff_core::layerpack::{
    read_quadruple_file, write_quadruple_file, ConditionMask, LayerQuadruple, Segment, Video,
};
use layerdiff_core::lora::Stage;
use layerdiff_core::metrics::evaluate;
use layerdiff_core::synthdata::{load_tier, write_dataset, VOCABULARY_FILE};
use layerdiff_core::textcond::Vocabulary;
use layerdiff_core::trainer::{
    load_checkpoint, prepare_samples, save_checkpoint, write_log, TrainSession,
};

#[derive(Parser)]
#[command(name = "layerdiff", version, about = "Layered video diffusion at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply to anything it leaves out.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the three synthetic dataset tiers, vocabulary and manifest.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Run one training stage.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        stage: u8,
        /// Dataset directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint of the previous stage, or an unfinished one to resume.
        #[arg(long)]
        in_ckpt: Option<PathBuf>,
        /// Overrides the stage's step budget.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Draw one layered sample.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value_t = Variant::Generate)]
        variant: Variant,
        /// Foreground, background and blended prompts, in that order.
        #[arg(long = "prompt")]
        prompts: Vec<String>,
        /// Quadruple file holding the conditioning layers.
        #[arg(long)]
        cond: Option<PathBuf>,
        /// Also dump every frame as PPM/PGM.
        #[arg(long)]
        ppm: bool,
    },
    /// Score a directory of quadruples.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pred: PathBuf,
        /// Ground-truth quadruples with matching file names.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
enum Variant {
    Generate,
    Decompose,
    FgCond,
    BgCond,
}

impl Variant {
    fn mask(self) -> ConditionMask {
        match self {
            Variant::Generate => ConditionMask::generation(),
            Variant::Decompose => ConditionMask::decomposition(),
            Variant::FgCond => ConditionMask::foreground_conditioned(),
            Variant::BgCond => ConditionMask::background_conditioned(),
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LAYERDIFF_LOG", "info"))
        .init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common } => gen_data(&common),
        Command::Train {
            common,
            stage,
            data,
            in_ckpt,
            steps,
            threads,
        } => train(&common, Stage::try_from(stage)?, &data, in_ckpt.as_deref(), steps, threads),
        Command::Sample {
            common,
            ckpt,
            variant,
            prompts,
            cond,
            ppm,
        } => sample_cmd(&common, &ckpt, variant, prompts, cond.as_deref(), ppm),
        Command::Eval { common, pred, truth } => eval(&common, &pred, truth.as_deref()),
    }
}

fn gen_data(common: &Common) -> Result<()> {
    let mut cfg = common.load()?;
    if let Some(s) = common.seed {
        cfg.seed = s;
        cfg.data.seed = s;
    }
    cfg.echo(&common.out)?;
    let rows = write_dataset(&common.out, &cfg.data)
        .with_context(|| format!("writing dataset to {}", common.out.display()))?;
    info!("wrote {} quadruples to {}", rows.len(), common.out.display());
    Ok(())
}

fn train(
    common: &Common,
    stage: Stage,
    data: &Path,
    in_ckpt: Option<&Path>,
    steps: Option<usize>,
    threads: usize,
) -> Result<()> {
    let mut cfg = common.load()?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(n) = steps {
        cfg.stages.get_mut(stage).steps = n;
    }
    let stage_cfg = cfg.stages.get(stage).clone();
    stage_cfg.validate()?;
    let prior = in_ckpt.map(load_checkpoint).transpose()?;
    let base = match (stage, &prior) {
        (Stage::Base, None) => {
            let vocab = Vocabulary::load(&data.join(VOCABULARY_FILE))
                .with_context(|| format!("reading vocabulary from {}", data.display()))?;
            Some(Backbone::new(cfg.backbone.clone(), vocab, cfg.seed)?)
        }
        _ => None,
    };
    let mut session = TrainSession::begin(stage, cfg.seed, base, prior)?;
    let raw = load_tier(data, stage_cfg.tier())?;
    let samples = prepare_samples(&raw, &session.model)?;
    let schedule = cfg.noise_schedule()?;
    if schedule.steps() != session.model.config().timesteps {
        bail!(
            "config has {} timesteps but the checkpoint model was trained with {}",
            schedule.steps(),
            session.model.config().timesteps
        );
    }
    cfg.echo(&common.out)?;
    info!(
        "stage {} on {} {} samples, steps {}..{}",
        stage.number(),
        samples.len(),
        stage_cfg.tier().name(),
        session.step,
        stage_cfg.steps
    );
    let log = session.run(&stage_cfg, &samples, &schedule, threads, None)?;
    let n = stage.number();
    write_log(&log, &common.out.join(format!("stage{n}_log.csv")))?;
    let ck = session.checkpoint(stage_cfg.steps);
    let path = common.out.join(format!("stage{n}.ckpt"));
    save_checkpoint(&ck, &path)?;
    info!("wrote {}", path.display());
    Ok(())
}

fn sample_cmd(
    common: &Common,
    ckpt: &Path,
    variant: Variant,
    prompts: Vec<String>,
    cond: Option<&Path>,
    ppm: bool,
) -> Result<()> {
    let mut cfg = common.load()?;
    if let Some(s) = common.seed {
        cfg.sampler.seed = s;
    }
    let mask = variant.mask();
    let cond = cond.map(read_quadruple_file).transpose()?;
    if Segment::ALL.iter().any(|&s| mask.is_fixed(s)) && cond.is_none() {
        bail!("variant {variant:?} needs a conditioning quadruple (--cond)");
    }
    let prompts: [String; 3] = match (prompts.len(), &cond) {
        (0, Some(c)) => c.prompts.clone(),
        (3, _) => prompts.try_into().expect("three prompts"),
        (n, _) => bail!("expected 3 prompts (fg, bg, blended), got {n}"),
    };
    let model = load_checkpoint(ckpt)?.model;
    let dims = match &cond {
        Some(c) => c.dims(),
        None => (cfg.data.frames, cfg.data.height, cfg.data.width),
    };
    let schedule = cfg.noise_schedule()?;
    let videos = sample(
        &model,
        &prompts,
        mask,
        cond.as_ref().map(|c| &c.videos),
        dims,
        &schedule,
        &cfg.sampler,
    )?;
    let q = LayerQuadruple::new(videos, prompts.clone())?;
    cfg.echo(&common.out)?;
    write_quadruple_file(&q, &common.out.join("sample.lfq"))?;
    Sidecar {
        seed: cfg.sampler.seed,
        steps: cfg.sampler.steps,
        scale: cfg.sampler.guidance_scale,
        mask,
        prompts,
    }
    .write(&common.out.join("sample.txt"))?;
    if ppm {
        dump_frames(&q, &common.out.join("frames"))?;
    }
    info!("wrote {}", common.out.join("sample.lfq").display());
    Ok(())
}

fn dump_frames(q: &LayerQuadruple, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for s in Segment::ALL {
        let v: &Video = q.videos.get(s);
        let (ext, magic) = if v.channels() == 1 { ("pgm", "P5") } else { ("ppm", "P6") };
        for f in 0..v.frames() {
            let mut out = fs::File::create(dir.join(format!("{}_{f:03}.{ext}", s.name())))?;
            write!(out, "{magic}\n{} {}\n255\n", v.width(), v.height())?;
            let bytes: Vec<u8> = v
                .frame(f)
                .iter()
                .map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect();
            out.write_all(&bytes)?;
        }
    }
    Ok(())
}

fn list_quadruples(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "lfq"))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("{} holds no .lfq files", dir.display());
    }
    Ok(files)
}

fn eval(common: &Common, pred: &Path, truth: Option<&Path>) -> Result<()> {
    let cfg = common.load()?;
    let files = list_quadruples(pred)?;
    let preds = files
        .iter()
        .map(|p| {
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            Ok((name, read_quadruple_file(p)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let truths = match truth {
        Some(dir) => {
            list_quadruples(dir)?;
            let t = preds
                .iter()
                .map(|(name, _)| {
                    read_quadruple_file(&dir.join(name))
                        .with_context(|| format!("ground truth for {name}"))
                })
                .collect::<Result<Vec<_>>>()?;
            Some(t)
        }
        None => None,
    };
    let report = evaluate(&preds, truths.as_deref())?;
    cfg.echo(&common.out)?;
    report.write(&common.out)?;
    info!("scored {} samples into {}", preds.len(), common.out.display());
    Ok(())
}
