//! The `facemark` command line. [`run`] returns the process exit code:
//! 0 on success, 1 for usage errors (including unknown targets), 2 for
//! runtime failures.

pub mod config;

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use facemark_core::data::{self, Split, ToyConfig};
use facemark_core::edit::{apply_edits, load_landmarks, save_landmarks, Edit};
use facemark_core::evaluation::{self, Embedder, ToyEmbedder};
use facemark_core::geometry::LandmarkTopology;
use facemark_core::image::ImageTensor;
use facemark_core::registry::{ModelRegistry, TargetId};
use facemark_core::training::{checkpoint, Trainer};
use facemark_core::{Error, Result};

/// Default checkpoint directory when `--checkpoint`/`--out` are omitted.
pub const CHECKPOINT_DIR_ENV: &str = "FACEMARK_CHECKPOINT_DIR";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train_log.jsonl";

#[derive(Debug, Parser)]
#[command(
    name = "facemark",
    version,
    about = "Landmark-driven face synthesis and reenactment"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the procedural toy-face dataset into a directory.
    GenToy(GenToyArgs),
    /// Train one phase (detector, converter or joint) and save a checkpoint.
    Train(TrainArgs),
    /// Synthesize a target face from a landmark file.
    Synth(SynthArgs),
    /// Re-enact a source image as a target identity.
    Reenact(ReenactArgs),
    /// Edit a landmark file: shift, move or scale landmark groups.
    Edit(EditArgs),
    /// Cyclic LMK / SSIM / ID evaluation on a dataset.
    Eval(EvalArgs),
    /// Serve the synthesis HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenToyArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "toy12")]
    pub topology: String,
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
    #[arg(long, default_value_t = 300)]
    pub per_identity: usize,
    /// Held-out expressions, each rendered for every identity.
    #[arg(long, default_value_t = 20)]
    pub val_expressions: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML file with `model` and `[train]` entries.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.lr_initial=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Dataset directory written by `gen-toy` (or laid out the same way).
    #[arg(long)]
    pub data: PathBuf,
    /// Start from this checkpoint instead of fresh weights.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Continue the checkpoint's step counter and sampling stream.
    #[arg(long, requires = "checkpoint")]
    pub resume: bool,
    /// Output directory [default: $FACEMARK_CHECKPOINT_DIR].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// [default: $FACEMARK_CHECKPOINT_DIR/model.ckpt]
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub target: String,
    #[arg(long)]
    pub landmarks: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Feed the landmarks to the generator without conversion.
    #[arg(long)]
    pub bypass_converter: bool,
    /// Also write the landmarks the generator was driven with.
    #[arg(long)]
    pub converted_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReenactArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Source face image (PNG).
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub target: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub bypass_converter: bool,
    /// Also write the detected source landmarks.
    #[arg(long)]
    pub landmarks_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[arg(long)]
    pub landmarks: PathBuf,
    /// Translate a group: `group:dx,dy`.
    #[arg(long, value_name = "GROUP:DX,DY")]
    pub shift: Vec<String>,
    /// Move one point: `index:x,y`.
    #[arg(long = "move", value_name = "INDEX:X,Y")]
    pub moves: Vec<String>,
    /// Scale a group about its centroid: `group:factor`.
    #[arg(long, value_name = "GROUP:FACTOR")]
    pub scale: Vec<String>,
    /// Topology name or topology JSON file [default: inferred from the point count].
    #[arg(long)]
    pub topology: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub source: String,
    #[arg(long)]
    pub target: String,
    /// Use at most this many source images.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Reference face of the target [default: its most neutral training image].
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub bypass_converter: bool,
    /// Write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    /// Allowed CORS origin [default: any].
    #[arg(long)]
    pub cors_origin: Option<String>,
}

/// Usage problems exit with 1, everything else with 2.
fn exit_code(e: &Error) -> i32 {
    match e {
        Error::UnknownTarget { .. } | Error::Config(_) => 1,
        _ => 2,
    }
}

pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match Cli::command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 1;
        }
    };
    match dispatch(cli.command, &matches) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command, matches: &ArgMatches) -> Result<()> {
    match cmd {
        Command::GenToy(a) => gen_toy(a),
        Command::Train(a) => train(a),
        Command::Synth(a) => synth(a),
        Command::Reenact(a) => reenact(a),
        Command::Edit(a) => {
            let sub = matches.subcommand_matches("edit").expect("edit matches");
            edit(a, sub)
        }
        Command::Eval(a) => eval(a),
        Command::Serve(a) => serve(a),
    }
}

fn checkpoint_dir() -> Option<PathBuf> {
    std::env::var_os(CHECKPOINT_DIR_ENV).map(PathBuf::from)
}

fn checkpoint_path(given: Option<PathBuf>) -> Result<PathBuf> {
    given
        .or_else(|| checkpoint_dir().map(|d| d.join(CHECKPOINT_FILE)))
        .ok_or_else(|| {
            Error::Config(format!(
                "no checkpoint: pass --checkpoint or set {CHECKPOINT_DIR_ENV}"
            ))
        })
}

fn load_models(given: Option<PathBuf>) -> Result<ModelRegistry> {
    Ok(checkpoint::load(&checkpoint_path(given)?)?.0)
}

fn target_id(models: &ModelRegistry, id: &str) -> Result<TargetId> {
    let unknown = || Error::UnknownTarget {
        id: id.to_string(),
        available: models.target_ids().iter().map(|t| t.to_string()).collect(),
    };
    let id = TargetId::new(id).map_err(|_| unknown())?;
    models.target(&id).map_err(|_| unknown())?;
    Ok(id)
}

fn gen_toy(a: GenToyArgs) -> Result<()> {
    let topology = LandmarkTopology::by_name(&a.topology)?;
    let identities = data::default_identities(&topology)?;
    let cfg = ToyConfig {
        resolution: a.resolution,
        train_per_identity: a.per_identity,
        val_expressions: a.val_expressions,
        seed: a.seed,
    };
    let dataset = data::generate_toy(&identities, &cfg)?;
    data::write_dataset(&a.out, &dataset, &identities)?;
    println!(
        "wrote {} samples for {} identities to {}",
        dataset.samples.len(),
        identities.len(),
        a.out.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = config::load(a.config.as_deref(), &a.overrides)?;
    let out = a.out.or_else(checkpoint_dir).ok_or_else(|| {
        Error::Config(format!(
            "no output directory: pass --out or set {CHECKPOINT_DIR_ENV}"
        ))
    })?;
    let (dataset, identities) = data::load_dataset(&a.data)?;
    let infos = data::target_infos(&identities, &dataset)?;
    let (mut models, mut trainer) = match &a.checkpoint {
        Some(p) => {
            let (mut models, state) = checkpoint::load(p)?;
            for info in infos {
                models.set_canonical(&info.id, info.canonical)?;
            }
            let trainer = if a.resume {
                Trainer::resume(cfg.train.clone(), &state)?
            } else {
                Trainer::new(cfg.train.clone())?
            };
            (models, trainer)
        }
        None => {
            let model = cfg.model.resolve()?;
            if model.topology != dataset.topology.name {
                return Err(Error::Config(format!(
                    "model topology {} does not match dataset topology {}",
                    model.topology, dataset.topology.name
                )));
            }
            let seed = cfg.train.seed;
            (
                ModelRegistry::new(model, infos, seed)?,
                Trainer::new(cfg.train.clone())?,
            )
        }
    };
    fs::create_dir_all(&out)?;
    let mut log = BufWriter::new(fs::File::create(out.join(LOG_FILE))?);
    let mut write_err = None;
    let result = trainer.run(&mut models, &dataset, &mut |r| {
        log::info!(
            "step {} overall {:.4} (l2i {:.4} i2l {:.4} l2l {:.4} xl2l {:.4} gan {:.4}/{:.4})",
            r.step,
            r.overall,
            r.l2i,
            r.i2l,
            r.l2l,
            r.x_l2l,
            r.gan_g,
            r.gan_d
        );
        let line = serde_json::to_string(r).expect("log record serializes");
        if let Err(e) = writeln!(log, "{line}") {
            write_err.get_or_insert(e);
        }
    });
    log.flush()?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    let history = result?;
    let path = out.join(CHECKPOINT_FILE);
    checkpoint::save(&path, &models, &trainer.state())?;
    fs::write(
        out.join(data::TOPOLOGY_FILE),
        serde_json::to_string_pretty(models.topology())?,
    )?;
    if let Some(last) = history.last() {
        println!(
            "{} steps, final overall loss {:.4}; checkpoint {}",
            trainer.step(),
            last.overall,
            path.display()
        );
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let models = load_models(a.checkpoint)?;
    let target = target_id(&models, &a.target)?;
    let lms = load_landmarks(&a.landmarks)?;
    let expected = models.topology().point_count;
    if lms.len() != expected {
        return Err(Error::Config(format!(
            "{} has {} points, the model expects {expected}",
            a.landmarks.display(),
            lms.len()
        )));
    }
    let (img, fed) = models.synthesize_from(&target, &lms.to_vector(), a.bypass_converter)?;
    img.save_png(&a.out)?;
    if let Some(p) = a.converted_out {
        let (set, clamped) = fed.to_set_clamped();
        if clamped > 0 {
            log::warn!("{clamped} converted point(s) clamped into [0,1]");
        }
        save_landmarks(&p, &set)?;
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn reenact(a: ReenactArgs) -> Result<()> {
    let models = load_models(a.checkpoint)?;
    let target = target_id(&models, &a.target)?;
    let src = ImageTensor::load(&a.image)?;
    let r = evaluation::reenact_with(&models, &src, &target, a.bypass_converter)?;
    r.image.save_png(&a.out)?;
    if let Some(p) = a.landmarks_out {
        save_landmarks(&p, &r.detected)?;
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn topology_for(spec: Option<&str>, points: usize) -> Result<LandmarkTopology> {
    match spec {
        Some(s) if Path::new(s).is_file() => {
            let t: LandmarkTopology = serde_json::from_str(&fs::read_to_string(s)?)?;
            t.validate()?;
            Ok(t)
        }
        Some(s) => LandmarkTopology::by_name(s),
        None => [LandmarkTopology::toy12(), LandmarkTopology::wflw98()]
            .into_iter()
            .find(|t| t.point_count == points)
            .ok_or_else(|| {
                Error::Config(format!(
                    "no built-in topology has {points} points; pass --topology"
                ))
            }),
    }
}

/// Edits in command-line order across the three flags.
fn ordered_edits(a: &EditArgs, m: &ArgMatches) -> Result<Vec<Edit>> {
    let mut edits: Vec<(usize, Edit)> = Vec::new();
    let mut collect =
        |id: &str, values: &[String], parse: fn(&str) -> Result<Edit>| -> Result<()> {
            let idx: Vec<usize> = m.indices_of(id).map(|i| i.collect()).unwrap_or_default();
            for (i, v) in idx.into_iter().zip(values) {
                edits.push((i, parse(v)?));
            }
            Ok(())
        };
    collect("shift", &a.shift, Edit::parse_shift)?;
    collect("moves", &a.moves, Edit::parse_move)?;
    collect("scale", &a.scale, Edit::parse_scale)?;
    edits.sort_by_key(|(i, _)| *i);
    Ok(edits.into_iter().map(|(_, e)| e).collect())
}

fn edit(a: EditArgs, m: &ArgMatches) -> Result<()> {
    let edits = ordered_edits(&a, m)?;
    let lms = load_landmarks(&a.landmarks)?;
    let topology = topology_for(a.topology.as_deref(), lms.len())?;
    let out = apply_edits(&lms, &topology, &edits)?;
    for w in &out.warnings {
        eprintln!("warning: {w}");
    }
    save_landmarks(&a.out, &out.landmarks)?;
    println!("applied {} edit(s); wrote {}", edits.len(), a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let models = load_models(a.checkpoint)?;
    let source = target_id(&models, &a.source)?;
    let target = target_id(&models, &a.target)?;
    let (dataset, _) = data::load_dataset(&a.data)?;
    let pick = |split: Split, id: &TargetId| -> Vec<usize> {
        dataset.index(split).get(id).cloned().unwrap_or_default()
    };
    let mut src_idx = pick(Split::Val, &source);
    if src_idx.is_empty() {
        src_idx = pick(Split::Train, &source);
    }
    if let Some(n) = a.limit {
        src_idx.truncate(n);
    }
    if src_idx.is_empty() {
        return Err(Error::Config(format!("dataset has no images of {source}")));
    }
    let srcs: Vec<ImageTensor> = src_idx
        .iter()
        .map(|&i| dataset.samples[i].image.clone())
        .collect();
    let reference = match &a.reference {
        Some(p) => ImageTensor::load(p)?,
        None => {
            let canonical = &models.target(&target)?.canonical;
            let best = dataset
                .reference_index(&target, canonical)
                .ok_or_else(|| Error::Config(format!("dataset has no images of {target}")))?;
            dataset.samples[best].image.clone()
        }
    };
    let embedder: &dyn Embedder = &ToyEmbedder::default();
    let bypassed = evaluation::Bypassed(&models);
    let pipeline: &dyn evaluation::Reenactor = if a.bypass_converter {
        &bypassed
    } else {
        &models
    };
    let report = evaluation::evaluate(pipeline, embedder, &srcs, &source, &target, &reference)?;
    println!("{report}");
    if let Some(p) = a.out {
        fs::write(&p, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let models = load_models(a.checkpoint)?;
    let cors = facemark_service::cors(a.cors_origin.as_deref()).map_err(Error::Config)?;
    let app = facemark_service::router(facemark_service::AppState::loaded(models), cors);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(facemark_service::serve(a.addr, app))?;
    Ok(())
}
