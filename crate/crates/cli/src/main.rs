use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use splat_interior::cutplane::CutMode;
use splat_interior::fixtures::{synthetic_sphere, SphereFixture};
use splat_interior::meta::load_model;
use splat_interior::par;
use splat_interior::pipeline::{
    eval_stage, files, fill_stage, parse_plane, run_pipeline, slice_stage, smooth_stage,
    train_stage, EvalReport, PipelineConfig, PipelineError, SliceOptions,
};
use splat_interior::ply::write_ply;
use splat_interior::render::{
    bounding_radius, make_cut_mask, render_with, Camera, RenderSettings, ViewConfig, VisibilityMask,
};
use splat_interior::splat::Vec3;
use splat_interior::texture::TextureKind;
use splat_interior::train::TrainError;

/// Interior texture synthesis for Gaussian splat models.
///
/// Stages read and write PLY files with a `.meta.json` sidecar holding
/// trained flags. Seeds live in the config file; nothing is seeded from the
/// clock. Errors are printed to stderr as one JSON object.
#[derive(Parser)]
#[command(name = "splat-interior", version)]
struct Cli {
    /// Pipeline config (TOML, or JSON when the extension is .json).
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Log progress to stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Io {
    /// Input model; defaults to the config's input or the previous stage's output.
    #[arg(long, short)]
    input: Option<PathBuf>,
    /// Output file; defaults to the stage's file in the config's output directory.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct View {
    #[arg(long, default_value_t = 512)]
    width: usize,
    #[arg(long, default_value_t = 512)]
    height: usize,
    /// Background color as r,g,b in [0, 1].
    #[arg(long, default_value = "0,0,0")]
    background: String,
}

#[derive(Subcommand)]
enum Command {
    /// Fill enclosed low-opacity space with opaque atoms.
    Fill {
        #[command(flatten)]
        io: Io,
    },
    /// Train interior colors against provider references.
    Train {
        #[command(flatten)]
        io: Io,
        /// procedural:<kind>, files:<dir> or external:<command line>.
        #[arg(long)]
        provider: Option<String>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Recolor untrained particles from trained neighbors.
    Smooth {
        #[command(flatten)]
        io: Io,
    },
    /// Render one cut plane of a model. Never calls a provider.
    Slice {
        #[arg(long, short)]
        input: PathBuf,
        #[arg(long, short)]
        output: PathBuf,
        /// Plane a,b,c,d with a x + b y + c z + d = 0.
        #[arg(long, allow_hyphen_values = true)]
        plane: String,
        #[arg(long, default_value = "slab")]
        mode: CutMode,
        /// Slab half-width; two atom scale caps when omitted.
        #[arg(long)]
        slab_width: Option<f64>,
        /// Also write a 16-bit depth PNG scaled by the far plane.
        #[arg(long)]
        depth: Option<PathBuf>,
        #[command(flatten)]
        view: View,
    },
    /// Render the whole model from an orbit camera, optionally cut in half.
    Render {
        #[arg(long, short)]
        input: PathBuf,
        #[arg(long, short)]
        output: PathBuf,
        /// Degrees about the vertical axis.
        #[arg(long, default_value_t = 30.0, allow_hyphen_values = true)]
        azimuth: f64,
        /// Degrees above the horizontal plane.
        #[arg(long, default_value_t = 20.0, allow_hyphen_values = true)]
        elevation: f64,
        /// Keep only the side n·x + d <= 0 of this plane.
        #[arg(long, allow_hyphen_values = true)]
        cut: Option<String>,
        #[command(flatten)]
        view: View,
    },
    /// Metrics report; prints a table and writes JSON.
    Eval {
        #[command(flatten)]
        io: Io,
        /// Model to compare surface renders against.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Fill, train, smooth and evaluate in one go.
    Pipeline {
        #[arg(long, short)]
        input: Option<PathBuf>,
        /// Output directory.
        #[arg(long, short)]
        output: Option<PathBuf>,
        #[arg(long)]
        provider: Option<String>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Write the synthetic sphere fixture as PLY.
    MakeFixture {
        #[arg(long, short)]
        output: PathBuf,
        #[arg(long, default_value_t = 120_000)]
        count: usize,
        #[arg(long, default_value = "watermelon")]
        kind: TextureKind,
        #[arg(long, default_value_t = 0.02)]
        tangential_scale: f64,
        #[arg(long, default_value_t = 0.012)]
        normal_scale: f64,
    },
}

#[derive(Serialize)]
struct ErrorBody {
    kind: &'static str,
    message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    checkpoint: Option<PathBuf>,
}

fn describe(err: &anyhow::Error) -> ErrorBody {
    let message = format!("{err:#}");
    let mut checkpoint = None;
    let kind = match err.downcast_ref::<PipelineError>() {
        Some(PipelineError::Config(_)) => "config",
        Some(PipelineError::Model { .. }) => "model",
        Some(PipelineError::Fill(_)) => "fill",
        Some(PipelineError::Train(TrainError::Provider { checkpoint: c, .. })) => {
            checkpoint = c.clone();
            "provider"
        }
        Some(PipelineError::Train(_)) => "train",
        Some(PipelineError::Provider(_)) => "provider",
        Some(PipelineError::Cut(_)) => "plane",
        Some(PipelineError::Eval(_)) => "render",
        Some(PipelineError::Image(_)) => "image",
        Some(PipelineError::Io(_)) | Some(PipelineError::Json(_)) => "io",
        None => "error",
    };
    ErrorBody {
        kind,
        message,
        checkpoint,
    }
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    let path = path.ok_or_else(|| {
        PipelineError::Config("this subcommand needs --config (seeds are mandatory)".into())
    })?;
    Ok(PipelineConfig::load(path)?)
}

fn resolve(io: &Io, default_in: PathBuf, default_out: PathBuf) -> Result<(PathBuf, PathBuf)> {
    let input = io.input.clone().unwrap_or(default_in);
    let output = io.output.clone().unwrap_or(default_out);
    if input == output {
        return Err(PipelineError::Config("input and output paths must differ".into()).into());
    }
    if !input.exists() {
        return Err(
            PipelineError::Config(format!("input {} does not exist", input.display())).into(),
        );
    }
    Ok((input, output))
}

fn parse_color(s: &str) -> Result<Vec3> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| PipelineError::Config(format!("color {s:?}: {e}")))?;
    match v.as_slice() {
        [r, g, b] if v.iter().all(|c| (0.0..=1.0).contains(c)) => Ok(Vec3::new(*r, *g, *b)),
        _ => Err(PipelineError::Config(format!("color {s:?}: expected r,g,b in [0, 1]")).into()),
    }
}

fn view_config(v: &View) -> Result<ViewConfig> {
    if v.width < 16 || v.height < 16 {
        return Err(PipelineError::Config(format!(
            "resolution {}x{} is below 16",
            v.width, v.height
        ))
        .into());
    }
    Ok(ViewConfig {
        width: v.width,
        height: v.height,
        ..Default::default()
    })
}

fn print_json(v: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn print_eval(r: &EvalReport) {
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    let mean = |v: &Option<Vec<f64>>| {
        v.as_ref().and_then(|e| {
            let ok: Vec<f64> = e.iter().copied().filter(|x| x.is_finite()).collect();
            (!ok.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64)
        })
    };
    let rows = [
        ("particles", r.particles.to_string()),
        ("trained", r.untrained.trained.to_string()),
        ("untrained", r.untrained.untrained.to_string()),
        (
            "untrained isolated",
            r.untrained.untrained_isolated.to_string(),
        ),
        (
            "slice similarity",
            format!("{:.4}", r.consistency.mean_pairwise_similarity),
        ),
        ("slice views", r.consistency.num_views.to_string()),
        (
            "oracle error (random)",
            opt(mean(&r.consistency.per_view_oracle_error)),
        ),
        (
            "oracle error (schedule)",
            opt(mean(&r.schedule_oracle_error)),
        ),
        (
            "oracle error (held out)",
            opt(r.holdout.as_ref().and_then(|h| h.oracle_error)),
        ),
        ("surface drift", opt(r.surface_drift)),
    ];
    for (k, v) in rows {
        println!("{k:<26}{v:>12}");
    }
}

fn run(cli: Cli) -> Result<()> {
    let config = cli.config.as_deref();
    match cli.command {
        Command::Fill { io } => {
            let cfg = load_config(config)?;
            let (input, output) = resolve(&io, cfg.input_ply.clone(), cfg.out(files::FILLED))?;
            print_json(&fill_stage(&cfg, &input, &output)?)
        }
        Command::Train {
            io,
            provider,
            iterations,
        } => {
            let mut cfg = load_config(config)?;
            if let Some(p) = provider {
                cfg.provider = p;
            }
            if let Some(n) = iterations {
                cfg.train.iterations_max = n;
            }
            cfg.validate()?;
            let (input, output) = resolve(&io, cfg.out(files::FILLED), cfg.out(files::TRAINED))?;
            print_json(&train_stage(&cfg, &input, &output)?)
        }
        Command::Smooth { io } => {
            let cfg = load_config(config)?;
            let (input, output) = resolve(&io, cfg.out(files::TRAINED), cfg.out(files::FINAL))?;
            print_json(&smooth_stage(&cfg, &input, &output)?)
        }
        Command::Eval { io, reference } => {
            let cfg = load_config(config)?;
            let (input, output) = resolve(&io, cfg.out(files::FINAL), cfg.out(files::EVAL))?;
            let report = eval_stage(&cfg, &input, reference.as_deref(), &output)?;
            print_eval(&report);
            Ok(())
        }
        Command::Pipeline {
            input,
            output,
            provider,
            iterations,
        } => {
            let mut cfg = load_config(config)?;
            if let Some(p) = input {
                cfg.input_ply = p;
            }
            if let Some(o) = output {
                cfg.output = o;
            }
            if let Some(p) = provider {
                cfg.provider = p;
            }
            if let Some(n) = iterations {
                cfg.train.iterations_max = n;
            }
            if !cfg.input_ply.exists() {
                return Err(PipelineError::Config(format!(
                    "input {} does not exist",
                    cfg.input_ply.display()
                ))
                .into());
            }
            let summary = run_pipeline(&cfg)?;
            print_eval(&summary.eval);
            Ok(())
        }
        Command::Slice {
            input,
            output,
            plane,
            mode,
            slab_width,
            depth,
            view,
        } => {
            let opts = SliceOptions {
                plane,
                slab_half_width: slab_width,
                mode,
                view: view_config(&view)?,
                background: parse_color(&view.background)?,
                depth,
            };
            print_json(&slice_stage(&input, &opts, &output)?)
        }
        Command::Render {
            input,
            output,
            azimuth,
            elevation,
            cut,
            view,
        } => {
            let vc = view_config(&view)?;
            let bg = parse_color(&view.background)?;
            let model = load_model(&input).map_err(|source| PipelineError::Model {
                path: input.clone(),
                source,
            })?;
            let (az, el) = (azimuth.to_radians(), elevation.to_radians());
            let dir = Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
            let cam = Camera::orbit(&model.bbox().center(), bounding_radius(&model), &dir, &vc);
            let mask = match cut {
                Some(s) => {
                    let w = splat_interior::cutplane::default_slab_half_width(model.extent());
                    make_cut_mask(&parse_plane(&s, w, CutMode::Half, "cut")?)
                        .map_err(PipelineError::from)?
                }
                None => VisibilityMask::All,
            };
            let settings = RenderSettings {
                background: bg,
                record_contrib: false,
                ..Default::default()
            };
            let out = render_with(&model, &cam, &mask, &settings).map_err(|e| anyhow!(e))?;
            out.rgb.save_png(&output).map_err(PipelineError::from)?;
            Ok(())
        }
        Command::MakeFixture {
            output,
            count,
            kind,
            tangential_scale,
            normal_scale,
        } => {
            let f = SphereFixture {
                surface_count: count,
                kind,
                tangential_scale,
                normal_scale,
                ..Default::default()
            };
            write_ply(&output, &synthetic_sphere(&f))
                .with_context(|| format!("writing {}", output.display()))?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = par::configure_threads_from_env() {
        log::info!("using {n} worker threads");
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = describe(&e);
            eprintln!("{}", serde_json::json!({ "error": body }));
            ExitCode::FAILURE
        }
    }
}
