//! Command-line interface.
//!
//! Exit codes: 0 on success, 2 when the bundle is missing or unreadable,
//! 3 for an invalid recipe (diagnostics on stderr as JSON), 1 otherwise.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use collage_core::collage::EditRecipe;
use collage_core::image::{decode_png, encode_png, RefResolver};
use collage_core::trainer::{train_all, Bundle, StageEvent, TrainAllConfig};
use collage_core::CollageError;
use serde_json::json;

use crate::api::{router, AppState};
use crate::engine::{
    base_image_bytes, layer_prefixes, pixel_vs_internal, project_image, render_recipe, restrict_layers, ProjectOptions, Space,
};

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_BUNDLE: i32 = 2;
pub const EXIT_RECIPE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "collage", version, about = "Semantic image collaging with a conditional GAN")]
pub struct Cli {
    /// Model bundle directory.
    #[arg(long, global = true, env = "COLLAGE_BUNDLE")]
    pub bundle: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// 32x32 models sized for a single CPU core.
    Desk,
    /// 8x8 models for smoke tests.
    Tiny,
    /// The full default architecture.
    Full,
}

#[derive(Debug, clap::Args)]
pub struct ProjectArgs {
    #[arg(long, value_enum, default_value = "z")]
    pub space: Space,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    /// Seeds the starting latent when the bundle has no encoder.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl ProjectArgs {
    fn options(&self) -> ProjectOptions {
        ProjectOptions { space: self.space, steps: self.steps, seed: self.seed }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Trains the GAN, encoder and aux networks into the bundle directory.
    Train {
        #[arg(long, value_enum, default_value = "desk")]
        preset: Preset,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Projects a PNG onto the generator; writes the latent as JSON and the
    /// loss curve as CSV.
    Project {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        class: usize,
        /// Latent JSON output.
        #[arg(long)]
        out: PathBuf,
        /// Loss CSV output; defaults to `out` with a `.csv` extension.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[command(flatten)]
        projection: ProjectArgs,
    },
    /// Renders a recipe to a PNG.
    Edit {
        #[arg(long)]
        recipe: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        projection: ProjectArgs,
    },
    /// Renders the recipe with every edit restricted to layers {1}, {1,2}, ….
    AblateLayers {
        #[arg(long)]
        recipe: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        projection: ProjectArgs,
    },
    /// Naive pixel paste, Poisson paste and internal collage side by side.
    DemoPixelVsInternal {
        #[arg(long)]
        recipe: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        projection: ProjectArgs,
    },
    /// Serves the HTTP API.
    Serve {
        #[arg(long, default_value_t = 8787)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
    },
}

#[derive(Debug)]
enum Failure {
    Bundle(String),
    Other(CollageError),
}

impl From<CollageError> for Failure {
    fn from(e: CollageError) -> Self {
        Failure::Other(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Other(e.into())
    }
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match execute(cli) {
        Ok(()) => 0,
        Err(Failure::Bundle(msg)) => {
            eprintln!("error: {msg}");
            EXIT_BUNDLE
        }
        Err(Failure::Other(CollageError::InvalidRecipe(diagnostics))) => {
            eprintln!("{}", json!({ "error": "invalid recipe", "diagnostics": diagnostics }));
            EXIT_RECIPE
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

fn bundle_dir(cli: &Cli) -> Result<&Path, Failure> {
    cli.bundle.as_deref().ok_or_else(|| Failure::Bundle("no bundle given; pass --bundle or set COLLAGE_BUNDLE".into()))
}

fn load_bundle(cli: &Cli) -> Result<Bundle, Failure> {
    let dir = bundle_dir(cli)?;
    Bundle::load(dir).map_err(|e| Failure::Bundle(format!("cannot load bundle {}: {e}", dir.display())))
}

fn read_recipe(path: &Path) -> Result<(EditRecipe, RefResolver), Failure> {
    let text = fs::read_to_string(path)?;
    let recipe = EditRecipe::from_json(&text)?;
    let root = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    Ok((recipe, RefResolver::with_root(root)))
}

/// Projects the recipe's real base image when it has one.
fn base_latent(bundle: &Bundle, recipe: &EditRecipe, images: &RefResolver, opts: &ProjectOptions) -> Result<Option<Vec<f64>>, Failure> {
    let Some(bytes) = base_image_bytes(recipe, images) else {
        return Ok(None);
    };
    let image = decode_png(&bytes?)?;
    let p = project_image(bundle, &image, recipe.base.class, opts)?;
    log::info!("projected base image: loss {:.4} -> {:.4}", p.initial_loss(), p.best_loss);
    Ok(Some(p.z))
}

fn create_parent(path: &Path) -> std::io::Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p),
        _ => Ok(()),
    }
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Train { preset, seed } => {
            let dir = bundle_dir(&cli)?;
            let cfg = match preset {
                Preset::Desk => TrainAllConfig::desk(),
                Preset::Tiny => TrainAllConfig::tiny(),
                Preset::Full => TrainAllConfig::default(),
            }
            .with_seed(*seed);
            let start = Instant::now();
            train_all(&cfg, dir, |e| match e {
                StageEvent::Started(s) => log::info!("stage {} started", s.name()),
                StageEvent::Skipped(s) => log::info!("stage {} already trained", s.name()),
                StageEvent::Finished(s) => log::info!("stage {} finished at {:.1}s", s.name(), start.elapsed().as_secs_f64()),
            })?;
        }
        Command::Project { image, class, out, csv, projection } => {
            let bundle = load_bundle(&cli)?;
            let img = decode_png(&fs::read(image)?)?;
            let p = project_image(&bundle, &img, *class, &projection.options())?;
            create_parent(out)?;
            let doc = json!({ "z": p.z, "class": class, "best_loss": p.best_loss, "best_iteration": p.best_iteration });
            fs::write(out, serde_json::to_vec_pretty(&doc).map_err(CollageError::from)?)?;
            let csv_path = csv.clone().unwrap_or_else(|| out.with_extension("csv"));
            create_parent(&csv_path)?;
            p.write_csv(fs::File::create(&csv_path)?)?;
            log::info!("loss {:.4} -> {:.4} at iteration {}", p.initial_loss(), p.best_loss, p.best_iteration);
        }
        Command::Edit { recipe, out, projection } => {
            let bundle = load_bundle(&cli)?;
            let (recipe, images) = read_recipe(recipe)?;
            let z = base_latent(&bundle, &recipe, &images, &projection.options())?;
            let rendered = render_recipe(&bundle, &recipe, &images, z.as_deref())?;
            create_parent(out)?;
            fs::write(out, rendered.png)?;
            log::info!("rendered in {:.1} ms", rendered.timing.total_ms);
        }
        Command::AblateLayers { recipe, out, projection } => {
            let bundle = load_bundle(&cli)?;
            let (recipe, images) = read_recipe(recipe)?;
            let z = base_latent(&bundle, &recipe, &images, &projection.options())?;
            fs::create_dir_all(out)?;
            for layers in layer_prefixes(&bundle.info()) {
                let rendered = render_recipe(&bundle, &restrict_layers(&recipe, &layers), &images, z.as_deref())?;
                let name = format!("layers_{}.png", layers.iter().map(usize::to_string).collect::<Vec<_>>().join("-"));
                fs::write(out.join(name), rendered.png)?;
            }
        }
        Command::DemoPixelVsInternal { recipe, out, projection } => {
            let bundle = load_bundle(&cli)?;
            let (recipe, images) = read_recipe(recipe)?;
            let z = base_latent(&bundle, &recipe, &images, &projection.options())?;
            let strip = pixel_vs_internal(&bundle, &recipe, &images, z.as_deref())?;
            create_parent(out)?;
            fs::write(out, encode_png(&strip)?)?;
        }
        Command::Serve { port, host } => {
            let bundle = load_bundle(&cli)?;
            let app = router(AppState::new(Some(bundle), ProjectOptions::default()));
            let addr = SocketAddr::new(*host, *port);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(addr).await?;
                log::info!("listening on http://{addr}");
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = tokio::signal::ctrl_c().await;
                    })
                    .await
            })?;
        }
    }
    Ok(())
}
