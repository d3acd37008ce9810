use std::path::PathBuf;

use cellgeo::dataset::MaskConfig;
use cellgeo::geodesy::DEFAULT_EARTH_RADIUS_M;
use cellgeo::model::ModelConfig;
use cellgeo::pipeline::{DEFAULT_L_DELTA_M, DEFAULT_S_MAX};
use cellgeo::raster::{LodConfig, SyntheticWorld};
use cellgeo::retrieval::{GraphParams, DEFAULT_EF_SEARCH, RECALL_RADIUS_M};
use cellgeo::training::TrainConfig;
use cellgeo::GeoPoint;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "cellgeo", version, about = "Cross-view geolocalization on a consistent-scale cell grid")]
#[command(args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Enumerate the cells of a bounding box and report layout shape error
    Layout(LayoutCmd),
    /// Render a synthetic world with train and test photo manifests
    Synth(SynthCmd),
    /// Train the two-branch model
    Train(TrainCmd),
    /// Embed every cell of a region into a database file
    BuildDb(BuildDbCmd),
    /// Embed the photos of a manifest
    EmbedQueries(EmbedQueriesCmd),
    /// Top-N cells for each embedded query
    Search(SearchCmd),
    /// Recall, grouped recall and score grids
    Eval(EvalCmd),
    /// Finite-difference check of the model and loss gradients
    Gradcheck(GradcheckCmd),
    /// Run the built-in property checks
    Selftest(SelftestCmd),
}

impl Command {
    pub fn common(&self) -> &Common {
        match self {
            Command::Layout(c) => &c.common,
            Command::Synth(c) => &c.common,
            Command::Train(c) => &c.common,
            Command::BuildDb(c) => &c.common,
            Command::EmbedQueries(c) => &c.common,
            Command::Search(c) => &c.common,
            Command::Eval(c) => &c.common,
            Command::Gradcheck(c) => &c.common,
            Command::Selftest(c) => &c.common,
        }
    }
}

#[derive(Args, Debug)]
pub struct Common {
    /// Random seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads [default: available cores]
    #[arg(long)]
    pub threads: Option<usize>,
    /// `key = value` file; every key is applied as `--key=value` ahead of the command line
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

impl Switch {
    pub fn is_on(self) -> bool {
        self == Switch::On
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum IndexKind {
    Exact,
    Graph,
}

/// Accepts plain reals and fractions such as `1/36`.
pub fn parse_real(s: &str) -> Result<f64, String> {
    let v = match s.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|e| format!("`{s}`: {e}"))?;
            let b: f64 = b.trim().parse().map_err(|e| format!("`{s}`: {e}"))?;
            a / b
        }
        None => s.trim().parse().map_err(|e| format!("`{s}`: {e}"))?,
    };
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("`{s}` is not a finite number"))
    }
}

/// `min_lat,min_lon,max_lat,max_lon` in decimal degrees.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub min: GeoPoint,
    pub max: GeoPoint,
}

pub fn parse_bbox(s: &str) -> Result<BBox, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| format!("`{x}`: {e}")))
        .collect::<Result<_, _>>()?;
    let [a, b, c, d] = v[..] else {
        return Err("expected min_lat,min_lon,max_lat,max_lon".into());
    };
    if !(a <= c) || ![a, b, c, d].iter().all(|x| x.is_finite()) {
        return Err(format!("invalid box `{s}`"));
    }
    Ok(BBox {
        min: GeoPoint::from_degrees(a, b),
        max: GeoPoint::from_degrees(c, d),
    })
}

#[derive(Args, Debug)]
pub struct LayoutArgs {
    /// Cell sidelength l in meters
    #[arg(long, default_value_t = 30.0)]
    pub cell_size: f64,
    /// Sphere radius in meters
    #[arg(long, default_value_t = DEFAULT_EARTH_RADIUS_M)]
    pub earth_radius_m: f64,
}

#[derive(Args, Debug)]
pub struct LayoutCmd {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub layout: LayoutArgs,
    /// Region as min_lat,min_lon,max_lat,max_lon (degrees)
    #[arg(long, value_parser = parse_bbox)]
    pub bbox: BBox,
}

fn world_defaults() -> SyntheticWorld {
    SyntheticWorld::centered(0, GeoPoint::new(0.0, 0.0), 1.0)
}

#[derive(Args, Debug)]
pub struct SynthCmd {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 42.36, allow_negative_numbers = true)]
    pub center_lat: f64,
    #[arg(long, default_value_t = -71.06, allow_negative_numbers = true)]
    pub center_lon: f64,
    /// Side of the square world in meters
    #[arg(long, default_value_t = 3000.0)]
    pub size_m: f64,
    #[arg(long, default_value_t = 2000)]
    pub train_photos: usize,
    #[arg(long, default_value_t = 500)]
    pub test_photos: usize,
    /// Minimum distance of photos from the world edge in meters
    #[arg(long, default_value_t = 100.0)]
    pub margin_m: f64,
    #[arg(long, default_value_t = world_defaults().octaves)]
    pub octaves: u32,
    #[arg(long, default_value_t = world_defaults().base_wavelength_m)]
    pub base_wavelength_m: f64,
    #[arg(long, default_value_t = world_defaults().persistence)]
    pub persistence: f64,
    #[arg(long, default_value_t = world_defaults().contrast)]
    pub contrast: f64,
    #[arg(long, default_value_t = world_defaults().photometric_noise_sigma)]
    pub photometric_noise_sigma: f64,
    /// Aerial raster resolution in meters per pixel
    #[arg(long, default_value_t = world_defaults().resolution_m)]
    pub resolution_m: f64,
}

#[derive(Args, Debug)]
pub struct ModelArgs {
    #[arg(long, default_value_t = ModelConfig::default().street_image_size)]
    pub street_image_size: usize,
    /// Pixels per side of every LOD patch
    #[arg(long, default_value_t = ModelConfig::default().aerial_image_size)]
    pub aerial_image_size: usize,
    #[arg(long, default_value_t = ModelConfig::default().patch_size)]
    pub patch_size: usize,
    #[arg(long, default_value_t = ModelConfig::default().token_dim)]
    pub token_dim: usize,
    #[arg(long, default_value_t = ModelConfig::default().heads)]
    pub heads: usize,
    #[arg(long, default_value_t = ModelConfig::default().embed_dim)]
    pub embed_dim: usize,
    /// Number of aerial LODs n
    #[arg(long, default_value_t = LodConfig::default().n)]
    pub n_lods: usize,
    /// Finest LOD sidelength d0 in meters
    #[arg(long, default_value_t = LodConfig::default().d0)]
    pub d0_m: f64,
    /// Per-LOD additive token embedding
    #[arg(long, value_enum, default_value_t = Switch::On)]
    pub lod_embedding: Switch,
}

impl ModelArgs {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            street_image_size: self.street_image_size,
            aerial_image_size: self.aerial_image_size,
            patch_size: self.patch_size,
            token_dim: self.token_dim,
            heads: self.heads,
            embed_dim: self.embed_dim,
            n_lods: self.n_lods,
            lod_embedding: self.lod_embedding.is_on(),
        }
    }

    pub fn lod_config(&self) -> LodConfig {
        LodConfig {
            n: self.n_lods,
            d0: self.d0_m,
            pixels: self.aerial_image_size,
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainCmd {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub layout: LayoutArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Photo manifest (JSON lines)
    #[arg(long)]
    pub manifest: PathBuf,
    /// Aerial raster (RGB8 plane with a `.meta` sidecar)
    #[arg(long)]
    pub raster: PathBuf,
    /// Synthetic world config, required for photos with synthetic poses
    #[arg(long)]
    pub world: Option<PathBuf>,
    #[arg(long, default_value_t = TrainConfig::default().batch_b)]
    pub batch_b: usize,
    #[arg(long, default_value_t = TrainConfig::default().iterations)]
    pub iterations: usize,
    #[arg(long, default_value_t = TrainConfig::default().lr_peak)]
    pub lr_peak: f64,
    #[arg(long, default_value_t = TrainConfig::default().warmup_iters)]
    pub warmup_iters: usize,
    /// Softmax temperature tau
    #[arg(long, default_value = "1/36", value_parser = parse_real)]
    pub temperature_tau: f64,
    #[arg(long, default_value_t = TrainConfig::default().label_smoothing_eps)]
    pub label_smoothing_eps: f64,
    /// Write a checkpoint every k iterations (0: only at the end)
    #[arg(long, default_value_t = TrainConfig::default().checkpoint_every)]
    pub checkpoint_every: usize,
    /// Hard-example mining
    #[arg(long, value_enum, default_value_t = Switch::On)]
    pub mining: Switch,
    /// Largest mining pool size
    #[arg(long, default_value_t = DEFAULT_S_MAX)]
    pub s_max: usize,
    /// Minimum photo distance from the augmented cell border in meters
    #[arg(long, default_value_t = DEFAULT_L_DELTA_M)]
    pub l_delta_m: f64,
    /// False-negative masking radius in meters
    #[arg(long, default_value_t = MaskConfig::default().radius_m)]
    pub mask_radius_m: f64,
}

#[derive(Args, Debug)]
pub struct BuildDbCmd {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub layout: LayoutArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub raster: PathBuf,
    /// Region as min_lat,min_lon,max_lat,max_lon (degrees) [default: world region or raster extent]
    #[arg(long, value_parser = parse_bbox)]
    pub bbox: Option<BBox>,
    /// Synthetic world config; its region is the default box
    #[arg(long)]
    pub world: Option<PathBuf>,
    /// Finest LOD sidelength d0 in meters
    #[arg(long, default_value_t = LodConfig::default().d0)]
    pub d0_m: f64,
}

#[derive(Args, Debug)]
pub struct EmbedQueriesCmd {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub raster: PathBuf,
    #[arg(long)]
    pub world: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SearchArgs {
    #[arg(long, value_enum, default_value_t = IndexKind::Exact)]
    pub index: IndexKind,
    /// Out-links per node of the graph index
    #[arg(long, default_value_t = GraphParams::default().m)]
    pub graph_m: usize,
    #[arg(long, default_value_t = GraphParams::default().ef_construction)]
    pub ef_construction: usize,
    #[arg(long, default_value_t = DEFAULT_EF_SEARCH)]
    pub ef_search: usize,
    /// Recall radius in meters
    #[arg(long, default_value_t = RECALL_RADIUS_M)]
    pub radius_m: f64,
}

#[derive(Args, Debug)]
pub struct SearchCmd {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub search: SearchArgs,
    #[arg(long)]
    pub db: PathBuf,
    /// Embedded queries from `embed-queries`
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub top_n: usize,
}

#[derive(Args, Debug)]
pub struct EvalCmd {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub search: SearchArgs,
    #[arg(long)]
    pub db: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    /// Largest N reported
    #[arg(long, default_value_t = 10)]
    pub top_n: usize,
    /// Groups with fewer queries are flagged as small
    #[arg(long, default_value_t = 10)]
    pub min_count: usize,
    /// Export the score grid around this query id
    #[arg(long)]
    pub grid_query: Option<String>,
    /// Half-width of the score grid in meters
    #[arg(long, default_value_t = 300.0)]
    pub grid_radius_m: f64,
}

#[derive(Args, Debug)]
pub struct GradcheckCmd {
    #[command(flatten)]
    pub common: Common,
    /// Number of consecutive seeds starting at --seed
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
}

#[derive(Args, Debug)]
pub struct SelftestCmd {
    #[command(flatten)]
    pub common: Common,
}
