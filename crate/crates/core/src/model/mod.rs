//! Two-branch embedding model.
//!
//! Each domain has its own patch-linear encoder and its own pooling block.
//! A pooling block is single-query multi-head attention: one learnable query
//! token attends over all encoded tokens, the per-head outputs are
//! concatenated, projected, and L2-normalized. In the aerial domain the
//! tokens of all LOD images are concatenated before pooling, so attention
//! pools across images as well as within them.
//!
//! Forward passes keep the intermediates needed by the hand-written
//! backward pass; all math is `f64`.

mod checkpoint;
pub mod gradcheck;

use ndarray::{s, Array1, Array2, ArrayViewD, ArrayViewMutD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};

use crate::dataset::BatchMask;
use crate::error::{Error, Result};
use crate::raster::Image;
use crate::training::loss::dcl_loss_with_grad;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Street,
    Aerial,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub street_image_size: usize,
    pub aerial_image_size: usize,
    pub patch_size: usize,
    pub token_dim: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub n_lods: usize,
    /// Adds a learned per-LOD vector to every aerial token.
    pub lod_embedding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            street_image_size: 32,
            aerial_image_size: 32,
            patch_size: 8,
            token_dim: 64,
            heads: 4,
            embed_dim: 64,
            n_lods: 4,
            lod_embedding: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.patch_size == 0 {
            return bad("patch size must be positive".into());
        }
        for (name, size) in [
            ("street", self.street_image_size),
            ("aerial", self.aerial_image_size),
        ] {
            if size == 0 || size % self.patch_size != 0 {
                return bad(format!(
                    "{name} image size {size} is not a multiple of patch size {}",
                    self.patch_size
                ));
            }
        }
        if self.token_dim == 0 {
            return bad("token dim must be >= 1".into());
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "embed dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            ));
        }
        if self.n_lods == 0 {
            return bad("need at least one LOD".into());
        }
        Ok(())
    }

    pub fn image_size(&self, domain: Domain) -> usize {
        match domain {
            Domain::Street => self.street_image_size,
            Domain::Aerial => self.aerial_image_size,
        }
    }

    pub fn tokens_per_image(&self, domain: Domain) -> usize {
        let g = self.image_size(domain) / self.patch_size;
        g * g
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    /// `token_dim x patch_dim`
    pub patch_proj: Array2<f64>,
    pub patch_bias: Array1<f64>,
    /// `tokens_per_image x token_dim`, shared by every image of the domain.
    pub positional: Array2<f64>,
    /// `n_lods x token_dim`, aerial domain only.
    pub lod_embedding: Option<Array2<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoolParams {
    pub query: Array1<f64>,
    /// `embed_dim x token_dim`
    pub w_query: Array2<f64>,
    pub w_key: Array2<f64>,
    pub w_value: Array2<f64>,
    /// `embed_dim x embed_dim`
    pub w_out: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub street: EncoderParams,
    pub aerial: EncoderParams,
    pub street_pool: PoolParams,
    pub aerial_pool: PoolParams,
}

impl EncoderParams {
    fn zeros(cfg: &ModelConfig, domain: Domain) -> Self {
        let lod = domain == Domain::Aerial && cfg.lod_embedding;
        Self {
            patch_proj: Array2::zeros((cfg.token_dim, cfg.patch_dim())),
            patch_bias: Array1::zeros(cfg.token_dim),
            positional: Array2::zeros((cfg.tokens_per_image(domain), cfg.token_dim)),
            lod_embedding: lod.then(|| Array2::zeros((cfg.n_lods, cfg.token_dim))),
        }
    }

    fn add_assign(&mut self, other: &EncoderParams) {
        self.patch_proj += &other.patch_proj;
        self.patch_bias += &other.patch_bias;
        self.positional += &other.positional;
        if let (Some(a), Some(b)) = (&mut self.lod_embedding, &other.lod_embedding) {
            *a += b;
        }
    }
}

impl PoolParams {
    fn zeros(cfg: &ModelConfig) -> Self {
        Self {
            query: Array1::zeros(cfg.token_dim),
            w_query: Array2::zeros((cfg.embed_dim, cfg.token_dim)),
            w_key: Array2::zeros((cfg.embed_dim, cfg.token_dim)),
            w_value: Array2::zeros((cfg.embed_dim, cfg.token_dim)),
            w_out: Array2::zeros((cfg.embed_dim, cfg.embed_dim)),
        }
    }

    fn add_assign(&mut self, other: &PoolParams) {
        self.query += &other.query;
        self.w_query += &other.w_query;
        self.w_key += &other.w_key;
        self.w_value += &other.w_value;
        self.w_out += &other.w_out;
    }
}

impl ModelParams {
    /// All-zero parameters (also the shape of a gradient).
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            street: EncoderParams::zeros(&config, Domain::Street),
            aerial: EncoderParams::zeros(&config, Domain::Aerial),
            street_pool: PoolParams::zeros(&config),
            aerial_pool: PoolParams::zeros(&config),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config).expect("config was validated at construction")
    }

    pub fn encoder(&self, domain: Domain) -> &EncoderParams {
        match domain {
            Domain::Street => &self.street,
            Domain::Aerial => &self.aerial,
        }
    }

    pub fn pool(&self, domain: Domain) -> &PoolParams {
        match domain {
            Domain::Street => &self.street_pool,
            Domain::Aerial => &self.aerial_pool,
        }
    }

    /// Every tensor with a stable name, in checkpoint order.
    pub fn tensors(&self) -> Vec<(&'static str, ArrayViewD<'_, f64>)> {
        let mut v = vec![
            ("street.patch_proj", self.street.patch_proj.view().into_dyn()),
            ("street.patch_bias", self.street.patch_bias.view().into_dyn()),
            ("street.positional", self.street.positional.view().into_dyn()),
            ("aerial.patch_proj", self.aerial.patch_proj.view().into_dyn()),
            ("aerial.patch_bias", self.aerial.patch_bias.view().into_dyn()),
            ("aerial.positional", self.aerial.positional.view().into_dyn()),
        ];
        if let Some(lod) = &self.aerial.lod_embedding {
            v.push(("aerial.lod_embedding", lod.view().into_dyn()));
        }
        for (names, pool) in [
            (POOL_NAMES[0], &self.street_pool),
            (POOL_NAMES[1], &self.aerial_pool),
        ] {
            v.push((names[0], pool.query.view().into_dyn()));
            v.push((names[1], pool.w_query.view().into_dyn()));
            v.push((names[2], pool.w_key.view().into_dyn()));
            v.push((names[3], pool.w_value.view().into_dyn()));
            v.push((names[4], pool.w_out.view().into_dyn()));
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, ArrayViewMutD<'_, f64>)> {
        let mut v = vec![
            ("street.patch_proj", self.street.patch_proj.view_mut().into_dyn()),
            ("street.patch_bias", self.street.patch_bias.view_mut().into_dyn()),
            ("street.positional", self.street.positional.view_mut().into_dyn()),
            ("aerial.patch_proj", self.aerial.patch_proj.view_mut().into_dyn()),
            ("aerial.patch_bias", self.aerial.patch_bias.view_mut().into_dyn()),
            ("aerial.positional", self.aerial.positional.view_mut().into_dyn()),
        ];
        if let Some(lod) = &mut self.aerial.lod_embedding {
            v.push(("aerial.lod_embedding", lod.view_mut().into_dyn()));
        }
        for (names, pool) in [
            (POOL_NAMES[0], &mut self.street_pool),
            (POOL_NAMES[1], &mut self.aerial_pool),
        ] {
            v.push((names[0], pool.query.view_mut().into_dyn()));
            v.push((names[1], pool.w_query.view_mut().into_dyn()));
            v.push((names[2], pool.w_key.view_mut().into_dyn()));
            v.push((names[3], pool.w_value.view_mut().into_dyn()));
            v.push((names[4], pool.w_out.view_mut().into_dyn()));
        }
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Name of the first tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.tensors()
            .into_iter()
            .find(|(_, t)| t.iter().any(|v| !v.is_finite()))
            .map(|(n, _)| n)
    }

    fn add_domain(&mut self, domain: Domain, enc: &EncoderParams, pool: &PoolParams) {
        match domain {
            Domain::Street => {
                self.street.add_assign(enc);
                self.street_pool.add_assign(pool);
            }
            Domain::Aerial => {
                self.aerial.add_assign(enc);
                self.aerial_pool.add_assign(pool);
            }
        }
    }
}

const POOL_NAMES: [[&str; 5]; 2] = [
    [
        "street_pool.query",
        "street_pool.w_query",
        "street_pool.w_key",
        "street_pool.w_value",
        "street_pool.w_out",
    ],
    [
        "aerial_pool.query",
        "aerial_pool.w_query",
        "aerial_pool.w_key",
        "aerial_pool.w_value",
        "aerial_pool.w_out",
    ],
];

/// Projections ~ U(+-1/sqrt(fan_in)), biases and tables zero, query
/// tokens ~ N(0, 0.02).
pub fn init_params(config: ModelConfig, seed: u64) -> Result<ModelParams> {
    let mut params = ModelParams::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let query_dist = Normal::new(0.0, 0.02).expect("valid normal");
    for (name, mut t) in params.tensors_mut() {
        let kind = name.rsplit('.').next().unwrap_or(name);
        match kind {
            "patch_proj" | "w_query" | "w_key" | "w_value" | "w_out" => {
                let fan_in = t.shape()[1] as f64;
                let bound = 1.0 / fan_in.sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
                t.iter_mut().for_each(|v| *v = dist.sample(&mut rng));
            }
            "query" => t.iter_mut().for_each(|v| *v = query_dist.sample(&mut rng)),
            _ => {}
        }
    }
    Ok(params)
}

/// Unit-norm embedding vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Normalizes `v`; fails on a zero or non-finite vector.
    pub fn normalized(v: Vec<f64>) -> Result<Self> {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::Numeric("embedding norm".into()));
        }
        Ok(Self(v.into_iter().map(|x| x / norm).collect()))
    }

    /// Wraps a vector that is already unit length.
    pub fn from_unit(v: Vec<f64>) -> Self {
        Self(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.0.iter().map(|&x| x as f32).collect()
    }
}

/// Flattens non-overlapping patches row-major; each row is `(y, x, c)`.
fn patchify(image: &Image, patch: usize) -> Array2<f64> {
    let grid = image.width() / patch;
    let dim = patch * patch * 3;
    let mut out = Array2::zeros((grid * grid, dim));
    let data = image.data();
    let w = image.width();
    for gy in 0..grid {
        for gx in 0..grid {
            let mut row = out.row_mut(gy * grid + gx);
            let mut k = 0;
            for y in 0..patch {
                let start = ((gy * patch + y) * w + gx * patch) * 3;
                for &v in &data[start..start + patch * 3] {
                    row[k] = v;
                    k += 1;
                }
            }
        }
    }
    out
}

fn check_image(cfg: &ModelConfig, domain: Domain, image: &Image) -> Result<()> {
    let size = cfg.image_size(domain);
    if image.width() != size || image.height() != size {
        return Err(Error::Shape(format!(
            "{domain:?} image is {}x{}, model expects {size}x{size}",
            image.width(),
            image.height()
        )));
    }
    Ok(())
}

fn encode_patches(enc: &EncoderParams, patches: &Array2<f64>, lod: Option<usize>) -> Array2<f64> {
    let mut tokens = patches.dot(&enc.patch_proj.t());
    tokens += &enc.patch_bias;
    tokens += &enc.positional;
    if let (Some(table), Some(l)) = (&enc.lod_embedding, lod) {
        tokens += &table.row(l);
    }
    tokens
}

/// Tokens of one image: patch projection + positional table (+ LOD vector
/// for aerial images when enabled).
pub fn encode_image(
    params: &ModelParams,
    domain: Domain,
    image: &Image,
    lod_index: usize,
) -> Result<Array2<f64>> {
    let cfg = &params.config;
    check_image(cfg, domain, image)?;
    if domain == Domain::Aerial && lod_index >= cfg.n_lods {
        return Err(Error::Shape(format!(
            "LOD index {lod_index} out of {} levels",
            cfg.n_lods
        )));
    }
    let patches = patchify(image, cfg.patch_size);
    let lod = (domain == Domain::Aerial).then_some(lod_index);
    Ok(encode_patches(params.encoder(domain), &patches, lod))
}

struct PoolCache {
    tokens: Array2<f64>,
    query: Array1<f64>,
    keys: Array2<f64>,
    values: Array2<f64>,
    /// `heads x tokens`
    attention: Array2<f64>,
    pooled: Array1<f64>,
    norm: f64,
    output: Array1<f64>,
}

fn pool_forward(cfg: &ModelConfig, pool: &PoolParams, tokens: Array2<f64>) -> Result<PoolCache> {
    let t = tokens.nrows();
    if t == 0 {
        return Err(Error::Shape("attention pooling needs at least one token".into()));
    }
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let query = pool.w_query.dot(&pool.query);
    let keys = tokens.dot(&pool.w_key.t());
    let values = tokens.dot(&pool.w_value.t());
    let mut attention = Array2::zeros((cfg.heads, t));
    let mut pooled = Array1::zeros(cfg.embed_dim);
    for h in 0..cfg.heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let qh = query.slice(s![h * dh..(h + 1) * dh]);
        let mut scores = keys.slice(cols).dot(&qh);
        scores *= scale;
        let max = scores.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        scores.mapv_inplace(|v| (v - max).exp());
        let z = scores.sum();
        scores /= z;
        pooled
            .slice_mut(s![h * dh..(h + 1) * dh])
            .assign(&scores.dot(&values.slice(cols)));
        attention.row_mut(h).assign(&scores);
    }
    let out = pool.w_out.dot(&pooled);
    let norm = out.dot(&out).sqrt();
    if !(norm.is_finite() && norm > 0.0) {
        return Err(Error::Numeric("pooled output".into()));
    }
    let output = &out / norm;
    Ok(PoolCache {
        tokens,
        query,
        keys,
        values,
        attention,
        pooled,
        norm,
        output,
    })
}

/// Backpropagates `d loss / d embedding` through one pooling block.
/// Accumulates parameter gradients into `grad` and returns `d loss / d tokens`.
fn pool_backward(
    cfg: &ModelConfig,
    pool: &PoolParams,
    cache: &PoolCache,
    g_emb: &Array1<f64>,
    grad: &mut PoolParams,
) -> Array2<f64> {
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    // Through the L2 normalization.
    let e = &cache.output;
    let g_out = (g_emb - &(e * e.dot(g_emb))) / cache.norm;
    grad.w_out += &outer(&g_out, &cache.pooled);
    let g_pooled = pool.w_out.t().dot(&g_out);

    let t = cache.tokens.nrows();
    let mut g_keys = Array2::zeros((t, cfg.embed_dim));
    let mut g_values = Array2::zeros((t, cfg.embed_dim));
    let mut g_query = Array1::zeros(cfg.embed_dim);
    for h in 0..cfg.heads {
        let span = h * dh..(h + 1) * dh;
        let cols = s![.., span.clone()];
        let a = cache.attention.row(h);
        let gp = g_pooled.slice(s![span.clone()]);
        // pooled_h = sum_t a_t v_t
        g_values
            .slice_mut(cols)
            .assign(&outer(&a.to_owned(), &gp.to_owned()));
        let g_a = cache.values.slice(cols).dot(&gp);
        let mean = a.dot(&g_a);
        let g_scores = (&g_a - mean) * a * scale;
        let qh = cache.query.slice(s![span.clone()]);
        g_query
            .slice_mut(s![span])
            .assign(&cache.keys.slice(cols).t().dot(&g_scores));
        g_keys
            .slice_mut(cols)
            .assign(&outer(&g_scores, &qh.to_owned()));
    }
    grad.w_query += &outer(&g_query, &pool.query);
    grad.query += &pool.w_query.t().dot(&g_query);
    grad.w_key += &g_keys.t().dot(&cache.tokens);
    grad.w_value += &g_values.t().dot(&cache.tokens);
    g_keys.dot(&pool.w_key) + g_values.dot(&pool.w_value)
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let a2 = a.view().insert_axis(Axis(1));
    let b2 = b.view().insert_axis(Axis(0));
    a2.dot(&b2)
}

fn encoder_backward(
    patches: &Array2<f64>,
    g_tokens: ndarray::ArrayView2<f64>,
    lod: Option<usize>,
    grad: &mut EncoderParams,
) {
    grad.patch_proj += &g_tokens.t().dot(patches);
    let summed = g_tokens.sum_axis(Axis(0));
    grad.patch_bias += &summed;
    grad.positional += &g_tokens;
    if let (Some(table), Some(l)) = (&mut grad.lod_embedding, lod) {
        let mut row = table.row_mut(l);
        row += &summed;
    }
}

/// Pools a token sequence into an embedding.
pub fn mha_pool(params: &ModelParams, domain: Domain, tokens: Array2<f64>) -> Result<Embedding> {
    let cache = pool_forward(&params.config, params.pool(domain), tokens)?;
    Ok(Embedding(cache.output.to_vec()))
}

/// Attention weights (`heads x tokens`) the pooling query assigns.
pub fn attention_weights(
    params: &ModelParams,
    domain: Domain,
    tokens: Array2<f64>,
) -> Result<Array2<f64>> {
    Ok(pool_forward(&params.config, params.pool(domain), tokens)?.attention)
}

/// Forward state of one embedded sample.
struct Forward {
    domain: Domain,
    /// `(patch matrix, lod index)` per input image.
    patches: Vec<(Array2<f64>, Option<usize>)>,
    pool: PoolCache,
}

impl Forward {
    fn embedding(&self) -> Embedding {
        Embedding(self.pool.output.to_vec())
    }
}

fn forward_street(params: &ModelParams, image: &Image) -> Result<Forward> {
    let cfg = &params.config;
    check_image(cfg, Domain::Street, image)?;
    let patches = patchify(image, cfg.patch_size);
    let tokens = encode_patches(&params.street, &patches, None);
    let pool = pool_forward(cfg, &params.street_pool, tokens)?;
    Ok(Forward {
        domain: Domain::Street,
        patches: vec![(patches, None)],
        pool,
    })
}

fn forward_cell(params: &ModelParams, lod_images: &[Image]) -> Result<Forward> {
    let cfg = &params.config;
    if lod_images.len() != cfg.n_lods {
        return Err(Error::Shape(format!(
            "cell needs {} LOD images, got {}",
            cfg.n_lods,
            lod_images.len()
        )));
    }
    let per = cfg.tokens_per_image(Domain::Aerial);
    let mut tokens = Array2::zeros((per * cfg.n_lods, cfg.token_dim));
    let mut patches = Vec::with_capacity(cfg.n_lods);
    for (l, img) in lod_images.iter().enumerate() {
        check_image(cfg, Domain::Aerial, img)?;
        let p = patchify(img, cfg.patch_size);
        tokens
            .slice_mut(s![l * per..(l + 1) * per, ..])
            .assign(&encode_patches(&params.aerial, &p, Some(l)));
        patches.push((p, Some(l)));
    }
    let pool = pool_forward(cfg, &params.aerial_pool, tokens)?;
    Ok(Forward {
        domain: Domain::Aerial,
        patches,
        pool,
    })
}

fn backward(params: &ModelParams, fwd: &Forward, g_emb: &Array1<f64>) -> (EncoderParams, PoolParams) {
    let cfg = &params.config;
    let mut g_enc = EncoderParams::zeros(cfg, fwd.domain);
    let mut g_pool = PoolParams::zeros(cfg);
    let g_tokens = pool_backward(cfg, params.pool(fwd.domain), &fwd.pool, g_emb, &mut g_pool);
    let per = cfg.tokens_per_image(fwd.domain);
    for (k, (patches, lod)) in fwd.patches.iter().enumerate() {
        let rows = g_tokens.slice(s![k * per..(k + 1) * per, ..]);
        encoder_backward(patches, rows, *lod, &mut g_enc);
    }
    (g_enc, g_pool)
}

pub fn embed_street(params: &ModelParams, image: &Image) -> Result<Embedding> {
    Ok(forward_street(params, image)?.embedding())
}

/// Embeds a cell from its LOD images (finest first) with one shared pool.
pub fn embed_cell(params: &ModelParams, lod_images: &[Image]) -> Result<Embedding> {
    Ok(forward_cell(params, lod_images)?.embedding())
}

/// Loss, full parameter gradient, and the batch similarity matrix.
#[derive(Clone, Debug)]
pub struct BatchGradient {
    pub loss: f64,
    pub grads: ModelParams,
    pub similarity: Array2<f64>,
}

/// Symmetric contrastive loss of a batch and its exact gradient with
/// respect to every parameter.
pub fn loss_and_grads(
    params: &ModelParams,
    street_batch: &[Image],
    cell_batch: &[Vec<Image>],
    mask: &BatchMask,
    tau: f64,
    eps: f64,
) -> Result<BatchGradient> {
    let b = street_batch.len();
    if b < 2 || cell_batch.len() != b || mask.size() != b {
        return Err(Error::Shape(format!(
            "batch sizes disagree or are < 2: {b} street, {} cells, mask {}",
            cell_batch.len(),
            mask.size()
        )));
    }
    let streets: Vec<Forward> = street_batch
        .par_iter()
        .map(|img| forward_street(params, img))
        .collect::<Result<_>>()?;
    let cells: Vec<Forward> = cell_batch
        .par_iter()
        .map(|imgs| forward_cell(params, imgs))
        .collect::<Result<_>>()?;
    let q = stack(&streets);
    let r = stack(&cells);
    let similarity = q.dot(&r.t());
    let (loss, g_s) = dcl_loss_with_grad(&similarity, mask, tau, eps)?;
    if !loss.is_finite() {
        return Err(Error::Numeric("loss".into()));
    }
    let g_q = g_s.dot(&r);
    let g_r = g_s.t().dot(&q);

    let parts: Vec<(Domain, EncoderParams, PoolParams)> = streets
        .par_iter()
        .zip(g_q.axis_iter(Axis(0)).collect::<Vec<_>>())
        .chain(
            cells
                .par_iter()
                .zip(g_r.axis_iter(Axis(0)).collect::<Vec<_>>()),
        )
        .map(|(fwd, g)| {
            let (e, p) = backward(params, fwd, &g.to_owned());
            (fwd.domain, e, p)
        })
        .collect();
    let mut grads = params.zeros_like();
    for (domain, enc, pool) in &parts {
        grads.add_domain(*domain, enc, pool);
    }
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::Numeric(format!("gradient of {name}")));
    }
    Ok(BatchGradient {
        loss,
        grads,
        similarity,
    })
}

/// Loss only, used by finite-difference checks.
pub fn batch_loss(
    params: &ModelParams,
    street_batch: &[Image],
    cell_batch: &[Vec<Image>],
    mask: &BatchMask,
    tau: f64,
    eps: f64,
) -> Result<f64> {
    let q: Vec<Embedding> = street_batch
        .iter()
        .map(|img| embed_street(params, img))
        .collect::<Result<_>>()?;
    let r: Vec<Embedding> = cell_batch
        .iter()
        .map(|imgs| embed_cell(params, imgs))
        .collect::<Result<_>>()?;
    let s = crate::training::loss::similarity_matrix(&q, &r)?;
    crate::training::loss::dcl_loss(&s, mask, tau, eps)
}

fn stack(fwds: &[Forward]) -> Array2<f64> {
    let dim = fwds[0].pool.output.len();
    let mut m = Array2::zeros((fwds.len(), dim));
    for (i, f) in fwds.iter().enumerate() {
        m.row_mut(i).assign(&f.pool.output);
    }
    m
}
