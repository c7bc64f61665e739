//! Joint RGB + feature optimization.
//!
//! Each step renders the cloud, scores the image against the ground truth
//! with the photometric loss and the decoded, resized feature map against
//! the teacher with L1, then backpropagates through decoder, resize and
//! rasterizer and takes one Adam step on every attribute.

pub mod adam;
pub mod densify;

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use adam::AdamState;
pub use densify::{densify_and_prune, DensifyReport};

use crate::camera::CameraView;
use crate::decoder::{decode, decode_backward, resize_bilinear, resize_bilinear_backward, ChannelDecoder};
use crate::error::{Error, Result};
use crate::loss::{feature_loss, photometric_loss, psnr};
use crate::raster::{render, render_backward, RenderSettings, ViewGradStats};
use crate::scene::{random_init, GaussianCloud};
use crate::tensor::{write_atomic, FeatureMap};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Weight of the feature term.
    pub gamma: f64,
    /// D-SSIM share of the photometric term.
    pub lambda_dssim: f64,
    /// Weight of the photometric term. Zero turns the RGB path off.
    pub photometric_weight: f64,
    /// Position learning rate at the first and last iteration, as a
    /// fraction of the scene extent; decays exponentially in between.
    pub lr_position_init: f64,
    pub lr_position_final: f64,
    pub lr_rotation: f64,
    pub lr_scale: f64,
    pub lr_opacity: f64,
    pub lr_color: f64,
    /// Feature learning rate. With a decoder it is scaled by `sqrt(M / N)`
    /// so one Adam step moves the decoded feature about as far as it would
    /// on the direct path, see [`TrainConfig::feature_lr`].
    pub lr_feature: f64,
    pub lr_decoder: f64,
    pub iterations: usize,
    pub densify_interval: usize,
    /// First iteration at which refinement may run.
    pub densify_from: usize,
    /// Refinement stops after this fraction of the iterations.
    pub densify_until_fraction: f64,
    pub densify_grad_threshold: f64,
    /// Split instead of clone above this fraction of the scene extent.
    pub size_threshold: f64,
    pub opacity_prune_epsilon: f64,
    /// Densification never grows the cloud past this size.
    pub max_gaussians: usize,
    /// Iterations at which the render resolution doubles. Training starts
    /// at `1 / 2^len` of full resolution.
    pub resolution_steps: Vec<usize>,
    pub background: [f64; 3],
    pub seed: u64,
    /// Random initialization used by [`run_training`].
    pub init_count: usize,
    pub init_extent: f32,
    /// Rendered feature dimension.
    pub feature_dim: usize,
    /// Train a channel decoder up to the teacher dimension. Without one
    /// the rendered dimension must equal the teacher's.
    pub use_decoder: bool,
    pub decoder_init: DecoderInit,
}

/// How [`initial_model`] seeds the channel decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderInit {
    /// Leading principal directions of the training teacher maps.
    TeacherPrincipal,
    /// `normal(0, 1/N)` weights.
    Random,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            lambda_dssim: 0.2,
            photometric_weight: 1.0,
            lr_position_init: 1.6e-4,
            lr_position_final: 1.6e-6,
            lr_rotation: 1e-3,
            lr_scale: 5e-3,
            lr_opacity: 5e-2,
            lr_color: 2.5e-3,
            lr_feature: 1e-3,
            lr_decoder: 1e-4,
            iterations: 2000,
            densify_interval: 100,
            densify_from: 0,
            densify_until_fraction: 0.6,
            densify_grad_threshold: 2e-4,
            size_threshold: 0.01,
            opacity_prune_epsilon: 0.005,
            max_gaussians: 100_000,
            resolution_steps: vec![250, 500],
            background: [0.0; 3],
            seed: 0,
            init_count: 1000,
            init_extent: 1.0,
            feature_dim: 8,
            use_decoder: true,
            decoder_init: DecoderInit::TeacherPrincipal,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.gamma >= 0.0) {
            return bad(format!("gamma must be >= 0, got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.lambda_dssim) {
            return bad(format!("lambda_dssim must lie in [0, 1], got {}", self.lambda_dssim));
        }
        if !(self.photometric_weight >= 0.0) {
            return bad(format!("photometric_weight must be >= 0, got {}", self.photometric_weight));
        }
        let lrs = [
            ("lr_position_init", self.lr_position_init),
            ("lr_position_final", self.lr_position_final),
            ("lr_rotation", self.lr_rotation),
            ("lr_scale", self.lr_scale),
            ("lr_opacity", self.lr_opacity),
            ("lr_color", self.lr_color),
            ("lr_feature", self.lr_feature),
            ("lr_decoder", self.lr_decoder),
        ];
        for (name, lr) in lrs {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be > 0, got {lr}"));
            }
        }
        if self.densify_interval == 0 {
            return bad("densify_interval must be > 0".into());
        }
        if self.resolution_steps.windows(2).any(|w| w[0] >= w[1]) {
            return bad("resolution_steps must be strictly increasing".into());
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be > 0".into());
        }
        Ok(())
    }

    /// Downscale factor for an iteration.
    pub fn resolution_factor(&self, iteration: usize) -> usize {
        let remaining = self.resolution_steps.iter().filter(|&&s| iteration < s).count();
        1 << remaining
    }

    pub fn position_lr(&self, iteration: usize, extent: f64) -> f64 {
        let t = if self.iterations > 1 {
            (iteration as f64 / (self.iterations - 1) as f64).min(1.0)
        } else {
            0.0
        };
        let log_lr = (1.0 - t) * self.lr_position_init.ln() + t * self.lr_position_final.ln();
        log_lr.exp() * extent
    }

    /// Effective per-coordinate feature step for `in_dim` rendered channels
    /// decoded to `out_dim`.
    pub fn feature_lr(&self, in_dim: usize, out_dim: usize) -> f64 {
        self.lr_feature * (out_dim as f64 / in_dim as f64).sqrt()
    }

    fn densify_until(&self) -> usize {
        (self.densify_until_fraction * self.iterations as f64) as usize
    }
}

/// One supervised view.
#[derive(Debug, Clone)]
pub struct TrainView {
    pub view: CameraView,
    /// `H × W × 3` in `[0, 1]`.
    pub image: FeatureMap,
    /// Teacher map, any resolution, `M` channels.
    pub feature: FeatureMap,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub iteration: usize,
    pub total_loss: f64,
    pub rgb_loss: f64,
    pub feature_loss: f64,
    pub psnr: f64,
    pub num_gaussians: usize,
}

pub const METRICS_HEADER: &str = "iteration,total_loss,rgb_loss,feature_loss,psnr,num_gaussians";

pub fn metrics_csv(log: &[StepMetrics]) -> String {
    let mut out = String::with_capacity(64 * (log.len() + 1));
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for m in log {
        use std::fmt::Write as _;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            m.iteration, m.total_loss, m.rgb_loss, m.feature_loss, m.psnr, m.num_gaussians
        );
    }
    out
}

pub fn write_metrics_csv(log: &[StepMetrics], path: &Path) -> Result<()> {
    write_atomic(path, metrics_csv(log).as_bytes())
}

/// Appends to a CSV log as training progresses.
pub struct MetricsWriter<W: Write> {
    inner: W,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(mut inner: W) -> std::io::Result<Self> {
        writeln!(inner, "{METRICS_HEADER}")?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, m: &StepMetrics) -> std::io::Result<()> {
        writeln!(
            self.inner,
            "{},{},{},{},{},{}",
            m.iteration, m.total_loss, m.rgb_loss, m.feature_loss, m.psnr, m.num_gaussians
        )
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

/// Optimization state across steps.
pub struct Trainer {
    pub cloud: GaussianCloud,
    pub decoder: Option<ChannelDecoder>,
    pub adam: AdamState,
    pub config: TrainConfig,
    pub stats: ViewGradStats,
    pub iteration: usize,
    rng: ChaCha8Rng,
    downsampled: HashMap<(usize, usize), FeatureMap>,
}

impl Trainer {
    pub fn new(cloud: GaussianCloud, decoder: Option<ChannelDecoder>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if cloud.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if let Some(d) = &decoder {
            if d.in_dim() != cloud.feature_dim() {
                return Err(Error::DimensionMismatch {
                    what: "decoder input vs cloud feature dimension",
                    expected: cloud.feature_dim(),
                    got: d.in_dim(),
                });
            }
        }
        let adam = AdamState::new(cloud.len(), cloud.feature_dim(), decoder.as_ref().map(|d| (d.out_dim(), d.in_dim())));
        let stats = ViewGradStats::new(cloud.len());
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xd3_5e_f1);
        Ok(Self {
            cloud,
            decoder,
            adam,
            config,
            stats,
            iteration: 0,
            rng,
            downsampled: HashMap::new(),
        })
    }

    /// One optimization step against `sample` at full resolution of the
    /// given (possibly downscaled) view. The image must match the view.
    pub fn step_on(&mut self, view: &CameraView, image: &FeatureMap, teacher: &FeatureMap) -> Result<StepMetrics> {
        let cfg = &self.config;
        let out_dim = self.decoder.as_ref().map_or(self.cloud.feature_dim(), |d| d.out_dim());
        if teacher.dim != out_dim {
            return Err(Error::DimensionMismatch {
                what: "teacher feature dimension",
                expected: out_dim,
                got: teacher.dim,
            });
        }
        if image.height != view.height || image.width != view.width || image.dim != 3 {
            return Err(Error::ShapeMismatch(format!(
                "ground truth {}x{}x{} does not match view {}x{}",
                image.height, image.width, image.dim, view.height, view.width
            )));
        }

        let (out, state) = render(&self.cloud, view, &RenderSettings::with_background(cfg.background))?;

        let photo = photometric_loss(&out.image, image, cfg.lambda_dssim)?;
        let mut grad_image = photo.grad;
        for g in &mut grad_image.data {
            *g *= cfg.photometric_weight;
        }

        let decoded = match &self.decoder {
            Some(d) => decode(&out.feature_map, d)?,
            None => out.feature_map.clone(),
        };
        let resized = resize_bilinear(&decoded, teacher.height, teacher.width)?;
        let (f_loss, mut g_f) = feature_loss(&resized, teacher)?;
        for g in &mut g_f.data {
            *g *= cfg.gamma;
        }
        let g_decoded = resize_bilinear_backward(&g_f, decoded.height, decoded.width);
        let (grad_feature, dec_grads) = match &self.decoder {
            Some(d) => {
                let g = decode_backward(&g_decoded, &out.feature_map, d)?;
                (g.input, Some((g.weights, g.bias)))
            }
            None => (g_decoded, None),
        };

        let total = cfg.photometric_weight * photo.total + cfg.gamma * f_loss;
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: self.iteration,
                detail: format!("rgb {} feature {}", photo.total, f_loss),
            });
        }
        let grads = render_backward(&self.cloud, &state, &grad_image, &grad_feature)?;
        if !grads.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: self.iteration,
                detail: "non-finite gradient".into(),
            });
        }
        self.stats.accumulate_ndc(&grads, view.width, view.height);

        self.adam.step += 1;
        let t = self.adam.step;
        let extent = self.cloud.scene_extent as f64;
        let lr_pos = cfg.position_lr(self.iteration, extent);
        let lr_feature = cfg.feature_lr(self.cloud.feature_dim(), out_dim);
        let c = &mut self.cloud;
        let a = &mut self.adam;
        a.position.update(c.positions.as_flattened_mut(), grads.position.as_flattened(), lr_pos, t);
        a.rotation.update(c.rotations.as_flattened_mut(), grads.rotation.as_flattened(), cfg.lr_rotation, t);
        a.log_scale.update(c.log_scales.as_flattened_mut(), grads.log_scale.as_flattened(), cfg.lr_scale, t);
        a.opacity.update(&mut c.opacity_logits, &grads.opacity_logit, cfg.lr_opacity, t);
        a.color.update(c.colors.as_flattened_mut(), grads.color.as_flattened(), cfg.lr_color, t);
        a.feature.update(&mut c.features, &grads.feature, lr_feature, t);
        if let (Some(d), Some((gw, gb))) = (self.decoder.as_mut(), dec_grads) {
            a.decoder_weights.update(&mut d.weights, &gw, cfg.lr_decoder, t);
            a.decoder_bias.update(&mut d.bias, &gb, cfg.lr_decoder, t);
        }
        c.normalize_rotations();
        for col in c.colors.as_flattened_mut() {
            *col = col.clamp(0.0, 1.0);
        }

        let metrics = StepMetrics {
            iteration: self.iteration,
            total_loss: total,
            rgb_loss: photo.total,
            feature_loss: f_loss,
            psnr: psnr(&out.image, image)?,
            num_gaussians: self.cloud.len(),
        };
        self.iteration += 1;
        Ok(metrics)
    }

    /// Schedule-aware step on `dataset[index]`: picks the resolution for
    /// the current iteration and runs refinement when due.
    pub fn step(&mut self, dataset: &[TrainView], index: usize) -> Result<StepMetrics> {
        let sample = &dataset[index];
        let factor = self.config.resolution_factor(self.iteration);
        let view = sample.view.downscaled(factor);
        let image = self
            .downsampled
            .entry((index, factor))
            .or_insert_with(|| sample.image.downsample_area(factor))
            .clone();
        let metrics = self.step_on(&view, &image, &sample.feature)?;
        let it = self.iteration;
        if it >= self.config.densify_from && it < self.config.densify_until() && it % self.config.densify_interval == 0 {
            self.densify()?;
        }
        Ok(metrics)
    }

    pub fn densify(&mut self) -> Result<DensifyReport> {
        let norms = self.stats.view_space_grad_norms();
        let report = densify_and_prune(&mut self.cloud, &norms, &mut self.adam, &self.config, &mut self.rng)?;
        log::debug!(
            "iteration {}: pruned {} cloned {} split {} -> {} Gaussians",
            self.iteration,
            report.pruned,
            report.cloned,
            report.split,
            self.cloud.len()
        );
        self.stats = ViewGradStats::new(self.cloud.len());
        Ok(report)
    }
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub cloud: GaussianCloud,
    pub decoder: Option<ChannelDecoder>,
    pub log: Vec<StepMetrics>,
}

fn check_dataset(dataset: &[TrainView]) -> Result<usize> {
    let first = dataset
        .first()
        .ok_or_else(|| Error::InvalidConfig("training needs at least one view".into()))?;
    for v in dataset {
        if v.feature.dim != first.feature.dim {
            return Err(Error::DimensionMismatch {
                what: "teacher feature dimension",
                expected: first.feature.dim,
                got: v.feature.dim,
            });
        }
    }
    Ok(first.feature.dim)
}

/// Initial cloud and decoder for a dataset under `config`.
pub fn initial_model(dataset: &[TrainView], config: &TrainConfig) -> Result<(GaussianCloud, Option<ChannelDecoder>)> {
    config.validate()?;
    let teacher_dim = check_dataset(dataset)?;
    let cloud = random_init(config.init_count, config.feature_dim, config.init_extent, config.seed)?;
    let decoder = if config.use_decoder {
        Some(match config.decoder_init {
            DecoderInit::Random => ChannelDecoder::new_random(config.feature_dim, teacher_dim, config.seed.wrapping_add(1)),
            DecoderInit::TeacherPrincipal => {
                let maps: Vec<&FeatureMap> = dataset.iter().map(|v| &v.feature).collect();
                ChannelDecoder::from_principal_directions(config.feature_dim, &maps, 3)?
            }
        })
    } else if config.feature_dim != teacher_dim {
        return Err(Error::InvalidConfig(format!(
            "without a decoder the feature dimension ({}) must equal the teacher dimension ({teacher_dim})",
            config.feature_dim
        )));
    } else {
        None
    };
    Ok((cloud, decoder))
}

/// Trains from a random initialization, cycling views round-robin.
pub fn run_training(dataset: &[TrainView], config: &TrainConfig) -> Result<TrainResult> {
    run_training_with(dataset, config, |_, _| Ok(()))
}

/// [`run_training`] with a hook called after every step, e.g. for
/// logging or checkpointing.
pub fn run_training_with(
    dataset: &[TrainView],
    config: &TrainConfig,
    mut on_step: impl FnMut(&StepMetrics, &Trainer) -> Result<()>,
) -> Result<TrainResult> {
    let (cloud, decoder) = initial_model(dataset, config)?;
    let mut trainer = Trainer::new(cloud, decoder, config.clone())?;
    let mut log = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let m = trainer.step(dataset, it % dataset.len())?;
        on_step(&m, &trainer)?;
        log.push(m);
    }
    Ok(TrainResult {
        cloud: trainer.cloud,
        decoder: trainer.decoder,
        log,
    })
}
