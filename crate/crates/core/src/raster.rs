//! Fused tile rasterizer: color and N-dimensional features are composited
//! front to back in one pass with the same per-contributor opacity and
//! transmittance.
//!
//! Per pixel, contributor `i` has effective opacity
//! `α'ᵢ = min(0.99, αᵢ · exp(-½ dᵀ Σ'⁻¹ d))` with `d` the offset from the
//! splat center to the pixel center. Contributors below 1/255 are
//! skipped, only pixels within the splat's 3σ disk are touched, and a
//! pixel stops once the next contributor would take its transmittance
//! below 1e-4.

use nalgebra::{Matrix2, Vector2};
use rayon::prelude::*;

use crate::camera::CameraView;
use crate::error::{Error, Result};
use crate::projection::{bin_tiles, project_backward, project_cloud, Projection, TileBinning, TILE_SIZE};
use crate::scene::{sigmoid, GaussianCloud};
use crate::tensor::FeatureMap;

pub const MAX_ALPHA: f64 = 0.99;
pub const MIN_ALPHA: f64 = 1.0 / 255.0;
pub const MIN_TRANSMITTANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct RenderSettings {
    pub background: [f64; 3],
    /// When set, the cloud must carry exactly this feature dimension.
    pub feature_dim: Option<usize>,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            background: [0.0; 3],
            feature_dim: None,
        }
    }
}

impl RenderSettings {
    pub fn with_background(background: [f64; 3]) -> Self {
        Self {
            background,
            feature_dim: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    /// `H × W × 3`.
    pub image: FeatureMap,
    /// `H × W × N`, composited over a zero background.
    pub feature_map: FeatureMap,
    /// `1 - T_final` per pixel.
    pub alpha: Vec<f64>,
    pub contributors: Vec<u32>,
}

/// Forward state kept for [`render_backward`]. Memory is O(pixels) plus
/// the projection: per-contributor transmittances are recomputed from the
/// final one.
#[derive(Debug, Clone)]
pub struct RenderState {
    pub view: CameraView,
    pub background: [f64; 3],
    pub projection: Projection,
    pub binning: TileBinning,
    pub final_transmittance: Vec<f64>,
    /// Number of tile-list entries traversed per pixel.
    pub last_entry: Vec<u32>,
    pub num_gaussians: usize,
    pub feature_dim: usize,
}

#[inline]
fn pixel_center(x: usize, y: usize) -> Vector2<f64> {
    Vector2::new(x as f64 + 0.5, y as f64 + 0.5)
}

/// Opacity after the falloff, or `None` when the splat does not touch the
/// pixel. Also returns the unclamped falloff value and whether the clamp
/// was hit.
#[inline]
fn effective_alpha(mean: &Vector2<f64>, conic: &Matrix2<f64>, radius: f64, opacity: f64, pix: &Vector2<f64>) -> Option<(f64, f64, bool)> {
    let d = pix - mean;
    if d.norm_squared() >= radius * radius {
        return None;
    }
    let power = -0.5 * (conic[(0, 0)] * d.x * d.x + 2.0 * conic[(0, 1)] * d.x * d.y + conic[(1, 1)] * d.y * d.y);
    if power > 0.0 {
        return None;
    }
    let g = power.exp();
    let raw = opacity * g;
    if raw > MAX_ALPHA {
        Some((MAX_ALPHA, g, true))
    } else {
        Some((raw, g, false))
    }
}

struct TilePixels {
    color: Vec<[f64; 3]>,
    feature: Vec<f64>,
    transmittance: Vec<f64>,
    last: Vec<u32>,
    count: Vec<u32>,
}

struct Prepared<'a> {
    cloud: &'a GaussianCloud,
    projection: &'a Projection,
    opacity: Vec<f64>,
}

fn tile_pixels(tx: usize, ty: usize, view: &CameraView) -> impl Iterator<Item = (usize, usize)> {
    let x0 = tx * TILE_SIZE;
    let y0 = ty * TILE_SIZE;
    let x1 = (x0 + TILE_SIZE).min(view.width);
    let y1 = (y0 + TILE_SIZE).min(view.height);
    (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
}

fn render_tile(prep: &Prepared, list: &[u32], tx: usize, ty: usize, view: &CameraView) -> TilePixels {
    let n = prep.cloud.feature_dim();
    let npix = tile_pixels(tx, ty, view).count();
    let mut out = TilePixels {
        color: vec![[0.0; 3]; npix],
        feature: vec![0.0; npix * n],
        transmittance: vec![1.0; npix],
        last: vec![0; npix],
        count: vec![0; npix],
    };
    for (p, (x, y)) in tile_pixels(tx, ty, view).enumerate() {
        let pix = pixel_center(x, y);
        let mut t = 1.0;
        let feat = &mut out.feature[p * n..(p + 1) * n];
        for (k, &idx) in list.iter().enumerate() {
            let pg = &prep.projection.projected[idx as usize];
            let src = pg.source_index;
            let Some((a, _, _)) = effective_alpha(&pg.mean2d, &pg.inv_cov2d, pg.radius, prep.opacity[src], &pix) else {
                continue;
            };
            if a < MIN_ALPHA {
                continue;
            }
            let next_t = t * (1.0 - a);
            if next_t < MIN_TRANSMITTANCE {
                break;
            }
            let w = a * t;
            let c = prep.cloud.colors[src];
            for ch in 0..3 {
                out.color[p][ch] += c[ch] as f64 * w;
            }
            for (acc, &f) in feat.iter_mut().zip(prep.cloud.feature(src)) {
                *acc += f as f64 * w;
            }
            t = next_t;
            out.last[p] = k as u32 + 1;
            out.count[p] += 1;
        }
        out.transmittance[p] = t;
    }
    out
}

/// Renders the RGB image and the feature map of `cloud` from `view` in a
/// single fused pass.
pub fn render(cloud: &GaussianCloud, view: &CameraView, settings: &RenderSettings) -> Result<(RenderOutput, RenderState)> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if let Some(n) = settings.feature_dim {
        if n != cloud.feature_dim() {
            return Err(Error::DimensionMismatch {
                what: "requested feature dimension vs cloud",
                expected: cloud.feature_dim(),
                got: n,
            });
        }
    }
    let projection = project_cloud(cloud, view);
    let binning = bin_tiles(&projection.projected, view);
    let prep = Prepared {
        cloud,
        projection: &projection,
        opacity: cloud.opacity_logits.iter().map(|&l| sigmoid(l as f64)).collect(),
    };
    let tiles: Vec<TilePixels> = (0..binning.tiles.len())
        .into_par_iter()
        .map(|t| {
            let (tx, ty) = (t % binning.tiles_x, t / binning.tiles_x);
            render_tile(&prep, &binning.tiles[t], tx, ty, view)
        })
        .collect();

    let (h, w, n) = (view.height, view.width, cloud.feature_dim());
    let bg = settings.background;
    let mut image = FeatureMap::zeros(h, w, 3);
    let mut feature_map = FeatureMap::zeros(h, w, n);
    let mut alpha = vec![0.0; h * w];
    let mut contributors = vec![0; h * w];
    let mut final_t = vec![1.0; h * w];
    let mut last_entry = vec![0; h * w];
    for (t, tile) in tiles.iter().enumerate() {
        let (tx, ty) = (t % binning.tiles_x, t / binning.tiles_x);
        for (p, (x, y)) in tile_pixels(tx, ty, view).enumerate() {
            let i = y * w + x;
            let tr = tile.transmittance[p];
            let px = image.pixel_mut(y, x);
            for ch in 0..3 {
                px[ch] = tile.color[p][ch] + tr * bg[ch];
            }
            feature_map.data[i * n..(i + 1) * n].copy_from_slice(&tile.feature[p * n..(p + 1) * n]);
            alpha[i] = 1.0 - tr;
            contributors[i] = tile.count[p];
            final_t[i] = tr;
            last_entry[i] = tile.last[p];
        }
    }
    Ok((
        RenderOutput {
            image,
            feature_map,
            alpha,
            contributors,
        },
        RenderState {
            view: view.clone(),
            background: bg,
            projection,
            binning,
            final_transmittance: final_t,
            last_entry,
            num_gaussians: cloud.len(),
            feature_dim: n,
        },
    ))
}

/// One accepted contributor of a pixel, in traversal order.
#[derive(Debug, Clone, PartialEq)]
pub struct Contribution {
    pub source_index: usize,
    pub alpha: f64,
    /// Transmittance in front of this contributor.
    pub transmittance: f64,
}

/// Replays the forward traversal of one pixel. Diagnostics and tests use
/// it to inspect the compositing sequence.
pub fn trace_pixel(cloud: &GaussianCloud, state: &RenderState, x: usize, y: usize) -> Vec<Contribution> {
    let view = &state.view;
    let (tx, ty) = (x / TILE_SIZE, y / TILE_SIZE);
    let list = state.binning.tile(tx, ty);
    let pix = pixel_center(x, y);
    let mut t = 1.0;
    let mut out = Vec::new();
    let last = state.last_entry[y * view.width + x] as usize;
    for &idx in &list[..last] {
        let pg = &state.projection.projected[idx as usize];
        let Some((a, _, _)) = effective_alpha(&pg.mean2d, &pg.inv_cov2d, pg.radius, cloud.opacity(pg.source_index), &pix) else {
            continue;
        };
        if a < MIN_ALPHA {
            continue;
        }
        out.push(Contribution {
            source_index: pg.source_index,
            alpha: a,
            transmittance: t,
        });
        t *= 1.0 - a;
    }
    out
}

/// Per-Gaussian gradients of one render.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBuffer {
    pub feature_dim: usize,
    pub position: Vec<[f64; 3]>,
    pub rotation: Vec<[f64; 4]>,
    pub log_scale: Vec<[f64; 3]>,
    pub opacity_logit: Vec<f64>,
    pub color: Vec<[f64; 3]>,
    pub feature: Vec<f64>,
    /// Screen-space mean gradient, used for densification.
    pub mean2d: Vec<[f64; 2]>,
    /// Full-matrix gradient on the 2D covariance `[xx, xy, yy]`.
    pub cov2d: Vec<[f64; 3]>,
    /// Whether the Gaussian survived culling in this view.
    pub visible: Vec<bool>,
}

impl GradientBuffer {
    pub fn zeros(len: usize, feature_dim: usize) -> Self {
        Self {
            feature_dim,
            position: vec![[0.0; 3]; len],
            rotation: vec![[0.0; 4]; len],
            log_scale: vec![[0.0; 3]; len],
            opacity_logit: vec![0.0; len],
            color: vec![[0.0; 3]; len],
            feature: vec![0.0; len * feature_dim],
            mean2d: vec![[0.0; 2]; len],
            cov2d: vec![[0.0; 3]; len],
            visible: vec![false; len],
        }
    }

    pub fn len(&self) -> usize {
        self.position.len()
    }

    pub fn is_empty(&self) -> bool {
        self.position.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.feature[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn is_finite(&self) -> bool {
        self.position.as_flattened().iter().all(|v| v.is_finite())
            && self.rotation.as_flattened().iter().all(|v| v.is_finite())
            && self.log_scale.as_flattened().iter().all(|v| v.is_finite())
            && self.opacity_logit.iter().all(|v| v.is_finite())
            && self.color.as_flattened().iter().all(|v| v.is_finite())
            && self.feature.iter().all(|v| v.is_finite())
    }
}

/// Gradient contributions of one tile-list entry.
#[derive(Clone)]
struct EntryGrad {
    color: [f64; 3],
    opacity: f64,
    mean2d: [f64; 2],
    conic: [f64; 3],
}

struct TileGrads {
    entries: Vec<EntryGrad>,
    feature: Vec<f64>,
}

fn backward_tile(
    cloud: &GaussianCloud,
    state: &RenderState,
    opacity: &[f64],
    grad_image: &FeatureMap,
    grad_feature: &FeatureMap,
    tx: usize,
    ty: usize,
) -> TileGrads {
    let n = state.feature_dim;
    let view = &state.view;
    let list = state.binning.tile(tx, ty);
    let mut tg = TileGrads {
        entries: vec![
            EntryGrad {
                color: [0.0; 3],
                opacity: 0.0,
                mean2d: [0.0; 2],
                conic: [0.0; 3],
            };
            list.len()
        ],
        feature: vec![0.0; list.len() * n],
    };
    let bg = state.background;
    let mut rest_f = vec![0.0; n];
    for (x, y) in tile_pixels(tx, ty, view) {
        let i = y * view.width + x;
        let last = state.last_entry[i] as usize;
        if last == 0 {
            continue;
        }
        let dl_dc = grad_image.pixel(y, x);
        let dl_df = grad_feature.pixel(y, x);
        let pix = pixel_center(x, y);
        // T after the contributor currently being visited.
        let mut t_after = state.final_transmittance[i];
        // Composite of everything behind the current contributor,
        // normalized by the transmittance in front of it.
        let mut rest_c = bg;
        rest_f.iter_mut().for_each(|v| *v = 0.0);
        for k in (0..last).rev() {
            let pg = &state.projection.projected[list[k] as usize];
            let src = pg.source_index;
            let op = opacity[src];
            let Some((a, g, clamped)) = effective_alpha(&pg.mean2d, &pg.inv_cov2d, pg.radius, op, &pix) else {
                continue;
            };
            if a < MIN_ALPHA {
                continue;
            }
            let t = t_after / (1.0 - a);
            let w = a * t;
            let c = cloud.colors[src];
            let f = cloud.feature(src);
            let e = &mut tg.entries[k];
            let mut dl_da = 0.0;
            for ch in 0..3 {
                e.color[ch] += w * dl_dc[ch];
                dl_da += dl_dc[ch] * t * (c[ch] as f64 - rest_c[ch]);
            }
            let fe = &mut tg.feature[k * n..(k + 1) * n];
            for j in 0..n {
                fe[j] += w * dl_df[j];
                dl_da += dl_df[j] * t * (f[j] as f64 - rest_f[j]);
            }
            for ch in 0..3 {
                rest_c[ch] = a * c[ch] as f64 + (1.0 - a) * rest_c[ch];
            }
            for j in 0..n {
                rest_f[j] = a * f[j] as f64 + (1.0 - a) * rest_f[j];
            }
            t_after = t;

            if clamped {
                continue;
            }
            e.opacity += dl_da * g;
            let dl_dpower = dl_da * op * g;
            let d = pix - pg.mean2d;
            let ad = pg.inv_cov2d * d;
            e.mean2d[0] += dl_dpower * ad.x;
            e.mean2d[1] += dl_dpower * ad.y;
            e.conic[0] += dl_dpower * (-0.5 * d.x * d.x);
            e.conic[1] += dl_dpower * (-0.5 * d.x * d.y);
            e.conic[2] += dl_dpower * (-0.5 * d.y * d.y);
        }
    }
    tg
}

/// Exact gradients of the fused compositing, chained through the
/// projection to every stored Gaussian attribute. Tiles are processed in
/// parallel and reduced in tile order, so the result is deterministic.
pub fn render_backward(
    cloud: &GaussianCloud,
    state: &RenderState,
    grad_image: &FeatureMap,
    grad_feature: &FeatureMap,
) -> Result<GradientBuffer> {
    if state.num_gaussians != cloud.len() || state.feature_dim != cloud.feature_dim() {
        return Err(Error::StateMismatch(format!(
            "state was rendered from {} Gaussians with N={}, cloud has {} with N={}",
            state.num_gaussians,
            state.feature_dim,
            cloud.len(),
            cloud.feature_dim()
        )));
    }
    let (h, w, n) = (state.view.height, state.view.width, state.feature_dim);
    if (grad_image.height, grad_image.width, grad_image.dim) != (h, w, 3) {
        return Err(Error::StateMismatch("image gradient shape".into()));
    }
    if (grad_feature.height, grad_feature.width, grad_feature.dim) != (h, w, n) {
        return Err(Error::StateMismatch("feature gradient shape".into()));
    }
    let opacity: Vec<f64> = cloud.opacity_logits.iter().map(|&l| sigmoid(l as f64)).collect();
    let binning = &state.binning;
    let tiles: Vec<TileGrads> = (0..binning.tiles.len())
        .into_par_iter()
        .map(|t| {
            let (tx, ty) = (t % binning.tiles_x, t / binning.tiles_x);
            backward_tile(cloud, state, &opacity, grad_image, grad_feature, tx, ty)
        })
        .collect();

    let projected = &state.projection.projected;
    let np = projected.len();
    let mut p_opacity = vec![0.0; np];
    let mut p_mean = vec![[0.0f64; 2]; np];
    let mut p_conic = vec![[0.0f64; 3]; np];
    let mut out = GradientBuffer::zeros(cloud.len(), n);
    for (t, tg) in tiles.iter().enumerate() {
        for (k, &idx) in binning.tiles[t].iter().enumerate() {
            let e = &tg.entries[k];
            let p = idx as usize;
            let src = projected[p].source_index;
            for ch in 0..3 {
                out.color[src][ch] += e.color[ch];
            }
            let dst = &mut out.feature[src * n..(src + 1) * n];
            for (d, s) in dst.iter_mut().zip(&tg.feature[k * n..(k + 1) * n]) {
                *d += s;
            }
            p_opacity[p] += e.opacity;
            p_mean[p][0] += e.mean2d[0];
            p_mean[p][1] += e.mean2d[1];
            for c in 0..3 {
                p_conic[p][c] += e.conic[c];
            }
        }
    }

    for (p, pg) in projected.iter().enumerate() {
        let src = pg.source_index;
        let op = opacity[src];
        out.visible[src] = true;
        out.opacity_logit[src] = p_opacity[p] * op * (1.0 - op);
        // conic = cov⁻¹  ⇒  dL/dcov = -A (dL/dA) A
        let ga = Matrix2::new(p_conic[p][0], p_conic[p][1], p_conic[p][1], p_conic[p][2]);
        let a = pg.inv_cov2d;
        let gcov = -(a * ga * a);
        out.mean2d[src] = p_mean[p];
        out.cov2d[src] = [gcov[(0, 0)], gcov[(0, 1)], gcov[(1, 1)]];
        let pgrads = project_backward(
            Vector2::new(p_mean[p][0], p_mean[p][1]),
            &gcov,
            &state.projection.records[p],
            &state.view,
        );
        out.position[src] = pgrads.position;
        out.rotation[src] = pgrads.rotation;
        out.log_scale[src] = pgrads.log_scale;
    }
    Ok(out)
}

/// Running screen-space gradient statistics between refinement steps.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ViewGradStats {
    pub accum_norm: Vec<f64>,
    pub seen: Vec<u32>,
}

impl ViewGradStats {
    pub fn new(len: usize) -> Self {
        Self {
            accum_norm: vec![0.0; len],
            seen: vec![0; len],
        }
    }

    /// Adds `‖dL/dmean2d‖` of every Gaussian visible in this render.
    pub fn accumulate(&mut self, grads: &GradientBuffer) {
        assert_eq!(grads.len(), self.accum_norm.len());
        for i in 0..grads.len() {
            if grads.visible[i] {
                let [gx, gy] = grads.mean2d[i];
                self.accum_norm[i] += (gx * gx + gy * gy).sqrt();
                self.seen[i] += 1;
            }
        }
    }

    /// Like [`accumulate`](Self::accumulate) but measures the gradient in
    /// normalized device units (pixel gradient times half the image size),
    /// so thresholds do not depend on the render resolution.
    pub fn accumulate_ndc(&mut self, grads: &GradientBuffer, width: usize, height: usize) {
        assert_eq!(grads.len(), self.accum_norm.len());
        let (sx, sy) = (0.5 * width as f64, 0.5 * height as f64);
        for i in 0..grads.len() {
            if grads.visible[i] {
                let [gx, gy] = grads.mean2d[i];
                self.accum_norm[i] += ((gx * sx).powi(2) + (gy * sy).powi(2)).sqrt();
                self.seen[i] += 1;
            }
        }
    }

    /// Mean view-space gradient norm per Gaussian; zero if never seen.
    pub fn view_space_grad_norms(&self) -> Vec<f64> {
        self.accum_norm
            .iter()
            .zip(&self.seen)
            .map(|(&a, &s)| a / s.max(1) as f64)
            .collect()
    }
}
