//! Shared test fixtures: well-conditioned random scenes and a
//! central-difference gradient oracle that only calls forward code.

#![allow(dead_code)]

use nalgebra::{Matrix2, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatfield::projection::{build_covariance, project, project_backward, ProjectionRecord};
use splatfield::decoder::{decode, decode_backward, resize_bilinear, resize_bilinear_backward, ChannelDecoder};
use splatfield::raster::{render, render_backward, trace_pixel, GradientBuffer, RenderSettings};
use splatfield::scene::{logit, Gaussian, GaussianCloud};
use splatfield::{CameraView, FeatureMap};

pub const FD_SIZE: usize = 8;
pub const FD_FEATURE_DIM: usize = 4;
pub const FD_DECODED_DIM: usize = 6;
pub const FD_TEACHER_SIZE: usize = 11;

/// Random scene of 1..=20 large splats all covering the whole 8×8 image,
/// rejected and redrawn while any pixel sits near a non-differentiable
/// point of the renderer (skip/clamp thresholds, early termination, depth
/// ties).
pub fn fd_scene(seed: u64) -> (GaussianCloud, CameraView, ChannelDecoder) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        let phi = rng.random_range(-1.0..1.0);
        let view = CameraView::orbit(theta, phi, 3.0, FD_SIZE, FD_SIZE).unwrap();
        let count = rng.random_range(1..=20);
        let mut gaussians = Vec::with_capacity(count);
        let c2w_rot = view.rotation().transpose();
        let center = view.center();
        for _ in 0..count {
            let z: f64 = rng.random_range(2.5..3.5);
            let u: f64 = rng.random_range(1.0..7.0);
            let v: f64 = rng.random_range(1.0..7.0);
            let cam = Vector3::new((u - view.cx) * z / view.fx, (v - view.cy) * z / view.fy, z);
            let world = c2w_rot * cam + center;
            let q = nalgebra::UnitQuaternion::from_euler_angles(
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
            );
            gaussians.push(Gaussian {
                position: [world.x as f32, world.y as f32, world.z as f32],
                rotation: [q.w as f32, q.i as f32, q.j as f32, q.k as f32],
                log_scale: [0; 3].map(|_| (rng.random_range(1.5f64..3.0)).ln() as f32),
                opacity_logit: logit(rng.random_range(0.1..0.6)) as f32,
                color: [0; 3].map(|_| rng.random_range(0.05f32..0.95)),
                feature: (0..FD_FEATURE_DIM).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
            });
        }
        let mut cloud = GaussianCloud::from_gaussians(FD_FEATURE_DIM, gaussians).unwrap();
        cloud.normalize_rotations();
        if well_conditioned(&cloud, &view) {
            let dec = ChannelDecoder::new_random(FD_FEATURE_DIM, FD_DECODED_DIM, rng.random());
            let mut dec = dec;
            for b in &mut dec.bias {
                *b = rng.random_range(-0.5..0.5);
            }
            return (cloud, view, dec);
        }
    }
}

fn well_conditioned(cloud: &GaussianCloud, view: &CameraView) -> bool {
    let (out, state) = render(cloud, view, &RenderSettings::default()).unwrap();
    if state.projection.projected.len() != cloud.len() {
        return false;
    }
    let mut depths: Vec<f64> = state.projection.projected.iter().map(|p| p.depth).collect();
    depths.sort_by(f64::total_cmp);
    if depths.windows(2).any(|w| w[1] - w[0] < 0.02) {
        return false;
    }
    for p in &state.projection.projected {
        // every pixel center well inside the 3σ disk
        if p.radius < 11.0 {
            return false;
        }
    }
    for y in 0..view.height {
        for x in 0..view.width {
            let trace = trace_pixel(cloud, &state, x, y);
            if trace.len() != cloud.len() {
                return false;
            }
            if trace.iter().any(|c| c.alpha < 1.5 / 255.0 || c.alpha > 0.9) {
                return false;
            }
            if 1.0 - out.alpha[y * view.width + x] < 5e-4 {
                return false;
            }
        }
    }
    true
}

/// A smooth scalar functional of everything the training pipeline
/// produces: image, and the decoded feature map resized to a teacher
/// grid.
pub struct FdObjective {
    pub image_weights: FeatureMap,
    pub feature_weights: FeatureMap,
    pub background: [f64; 3],
}

impl FdObjective {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let mut rand_map = |h, w, d| {
            let data = (0..h * w * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            FeatureMap::from_data(h, w, d, data).unwrap()
        };
        Self {
            image_weights: rand_map(FD_SIZE, FD_SIZE, 3),
            feature_weights: rand_map(FD_TEACHER_SIZE, FD_TEACHER_SIZE, FD_DECODED_DIM),
            background: [0.3, 0.6, 0.1],
        }
    }

    fn settings(&self) -> RenderSettings {
        RenderSettings::with_background(self.background)
    }

    /// `Σ a·I + ½ΣI² + Σ b·F + ½ΣF²`, with `F = resize(decode(features))`.
    pub fn value(&self, cloud: &GaussianCloud, view: &CameraView, dec: &ChannelDecoder) -> f64 {
        let (out, _) = render(cloud, view, &self.settings()).unwrap();
        let decoded = decode(&out.feature_map, dec).unwrap();
        let f = resize_bilinear(&decoded, FD_TEACHER_SIZE, FD_TEACHER_SIZE).unwrap();
        let img: f64 = out
            .image
            .data
            .iter()
            .zip(&self.image_weights.data)
            .map(|(v, a)| a * v + 0.5 * v * v)
            .sum();
        let feat: f64 = f
            .data
            .iter()
            .zip(&self.feature_weights.data)
            .map(|(v, b)| b * v + 0.5 * v * v)
            .sum();
        img + feat
    }

    pub fn gradients(
        &self,
        cloud: &GaussianCloud,
        view: &CameraView,
        dec: &ChannelDecoder,
    ) -> (GradientBuffer, Vec<f64>, Vec<f64>) {
        let (out, state) = render(cloud, view, &self.settings()).unwrap();
        let decoded = decode(&out.feature_map, dec).unwrap();
        let f = resize_bilinear(&decoded, FD_TEACHER_SIZE, FD_TEACHER_SIZE).unwrap();
        let mut g_img = out.image.clone();
        for (g, a) in g_img.data.iter_mut().zip(&self.image_weights.data) {
            *g += a;
        }
        let mut g_f = f.clone();
        for (g, b) in g_f.data.iter_mut().zip(&self.feature_weights.data) {
            *g += b;
        }
        let g_dec = resize_bilinear_backward(&g_f, decoded.height, decoded.width);
        let dg = decode_backward(&g_dec, &out.feature_map, dec).unwrap();
        let grads = render_backward(cloud, &state, &g_img, &dg.input).unwrap();
        (grads, dg.weights, dg.bias)
    }
}

#[derive(Debug, Default)]
pub struct FdReport {
    pub checked: usize,
    pub skipped_small: usize,
    pub worst_rel: f64,
    /// Coordinates that missed at `h` but whose error fell as `h²` and
    /// whose Richardson estimate from `h` and `h/2` is within tolerance.
    pub richardson: usize,
    pub failures: Vec<String>,
}

impl FdReport {
    pub fn merge(&mut self, other: FdReport) {
        self.checked += other.checked;
        self.skipped_small += other.skipped_small;
        self.worst_rel = self.worst_rel.max(other.worst_rel);
        self.richardson += other.richardson;
        self.failures.extend(other.failures);
    }
}

pub fn compare(report: &mut FdReport, label: String, analytic: f64, fd: f64, rel_tol: f64) {
    if analytic.abs() <= 1e-6 {
        report.skipped_small += 1;
        return;
    }
    report.checked += 1;
    let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs());
    report.worst_rel = report.worst_rel.max(rel);
    if rel >= rel_tol {
        report.failures.push(format!("{label}: analytic {analytic:.6e} fd {fd:.6e} rel {rel:.2e}"));
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Slot {
    Position(usize, usize),
    Rotation(usize, usize),
    LogScale(usize, usize),
    Opacity(usize),
    Color(usize, usize),
    Feature(usize),
    Weight(usize),
    Bias(usize),
}

fn slot_mut<'a>(c: &'a mut GaussianCloud, d: &'a mut ChannelDecoder, s: Slot) -> &'a mut f32 {
    match s {
        Slot::Position(i, k) => &mut c.positions[i][k],
        Slot::Rotation(i, k) => &mut c.rotations[i][k],
        Slot::LogScale(i, k) => &mut c.log_scales[i][k],
        Slot::Opacity(i) => &mut c.opacity_logits[i],
        Slot::Color(i, k) => &mut c.colors[i][k],
        Slot::Feature(j) => &mut c.features[j],
        Slot::Weight(j) => &mut d.weights[j],
        Slot::Bias(j) => &mut d.bias[j],
    }
}

/// Central difference on an f32 slot, dividing by the step actually
/// realized after rounding to f32.
pub fn central_diff(
    slot: Slot,
    cloud: &GaussianCloud,
    dec: &ChannelDecoder,
    h: f64,
    eval: &impl Fn(&GaussianCloud, &ChannelDecoder) -> f64,
) -> f64 {
    let (mut cp, mut dp) = (cloud.clone(), dec.clone());
    let (mut cm, mut dm) = (cloud.clone(), dec.clone());
    let base = *slot_mut(&mut cp, &mut dp, slot) as f64;
    let plus = (base + h) as f32;
    let minus = (base - h) as f32;
    *slot_mut(&mut cp, &mut dp, slot) = plus;
    *slot_mut(&mut cm, &mut dm, slot) = minus;
    (eval(&cp, &dp) - eval(&cm, &dm)) / (plus as f64 - minus as f64)
}

/// Checks every analytic gradient of [`FdObjective`] against central
/// differences with step `h`.
pub fn check_scene(seed: u64, h: f64, rel_tol: f64) -> FdReport {
    let (cloud, view, dec) = fd_scene(seed);
    let obj = FdObjective::new(seed);
    let (g, gw, gb) = obj.gradients(&cloud, &view, &dec);
    let eval = |c: &GaussianCloud, d: &ChannelDecoder| obj.value(c, &view, d);
    let mut report = FdReport::default();
    let n = cloud.feature_dim();
    let mut check = |slot: Slot, analytic: f64| {
        let fd = central_diff(slot, &cloud, &dec, h, &eval);
        let rel = |v: f64| (analytic - v).abs() / analytic.abs().max(v.abs());
        if analytic.abs() > 1e-6 && rel(fd) >= rel_tol {
            // Central differences carry an O(h²) truncation term. If halving
            // the step cuts the error about fourfold, that term dominates and
            // Richardson extrapolation removes it.
            let half = central_diff(slot, &cloud, &dec, h / 2.0, &eval);
            let ratio = (fd - analytic) / (half - analytic);
            let extrapolated = (4.0 * half - fd) / 3.0;
            if (3.0..5.0).contains(&ratio) && rel(extrapolated) < rel_tol {
                report.richardson += 1;
                compare(&mut report, format!("seed {seed} {slot:?} (richardson)"), analytic, extrapolated, rel_tol);
                return;
            }
        }
        compare(&mut report, format!("seed {seed} {slot:?}"), analytic, fd, rel_tol);
    };
    for i in 0..cloud.len() {
        for k in 0..3 {
            check(Slot::Position(i, k), g.position[i][k]);
            check(Slot::LogScale(i, k), g.log_scale[i][k]);
            check(Slot::Color(i, k), g.color[i][k]);
        }
        for k in 0..4 {
            check(Slot::Rotation(i, k), g.rotation[i][k]);
        }
        check(Slot::Opacity(i), g.opacity_logit[i]);
        for k in 0..n {
            check(Slot::Feature(i * n + k), g.feature[i * n + k]);
        }
    }
    for k in 0..dec.weights.len() {
        check(Slot::Weight(k), gw[k]);
    }
    for k in 0..dec.bias.len() {
        check(Slot::Bias(k), gb[k]);
    }
    report
}

/// Projection as a function of raw parameters, mirroring what the
/// renderer does before `project`.
fn forward(pos: [f64; 3], quat: [f64; 4], log_scale: [f64; 3], view: &CameraView) -> (Vector2<f64>, Matrix2<f64>) {
    let norm = quat.iter().map(|v| v * v).sum::<f64>().sqrt();
    let q = quat.map(|v| v / norm);
    let cov = build_covariance(q, log_scale.map(f64::exp));
    let (p, _) = project(&cov, Vector3::from(pos), view).expect("visible");
    (p.mean2d, p.cov2d)
}

pub fn projection_case(seed: u64, report: &mut FdReport) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let view = CameraView::orbit(rng.random_range(0.0..6.0), rng.random_range(-1.0..1.0), 4.0, 64, 48).unwrap();
    let pos = [0; 3].map(|_| rng.random_range(-0.8..0.8));
    let quat = [0; 4].map(|_| rng.random_range(-1.0..1.0));
    let log_scale = [0; 3].map(|_| rng.random_range(-2.5f64..-0.5));
    let g_mean = Vector2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let g_off = rng.random_range(-1.0..1.0);
    let g_cov = Matrix2::new(rng.random_range(-1.0..1.0), g_off, g_off, rng.random_range(-1.0..1.0));
    let objective = |p: [f64; 3], q: [f64; 4], s: [f64; 3]| {
        let (m, c) = forward(p, q, s, &view);
        g_mean.dot(&m) + g_cov.component_mul(&c).sum()
    };

    let norm = quat.iter().map(|v| v * v).sum::<f64>().sqrt();
    let unit = quat.map(|v| v / norm);
    let scale = log_scale.map(f64::exp);
    let cov3d = build_covariance(unit, scale);
    let (_, cam_point) = project(&cov3d, Vector3::from(pos), &view).unwrap();
    let record = ProjectionRecord {
        cam_point,
        cov3d,
        unit_quat: unit,
        quat_norm: norm,
        scale,
    };
    let g = project_backward(g_mean, &g_cov, &record, &view);

    let h = 1e-4;
    for k in 0..3 {
        let (mut a, mut b) = (pos, pos);
        a[k] += h;
        b[k] -= h;
        let fd = (objective(a, quat, log_scale) - objective(b, quat, log_scale)) / (2.0 * h);
        compare(report, format!("seed {seed} position[{k}]"), g.position[k], fd, 1e-3);
        let (mut a, mut b) = (log_scale, log_scale);
        a[k] += h;
        b[k] -= h;
        let fd = (objective(pos, quat, a) - objective(pos, quat, b)) / (2.0 * h);
        compare(report, format!("seed {seed} log_scale[{k}]"), g.log_scale[k], fd, 1e-3);
    }
    for k in 0..4 {
        let (mut a, mut b) = (quat, quat);
        a[k] += h;
        b[k] -= h;
        let fd = (objective(pos, a, log_scale) - objective(pos, b, log_scale)) / (2.0 * h);
        compare(report, format!("seed {seed} rotation[{k}]"), g.rotation[k], fd, 1e-3);
    }
}
