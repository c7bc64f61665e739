//! Synthetic ground truth with known semantics.
//!
//! An oracle scene is a handful of colored Gaussian blobs whose features
//! are exactly the embedding of their class. Rendering it with the
//! reference compositor below yields RGB images, teacher feature maps and
//! class-id maps, so distillation and editing can be scored exactly.
//!
//! [`reference_render`] is a plain per-pixel loop over every Gaussian. It
//! re-derives the projection on its own and shares no code with the tiled
//! rasterizer, so the two can check each other.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::camera::{parse_manifest, write_manifest, CameraView};
use crate::error::{Error, Result};
use crate::scene::{logit, Gaussian, GaussianCloud};
use crate::tensor::{encode_gray_png, load_gray_png, write_atomic, FeatureMap};
use crate::trainer::TrainView;
use crate::decoder::ChannelDecoder;
use crate::loss::psnr;
use crate::session::render_products;
use crate::viz::{miou, segment_features, MiouReport};

pub const BACKGROUND_LABEL: &str = "background";
pub const RIG_VIEWS: usize = 20;
pub const RIG_RESOLUTION: usize = 64;
pub const RIG_ELEVATION_DEG: f64 = 30.0;
pub const RIG_RADIUS: f64 = 3.0;
/// Distance of the blob centers from the origin.
pub const RING_RADIUS: f64 = 0.6;
/// Standard deviation of member positions around a blob center.
pub const BLOB_SPREAD: f64 = 0.1;

/// Class names and their embeddings. Entry 0 is the background.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub labels: Vec<String>,
    pub embeddings: Vec<Vec<f32>>,
    pub background: usize,
}

/// `classA`, `classB`, ... then `class26`, `class27`, ...
pub fn class_name(k: usize) -> String {
    if k < 26 {
        format!("class{}", (b'A' + k as u8) as char)
    } else {
        format!("class{k}")
    }
}

impl Codebook {
    /// Background plus `num_classes` classes with mutually orthonormal
    /// random embeddings (Gram-Schmidt on Gaussian draws).
    pub fn orthonormal(num_classes: usize, dim: usize, seed: u64) -> Result<Self> {
        let count = num_classes + 1;
        if dim < count {
            return Err(Error::InvalidConfig(format!(
                "embedding dimension {dim} cannot hold {count} orthogonal entries"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
        while basis.len() < count {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            for _ in 0..2 {
                for b in &basis {
                    let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                    v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
                }
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-6 {
                basis.push(v.into_iter().map(|x| x / n).collect());
            }
        }
        let labels = std::iter::once(BACKGROUND_LABEL.to_string())
            .chain((0..num_classes).map(class_name))
            .collect();
        Ok(Self {
            labels,
            embeddings: basis.into_iter().map(|v| v.into_iter().map(|x| x as f32).collect()).collect(),
            background: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.first().map_or(0, Vec::len)
    }

    pub fn embedding(&self, i: usize) -> Vec<f64> {
        self.embeddings[i].iter().map(|&v| v as f64).collect()
    }

    pub fn index_of(&self, label: &str) -> Result<usize> {
        self.labels.iter().position(|l| l == label).ok_or_else(|| Error::UnknownLabel {
            label: label.to_string(),
            known: self.labels.join(", "),
        })
    }

    /// Labels other than the background.
    pub fn class_labels(&self) -> Vec<&str> {
        self.labels
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != self.background)
            .map(|(_, l)| l.as_str())
            .collect()
    }

    /// Argmax of cosine similarity against every entry; ties (including
    /// the all-zero scores of a zero feature) go to the lowest index.
    pub fn classify(&self, feature: &[f64]) -> usize {
        let fn_ = feature.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut best = (0, f64::NEG_INFINITY);
        for (j, e) in self.embeddings.iter().enumerate() {
            let en = e.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            let dot: f64 = feature.iter().zip(e).map(|(a, &b)| a * b as f64).sum();
            let cos = if fn_ > 0.0 && en > 0.0 { dot / (fn_ * en) } else { 0.0 };
            if cos > best.1 {
                best = (j, cos);
            }
        }
        best.0
    }

    /// One line per entry: the label followed by its embedding.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (l, e) in self.labels.iter().zip(&self.embeddings) {
            out.push_str(l);
            for v in e {
                out.push(' ');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }

    /// Parses [`to_text`](Self::to_text) output. The first line is the
    /// background.
    pub fn parse(text: &str) -> Result<Self> {
        let mut labels = Vec::new();
        let mut embeddings: Vec<Vec<f32>> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(label) = parts.next() else { continue };
            let values = parts
                .map(|p| p.parse::<f32>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse {
                    line: i + 1,
                    reason: e.to_string(),
                })?;
            if let Some(first) = embeddings.first() {
                if first.len() != values.len() {
                    return Err(Error::Parse {
                        line: i + 1,
                        reason: format!("expected {} values, got {}", first.len(), values.len()),
                    });
                }
            }
            if labels.iter().any(|l| l == label) {
                return Err(Error::Parse {
                    line: i + 1,
                    reason: format!("duplicate label {label:?}"),
                });
            }
            labels.push(label.to_string());
            embeddings.push(values);
        }
        if labels.len() < 2 {
            return Err(Error::LabelSetTooSmall(labels.len()));
        }
        Ok(Self {
            labels,
            embeddings,
            background: 0,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// Ground-truth cloud with per-Gaussian class, its codebook and the
/// camera rig.
#[derive(Debug, Clone)]
pub struct OracleScene {
    pub cloud: GaussianCloud,
    /// Codebook index of each Gaussian's class (never the background).
    pub class_ids: Vec<usize>,
    pub codebook: Codebook,
    pub views: Vec<CameraView>,
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Orbit rig at fixed elevation looking at the origin.
pub fn orbit_rig(count: usize, resolution: usize) -> Result<Vec<CameraView>> {
    let phi = RIG_ELEVATION_DEG.to_radians();
    (0..count)
        .map(|i| CameraView::orbit(TAU * i as f64 / count as f64, phi, RIG_RADIUS, resolution, resolution))
        .collect()
}

/// Views reserved for evaluation.
pub fn is_held_out(index: usize) -> bool {
    index % 5 == 2
}

/// `num_classes` blobs on a ring, each with its own hue, features set to
/// the class embedding, seen by a 20-view orbit rig at 64×64.
pub fn make_oracle_scene(num_classes: usize, per_class: usize, dim: usize, seed: u64) -> Result<OracleScene> {
    if num_classes < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 classes, got {num_classes}")));
    }
    if dim < 4 * num_classes {
        return Err(Error::InvalidConfig(format!(
            "embedding dimension {dim} is below 4 x {num_classes} classes"
        )));
    }
    if per_class == 0 {
        return Err(Error::EmptyCloud);
    }
    let codebook = Codebook::orthonormal(num_classes, dim, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(17));
    let phase: f64 = rng.random_range(0.0..TAU);
    let spread = Normal::new(0.0, BLOB_SPREAD).expect("positive spread");
    let mut gaussians = Vec::with_capacity(num_classes * per_class);
    let mut class_ids = Vec::with_capacity(num_classes * per_class);
    for k in 0..num_classes {
        let angle = phase + TAU * k as f64 / num_classes as f64;
        let center = [RING_RADIUS * angle.cos(), RING_RADIUS * angle.sin(), 0.0];
        let base = hsv_to_rgb(k as f64 / num_classes as f64, 0.75, 0.9);
        let feature = codebook.embeddings[k + 1].clone();
        for _ in 0..per_class {
            let rotation = random_unit_quat(&mut rng);
            let position = center.map(|c| (c + spread.sample(&mut rng)) as f32);
            gaussians.push(Gaussian {
                position,
                rotation,
                log_scale: [0; 3].map(|_| rng.random_range(0.03f64..0.06).ln() as f32),
                opacity_logit: logit(rng.random_range(0.8..0.95)) as f32,
                color: base.map(|c| (c + rng.random_range(-0.04..0.04)).clamp(0.0, 1.0) as f32),
                feature: feature.clone(),
            });
            class_ids.push(k + 1);
        }
    }
    let cloud = GaussianCloud::from_gaussians(dim, gaussians)?;
    Ok(OracleScene {
        cloud,
        class_ids,
        codebook,
        views: orbit_rig(RIG_VIEWS, RIG_RESOLUTION)?,
    })
}

fn random_unit_quat(rng: &mut impl Rng) -> [f32; 4] {
    // Uniform rotation (Shoemake).
    let (u1, u2, u3): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
    let a = (1.0 - u1).sqrt();
    let b = u1.sqrt();
    let q = [
        a * (TAU * u2).sin(),
        a * (TAU * u2).cos(),
        b * (TAU * u3).sin(),
        b * (TAU * u3).cos(),
    ];
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    q.map(|v| (v / n) as f32)
}

/// Output of [`reference_render`].
#[derive(Debug, Clone)]
pub struct ReferenceRender {
    pub image: FeatureMap,
    pub feature: FeatureMap,
    pub transmittance: Vec<f64>,
}

struct Splat {
    mean: [f64; 2],
    // inverse 2D covariance as (a, b, c) of [[a, b], [b, c]]
    conic: [f64; 3],
    radius: f64,
    depth: f64,
    opacity: f64,
    index: usize,
}

fn splat(cloud: &GaussianCloud, i: usize, view: &CameraView) -> Option<Splat> {
    let m = &view.world_to_camera;
    let p = cloud.positions[i].map(f64::from);
    let cam: [f64; 3] = std::array::from_fn(|r| m[(r, 0)] * p[0] + m[(r, 1)] * p[1] + m[(r, 2)] * p[2] + m[(r, 3)]);
    let [x, y, z] = cam;
    if z <= 0.01 {
        return None;
    }

    // Σ = (R S)(R S)ᵀ from the normalized quaternion.
    let q = cloud.rotations[i].map(f64::from);
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, qx, qy, qz) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    let rot = [
        [1.0 - 2.0 * (qy * qy + qz * qz), 2.0 * (qx * qy - w * qz), 2.0 * (qx * qz + w * qy)],
        [2.0 * (qx * qy + w * qz), 1.0 - 2.0 * (qx * qx + qz * qz), 2.0 * (qy * qz - w * qx)],
        [2.0 * (qx * qz - w * qy), 2.0 * (qy * qz + w * qx), 1.0 - 2.0 * (qx * qx + qy * qy)],
    ];
    let s = cloud.log_scales[i].map(|v| (v as f64).exp());
    let mut sigma = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            sigma[r][c] = (0..3).map(|k| rot[r][k] * rot[c][k] * s[k] * s[k]).sum();
        }
    }

    // Rows of J·W, with J the perspective Jacobian at the camera point.
    let jw: [[f64; 3]; 2] = std::array::from_fn(|r| {
        let (f, u) = if r == 0 { (view.fx, x) } else { (view.fy, y) };
        std::array::from_fn(|c| f / z * m[(r, c)] - f * u / (z * z) * m[(2, c)])
    });
    let mut cov = [[0.0; 2]; 2];
    for a in 0..2 {
        for b in 0..2 {
            let mut acc = 0.0;
            for r in 0..3 {
                for c in 0..3 {
                    acc += jw[a][r] * sigma[r][c] * jw[b][c];
                }
            }
            cov[a][b] = acc;
        }
    }
    let (ca, cb, cc) = (cov[0][0] + 0.3, 0.5 * (cov[0][1] + cov[1][0]), cov[1][1] + 0.3);
    let det = ca * cc - cb * cb;
    if !(det > 0.0) {
        return None;
    }
    let half_trace = 0.5 * (ca + cc);
    let lambda = half_trace + (half_trace * half_trace - det).max(0.0).sqrt();
    Some(Splat {
        mean: [view.fx * x / z + view.cx, view.fy * y / z + view.cy],
        conic: [cc / det, -cb / det, ca / det],
        radius: (3.0 * lambda.sqrt()).ceil(),
        depth: z,
        opacity: 1.0 / (1.0 + (-(cloud.opacity_logits[i] as f64)).exp()),
        index: i,
    })
}

/// Straightforward front-to-back compositing of every Gaussian at every
/// pixel, with the same contribution rules as the tiled rasterizer: a
/// splat reaches a pixel only when the pixel center lies strictly inside
/// its 3σ radius, opacity is capped at 0.99, contributions under 1/255
/// are skipped and a pixel stops before transmittance would drop below
/// 1e-4. Features composite over zero.
pub fn reference_render(cloud: &GaussianCloud, view: &CameraView, background: [f64; 3]) -> ReferenceRender {
    let mut splats: Vec<Splat> = (0..cloud.len()).filter_map(|i| splat(cloud, i, view)).collect();
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
    let (h, w, n) = (view.height, view.width, cloud.feature_dim());
    let mut image = FeatureMap::zeros(h, w, 3);
    let mut feature = FeatureMap::zeros(h, w, n);
    let mut transmittance = vec![1.0; h * w];
    for py in 0..h {
        for px in 0..w {
            let (u, v) = (px as f64 + 0.5, py as f64 + 0.5);
            let mut t = 1.0;
            let mut rgb = [0.0; 3];
            let f = feature.pixel_mut(py, px);
            for s in &splats {
                let (dx, dy) = (u - s.mean[0], v - s.mean[1]);
                if dx * dx + dy * dy >= s.radius * s.radius {
                    continue;
                }
                let e = -0.5 * (s.conic[0] * dx * dx + 2.0 * s.conic[1] * dx * dy + s.conic[2] * dy * dy);
                if e > 0.0 {
                    continue;
                }
                let alpha = (s.opacity * e.exp()).min(0.99);
                if alpha < 1.0 / 255.0 {
                    continue;
                }
                if t * (1.0 - alpha) < 1e-4 {
                    break;
                }
                let wgt = alpha * t;
                for (acc, &c) in rgb.iter_mut().zip(&cloud.colors[s.index]) {
                    *acc += wgt * c as f64;
                }
                for (acc, &c) in f.iter_mut().zip(cloud.feature(s.index)) {
                    *acc += wgt * c as f64;
                }
                t *= 1.0 - alpha;
            }
            let out = image.pixel_mut(py, px);
            for c in 0..3 {
                out[c] = rgb[c] + t * background[c];
            }
            transmittance[py * w + px] = t;
        }
    }
    ReferenceRender {
        image,
        feature,
        transmittance,
    }
}

/// Ground truth for one view.
#[derive(Debug, Clone)]
pub struct TeacherOutput {
    pub image: FeatureMap,
    /// `H × W × M` composited class embeddings.
    pub feature: FeatureMap,
    /// Codebook index per pixel, row-major.
    pub class_map: Vec<u8>,
    pub transmittance: Vec<f64>,
}

/// Renders the ground-truth cloud over a black background and labels
/// every pixel: background where more than half the light passes through,
/// otherwise the codebook entry closest in angle to the composited
/// feature.
pub fn teacher_render(scene: &OracleScene, view: &CameraView) -> TeacherOutput {
    let r = reference_render(&scene.cloud, view, [0.0; 3]);
    let class_map = (0..r.transmittance.len())
        .map(|i| {
            if r.transmittance[i] > 0.5 {
                scene.codebook.background as u8
            } else {
                let (y, x) = (i / view.width, i % view.width);
                scene.codebook.classify(r.feature.pixel(y, x)) as u8
            }
        })
        .collect();
    TeacherOutput {
        image: r.image,
        feature: r.feature,
        class_map,
        transmittance: r.transmittance,
    }
}

/// Adds i.i.d. Gaussian noise to an image and clamps to `[0, 1]`.
pub fn add_pixel_noise(image: &mut FeatureMap, sigma: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma).expect("non-negative sigma");
    for v in &mut image.data {
        *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
    }
}

/// Rendered ground truth for every view of a rig.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub views: Vec<CameraView>,
    pub images: Vec<FeatureMap>,
    pub features: Vec<FeatureMap>,
    pub class_maps: Vec<Vec<u8>>,
    pub codebook: Codebook,
}

impl Dataset {
    pub fn from_scene(scene: &OracleScene, noise: Option<(f64, u64)>) -> Self {
        let mut ds = Dataset {
            views: scene.views.clone(),
            images: Vec::new(),
            features: Vec::new(),
            class_maps: Vec::new(),
            codebook: scene.codebook.clone(),
        };
        for (i, v) in scene.views.iter().enumerate() {
            let mut t = teacher_render(scene, v);
            if let Some((sigma, seed)) = noise {
                add_pixel_noise(&mut t.image, sigma, seed.wrapping_add(i as u64));
            }
            ds.images.push(t.image);
            ds.features.push(t.feature);
            ds.class_maps.push(t.class_map);
        }
        ds
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    /// Training samples, optionally leaving out the held-out views.
    pub fn train_views(&self, skip_held_out: bool) -> Vec<TrainView> {
        (0..self.len())
            .filter(|&i| !(skip_held_out && is_held_out(i)))
            .map(|i| TrainView {
                view: self.views[i].clone(),
                image: self.images[i].clone(),
                feature: self.features[i].clone(),
            })
            .collect()
    }

    /// Writes `views.txt`, `imgs/`, `feats/`, `classes/` and
    /// `codebook.txt` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        for sub in ["imgs", "feats", "classes"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        write_atomic(&dir.join("views.txt"), write_manifest(&self.views).as_bytes())?;
        self.codebook.save(&dir.join("codebook.txt"))?;
        for i in 0..self.len() {
            self.images[i].save_png(&dir.join(format!("imgs/{i:04}.png")))?;
            self.features[i].save_ftens(&dir.join(format!("feats/{i:04}.ftens")))?;
            let v = &self.views[i];
            let png = encode_gray_png(v.width, v.height, &self.class_maps[i])?;
            write_atomic(&dir.join(format!("classes/{i:04}.png")), &png)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = dir.join("views.txt");
        let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let views = parse_manifest(&text)?;
        let codebook = Codebook::load(&dir.join("codebook.txt"))?;
        let mut ds = Dataset {
            views,
            images: Vec::new(),
            features: Vec::new(),
            class_maps: Vec::new(),
            codebook,
        };
        for (i, v) in ds.views.iter().enumerate() {
            let img = FeatureMap::load_png(&dir.join(format!("imgs/{i:04}.png")))?;
            if img.width != v.width || img.height != v.height {
                return Err(Error::ShapeMismatch(format!(
                    "image {i} is {}x{}, view says {}x{}",
                    img.width, img.height, v.width, v.height
                )));
            }
            let feat = FeatureMap::load_ftens(&dir.join(format!("feats/{i:04}.ftens")))?;
            if feat.dim != ds.codebook.dim() {
                return Err(Error::DimensionMismatch {
                    what: "teacher feature vs codebook dimension",
                    expected: ds.codebook.dim(),
                    got: feat.dim,
                });
            }
            let class_path = dir.join(format!("classes/{i:04}.png"));
            let classes = if class_path.exists() {
                load_gray_png(&class_path)?.2
            } else {
                Vec::new()
            };
            ds.images.push(img);
            ds.features.push(feat);
            ds.class_maps.push(classes);
        }
        Ok(ds)
    }
}

/// Mean PSNR and pooled mIoU of a model over some views of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub views: Vec<usize>,
    pub psnr: Vec<f64>,
    pub mean_psnr: f64,
    pub miou: MiouReport,
}

impl Dataset {
    /// Renders `views` (indices), compares RGB against the ground-truth
    /// images and the segmentation of the decoded features against the
    /// ground-truth class maps.
    pub fn evaluate(
        &self,
        cloud: &GaussianCloud,
        decoder: Option<&ChannelDecoder>,
        views: &[usize],
        background: [f64; 3],
    ) -> Result<Evaluation> {
        if views.is_empty() {
            return Err(Error::InvalidConfig("nothing to evaluate".into()));
        }
        let mut psnrs = Vec::with_capacity(views.len());
        let mut pred = Vec::new();
        let mut gt = Vec::new();
        for &i in views {
            if i >= self.len() {
                return Err(Error::InvalidConfig(format!("view {i} out of range {}", self.len())));
            }
            let products = render_products(cloud, decoder, &self.views[i], background)?;
            psnrs.push(psnr(&products.output.image, &self.images[i])?);
            if !self.class_maps[i].is_empty() {
                pred.extend(segment_features(&products.features, &self.codebook)?);
                gt.extend_from_slice(&self.class_maps[i]);
            }
        }
        let miou = miou(&pred, &gt, self.codebook.len())?;
        let mean_psnr = psnrs.iter().sum::<f64>() / psnrs.len() as f64;
        Ok(Evaluation {
            views: views.to_vec(),
            psnr: psnrs,
            mean_psnr,
            miou,
        })
    }

    /// Indices of the held-out views.
    pub fn held_out(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| is_held_out(i)).collect()
    }
}
