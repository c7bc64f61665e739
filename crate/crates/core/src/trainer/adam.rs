//! Adam with per-attribute moment buffers that follow the cloud through
//! pruning and densification.

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moments for one parameter group, `width` scalars per
/// row (one row per Gaussian, or a single row for decoder tensors).
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    width: usize,
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

impl Moments {
    pub fn zeros(rows: usize, width: usize) -> Self {
        Self {
            width,
            first: vec![0.0; rows * width],
            second: vec![0.0; rows * width],
        }
    }

    pub fn rows(&self) -> usize {
        if self.width == 0 {
            0
        } else {
            self.first.len() / self.width
        }
    }

    pub fn row(&self, i: usize) -> (&[f64], &[f64]) {
        let r = i * self.width..(i + 1) * self.width;
        (&self.first[r.clone()], &self.second[r])
    }

    /// One Adam step on `params` in place. `step` is the 1-based count
    /// used for bias correction.
    pub fn update(&mut self, params: &mut [f32], grads: &[f64], lr: f64, step: u64) {
        assert_eq!(params.len(), self.first.len());
        assert_eq!(grads.len(), self.first.len());
        let bc1 = 1.0 - BETA1.powi(step as i32);
        let bc2 = 1.0 - BETA2.powi(step as i32);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            let update = lr * (*m / bc1) / ((*v / bc2).sqrt() + EPSILON);
            if update != 0.0 {
                *p = (*p as f64 - update) as f32;
            }
        }
    }

    pub fn retain_rows(&mut self, keep: &[bool]) {
        let w = self.width;
        let mut dst = 0;
        for (src, &k) in keep.iter().enumerate() {
            if k {
                if dst != src {
                    self.first.copy_within(src * w..(src + 1) * w, dst * w);
                    self.second.copy_within(src * w..(src + 1) * w, dst * w);
                }
                dst += 1;
            }
        }
        self.first.truncate(dst * w);
        self.second.truncate(dst * w);
    }

    pub fn push_zero_rows(&mut self, count: usize) {
        self.first.resize(self.first.len() + count * self.width, 0.0);
        self.second.resize(self.second.len() + count * self.width, 0.0);
    }
}

/// Optimizer state for every trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub position: Moments,
    pub rotation: Moments,
    pub log_scale: Moments,
    pub opacity: Moments,
    pub color: Moments,
    pub feature: Moments,
    pub decoder_weights: Moments,
    pub decoder_bias: Moments,
}

impl AdamState {
    pub fn new(num_gaussians: usize, feature_dim: usize, decoder_shape: Option<(usize, usize)>) -> Self {
        let (m, n) = decoder_shape.unwrap_or((0, 0));
        Self {
            step: 0,
            position: Moments::zeros(num_gaussians, 3),
            rotation: Moments::zeros(num_gaussians, 4),
            log_scale: Moments::zeros(num_gaussians, 3),
            opacity: Moments::zeros(num_gaussians, 1),
            color: Moments::zeros(num_gaussians, 3),
            feature: Moments::zeros(num_gaussians, feature_dim),
            decoder_weights: Moments::zeros(1, m * n),
            decoder_bias: Moments::zeros(1, m),
        }
    }

    pub fn num_gaussians(&self) -> usize {
        self.position.rows()
    }

    fn per_gaussian(&mut self) -> [&mut Moments; 6] {
        [
            &mut self.position,
            &mut self.rotation,
            &mut self.log_scale,
            &mut self.opacity,
            &mut self.color,
            &mut self.feature,
        ]
    }

    pub fn retain_gaussians(&mut self, keep: &[bool]) {
        for m in self.per_gaussian() {
            m.retain_rows(keep);
        }
    }

    pub fn push_zero_gaussians(&mut self, count: usize) {
        for m in self.per_gaussian() {
            m.push_zero_rows(count);
        }
    }
}
