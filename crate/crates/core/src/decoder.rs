//! Speed-up decoder: a learnable 1×1 channel map lifting rendered N-dim
//! features to the teacher's M dims, plus the bilinear resize that brings
//! rendered maps to teacher resolution. Both come with exact backward
//! passes.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

/// Per-pixel affine map `out = W·in + b`, `W` is `M × N` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelDecoder {
    in_dim: usize,
    out_dim: usize,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ChannelDecoder {
    pub fn from_parts(in_dim: usize, out_dim: usize, weights: Vec<f32>, bias: Vec<f32>) -> Result<Self> {
        if weights.len() != in_dim * out_dim {
            return Err(Error::DimensionMismatch {
                what: "decoder weights",
                expected: in_dim * out_dim,
                got: weights.len(),
            });
        }
        if bias.len() != out_dim {
            return Err(Error::DimensionMismatch {
                what: "decoder bias",
                expected: out_dim,
                got: bias.len(),
            });
        }
        Ok(Self {
            in_dim,
            out_dim,
            weights,
            bias,
        })
    }

    /// Weights drawn from `normal(0, 1/N)`, zero bias.
    pub fn new_random(in_dim: usize, out_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 1.0 / (in_dim as f64).sqrt();
        let weights = (0..in_dim * out_dim)
            .map(|_| (std * rng.sample::<f64, _>(StandardNormal)) as f32)
            .collect();
        Self {
            in_dim,
            out_dim,
            weights,
            bias: vec![0.0; out_dim],
        }
    }

    /// Columns of `W` set to the leading eigenvectors of the uncentered
    /// second moment of the teacher features (every `stride`-th pixel),
    /// zero bias. The decoder's range then starts on the teacher's
    /// dominant subspace instead of a random one. Columns beyond the
    /// teacher dimension are zero.
    pub fn from_principal_directions(in_dim: usize, maps: &[&FeatureMap], stride: usize) -> Result<Self> {
        let out_dim = maps.first().map(|m| m.dim).ok_or_else(|| {
            Error::DegenerateFeatureMap("no teacher maps to initialize the decoder from".into())
        })?;
        let mut moment = DMatrix::<f64>::zeros(out_dim, out_dim);
        let mut count = 0usize;
        for m in maps {
            if m.dim != out_dim {
                return Err(Error::DimensionMismatch {
                    what: "teacher feature dimension",
                    expected: out_dim,
                    got: m.dim,
                });
            }
            for f in m.data.chunks_exact(out_dim).step_by(stride.max(1)) {
                let v = DVector::from_column_slice(f);
                moment.syger(1.0, &v, &v, 1.0);
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::DegenerateFeatureMap("teacher maps are empty".into()));
        }
        let eig = SymmetricEigen::new(moment / count as f64);
        let mut order: Vec<usize> = (0..out_dim).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let mut weights = vec![0.0f32; out_dim * in_dim];
        for (col, &k) in order.iter().take(in_dim).enumerate() {
            let v = eig.eigenvectors.column(k);
            // fix the sign so the largest entry is positive
            let lead = v.iter().copied().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
            let sign = if lead < 0.0 { -1.0 } else { 1.0 };
            for row in 0..out_dim {
                weights[row * in_dim + col] = (sign * v[row]) as f32;
            }
        }
        Self::from_parts(in_dim, out_dim, weights, vec![0.0; out_dim])
    }

    pub fn identity(dim: usize) -> Self {
        let mut weights = vec![0.0; dim * dim];
        for i in 0..dim {
            weights[i * dim + i] = 1.0;
        }
        Self {
            in_dim: dim,
            out_dim: dim,
            weights,
            bias: vec![0.0; dim],
        }
    }

    #[inline]
    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    #[inline]
    pub fn weight(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.in_dim + col] as f64
    }

    /// Maps one feature vector.
    pub fn apply(&self, input: &[f64], out: &mut [f64]) {
        debug_assert_eq!(input.len(), self.in_dim);
        debug_assert_eq!(out.len(), self.out_dim);
        for (m, o) in out.iter_mut().enumerate() {
            let row = &self.weights[m * self.in_dim..(m + 1) * self.in_dim];
            *o = self.bias[m] as f64 + row.iter().zip(input).map(|(&w, &x)| w as f64 * x).sum::<f64>();
        }
    }

    pub fn apply_vec(&self, input: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.out_dim];
        self.apply(input, &mut out);
        out
    }
}

/// `out = W·in + b` at every pixel; no spatial mixing.
pub fn decode(map: &FeatureMap, dec: &ChannelDecoder) -> Result<FeatureMap> {
    if map.dim != dec.in_dim {
        return Err(Error::DimensionMismatch {
            what: "feature map channels vs decoder input",
            expected: dec.in_dim,
            got: map.dim,
        });
    }
    let (n, m) = (dec.in_dim, dec.out_dim);
    let mut out = FeatureMap::zeros(map.height, map.width, m);
    for p in 0..map.num_pixels() {
        dec.apply(&map.data[p * n..(p + 1) * n], &mut out.data[p * m..(p + 1) * m]);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderGrads {
    /// `M × N` row-major, matching [`ChannelDecoder::weights`].
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub input: FeatureMap,
}

/// `dL/dW = Σ upstream ⊗ input`, `dL/db = Σ upstream`,
/// `dL/din = Wᵀ upstream` per pixel.
pub fn decode_backward(upstream: &FeatureMap, input: &FeatureMap, dec: &ChannelDecoder) -> Result<DecoderGrads> {
    let (n, m) = (dec.in_dim, dec.out_dim);
    if upstream.dim != m || input.dim != n || upstream.height != input.height || upstream.width != input.width {
        return Err(Error::ShapeMismatch(format!(
            "decoder backward: upstream {}x{}x{}, input {}x{}x{}, decoder {n}->{m}",
            upstream.height, upstream.width, upstream.dim, input.height, input.width, input.dim
        )));
    }
    let mut gw = vec![0.0; m * n];
    let mut gb = vec![0.0; m];
    let mut gin = FeatureMap::zeros(input.height, input.width, n);
    for p in 0..input.num_pixels() {
        let up = &upstream.data[p * m..(p + 1) * m];
        let x = &input.data[p * n..(p + 1) * n];
        let gx = &mut gin.data[p * n..(p + 1) * n];
        for r in 0..m {
            let u = up[r];
            if u == 0.0 {
                continue;
            }
            gb[r] += u;
            let row = &dec.weights[r * n..(r + 1) * n];
            let grow = &mut gw[r * n..(r + 1) * n];
            for c in 0..n {
                grow[c] += u * x[c];
                gx[c] += row[c] as f64 * u;
            }
        }
    }
    Ok(DecoderGrads {
        weights: gw,
        bias: gb,
        input: gin,
    })
}

/// Source coordinate and the two taps for one output index, with corner
/// pixel centers mapped onto corner pixel centers.
fn taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|i| {
            if in_len == 1 || out_len == 1 {
                return (0, 0, 0.0);
            }
            let s = i as f64 * (in_len - 1) as f64 / (out_len - 1) as f64;
            let i0 = (s.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

pub fn resize_bilinear(map: &FeatureMap, height: usize, width: usize) -> Result<FeatureMap> {
    if height == 0 || width == 0 {
        return Err(Error::ShapeMismatch("resize target must be positive".into()));
    }
    if height == map.height && width == map.width {
        return Ok(map.clone());
    }
    let ty = taps(height, map.height);
    let tx = taps(width, map.width);
    let mut out = FeatureMap::zeros(height, width, map.dim);
    for (y, &(y0, y1, wy)) in ty.iter().enumerate() {
        for (x, &(x0, x1, wx)) in tx.iter().enumerate() {
            let (a, b, c, d) = (map.pixel(y0, x0), map.pixel(y0, x1), map.pixel(y1, x0), map.pixel(y1, x1));
            let dst = out.pixel_mut(y, x);
            for k in 0..map.dim {
                // lerp form keeps constant maps exact
                let top = a[k] + (b[k] - a[k]) * wx;
                let bot = c[k] + (d[k] - c[k]) * wx;
                dst[k] = top + (bot - top) * wy;
            }
        }
    }
    Ok(out)
}

/// Transpose of [`resize_bilinear`]: scatters `upstream` back onto an
/// `in_height × in_width` grid with the same weights.
pub fn resize_bilinear_backward(upstream: &FeatureMap, in_height: usize, in_width: usize) -> FeatureMap {
    if upstream.height == in_height && upstream.width == in_width {
        return upstream.clone();
    }
    let ty = taps(upstream.height, in_height);
    let tx = taps(upstream.width, in_width);
    let mut out = FeatureMap::zeros(in_height, in_width, upstream.dim);
    for (y, &(y0, y1, wy)) in ty.iter().enumerate() {
        for (x, &(x0, x1, wx)) in tx.iter().enumerate() {
            let g = upstream.pixel(y, x).to_vec();
            let weights = [
                (y0, x0, (1.0 - wy) * (1.0 - wx)),
                (y0, x1, (1.0 - wy) * wx),
                (y1, x0, wy * (1.0 - wx)),
                (y1, x1, wy * wx),
            ];
            for (sy, sx, w) in weights {
                if w == 0.0 {
                    continue;
                }
                let dst = out.pixel_mut(sy, sx);
                for k in 0..g.len() {
                    dst[k] += w * g[k];
                }
            }
        }
    }
    out
}
