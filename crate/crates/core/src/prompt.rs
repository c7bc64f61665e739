//! Prompt-driven selection and editing of Gaussians.
//!
//! Every Gaussian's feature (decoded to the teacher space when a decoder
//! exists) is compared with a set of query vectors by cosine similarity,
//! and each row is turned into probabilities with a softmax. Selections
//! threshold a column (soft), take the row argmax (hard) or OR the two
//! (hybrid). Edits return a new cloud: extract and delete zero opacities
//! through a `-inf` logit sentinel, recolor maps the selected colors.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::CameraView;
use crate::decoder::{decode, ChannelDecoder};
use crate::error::{Error, Result};
use crate::oracle::Codebook;
use crate::raster::{render, RenderSettings};
use crate::scene::GaussianCloud;

/// Default probability threshold for soft and hybrid selection.
pub const DEFAULT_THRESHOLD: f64 = 0.5;
/// Label of the complement query added next to explicit targets.
pub const OTHERS_LABEL: &str = "others";
/// Edit-script keyword standing for every codebook label.
pub const ALL_LABELS: &str = "all-labels";

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = norm(v);
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        v.to_vec()
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Resolved query vectors with their labels. `targets` are the columns a
/// prompt asks for; any remaining column is context for the softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    pub labels: Vec<String>,
    pub queries: Vec<Vec<f64>>,
    pub targets: Vec<usize>,
}

impl QuerySet {
    /// Codebook labels as targets, plus one complement query (the
    /// normalized sum of every codebook entry not asked for) unless the
    /// request already covers the whole codebook.
    pub fn from_labels(codebook: &Codebook, labels: &[String]) -> Result<Self> {
        let mut wanted = Vec::new();
        for l in labels {
            if l == ALL_LABELS {
                wanted.extend(0..codebook.len());
            } else {
                wanted.push(codebook.index_of(l)?);
            }
        }
        wanted.sort_unstable();
        wanted.dedup();
        let mut set = QuerySet {
            labels: wanted.iter().map(|&i| codebook.labels[i].clone()).collect(),
            queries: wanted.iter().map(|&i| codebook.embedding(i)).collect(),
            targets: (0..wanted.len()).collect(),
        };
        let rest: Vec<usize> = (0..codebook.len()).filter(|i| !wanted.contains(i)).collect();
        if !rest.is_empty() {
            let mut sum = vec![0.0; codebook.dim()];
            for &i in &rest {
                for (s, v) in sum.iter_mut().zip(codebook.embedding(i)) {
                    *s += v;
                }
            }
            set.labels.push(OTHERS_LABEL.into());
            set.queries.push(normalized(&sum));
        }
        Ok(set)
    }

    /// One free query vector against a complement: with a codebook, the
    /// normalized sum of every entry except the one the query is closest
    /// to; without one, the negated query.
    pub fn from_vector(query: Vec<f64>, codebook: Option<&Codebook>) -> Self {
        let q = normalized(&query);
        let others = match codebook {
            Some(cb) => {
                let nearest = cb.classify(&q);
                let mut sum = vec![0.0; q.len()];
                for i in (0..cb.len()).filter(|&i| i != nearest) {
                    for (s, v) in sum.iter_mut().zip(cb.embedding(i)) {
                        *s += v;
                    }
                }
                normalized(&sum)
            }
            None => q.iter().map(|v| -v).collect(),
        };
        QuerySet {
            labels: vec!["query".into(), OTHERS_LABEL.into()],
            queries: vec![q, others],
            targets: vec![0],
        }
    }
}

/// What a user points at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Text(String),
    Labels(Vec<String>),
    Point { x: usize, y: usize },
    Box { x0: usize, y0: usize, x1: usize, y1: usize },
}

/// Decoded (when a decoder exists) rendered feature map of a view.
pub fn query_feature_map(
    cloud: &GaussianCloud,
    decoder: Option<&ChannelDecoder>,
    view: &CameraView,
) -> Result<crate::tensor::FeatureMap> {
    let (out, _) = render(cloud, view, &RenderSettings::default())?;
    match decoder {
        Some(d) => decode(&out.feature_map, d),
        None => Ok(out.feature_map),
    }
}

/// Resolves a prompt to queries. Pixel prompts need the view they were
/// made in; a point reads one pixel, a box (exclusive upper corner)
/// averages its pixels.
pub fn resolve_prompt(
    kind: &PromptKind,
    cloud: &GaussianCloud,
    decoder: Option<&ChannelDecoder>,
    codebook: Option<&Codebook>,
    view: Option<&CameraView>,
) -> Result<QuerySet> {
    let need_codebook = || codebook.ok_or_else(|| Error::InvalidConfig("label prompts need a codebook".into()));
    let need_view = || view.ok_or_else(|| Error::InvalidCamera("pixel prompts need a view".into()));
    match kind {
        PromptKind::Text(label) => QuerySet::from_labels(need_codebook()?, std::slice::from_ref(label)),
        PromptKind::Labels(labels) => QuerySet::from_labels(need_codebook()?, labels),
        PromptKind::Point { x, y } => {
            let view = need_view()?;
            if *x >= view.width || *y >= view.height {
                return Err(Error::InvalidCamera(format!("point ({x}, {y}) outside {}x{}", view.width, view.height)));
            }
            let map = query_feature_map(cloud, decoder, view)?;
            Ok(QuerySet::from_vector(map.pixel(*y, *x).to_vec(), codebook))
        }
        PromptKind::Box { x0, y0, x1, y1 } => {
            let view = need_view()?;
            if x0 >= x1 || y0 >= y1 || *x1 > view.width || *y1 > view.height {
                return Err(Error::InvalidCamera(format!(
                    "box ({x0}, {y0})-({x1}, {y1}) empty or outside {}x{}",
                    view.width, view.height
                )));
            }
            let map = query_feature_map(cloud, decoder, view)?;
            let mut mean = vec![0.0; map.dim];
            for y in *y0..*y1 {
                for x in *x0..*x1 {
                    for (m, v) in mean.iter_mut().zip(map.pixel(y, x)) {
                        *m += v;
                    }
                }
            }
            Ok(QuerySet::from_vector(normalized(&mean), codebook))
        }
    }
}

/// Softmax probabilities, one row per Gaussian, one column per query.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub labels: Vec<String>,
    pub rows: usize,
    pub cols: usize,
    pub scores: Vec<f64>,
}

impl ScoreMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.scores[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.scores[i * self.cols + j]
    }

    /// Column of the row maximum, lowest index on ties.
    pub fn argmax(&self, i: usize) -> usize {
        let row = self.row(i);
        let mut best = 0;
        for j in 1..row.len() {
            if row[j] > row[best] {
                best = j;
            }
        }
        best
    }
}

/// Feature of Gaussian `i` in query space.
pub fn query_feature(cloud: &GaussianCloud, decoder: Option<&ChannelDecoder>, i: usize) -> Vec<f64> {
    let f: Vec<f64> = cloud.feature(i).iter().map(|&v| v as f64).collect();
    match decoder {
        Some(d) => d.apply_vec(&f),
        None => f,
    }
}

/// Cosine scores of every Gaussian against every query, softmaxed per row.
/// A zero feature scores 0 everywhere and gets a uniform row.
pub fn score_gaussians(cloud: &GaussianCloud, decoder: Option<&ChannelDecoder>, queries: &QuerySet) -> Result<ScoreMatrix> {
    let cols = queries.queries.len();
    if cols < 2 {
        return Err(Error::LabelSetTooSmall(cols));
    }
    let dim = decoder.map_or(cloud.feature_dim(), |d| d.out_dim());
    if let Some(d) = decoder {
        if d.in_dim() != cloud.feature_dim() {
            return Err(Error::DimensionMismatch {
                what: "decoder input vs cloud feature dimension",
                expected: cloud.feature_dim(),
                got: d.in_dim(),
            });
        }
    }
    for q in &queries.queries {
        if q.len() != dim {
            return Err(Error::DimensionMismatch {
                what: "query vs feature dimension",
                expected: dim,
                got: q.len(),
            });
        }
    }
    let mut scores = vec![0.0; cloud.len() * cols];
    scores.par_chunks_mut(cols).enumerate().for_each(|(i, row)| {
        let f = query_feature(cloud, decoder, i);
        for (s, q) in row.iter_mut().zip(&queries.queries) {
            *s = cosine(&f, q);
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for s in row.iter_mut() {
            *s = (*s - max).exp();
            sum += *s;
        }
        for s in row.iter_mut() {
            *s /= sum;
        }
    });
    Ok(ScoreMatrix {
        labels: queries.labels.clone(),
        rows: cloud.len(),
        cols,
        scores,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SelectionMode {
    Soft { th: f64 },
    Hard,
    Hybrid { th: f64 },
}

impl SelectionMode {
    pub fn parse(mode: &str, th: Option<f64>) -> Result<Self> {
        let th = th.unwrap_or(DEFAULT_THRESHOLD);
        match mode {
            "soft" => Ok(SelectionMode::Soft { th }),
            "hard" => Ok(SelectionMode::Hard),
            "hybrid" => Ok(SelectionMode::Hybrid { th }),
            other => Err(Error::InvalidConfig(format!("unknown selection mode {other:?} (soft, hard, hybrid)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditSelection {
    pub mask: Vec<bool>,
    pub mode: SelectionMode,
}

impl EditSelection {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// `score[i, l] >= th`, taking the max over the columns for a label set.
pub fn select_soft(scores: &ScoreMatrix, columns: &[usize], th: f64) -> EditSelection {
    let mask = (0..scores.rows)
        .map(|i| {
            let best = columns.iter().map(|&c| scores.get(i, c)).fold(f64::NEG_INFINITY, f64::max);
            best >= th
        })
        .collect();
    EditSelection {
        mask,
        mode: SelectionMode::Soft { th },
    }
}

/// Row argmax (lowest column on ties) falls in `columns`.
pub fn select_hard(scores: &ScoreMatrix, columns: &[usize]) -> EditSelection {
    let mask = (0..scores.rows).map(|i| columns.contains(&scores.argmax(i))).collect();
    EditSelection {
        mask,
        mode: SelectionMode::Hard,
    }
}

/// Soft OR hard.
pub fn select_hybrid(scores: &ScoreMatrix, columns: &[usize], th: f64) -> EditSelection {
    let soft = select_soft(scores, columns, th);
    let hard = select_hard(scores, columns);
    EditSelection {
        mask: soft.mask.iter().zip(&hard.mask).map(|(a, b)| *a || *b).collect(),
        mode: SelectionMode::Hybrid { th },
    }
}

pub fn select(scores: &ScoreMatrix, columns: &[usize], mode: SelectionMode) -> EditSelection {
    match mode {
        SelectionMode::Soft { th } => select_soft(scores, columns, th),
        SelectionMode::Hard => select_hard(scores, columns),
        SelectionMode::Hybrid { th } => select_hybrid(scores, columns, th),
    }
}

/// How recolor maps a selected color. Results are clamped to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "fn", rename_all = "snake_case")]
pub enum Appearance {
    Set { rgb: [f32; 3] },
    Multiply { rgb: [f32; 3] },
    Grayscale,
}

impl Appearance {
    pub fn apply(&self, c: [f32; 3]) -> [f32; 3] {
        let out = match *self {
            Appearance::Set { rgb } => rgb,
            Appearance::Multiply { rgb } => [c[0] * rgb[0], c[1] * rgb[1], c[2] * rgb[2]],
            Appearance::Grayscale => {
                let l = 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
                [l; 3]
            }
        };
        out.map(|v| v.clamp(0.0, 1.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum EditOp {
    Extract,
    Delete,
    Recolor { appearance: Appearance },
}

impl fmt::Display for EditOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EditOp::Extract => write!(f, "extract"),
            EditOp::Delete => write!(f, "delete"),
            EditOp::Recolor { appearance: Appearance::Set { rgb } } => {
                write!(f, "recolor:{},{},{}", rgb[0], rgb[1], rgb[2])
            }
            EditOp::Recolor { appearance: Appearance::Multiply { rgb } } => {
                write!(f, "tint:{},{},{}", rgb[0], rgb[1], rgb[2])
            }
            EditOp::Recolor { appearance: Appearance::Grayscale } => write!(f, "grayscale"),
        }
    }
}

fn parse_rgb(s: &str) -> Result<[f32; 3]> {
    let v: Vec<f32> = s
        .split(',')
        .map(|p| p.trim().parse::<f32>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::InvalidConfig(format!("bad color {s:?}: {e}")))?;
    <[f32; 3]>::try_from(v).map_err(|_| Error::InvalidConfig(format!("color {s:?} needs 3 components")))
}

impl FromStr for EditOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None => match s {
                "extract" => Ok(EditOp::Extract),
                "delete" => Ok(EditOp::Delete),
                "grayscale" => Ok(EditOp::Recolor {
                    appearance: Appearance::Grayscale,
                }),
                _ => Err(Error::InvalidConfig(format!(
                    "unknown edit op {s:?} (extract, delete, recolor:r,g,b, tint:r,g,b, grayscale)"
                ))),
            },
            Some(("recolor", rgb)) => Ok(EditOp::Recolor {
                appearance: Appearance::Set { rgb: parse_rgb(rgb)? },
            }),
            Some(("tint", rgb)) => Ok(EditOp::Recolor {
                appearance: Appearance::Multiply { rgb: parse_rgb(rgb)? },
            }),
            _ => Err(Error::InvalidConfig(format!("unknown edit op {s:?}"))),
        }
    }
}

/// Edited copy of `cloud`. Only opacities (extract, delete) or colors
/// (recolor) change.
pub fn apply_edit(cloud: &GaussianCloud, selection: &EditSelection, op: EditOp) -> Result<GaussianCloud> {
    if selection.mask.len() != cloud.len() {
        return Err(Error::DimensionMismatch {
            what: "selection length vs cloud",
            expected: cloud.len(),
            got: selection.mask.len(),
        });
    }
    let mut out = cloud.clone();
    for (i, &sel) in selection.mask.iter().enumerate() {
        match op {
            EditOp::Extract if !sel => out.opacity_logits[i] = f32::NEG_INFINITY,
            EditOp::Delete if sel => out.opacity_logits[i] = f32::NEG_INFINITY,
            EditOp::Recolor { appearance } if sel => out.colors[i] = appearance.apply(out.colors[i]),
            _ => {}
        }
    }
    Ok(out)
}

/// One line of an edit script: `<op> <label[,label...]> [mode [th]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EditCommand {
    pub op: EditOp,
    pub labels: Vec<String>,
    pub mode: SelectionMode,
}

/// Parses an edit script. Blank lines and `#` comments are skipped; the
/// mode defaults to hybrid at [`DEFAULT_THRESHOLD`].
pub fn parse_edit_script(text: &str) -> Result<Vec<EditCommand>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |reason: String| Error::Parse { line: n + 1, reason };
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() < 2 || parts.len() > 4 {
            return Err(err(format!("expected `<op> <labels> [mode [th]]`, got {line:?}")));
        }
        let op: EditOp = parts[0].parse().map_err(|e: Error| err(e.to_string()))?;
        let labels = parts[1].split(',').filter(|l| !l.is_empty()).map(String::from).collect();
        let th = match parts.get(3) {
            Some(t) => Some(t.parse::<f64>().map_err(|e| err(format!("bad threshold {t:?}: {e}")))?),
            None => None,
        };
        let mode = SelectionMode::parse(parts.get(2).copied().unwrap_or("hybrid"), th).map_err(|e| err(e.to_string()))?;
        out.push(EditCommand { op, labels, mode });
    }
    Ok(out)
}

/// Resolves, scores, selects and applies one command.
pub fn run_edit_command(
    cloud: &GaussianCloud,
    decoder: Option<&ChannelDecoder>,
    codebook: &Codebook,
    cmd: &EditCommand,
) -> Result<(GaussianCloud, EditSelection)> {
    let queries = QuerySet::from_labels(codebook, &cmd.labels)?;
    let scores = score_gaussians(cloud, decoder, &queries)?;
    let selection = select(&scores, &queries.targets, cmd.mode);
    let edited = apply_edit(cloud, &selection, cmd.op)?;
    Ok((edited, selection))
}
