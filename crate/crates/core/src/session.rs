//! Interactive editing session: a loaded checkpoint, a working copy that
//! edits apply to, and a bounded undo stack. The CLI and the HTTP service
//! both go through these calls, so equal inputs give equal bytes.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camera::{parse_pose, CameraView};
use crate::decoder::{decode, ChannelDecoder};
use crate::error::{Error, Result};
use crate::gsplat::{load_checkpoint, save_checkpoint};
use crate::oracle::Codebook;
use crate::prompt::{apply_edit, resolve_prompt, score_gaussians, select, EditOp, EditSelection, PromptKind, SelectionMode};
use crate::raster::{render, RenderOutput, RenderSettings};
use crate::scene::GaussianCloud;
use crate::tensor::{encode_gray_png, quantize_unit, FeatureMap};
use crate::viz::{colorize, fit_pca, overlay, segment_features, visualize_features, PCA_STRIDE};

pub const UNDO_LIMIT: usize = 32;
pub const CODEBOOK_FILE: &str = "codebook.txt";

/// Everything one render request produces.
#[derive(Debug, Clone)]
pub struct RenderProducts {
    pub output: RenderOutput,
    /// Decoded when a decoder exists.
    pub features: FeatureMap,
}

/// Renders and decodes one view.
pub fn render_products(
    cloud: &GaussianCloud,
    decoder: Option<&ChannelDecoder>,
    view: &CameraView,
    background: [f64; 3],
) -> Result<RenderProducts> {
    let (output, _) = render(cloud, view, &RenderSettings::with_background(background))?;
    let features = match decoder {
        Some(d) => decode(&output.feature_map, d)?,
        None => output.feature_map.clone(),
    };
    Ok(RenderProducts { output, features })
}

/// PCA false-color image of a feature map. A map without three
/// independent directions (an empty view, say) comes out black.
pub fn feature_image(features: &FeatureMap) -> Result<FeatureMap> {
    match fit_pca(features, PCA_STRIDE) {
        Ok(basis) => visualize_features(features, &basis),
        Err(Error::DegenerateFeatureMap(reason)) => {
            log::warn!("feature visualization skipped: {reason}");
            Ok(FeatureMap::zeros(features.height, features.width, 3))
        }
        Err(e) => Err(e),
    }
}

/// Class map of a render and its palette overlay on the RGB image.
pub fn segmentation_images(products: &RenderProducts, codebook: &Codebook) -> Result<(Vec<u8>, FeatureMap)> {
    let classes = segment_features(&products.features, codebook)?;
    let img = &products.output.image;
    let colors = colorize(&classes, codebook, img.width, img.height)?;
    Ok((classes, overlay(img, &colors)?))
}

/// `pose` (16 comma-separated row-major scalars) plus image size, with
/// default intrinsics.
pub fn view_from_pose(pose: &str, width: usize, height: usize) -> Result<CameraView> {
    CameraView::from_pose(parse_pose(pose)?, width, height)
}

pub const DEFAULT_VIEW_SIZE: usize = 256;

fn default_size() -> usize {
    DEFAULT_VIEW_SIZE
}

/// Body of a prompt or edit request. Exactly one of `labels`, `point`,
/// `box` names the target. Pixel targets are read in the view given by
/// `pose`, `w`, `h`; so is the mask a prompt returns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectRequest {
    #[serde(default)]
    pub labels: Option<Vec<String>>,
    #[serde(default)]
    pub point: Option<Point>,
    #[serde(default, rename = "box")]
    pub rect: Option<Rect>,
    #[serde(default)]
    pub pose: Option<String>,
    #[serde(default = "default_size")]
    pub w: usize,
    #[serde(default = "default_size")]
    pub h: usize,
    #[serde(default)]
    pub mode: Option<String>,
    #[serde(default)]
    pub th: Option<f64>,
}

impl Default for SelectRequest {
    fn default() -> Self {
        Self {
            labels: None,
            point: None,
            rect: None,
            pose: None,
            w: DEFAULT_VIEW_SIZE,
            h: DEFAULT_VIEW_SIZE,
            mode: None,
            th: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: usize,
    pub y: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl SelectRequest {
    fn prompt(&self) -> Result<PromptKind> {
        match (&self.labels, self.point, self.rect) {
            (Some(l), None, None) => Ok(PromptKind::Labels(l.clone())),
            (None, Some(p), None) => Ok(PromptKind::Point { x: p.x, y: p.y }),
            (None, None, Some(r)) => Ok(PromptKind::Box {
                x0: r.x0,
                y0: r.y0,
                x1: r.x1,
                y1: r.y1,
            }),
            _ => Err(Error::InvalidConfig("give exactly one of labels, point, box".into())),
        }
    }

    pub fn view(&self) -> Result<Option<CameraView>> {
        self.pose.as_deref().map(|p| view_from_pose(p, self.w, self.h)).transpose()
    }

    fn mode(&self) -> Result<SelectionMode> {
        SelectionMode::parse(self.mode.as_deref().unwrap_or("hybrid"), self.th)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRequest {
    pub op: String,
    #[serde(flatten)]
    pub target: SelectRequest,
}

struct UndoEntry {
    op: EditOp,
    selection: EditSelection,
    opacity_logits: Vec<f32>,
    colors: Vec<[f32; 3]>,
}

pub struct Session {
    pub decoder: Option<ChannelDecoder>,
    pub codebook: Option<Codebook>,
    working: GaussianCloud,
    undo: VecDeque<UndoEntry>,
    pub background: [f64; 3],
}

impl Session {
    pub fn new(cloud: GaussianCloud, decoder: Option<ChannelDecoder>, codebook: Option<Codebook>) -> Result<Self> {
        if cloud.is_empty() {
            return Err(Error::EmptyCloud);
        }
        Ok(Self {
            decoder,
            codebook,
            working: cloud,
            undo: VecDeque::new(),
            background: [0.0; 3],
        })
    }

    /// Loads a checkpoint and a codebook, by default `codebook.txt` next
    /// to the checkpoint when present.
    pub fn load(checkpoint: &Path, codebook: Option<&Path>) -> Result<Self> {
        let (cloud, decoder) = load_checkpoint(checkpoint)?;
        let codebook = match codebook {
            Some(p) => Some(Codebook::load(p)?),
            None => {
                let sibling: PathBuf = checkpoint.parent().unwrap_or(Path::new(".")).join(CODEBOOK_FILE);
                sibling.exists().then(|| Codebook::load(&sibling)).transpose()?
            }
        };
        Self::new(cloud, decoder, codebook)
    }

    pub fn working(&self) -> &GaussianCloud {
        &self.working
    }

    pub fn undo_depth(&self) -> usize {
        self.undo.len()
    }

    pub fn labels(&self) -> Vec<String> {
        self.codebook.as_ref().map(|c| c.labels.clone()).unwrap_or_default()
    }

    fn codebook(&self) -> Result<&Codebook> {
        self.codebook
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("no codebook loaded".into()))
    }

    pub fn render(&self, view: &CameraView) -> Result<RenderProducts> {
        render_products(&self.working, self.decoder.as_ref(), view, self.background)
    }

    pub fn render_png(&self, view: &CameraView) -> Result<Vec<u8>> {
        self.render(view)?.output.image.encode_png()
    }

    pub fn feature_viz_png(&self, view: &CameraView) -> Result<Vec<u8>> {
        feature_image(&self.render(view)?.features)?.encode_png()
    }

    pub fn segmentation_png(&self, view: &CameraView) -> Result<Vec<u8>> {
        let (_, img) = segmentation_images(&self.render(view)?, self.codebook()?)?;
        img.encode_png()
    }

    /// Selection for a request against the working cloud.
    pub fn select(&self, req: &SelectRequest) -> Result<EditSelection> {
        let view = req.view()?;
        let queries = resolve_prompt(
            &req.prompt()?,
            &self.working,
            self.decoder.as_ref(),
            self.codebook.as_ref(),
            view.as_ref(),
        )?;
        let scores = score_gaussians(&self.working, self.decoder.as_ref(), &queries)?;
        Ok(select(&scores, &queries.targets, req.mode()?))
    }

    /// Image-space footprint of a selection: per pixel, the share of the
    /// composited color that selected Gaussians contribute.
    pub fn selection_mask(&self, selection: &EditSelection, view: &CameraView) -> Result<Vec<u8>> {
        let mut marked = self.working.clone();
        for (c, &s) in marked.colors.iter_mut().zip(&selection.mask) {
            *c = if s { [1.0; 3] } else { [0.0; 3] };
        }
        let (out, _) = render(&marked, view, &RenderSettings::default())?;
        Ok(out.image.data.chunks_exact(3).map(|p| quantize_unit(p[0])).collect())
    }

    /// Selection count and its mask PNG in the request's view.
    pub fn prompt(&self, req: &SelectRequest) -> Result<(EditSelection, Vec<u8>)> {
        let sel = self.select(req)?;
        let view = req
            .view()?
            .ok_or_else(|| Error::InvalidCamera("prompt needs a pose for its mask".into()))?;
        let mask = self.selection_mask(&sel, &view)?;
        let png = encode_gray_png(view.width, view.height, &mask)?;
        Ok((sel, png))
    }

    /// Applies an edit to the working copy and pushes an undo entry.
    pub fn edit(&mut self, req: &EditRequest) -> Result<EditSelection> {
        let op: EditOp = req.op.parse()?;
        let selection = self.select(&req.target)?;
        self.apply(op, selection.clone())?;
        Ok(selection)
    }

    /// Applies an already computed selection.
    pub fn apply(&mut self, op: EditOp, selection: EditSelection) -> Result<()> {
        let edited = apply_edit(&self.working, &selection, op)?;
        let entry = UndoEntry {
            op,
            selection,
            opacity_logits: std::mem::replace(&mut self.working.opacity_logits, edited.opacity_logits),
            colors: std::mem::replace(&mut self.working.colors, edited.colors),
        };
        if self.undo.len() == UNDO_LIMIT {
            self.undo.pop_front();
        }
        self.undo.push_back(entry);
        Ok(())
    }

    /// Reverts the latest edit bit-exactly. Returns the op undone.
    pub fn undo(&mut self) -> Option<(EditOp, usize)> {
        let entry = self.undo.pop_back()?;
        self.working.opacity_logits = entry.opacity_logits;
        self.working.colors = entry.colors;
        Some((entry.op, entry.selection.count()))
    }

    /// Writes the working copy with zero-opacity Gaussians removed.
    /// Returns how many were dropped.
    pub fn save(&self, path: &Path) -> Result<usize> {
        let mut cloud = self.working.clone();
        let removed = cloud.compact_transparent();
        if cloud.is_empty() {
            return Err(Error::EmptyCloud);
        }
        save_checkpoint(&cloud, self.decoder.as_ref(), path)?;
        Ok(removed)
    }
}
