//! Prompt generation from a fused CAM and prompt-driven mask refinement.
//!
//! A coarse mask is thresholded from the CAM; its largest component gives a
//! box, and the raw CAM extremes give one positive and one negative point.
//! A refiner turns those prompts into the final mask.

mod region;
mod remote;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cam::CamMap;
use crate::error::{Error, Result};
use crate::imgproc::{largest_component_bbox, resize_plane, BBox, BinaryMask, Image};

pub use region::{region_grow, RegionGrowParams};
pub use remote::{remote_health, RefineRequest, RefineResponse, RemoteRefiner, WirePoint, DEFAULT_REMOTE_TIMEOUT};

pub const DEFAULT_RHO: f64 = 0.4;

/// Thresholds the normalized CAM, after bilinear upsampling to
/// `width × height`, at `rho`.
pub fn binarize_coarse_mask(cam: &CamMap, rho: f64, width: usize, height: usize) -> Result<BinaryMask> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::InvalidArgument(format!("rho must lie in (0, 1), got {rho}")));
    }
    let up = resize_plane(&cam.normalized, cam.width, cam.height, width, height)?;
    BinaryMask::new(width, height, up.into_iter().map(|v| v >= rho).collect())
}

/// Which prompts reach the refiner.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PromptMode {
    #[serde(rename = "null")]
    Null,
    #[serde(rename = "point")]
    Point,
    #[serde(rename = "box")]
    Box,
    #[default]
    #[serde(rename = "box+point")]
    BoxPoint,
}

impl PromptMode {
    pub const ALL: [PromptMode; 4] = [PromptMode::Null, PromptMode::Point, PromptMode::Box, PromptMode::BoxPoint];

    pub fn name(self) -> &'static str {
        match self {
            PromptMode::Null => "null",
            PromptMode::Point => "point",
            PromptMode::Box => "box",
            PromptMode::BoxPoint => "box+point",
        }
    }

    /// Row label used in ablation tables.
    pub fn label(self) -> &'static str {
        match self {
            PromptMode::Null => "Null",
            PromptMode::Point => "Point",
            PromptMode::Box => "Box",
            PromptMode::BoxPoint => "Box+Point",
        }
    }

    pub fn uses_box(self) -> bool {
        matches!(self, PromptMode::Box | PromptMode::BoxPoint)
    }

    pub fn uses_points(self) -> bool {
        matches!(self, PromptMode::Point | PromptMode::BoxPoint)
    }
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PromptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PromptMode::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown prompt mode '{s}' (null, point, box, box+point)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPoint {
    pub x: usize,
    pub y: usize,
    pub positive: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    pub bbox: Option<BBox>,
    pub points: Vec<PromptPoint>,
    /// Set when the coarse mask was empty; the prediction stays empty.
    pub empty_coarse: bool,
}

impl PromptSet {
    pub fn positive(&self) -> Option<PromptPoint> {
        self.points.iter().copied().find(|p| p.positive)
    }

    pub fn negative(&self) -> Option<PromptPoint> {
        self.points.iter().copied().find(|p| !p.positive)
    }

    pub fn is_empty(&self) -> bool {
        self.bbox.is_none() && self.points.is_empty()
    }
}

fn extreme_in(cam: &CamMap, keep: impl Fn(usize, usize) -> bool, larger: bool) -> Option<(usize, usize)> {
    let mut best: Option<(usize, usize, f64)> = None;
    for y in 0..cam.height {
        for x in 0..cam.width {
            if !keep(x, y) {
                continue;
            }
            let v = cam.raw_at(x, y);
            let better = match best {
                None => true,
                Some((_, _, b)) => (larger && v > b) || (!larger && v < b),
            };
            if better {
                best = Some((x, y, v));
            }
        }
    }
    best.map(|(x, y, _)| (x, y))
}

/// Builds prompts for `mode` from an image-resolution CAM and its coarse mask.
///
/// The box is the bounding box of the largest 8-connected component. The
/// positive point is the raw-CAM maximum (inside the box when there is one),
/// the negative point the raw-CAM minimum outside the box. A negative point
/// whose raw value would exceed the positive one is omitted.
pub fn generate_prompts(cam: &CamMap, mask: &BinaryMask, mode: PromptMode) -> Result<PromptSet> {
    if (cam.width, cam.height) != (mask.width(), mask.height()) {
        return Err(Error::shape(
            "generate_prompts",
            format!("cam {}x{} vs mask {}x{}", cam.width, cam.height, mask.width(), mask.height()),
        ));
    }
    if mode == PromptMode::Null {
        return Ok(PromptSet::default());
    }
    let Some(bbox) = largest_component_bbox(mask) else {
        return Ok(PromptSet {
            empty_coarse: true,
            ..PromptSet::default()
        });
    };
    let mut set = PromptSet {
        bbox: mode.uses_box().then_some(bbox),
        ..PromptSet::default()
    };
    if mode.uses_points() {
        let region = set.bbox;
        let inside = |x, y| region.is_none_or(|b: BBox| b.contains(x, y));
        let (px, py) = extreme_in(cam, inside, true).expect("box holds at least one pixel");
        set.points.push(PromptPoint { x: px, y: py, positive: true });
        if let Some((nx, ny)) = extreme_in(cam, |x, y| region.is_none_or(|b| !b.contains(x, y)), false) {
            if cam.raw_at(nx, ny) <= cam.raw_at(px, py) && (nx, ny) != (px, py) {
                set.points.push(PromptPoint { x: nx, y: ny, positive: false });
            }
        }
    }
    Ok(set)
}

/// Which refiner the pipeline uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefinerKind {
    None,
    #[default]
    Region,
    Remote,
}

impl RefinerKind {
    pub fn name(self) -> &'static str {
        match self {
            RefinerKind::None => "none",
            RefinerKind::Region => "region",
            RefinerKind::Remote => "remote",
        }
    }
}

impl FromStr for RefinerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(RefinerKind::None),
            "region" => Ok(RefinerKind::Region),
            "remote" => Ok(RefinerKind::Remote),
            _ => Err(Error::InvalidArgument(format!("unknown refiner '{s}' (none, region, remote)"))),
        }
    }
}

/// A configured refiner.
#[derive(Clone, Debug)]
pub enum Refiner {
    None,
    RegionGrow(RegionGrowParams),
    Remote(RemoteRefiner),
}

impl Refiner {
    pub fn kind(&self) -> RefinerKind {
        match self {
            Refiner::None => RefinerKind::None,
            Refiner::RegionGrow(_) => RefinerKind::Region,
            Refiner::Remote(_) => RefinerKind::Remote,
        }
    }
}

/// Refined mask plus the failure message of a remote call that fell back
/// to the coarse mask.
#[derive(Clone, Debug, PartialEq)]
pub struct RefineOutcome {
    pub mask: BinaryMask,
    pub error: Option<String>,
}

/// Applies `refiner` to the prompts. An empty prompt set leaves the coarse
/// mask untouched, and an empty coarse mask stays empty.
pub fn refine(image: &Image, prompts: &PromptSet, coarse: &BinaryMask, refiner: &Refiner) -> Result<RefineOutcome> {
    if (image.width(), image.height()) != (coarse.width(), coarse.height()) {
        return Err(Error::shape(
            "refine",
            format!("image {}x{} vs mask {}x{}", image.width(), image.height(), coarse.width(), coarse.height()),
        ));
    }
    let keep = |mask: BinaryMask| RefineOutcome { mask, error: None };
    if prompts.empty_coarse {
        return Ok(keep(BinaryMask::empty(coarse.width(), coarse.height())));
    }
    if prompts.is_empty() {
        return Ok(keep(coarse.clone()));
    }
    match refiner {
        Refiner::None => Ok(keep(coarse.clone())),
        Refiner::RegionGrow(p) => Ok(keep(region_grow(image, prompts, coarse, p)?)),
        Refiner::Remote(r) => Ok(match r.refine(image, prompts) {
            Ok(mask) => keep(mask),
            Err(e) => RefineOutcome {
                mask: coarse.clone(),
                error: Some(e.to_string()),
            },
        }),
    }
}
