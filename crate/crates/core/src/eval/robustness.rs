use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Curve, CurvePoint};
use crate::data::ManipSample;
use crate::error::{Error, Result};
use crate::imgproc::{gaussian_blur, jpeg_like_compress, Image};
use crate::pipeline::{manipulated_p_f1, Localizer};

pub const JPEG_LEVELS: [u32; 6] = [100, 90, 80, 70, 60, 50];
pub const BLUR_LEVELS: [u32; 6] = [0, 5, 11, 17, 23, 29];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Degradation {
    /// Level is the quality factor.
    Jpeg,
    /// Level is the Gaussian kernel size; 0 leaves the image unchanged.
    Blur,
}

impl Degradation {
    pub fn name(self) -> &'static str {
        match self {
            Degradation::Jpeg => "jpeg",
            Degradation::Blur => "blur",
        }
    }

    pub fn default_levels(self) -> &'static [u32] {
        match self {
            Degradation::Jpeg => &JPEG_LEVELS,
            Degradation::Blur => &BLUR_LEVELS,
        }
    }
}

impl fmt::Display for Degradation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Degradation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jpeg" => Ok(Degradation::Jpeg),
            "blur" => Ok(Degradation::Blur),
            _ => Err(Error::InvalidArgument(format!("unknown degradation '{s}' (jpeg, blur)"))),
        }
    }
}

pub fn degrade(img: &Image, kind: Degradation, level: u32) -> Result<Image> {
    match kind {
        Degradation::Jpeg => {
            let q = u8::try_from(level).map_err(|_| Error::InvalidArgument(format!("JPEG quality {level} out of range")))?;
            jpeg_like_compress(img, q)
        }
        Degradation::Blur => gaussian_blur(img, level as usize),
    }
}

/// Mean manipulated-image P-F1 after degrading every image at each level,
/// in the order given.
pub fn robustness_sweep(loc: &Localizer, samples: &[ManipSample], kind: Degradation, levels: &[u32]) -> Result<Curve> {
    if levels.is_empty() {
        return Err(Error::InvalidArgument("no degradation levels".into()));
    }
    let manip: Vec<ManipSample> = samples.iter().filter(|s| s.label).cloned().collect();
    let mut points = Vec::with_capacity(levels.len());
    for &level in levels {
        let mut masks = Vec::with_capacity(manip.len());
        for s in &manip {
            let img = degrade(&s.image, kind, level)?;
            masks.push(loc.localize(&img)?.mask);
        }
        points.push(CurvePoint {
            level,
            p_f1: manipulated_p_f1(&manip, &masks)?,
        });
    }
    Ok(Curve { degradation: kind, points })
}
