use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::PromptSet;
use crate::error::{Error, Result};
use crate::imgproc::{decode_mask_png, encode_png, BinaryMask, Image};

pub const DEFAULT_REMOTE_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WirePoint {
    pub x: usize,
    pub y: usize,
    /// 1 = foreground, 0 = background.
    pub label: u8,
}

/// Body of `POST /refine`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefineRequest {
    pub image_png_b64: String,
    #[serde(rename = "box")]
    pub bbox: Option<[usize; 4]>,
    pub points: Vec<WirePoint>,
}

impl RefineRequest {
    pub fn new(image: &Image, prompts: &PromptSet) -> Result<Self> {
        Ok(Self {
            image_png_b64: STANDARD.encode(encode_png(image)?),
            bbox: prompts.bbox.map(|b| [b.x0, b.y0, b.x1, b.y1]),
            points: prompts
                .points
                .iter()
                .map(|p| WirePoint {
                    x: p.x,
                    y: p.y,
                    label: p.positive as u8,
                })
                .collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefineResponse {
    pub mask_png_b64: String,
}

impl RefineResponse {
    pub fn new(mask: &BinaryMask) -> Result<Self> {
        Ok(Self {
            mask_png_b64: STANDARD.encode(crate::imgproc::encode_mask_png(mask)?),
        })
    }

    pub fn mask(&self) -> Result<BinaryMask> {
        let bytes = STANDARD
            .decode(self.mask_png_b64.trim())
            .map_err(|e| Error::Remote(format!("mask is not valid base64: {e}")))?;
        decode_mask_png(&bytes)
    }
}

/// HTTP client for an external segmentation service.
#[derive(Clone, Debug)]
pub struct RemoteRefiner {
    pub url: String,
    pub timeout: Duration,
}

impl RemoteRefiner {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            timeout: DEFAULT_REMOTE_TIMEOUT,
        }
    }

    fn agent(&self) -> ureq::Agent {
        ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into()
    }

    fn endpoint(&self, path: &str) -> String {
        format!("{}{path}", self.url.trim_end_matches('/'))
    }

    /// Sends one refine request and checks the returned mask's size.
    pub fn refine(&self, image: &Image, prompts: &PromptSet) -> Result<BinaryMask> {
        let body = serde_json::to_string(&RefineRequest::new(image, prompts)?)?;
        let text = self
            .agent()
            .post(&self.endpoint("/refine"))
            .header("Content-Type", "application/json")
            .send(body.as_str())
            .and_then(|mut r| r.body_mut().read_to_string())
            .map_err(|e| Error::Remote(e.to_string()))?;
        let resp: RefineResponse =
            serde_json::from_str(&text).map_err(|e| Error::Remote(format!("malformed response: {e}")))?;
        let mask = resp.mask()?;
        if (mask.width(), mask.height()) != (image.width(), image.height()) {
            return Err(Error::Remote(format!(
                "mask is {}x{}, image is {}x{}",
                mask.width(),
                mask.height(),
                image.width(),
                image.height()
            )));
        }
        Ok(mask)
    }
}

/// `true` when `GET /health` answers 200 with body `ok`.
pub fn remote_health(url: &str, timeout: Duration) -> bool {
    let r = RemoteRefiner {
        url: url.to_string(),
        timeout,
    };
    r.agent()
        .get(&r.endpoint("/health"))
        .call()
        .and_then(|mut resp| resp.body_mut().read_to_string())
        .is_ok_and(|b| b.trim() == "ok")
}
