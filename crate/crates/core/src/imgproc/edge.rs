use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Fixed 3×3 gradient operator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeOperator {
    #[default]
    Sobel,
    Prewitt,
}

impl EdgeOperator {
    /// Horizontal-derivative kernel; the vertical one is its transpose.
    fn gx(self) -> [[f64; 3]; 3] {
        let m = match self {
            EdgeOperator::Sobel => 2.0,
            EdgeOperator::Prewitt => 1.0,
        };
        [[-1.0, 0.0, 1.0], [-m, 0.0, m], [-1.0, 0.0, 1.0]]
    }

    pub fn name(self) -> &'static str {
        match self {
            EdgeOperator::Sobel => "sobel",
            EdgeOperator::Prewitt => "prewitt",
        }
    }
}

impl std::str::FromStr for EdgeOperator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sobel" => Ok(EdgeOperator::Sobel),
            "prewitt" => Ok(EdgeOperator::Prewitt),
            other => Err(Error::InvalidArgument(format!("unknown edge operator {other:?}"))),
        }
    }
}

/// Per-channel gradient magnitude `sqrt(Gx² + Gy²)` of an `[N,C,H,W]`
/// tensor, replicate padded.
pub fn edge_filter<T: Scalar>(x: &Tensor<T>, op: EdgeOperator) -> Result<Tensor<T>> {
    if x.rank() != 4 {
        return Err(Error::shape("edge_filter", format!("expected [N,C,H,W], got {:?}", x.shape())));
    }
    let (h, w) = (x.shape()[2], x.shape()[3]);
    if h < 3 || w < 3 {
        return Err(Error::shape("edge_filter", format!("spatial dims {h}x{w} are below 3x3")));
    }
    let kx = op.gx();
    let planes = x.shape()[0] * x.shape()[1];
    let mut out = Vec::with_capacity(x.numel());
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    for p in 0..planes {
        let plane = &x.data()[p * h * w..(p + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let (mut gx, mut gy) = (0.0f64, 0.0f64);
                for (di, row) in kx.iter().enumerate() {
                    for (dj, &kv) in row.iter().enumerate() {
                        let yi = clamp(i as isize + di as isize - 1, h);
                        let xj = clamp(j as isize + dj as isize - 1, w);
                        let v = plane[yi * w + xj].as_f64();
                        gx += kv * v;
                        // transpose of kx gives the vertical kernel
                        gy += kx[dj][di] * v;
                    }
                }
                out.push(T::lit((gx * gx + gy * gy).sqrt()));
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn sobel_filter<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    edge_filter(x, EdgeOperator::Sobel)
}

pub fn prewitt_filter<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    edge_filter(x, EdgeOperator::Prewitt)
}
