use serde::{Deserialize, Serialize};

use super::{BBox, BinaryMask};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Connectivity {
    #[serde(rename = "4")]
    Four,
    #[default]
    #[serde(rename = "8")]
    Eight,
}

impl Connectivity {
    fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(-1, 0), (0, -1), (0, 1), (1, 0)],
            Connectivity::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)],
        }
    }
}

/// One connected set of true pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Component {
    pub count: usize,
    pub bbox: BBox,
    /// `(row, col)` of the first member in raster order.
    pub representative: (usize, usize),
}

/// Components plus a per-pixel index into them (`None` = background).
#[derive(Clone, Debug)]
pub struct Labeling {
    pub components: Vec<Component>,
    pub labels: Vec<Option<usize>>,
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Two-pass union-find labeling. Components are ordered by descending
/// pixel count, then by representative pixel.
pub fn label_components(mask: &BinaryMask, connectivity: Connectivity) -> Labeling {
    let (w, h) = (mask.width(), mask.height());
    let n = w * h;
    let mut parent: Vec<usize> = (0..n).collect();
    // only already-visited neighbours (above / left) need to be merged
    let back: Vec<(isize, isize)> = connectivity
        .offsets()
        .iter()
        .copied()
        .filter(|&(dy, dx)| dy < 0 || (dy == 0 && dx < 0))
        .collect();
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            for &(dy, dx) in &back {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny < 0 || nx < 0 || nx >= w as isize {
                    continue;
                }
                let (ny, nx) = (ny as usize, nx as usize);
                if mask.get(nx, ny) {
                    let a = find(&mut parent, y * w + x);
                    let b = find(&mut parent, ny * w + nx);
                    if a != b {
                        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                        parent[hi] = lo;
                    }
                }
            }
        }
    }

    // roots are the smallest raster index in each set, i.e. the representative
    let mut root_slot = vec![usize::MAX; n];
    let mut comps: Vec<Component> = Vec::new();
    let mut raw = vec![None; n];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !mask.get(x, y) {
                continue;
            }
            let r = find(&mut parent, i);
            if root_slot[r] == usize::MAX {
                root_slot[r] = comps.len();
                comps.push(Component {
                    count: 0,
                    bbox: BBox { x0: x, y0: y, x1: x, y1: y },
                    representative: (y, x),
                });
            }
            let c = &mut comps[root_slot[r]];
            c.count += 1;
            c.bbox.x0 = c.bbox.x0.min(x);
            c.bbox.x1 = c.bbox.x1.max(x);
            c.bbox.y1 = c.bbox.y1.max(y);
            raw[i] = Some(root_slot[r]);
        }
    }

    let mut order: Vec<usize> = (0..comps.len()).collect();
    order.sort_by(|&a, &b| {
        comps[b]
            .count
            .cmp(&comps[a].count)
            .then(comps[a].representative.cmp(&comps[b].representative))
    });
    let mut rank = vec![0; comps.len()];
    for (r, &o) in order.iter().enumerate() {
        rank[o] = r;
    }
    Labeling {
        components: order.iter().map(|&o| comps[o]).collect(),
        labels: raw.into_iter().map(|l| l.map(|l| rank[l])).collect(),
    }
}

pub fn connected_components(mask: &BinaryMask, connectivity: Connectivity) -> Vec<Component> {
    label_components(mask, connectivity).components
}

/// Bounding box of the largest 8-connected component.
pub fn largest_component_bbox(mask: &BinaryMask) -> Option<BBox> {
    connected_components(mask, Connectivity::Eight).first().map(|c| c.bbox)
}
