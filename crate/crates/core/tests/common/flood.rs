//! Flood-fill oracle for connected-component labelling.

use std::collections::VecDeque;

use floc_core::imgproc::{label_components, BinaryMask, Connectivity};

/// Breadth-first flood fill; returns the pixel sets, each sorted.
pub fn flood_fill(mask: &BinaryMask, eight: bool) -> Vec<Vec<usize>> {
    let (w, h) = (mask.width() as isize, mask.height() as isize);
    let mut seen = vec![false; mask.data().len()];
    let mut out = Vec::new();
    for start in 0..mask.data().len() {
        if !mask.data()[start] || seen[start] {
            continue;
        }
        let mut set = Vec::new();
        let mut q = VecDeque::from([start]);
        seen[start] = true;
        while let Some(p) = q.pop_front() {
            set.push(p);
            let (y, x) = (p as isize / w, p as isize % w);
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    if (dy == 0 && dx == 0) || (!eight && dy != 0 && dx != 0) {
                        continue;
                    }
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h || nx >= w {
                        continue;
                    }
                    let n = (ny * w + nx) as usize;
                    if mask.data()[n] && !seen[n] {
                        seen[n] = true;
                        q.push_back(n);
                    }
                }
            }
        }
        set.sort_unstable();
        out.push(set);
    }
    out.sort();
    out
}

pub fn check_against_oracle(mask: &BinaryMask, conn: Connectivity) -> bool {
    let lab = label_components(mask, conn);
    let mut groups = vec![Vec::new(); lab.components.len()];
    for (i, l) in lab.labels.iter().enumerate() {
        match l {
            Some(l) => groups[*l].push(i),
            None if mask.data()[i] => return false,
            None => {}
        }
    }
    let w = mask.width();
    for (c, g) in lab.components.iter().zip(&groups) {
        if c.count != g.len() || g.is_empty() {
            return false;
        }
        let rep = g[0];
        if c.representative != (rep / w, rep % w) || !g.iter().all(|&p| c.bbox.contains(p % w, p / w)) {
            return false;
        }
    }
    let sorted = lab
        .components
        .windows(2)
        .all(|p| (std::cmp::Reverse(p[0].count), p[0].representative) <= (std::cmp::Reverse(p[1].count), p[1].representative));
    groups.sort();
    sorted && groups == flood_fill(mask, conn == Connectivity::Eight)
}
