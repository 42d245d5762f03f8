use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CannyParams {
    pub sigma: f64,
    /// Hysteresis thresholds as fractions of the largest gradient magnitude.
    pub low: f64,
    pub high: f64,
    pub close_radius: usize,
}

impl Default for CannyParams {
    fn default() -> Self {
        CannyParams {
            sigma: 1.4,
            low: 0.1,
            high: 0.3,
            close_radius: 2,
        }
    }
}

struct Grid {
    w: usize,
    h: usize,
}

impl Grid {
    fn clamp(&self, x: isize, y: isize) -> usize {
        let x = x.clamp(0, self.w as isize - 1) as usize;
        let y = y.clamp(0, self.h as isize - 1) as usize;
        y * self.w + x
    }

    fn neighbors8(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let (x, y) = ((i % self.w) as isize, (i / self.w) as isize);
        (-1isize..=1)
            .flat_map(move |dy| (-1isize..=1).map(move |dx| (x + dx, y + dy)))
            .filter(move |&(nx, ny)| {
                (nx, ny) != (x, y) && nx >= 0 && ny >= 0 && nx < self.w as isize && ny < self.h as isize
            })
            .map(move |(nx, ny)| ny as usize * self.w + nx as usize)
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = k.iter().sum();
    k.into_iter().map(|v| v / sum).collect()
}

fn smooth(img: &[f64], g: &Grid, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return img.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; img.len()];
    for y in 0..g.h as isize {
        for x in 0..g.w as isize {
            tmp[y as usize * g.w + x as usize] = (-r..=r).map(|d| k[(d + r) as usize] * img[g.clamp(x + d, y)]).sum();
        }
    }
    let mut out = vec![0.0; img.len()];
    for y in 0..g.h as isize {
        for x in 0..g.w as isize {
            out[y as usize * g.w + x as usize] = (-r..=r).map(|d| k[(d + r) as usize] * tmp[g.clamp(x, y + d)]).sum();
        }
    }
    out
}

/// Gradient magnitude thinned to one-pixel ridges. Along the gradient the
/// pixel must beat its "behind" neighbour strictly and match or beat its
/// "ahead" neighbour, so plateaus of equal magnitude keep exactly one side.
fn suppressed_gradient(s: &[f64], g: &Grid) -> Vec<f64> {
    let at = |x: isize, y: isize| s[g.clamp(x, y)];
    let mut mag = vec![0.0; s.len()];
    let mut dir = vec![0u8; s.len()];
    for y in 0..g.h as isize {
        for x in 0..g.w as isize {
            let gx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            let gy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
            let i = y as usize * g.w + x as usize;
            mag[i] = gx.hypot(gy);
            let angle = gy.atan2(gx).to_degrees().rem_euclid(180.0);
            dir[i] = match angle {
                a if !(22.5..157.5).contains(&a) => 0,
                a if a < 67.5 => 1,
                a if a < 112.5 => 2,
                _ => 3,
            };
        }
    }
    let mut out = vec![0.0; s.len()];
    for y in 0..g.h as isize {
        for x in 0..g.w as isize {
            let i = y as usize * g.w + x as usize;
            let (dx, dy) = match dir[i] {
                0 => (1, 0),
                1 => (1, 1),
                2 => (0, 1),
                _ => (-1, 1),
            };
            let m = mag[i];
            let ahead = mag[g.clamp(x + dx, y + dy)];
            let behind = mag[g.clamp(x - dx, y - dy)];
            if m > 0.0 && m > behind && m >= ahead {
                out[i] = m;
            }
        }
    }
    out
}

fn hysteresis(nms: &[f64], g: &Grid, low: f64, high: f64) -> Vec<u8> {
    let max = nms.iter().cloned().fold(0.0, f64::max);
    let mut edges = vec![0u8; nms.len()];
    if max <= 0.0 {
        return edges;
    }
    let (lo, hi) = (low * max, high * max);
    let mut queue: VecDeque<usize> = VecDeque::new();
    for (i, &m) in nms.iter().enumerate() {
        if m >= hi {
            edges[i] = 1;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        for j in g.neighbors8(i) {
            if edges[j] == 0 && nms[j] >= lo && nms[j] > 0.0 {
                edges[j] = 1;
                queue.push_back(j);
            }
        }
    }
    edges
}

fn disk(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
        .filter(|&(dx, dy)| dx * dx + dy * dy <= r * r)
        .collect()
}

fn morph(mask: &[u8], g: &Grid, se: &[(isize, isize)], dilate: bool) -> Vec<u8> {
    let mut out = vec![0u8; mask.len()];
    for y in 0..g.h as isize {
        for x in 0..g.w as isize {
            let hit = |&(dx, dy): &(isize, isize)| {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= g.w as isize || ny >= g.h as isize {
                    // Outside counts as background for dilation and as
                    // foreground for erosion, so closing never shrinks.
                    !dilate
                } else {
                    mask[ny as usize * g.w + nx as usize] == 1
                }
            };
            let v = if dilate { se.iter().any(hit) } else { se.iter().all(hit) };
            out[y as usize * g.w + x as usize] = u8::from(v);
        }
    }
    out
}

/// Morphological closing with a disk of the given radius.
pub fn close(mask: &[u8], width: usize, radius: usize) -> Vec<u8> {
    let g = Grid { w: width, h: mask.len() / width };
    let se = disk(radius);
    morph(&morph(mask, &g, &se, true), &g, &se, false)
}

/// Sets every background pixel not 4-connected to the border.
pub fn fill_holes(mask: &[u8], width: usize) -> Vec<u8> {
    let g = Grid { w: width, h: mask.len() / width };
    let mut outside = vec![false; mask.len()];
    let mut queue = VecDeque::new();
    for i in 0..mask.len() {
        let (x, y) = (i % g.w, i / g.w);
        if (x == 0 || y == 0 || x == g.w - 1 || y == g.h - 1) && mask[i] == 0 {
            outside[i] = true;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = (i % g.w, i / g.w);
        let mut visit = |j: usize| {
            if !outside[j] && mask[j] == 0 {
                outside[j] = true;
                queue.push_back(j);
            }
        };
        if x > 0 {
            visit(i - 1);
        }
        if x + 1 < g.w {
            visit(i + 1);
        }
        if y > 0 {
            visit(i - g.w);
        }
        if y + 1 < g.h {
            visit(i + g.w);
        }
    }
    outside.iter().map(|&o| u8::from(!o)).collect()
}

/// Keeps the largest 8-connected foreground component; the first in raster
/// order wins ties.
pub fn largest_component(mask: &[u8], width: usize) -> Vec<u8> {
    let g = Grid { w: width, h: mask.len() / width };
    let mut label = vec![0usize; mask.len()];
    let mut best = (0usize, 0usize);
    let mut next = 0;
    for start in 0..mask.len() {
        if mask[start] == 0 || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        let mut size = 0;
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            size += 1;
            for j in g.neighbors8(i) {
                if mask[j] == 1 && label[j] == 0 {
                    label[j] = next;
                    queue.push_back(j);
                }
            }
        }
        if size > best.1 {
            best = (next, size);
        }
    }
    label.iter().map(|&l| u8::from(l != 0 && l == best.0)).collect()
}

/// Edge-based segmentation: Gaussian smoothing, Sobel gradients, non-maximum
/// suppression, hysteresis, closing, hole filling, largest component.
/// The image minimum is subtracted first, so the result ignores any constant
/// offset.
pub fn canny_morph_segment(image: &[f64], width: usize, params: &CannyParams) -> Result<Vec<u8>> {
    const OP: &str = "canny_morph_segment";
    if width == 0 || image.is_empty() || image.len() % width != 0 {
        return Err(Error::invalid(OP, format!("{} pixels do not form rows of width {width}", image.len())));
    }
    if !(params.low > 0.0 && params.low < params.high) {
        return Err(Error::invalid(OP, format!("need 0 < low < high, got low {} high {}", params.low, params.high)));
    }
    if let Some(p) = image.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid(OP, format!("pixel {p} is not finite")));
    }
    let g = Grid { w: width, h: image.len() / width };
    let lo = image.iter().cloned().fold(f64::INFINITY, f64::min);
    let shifted: Vec<f64> = image.iter().map(|&v| v - lo).collect();
    let s = smooth(&shifted, &g, params.sigma);
    let edges = hysteresis(&suppressed_gradient(&s, &g), &g, params.low, params.high);
    let closed = close(&edges, width, params.close_radius);
    Ok(largest_component(&fill_holes(&closed, width), width))
}
