//! SLIC superpixels in (L*a*b*, x, y) space with connectivity enforcement.

use crate::error::{Error, Result};
use crate::tensor::{DomainMask, Image};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlicConfig {
    pub k_target: usize,
    pub compactness: f64,
    pub iters: usize,
    /// Standard deviation in pixels of a Gaussian blur applied before
    /// clustering; 0 disables it. Light smoothing keeps pixel noise from
    /// shattering superpixels.
    pub smoothing: f64,
}

impl Default for SlicConfig {
    fn default() -> Self {
        Self {
            k_target: 100,
            compactness: 10.0,
            iters: 10,
            smoothing: 0.75,
        }
    }
}

/// A labelling of every pixel into `count` disjoint partitions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuperpixelPartition {
    height: usize,
    width: usize,
    labels: Vec<u32>,
    count: usize,
}

impl SuperpixelPartition {
    /// Validates that labels are exactly `0..count` and each partition is
    /// nonempty. Connectivity is not required here; see
    /// [`SuperpixelPartition::check_connected`].
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != height * width || labels.is_empty() {
            return Err(Error::Shape(format!(
                "partition has {} labels for a {height}x{width} image",
                labels.len()
            )));
        }
        let count = labels.iter().max().map(|&m| m as usize + 1).unwrap_or(0);
        let part = Self {
            height,
            width,
            labels,
            count,
        };
        if let Some(i) = part.sizes().iter().position(|&s| s == 0) {
            return Err(Error::Internal(format!("partition {i} is empty")));
        }
        Ok(part)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn label(&self, y: usize, x: usize) -> usize {
        self.labels[y * self.width + x] as usize
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.count];
        for &l in &self.labels {
            sizes[l as usize] += 1;
        }
        sizes
    }

    /// Indicator mask of partition `i` (1 inside).
    pub fn mask(&self, i: usize) -> DomainMask {
        DomainMask::from_fn(self.height, self.width, |y, x| self.label(y, x) == i)
    }

    /// Errors naming the first partition that is not 4-connected.
    pub fn check_connected(&self) -> Result<()> {
        let (comp, n) = components(&self.labels, self.height, self.width);
        if n == self.count {
            return Ok(());
        }
        let mut seen = vec![None; self.count];
        for (i, &l) in self.labels.iter().enumerate() {
            match seen[l as usize] {
                None => seen[l as usize] = Some(comp[i]),
                Some(c) if c != comp[i] => return Err(Error::Internal(format!("partition {l} is not 4-connected"))),
                _ => {}
            }
        }
        Ok(())
    }
}

/// CIE L*a*b* (D65) of an image in `[-1, 1]` treated as sRGB.
pub fn to_lab(image: &Image<f32>) -> Vec<[f64; 3]> {
    fn linear(c: f64) -> f64 {
        if c <= 0.04045 {
            c / 12.92
        } else {
            ((c + 0.055) / 1.055).powf(2.4)
        }
    }
    fn f(t: f64) -> f64 {
        const D: f64 = 6.0 / 29.0;
        if t > D * D * D {
            t.cbrt()
        } else {
            t / (3.0 * D * D) + 4.0 / 29.0
        }
    }
    let (h, w) = (image.height(), image.width());
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let [r, g, b] = [0, 1, 2].map(|c| linear(((image.at(c, y, x) as f64 + 1.0) * 0.5).clamp(0.0, 1.0)));
            let xx = (0.4124564 * r + 0.3575761 * g + 0.1804375 * b) / 0.95047;
            let yy = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
            let zz = (0.0193339 * r + 0.1191920 * g + 0.9503041 * b) / 1.08883;
            let (fx, fy, fz) = (f(xx), f(yy), f(zz));
            out.push([116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]);
        }
    }
    out
}

/// Separable Gaussian blur with edge clamping, truncated at 3σ.
pub fn gaussian_blur(image: &Image<f32>, sigma: f64) -> Image<f32> {
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    let (h, w) = (image.height() as isize, image.width() as isize);
    let pass = |src: &Image<f32>, horizontal: bool| {
        Image::from_fn(h as usize, w as usize, |c, y, x| {
            let acc: f64 = (-r..=r)
                .zip(&kernel)
                .map(|(i, k)| {
                    let (yy, xx) = if horizontal {
                        (y, (x as isize + i).clamp(0, w - 1) as usize)
                    } else {
                        ((y as isize + i).clamp(0, h - 1) as usize, x)
                    };
                    k * src.at(c, yy, xx) as f64
                })
                .sum();
            (acc / total) as f32
        })
    };
    pass(&pass(image, true), false)
}

#[derive(Clone, Copy, Debug)]
struct Center {
    lab: [f64; 3],
    y: f64,
    x: f64,
}

pub fn slic_superpixels(image: &Image<f32>, config: &SlicConfig) -> Result<SuperpixelPartition> {
    let (h, w) = (image.height(), image.width());
    let n = h * w;
    if n == 0 {
        return Err(Error::Argument("cannot segment an empty image".into()));
    }
    if config.k_target == 0 || config.k_target > n {
        return Err(Error::Argument(format!(
            "k_target must be in 1..={n}, got {}",
            config.k_target
        )));
    }
    let lab = if config.smoothing > 0.0 {
        to_lab(&gaussian_blur(image, config.smoothing))
    } else {
        to_lab(image)
    };
    let step = (n as f64 / config.k_target as f64).sqrt();
    let ny = ((h as f64 / step).round() as usize).clamp(1, h);
    let nx = ((w as f64 / step).round() as usize).clamp(1, w);
    let gradient = |y: usize, x: usize| -> f64 {
        if y == 0 || x == 0 || y + 1 >= h || x + 1 >= w {
            return f64::INFINITY;
        }
        let d = |a: usize, b: usize| -> f64 { lab[a].iter().zip(&lab[b]).map(|(p, q)| (p - q) * (p - q)).sum() };
        d(y * w + x + 1, y * w + x - 1) + d((y + 1) * w + x, (y - 1) * w + x)
    };
    let mut centers = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let cy = (((j as f64 + 0.5) * h as f64 / ny as f64) as usize).min(h - 1);
            let cx = (((i as f64 + 0.5) * w as f64 / nx as f64) as usize).min(w - 1);
            // Nudge the seed to the lowest-gradient pixel of its 3x3 neighbourhood.
            let (mut by, mut bx, mut bg) = (cy, cx, gradient(cy, cx));
            for yy in cy.saturating_sub(1)..=(cy + 1).min(h - 1) {
                for xx in cx.saturating_sub(1)..=(cx + 1).min(w - 1) {
                    let g = gradient(yy, xx);
                    if g < bg {
                        (by, bx, bg) = (yy, xx, g);
                    }
                }
            }
            centers.push(Center {
                lab: lab[by * w + bx],
                y: by as f64,
                x: bx as f64,
            });
        }
    }

    let s = (h as f64 / ny as f64).max(w as f64 / nx as f64);
    let spatial = (config.compactness / s).powi(2);
    let reach = (s.ceil() as isize).max(1);
    let mut assign = vec![0u32; n];
    let mut best = vec![f64::INFINITY; n];
    for _ in 0..config.iters.max(1) {
        best.iter_mut().for_each(|b| *b = f64::INFINITY);
        for (k, c) in centers.iter().enumerate() {
            let y0 = (c.y.round() as isize - reach).max(0) as usize;
            let y1 = ((c.y.round() as isize + reach) as usize).min(h - 1);
            let x0 = (c.x.round() as isize - reach).max(0) as usize;
            let x1 = ((c.x.round() as isize + reach) as usize).min(w - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let p = y * w + x;
                    let dc: f64 = lab[p].iter().zip(&c.lab).map(|(a, b)| (a - b) * (a - b)).sum();
                    let ds = (y as f64 - c.y).powi(2) + (x as f64 - c.x).powi(2);
                    let d = dc + ds * spatial;
                    if d < best[p] {
                        best[p] = d;
                        assign[p] = k as u32;
                    }
                }
            }
        }
        // Pixels out of every window (possible only with tiny compactness
        // corner cases) go to the nearest center spatially.
        for p in 0..n {
            if best[p].is_infinite() {
                let (y, x) = ((p / w) as f64, (p % w) as f64);
                let k = (0..centers.len())
                    .min_by(|&a, &b| {
                        let da = (centers[a].y - y).powi(2) + (centers[a].x - x).powi(2);
                        let db = (centers[b].y - y).powi(2) + (centers[b].x - x).powi(2);
                        da.total_cmp(&db)
                    })
                    .expect("at least one center");
                assign[p] = k as u32;
            }
        }
        let mut acc = vec![[0.0f64; 6]; centers.len()];
        for (p, &k) in assign.iter().enumerate() {
            let a = &mut acc[k as usize];
            a[0] += lab[p][0];
            a[1] += lab[p][1];
            a[2] += lab[p][2];
            a[3] += (p / w) as f64;
            a[4] += (p % w) as f64;
            a[5] += 1.0;
        }
        for (c, a) in centers.iter_mut().zip(&acc) {
            if a[5] > 0.0 {
                *c = Center {
                    lab: [a[0] / a[5], a[1] / a[5], a[2] / a[5]],
                    y: a[3] / a[5],
                    x: a[4] / a[5],
                };
            }
        }
    }

    let min_size = n / (4 * centers.len());
    let labels = enforce_connectivity(&assign, h, w, min_size);
    SuperpixelPartition::new(h, w, labels)
}

/// 4-connected components in scan order; returns (component per pixel, count).
fn components(labels: &[u32], h: usize, w: usize) -> (Vec<usize>, usize) {
    let mut comp = vec![usize::MAX; labels.len()];
    let mut n = 0;
    let mut stack = Vec::new();
    for start in 0..labels.len() {
        if comp[start] != usize::MAX {
            continue;
        }
        comp[start] = n;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if comp[q] == usize::MAX && labels[q] == labels[p] {
                    comp[q] = n;
                    stack.push(q);
                }
            };
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
        }
        n += 1;
    }
    (comp, n)
}

/// Splits clusters into connected components, merges components smaller than
/// `min_size` into the neighbour sharing the longest border, and renumbers
/// labels in scan order.
fn enforce_connectivity(assign: &[u32], h: usize, w: usize, min_size: usize) -> Vec<u32> {
    let (comp, n) = components(assign, h, w);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (p, &c) in comp.iter().enumerate() {
        members[c].push(p);
    }
    let mut owner: Vec<usize> = comp;
    loop {
        // Smallest live fragment first; ties broken by id.
        let victim = (0..n)
            .filter(|&c| !members[c].is_empty() && members[c].len() < min_size)
            .min_by_key(|&c| (members[c].len(), c));
        let Some(victim) = victim else { break };
        let mut border: Vec<(usize, usize)> = Vec::new();
        for &p in &members[victim] {
            let (y, x) = (p / w, p % w);
            let mut neighbours = [usize::MAX; 4];
            if y > 0 {
                neighbours[0] = p - w;
            }
            if y + 1 < h {
                neighbours[1] = p + w;
            }
            if x > 0 {
                neighbours[2] = p - 1;
            }
            if x + 1 < w {
                neighbours[3] = p + 1;
            }
            for q in neighbours.into_iter().filter(|&q| q != usize::MAX) {
                let o = owner[q];
                if o != victim {
                    match border.iter_mut().find(|(c, _)| *c == o) {
                        Some((_, len)) => *len += 1,
                        None => border.push((o, 1)),
                    }
                }
            }
        }
        let Some(&(into, _)) = border.iter().max_by_key(|&&(c, len)| (len, std::cmp::Reverse(c))) else {
            break;
        };
        let moved = std::mem::take(&mut members[victim]);
        for &p in &moved {
            owner[p] = into;
        }
        members[into].extend(moved);
    }
    let mut renumber = vec![u32::MAX; n];
    let mut next = 0;
    owner
        .iter()
        .map(|&o| {
            if renumber[o] == u32::MAX {
                renumber[o] = next;
                next += 1;
            }
            renumber[o]
        })
        .collect()
}
