//! Patch partition and windowed top-K correlation search between feature maps.
//!
//! A feature map `C × H × W` is reflect-padded to multiples of the patch side
//! and cut into non-overlapping `patch × patch` cells. Each cell flattens to a
//! vector of length `C · patch²` (channel-major, then row-major within the
//! patch). For every primary cell the search scores source cells within
//! Chebyshev distance `radius` on the grid by normalized inner product and
//! keeps the best `K`, highest correlation first, ties in row-major order.
//!
//! Everything here is index selection on plain values; gradients flow through
//! the gathered features in [`crate::network`], never through the indices.

use std::cmp::Ordering;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{CellPartition, Scalar, Tensor};

pub const DEFAULT_PATCH: usize = 7;
pub const DEFAULT_K: usize = 4;
pub const DEFAULT_RADIUS: usize = 2;

/// Mirror index into `0..n` without repeating the edge sample.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn rho_from(dot: f64, na: f64, nb: f64) -> f64 {
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Normalized inner product; 0 when either vector is zero.
pub fn correlate(fp: &[f64], fa: &[f64]) -> f64 {
    assert_eq!(fp.len(), fa.len(), "correlate: length mismatch");
    rho_from(dot(fp, fa), norm(fp), norm(fa))
}

/// A feature map cut into non-overlapping square patches.
#[derive(Clone, Debug)]
pub struct PatchGrid {
    pub patch: usize,
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    /// Extent of the unpadded map.
    pub height: usize,
    pub width: usize,
    vectors: Vec<f64>,
    norms: Vec<f64>,
}

impl PatchGrid {
    /// Partitions a `C × H × W` plane stack stored contiguously in `data`.
    pub fn partition<T: Scalar>(
        data: &[T],
        channels: usize,
        height: usize,
        width: usize,
        patch: usize,
    ) -> Result<Self> {
        if patch == 0 {
            return Err(Error::Contract("patch size must be at least 1".into()));
        }
        if data.len() != channels * height * width || height == 0 || width == 0 {
            return Err(dim_err!(
                "partition expects {channels}x{height}x{width} = {} values, got {}",
                channels * height * width,
                data.len()
            ));
        }
        let rows = height.div_ceil(patch);
        let cols = width.div_ceil(patch);
        let len = channels * patch * patch;
        let mut vectors = Vec::with_capacity(rows * cols * len);
        for r in 0..rows {
            for c in 0..cols {
                for ch in 0..channels {
                    let plane = &data[ch * height * width..(ch + 1) * height * width];
                    for dy in 0..patch {
                        let y = reflect_index((r * patch + dy) as isize, height);
                        for dx in 0..patch {
                            let x = reflect_index((c * patch + dx) as isize, width);
                            vectors.push(plane[y * width + x].as_f64());
                        }
                    }
                }
            }
        }
        let norms = vectors.chunks(len).map(norm).collect();
        Ok(PatchGrid {
            patch,
            rows,
            cols,
            channels,
            height,
            width,
            vectors,
            norms,
        })
    }

    /// Accepts `[C, H, W]` or `[1, C, H, W]`.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, patch: usize) -> Result<Self> {
        let (c, h, w) = match t.shape() {
            [c, h, w] | [1, c, h, w] => (*c, *h, *w),
            s => {
                return Err(dim_err!(
                    "partition expects a single C×H×W map, got {:?}",
                    s
                ))
            }
        };
        Self::partition(t.data(), c, h, w, patch)
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn vector_len(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    pub fn patch_vector(&self, row: usize, col: usize) -> &[f64] {
        let len = self.vector_len();
        let i = row * self.cols + col;
        &self.vectors[i * len..(i + 1) * len]
    }

    fn cell_norm(&self, row: usize, col: usize) -> f64 {
        self.norms[row * self.cols + col]
    }

    fn congruent(&self, other: &PatchGrid) -> bool {
        (self.patch, self.rows, self.cols, self.channels)
            == (other.patch, other.rows, other.cols, other.channels)
    }
}

/// Writes patch vectors laid out like `grid` back to a `C × H × W` map,
/// dropping the padded border.
pub fn scatter_patches(
    vectors: &[f64],
    channels: usize,
    height: usize,
    width: usize,
    patch: usize,
) -> Result<Vec<f64>> {
    let (rows, cols) = (height.div_ceil(patch), width.div_ceil(patch));
    let len = channels * patch * patch;
    if vectors.len() != rows * cols * len {
        return Err(dim_err!(
            "scatter expects {} patch values for a {rows}x{cols} grid, got {}",
            rows * cols * len,
            vectors.len()
        ));
    }
    let mut out = vec![0.0; channels * height * width];
    for (cell, v) in vectors.chunks(len).enumerate() {
        let (r, c) = (cell / cols, cell % cols);
        for ch in 0..channels {
            for dy in 0..patch {
                let y = r * patch + dy;
                if y >= height {
                    break;
                }
                for dx in 0..patch {
                    let x = c * patch + dx;
                    if x >= width {
                        break;
                    }
                    out[(ch * height + y) * width + x] = v[(ch * patch + dy) * patch + dx];
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    pub row: usize,
    pub col: usize,
    pub rho: f64,
}

/// Search result: up to `k` matches per primary cell, best first.
#[derive(Clone, Debug, PartialEq)]
pub struct TopK {
    pub rows: usize,
    pub cols: usize,
    pub k: usize,
    pub radius: usize,
    pub matches: Vec<Vec<Match>>,
}

impl TopK {
    pub fn at(&self, row: usize, col: usize) -> &[Match] {
        &self.matches[row * self.cols + col]
    }

    /// Match used for candidate slot `slot`. Cells whose clipped window held
    /// fewer than `k` sources repeat their last match.
    pub fn slot(&self, row: usize, col: usize, slot: usize) -> Match {
        let m = self.at(row, col);
        m[slot.min(m.len() - 1)]
    }
}

fn window(center: usize, radius: usize, extent: usize) -> std::ops::Range<usize> {
    center.saturating_sub(radius)..(center + radius + 1).min(extent)
}

fn check_search(primary: &PatchGrid, source: &PatchGrid, k: usize, radius: usize) -> Result<()> {
    if !primary.congruent(source) {
        return Err(dim_err!(
            "search grids differ: {}x{} (C={}, patch {}) vs {}x{} (C={}, patch {})",
            primary.rows,
            primary.cols,
            primary.channels,
            primary.patch,
            source.rows,
            source.cols,
            source.channels,
            source.patch
        ));
    }
    let full = (2 * radius + 1) * (2 * radius + 1);
    if k == 0 || k > full {
        return Err(Error::Contract(format!(
            "K = {k} must lie in 1..={full} for search radius {radius}"
        )));
    }
    Ok(())
}

/// Windowed top-K search using cached patch norms and an insertion buffer.
pub fn topk_search(
    primary: &PatchGrid,
    source: &PatchGrid,
    k: usize,
    radius: usize,
) -> Result<TopK> {
    check_search(primary, source, k, radius)?;
    let mut matches = Vec::with_capacity(primary.cells());
    let mut best: Vec<Match> = Vec::with_capacity(k + 1);
    for r in 0..primary.rows {
        for c in 0..primary.cols {
            let fp = primary.patch_vector(r, c);
            let np = primary.cell_norm(r, c);
            best.clear();
            for sr in window(r, radius, source.rows) {
                for sc in window(c, radius, source.cols) {
                    let rho = rho_from(
                        dot(fp, source.patch_vector(sr, sc)),
                        np,
                        source.cell_norm(sr, sc),
                    );
                    if best.len() == k && rho <= best[k - 1].rho {
                        continue;
                    }
                    // after every entry with rho ≥ this one: earlier scan order wins ties
                    let pos = best.partition_point(|m| m.rho >= rho);
                    best.insert(
                        pos,
                        Match {
                            row: sr,
                            col: sc,
                            rho,
                        },
                    );
                    best.truncate(k);
                }
            }
            matches.push(best.clone());
        }
    }
    Ok(TopK {
        rows: primary.rows,
        cols: primary.cols,
        k,
        radius,
        matches,
    })
}

/// Exhaustive reference: scores every grid cell inside the window with
/// [`correlate`], sorts by (ρ descending, row-major position) and truncates.
pub fn brute_force_oracle(
    primary: &PatchGrid,
    source: &PatchGrid,
    k: usize,
    radius: usize,
) -> Result<TopK> {
    check_search(primary, source, k, radius)?;
    let mut matches = Vec::with_capacity(primary.cells());
    for r in 0..primary.rows {
        for c in 0..primary.cols {
            let fp = primary.patch_vector(r, c);
            let mut scored: Vec<(usize, Match)> = Vec::new();
            for sr in 0..source.rows {
                for sc in 0..source.cols {
                    if sr.abs_diff(r) > radius || sc.abs_diff(c) > radius {
                        continue;
                    }
                    let rho = correlate(fp, source.patch_vector(sr, sc));
                    scored.push((
                        sr * source.cols + sc,
                        Match {
                            row: sr,
                            col: sc,
                            rho,
                        },
                    ));
                }
            }
            scored.sort_by(|(ia, a), (ib, b)| {
                b.rho
                    .partial_cmp(&a.rho)
                    .unwrap_or(Ordering::Equal)
                    .then(ia.cmp(ib))
            });
            matches.push(scored.into_iter().take(k).map(|(_, m)| m).collect());
        }
    }
    Ok(TopK {
        rows: primary.rows,
        cols: primary.cols,
        k,
        radius,
        matches,
    })
}

/// `conf / K · Σ candidates`.
pub fn weighted_average(candidates: &[&[f64]], conf: f64) -> Result<Vec<f64>> {
    let first = candidates
        .first()
        .ok_or_else(|| Error::Contract("weighted_average needs at least one candidate".into()))?;
    if !conf.is_finite() {
        return Err(Error::NumericDomain(format!(
            "confidence {conf} is not finite"
        )));
    }
    if candidates.iter().any(|c| c.len() != first.len()) {
        return Err(dim_err!("candidate patches differ in length"));
    }
    let scale = conf / candidates.len() as f64;
    Ok((0..first.len())
        .map(|i| candidates.iter().map(|c| c[i]).sum::<f64>() * scale)
        .collect())
}

/// Aligned map `[(K+1)·C, H, W]`: candidate slots `0..K` followed by the
/// confidence-weighted average, assembled patch by patch. `conf` holds one
/// value per primary cell.
pub fn assemble_aligned(source: &PatchGrid, topk: &TopK, conf: &[f64]) -> Result<Tensor<f64>> {
    if (topk.rows, topk.cols) != (source.rows, source.cols) {
        return Err(dim_err!(
            "search result grid does not match the source grid"
        ));
    }
    if conf.len() != source.cells() {
        return Err(dim_err!(
            "need one confidence per cell ({}), got {}",
            source.cells(),
            conf.len()
        ));
    }
    let (ch, h, w, p) = (source.channels, source.height, source.width, source.patch);
    let len = source.vector_len();
    let mut groups: Vec<Vec<f64>> = vec![Vec::with_capacity(source.cells() * len); topk.k + 1];
    for r in 0..source.rows {
        for c in 0..source.cols {
            let cands: Vec<&[f64]> = (0..topk.k)
                .map(|s| {
                    let m = topk.slot(r, c, s);
                    source.patch_vector(m.row, m.col)
                })
                .collect();
            for (s, v) in cands.iter().enumerate() {
                groups[s].extend_from_slice(v);
            }
            groups[topk.k].extend(weighted_average(&cands, conf[r * source.cols + c])?);
        }
    }
    let mut data = Vec::with_capacity((topk.k + 1) * ch * h * w);
    for g in &groups {
        data.extend(scatter_patches(g, ch, h, w, p)?);
    }
    Tensor::new(vec![topk.k + 1, ch, h, w], data)?.reshape(vec![(topk.k + 1) * ch, h, w])
}

/// Pixel gather maps realizing candidate slot `s` for every `s < K`: entry
/// `y·W + x` is the source pixel that lands on primary pixel `(y, x)`.
pub fn candidate_maps(
    topk: &TopK,
    height: usize,
    width: usize,
    patch: usize,
) -> Result<Vec<Vec<usize>>> {
    if (topk.rows, topk.cols) != (height.div_ceil(patch), width.div_ceil(patch)) {
        return Err(dim_err!(
            "search grid does not tile a {height}x{width} map with patch {patch}"
        ));
    }
    let mut maps = vec![vec![0usize; height * width]; topk.k];
    for (s, map) in maps.iter_mut().enumerate() {
        for y in 0..height {
            for x in 0..width {
                let m = topk.slot(y / patch, x / patch, s);
                let sy = reflect_index((m.row * patch + y % patch) as isize, height);
                let sx = reflect_index((m.col * patch + x % patch) as isize, width);
                map[y * width + x] = sy * width + sx;
            }
        }
    }
    Ok(maps)
}

/// Groups the pixels of an `H × W` map by the patch cell they fall in.
pub fn patch_cells(height: usize, width: usize, patch: usize) -> CellPartition {
    let cols = width.div_ceil(patch);
    let cells = height.div_ceil(patch) * cols;
    let mut cell_of = Vec::with_capacity(height * width);
    let mut members = vec![Vec::new(); cells];
    for y in 0..height {
        for x in 0..width {
            let cell = (y / patch) * cols + x / patch;
            cell_of.push(cell);
            members[cell].push(y * width + x);
        }
    }
    CellPartition { cell_of, members }
}
