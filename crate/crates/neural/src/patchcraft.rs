//! Synthetic frames assembled from nearest-neighbour line patches.
//!
//! The target line is tiled into non-overlapping patches (one tiling per
//! starting offset). Every tile is matched by L2 distance against all
//! same-length segments of the lines within a window of adjacent angles; the
//! n-th best match of every tile forms frame n.

use serde::{Deserialize, Serialize};

use crate::error::{NeuralError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchCraftConfig {
    /// Odd patch length along the detector width.
    pub patch_len: usize,
    pub n_neighbors: usize,
    pub n_offsets: usize,
    /// Angles searched on each side of the target.
    pub search_angles: usize,
}

impl Default for PatchCraftConfig {
    fn default() -> Self {
        Self {
            patch_len: 7,
            n_neighbors: 5,
            n_offsets: 3,
            search_angles: 4,
        }
    }
}

impl PatchCraftConfig {
    pub fn validate(&self, width: usize) -> Result<()> {
        if self.patch_len % 2 == 0 || self.patch_len == 0 {
            return Err(NeuralError::Config(format!("patch length {} must be odd", self.patch_len)));
        }
        if self.patch_len >= width {
            return Err(NeuralError::Config(format!("patch length {} must be below the width {width}", self.patch_len)));
        }
        if self.n_neighbors == 0 || self.n_offsets == 0 {
            return Err(NeuralError::Config("patch craft needs at least one neighbour and one offset".into()));
        }
        Ok(())
    }

    /// Starting offset of tiling `j`.
    pub fn offset(&self, j: usize) -> usize {
        j * self.patch_len / self.n_offsets
    }
}

/// Frames and per-pixel patch distances, both `[offset][rank][width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frames {
    pub n_offsets: usize,
    pub n_neighbors: usize,
    pub width: usize,
    pub frames: Vec<f64>,
    pub distances: Vec<f64>,
}

impl Frames {
    pub fn frame(&self, offset: usize, rank: usize) -> &[f64] {
        &self.frames[(offset * self.n_neighbors + rank) * self.width..][..self.width]
    }

    pub fn distance(&self, offset: usize, rank: usize) -> &[f64] {
        &self.distances[(offset * self.n_neighbors + rank) * self.width..][..self.width]
    }
}

/// Tile spans `[start, end)` of the tiling that starts at `offset`.
pub fn tiles(width: usize, patch_len: usize, offset: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = offset % patch_len;
    if start > 0 {
        out.push((0, start));
    }
    while start < width {
        out.push((start, (start + patch_len).min(width)));
        start += patch_len;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Match {
    dist: f64,
    angle: usize,
    pos: usize,
}

fn better(a: &Match, b: &Match) -> bool {
    (a.dist, a.angle, a.pos) < (b.dist, b.angle, b.pos)
}

/// `sino` is `[n_angles][width]`. Ties are broken by lowest angle, then
/// lowest position.
pub fn patch_craft_frames(sino: &[f64], width: usize, n_angles: usize, target: usize, cfg: &PatchCraftConfig) -> Result<Frames> {
    cfg.validate(width)?;
    if sino.len() != width * n_angles || target >= n_angles {
        return Err(NeuralError::shape(
            "patch_craft",
            format!("{n_angles} × {width} sinogram with target < {n_angles}"),
            (sino.len(), target),
        ));
    }
    let (o, r) = (cfg.n_offsets, cfg.n_neighbors);
    let lo = target.saturating_sub(cfg.search_angles);
    let hi = (target + cfg.search_angles).min(n_angles - 1);
    let line = |a: usize| &sino[a * width..(a + 1) * width];
    let query_line = line(target);
    let mut frames = vec![0.0; o * r * width];
    let mut distances = vec![0.0; o * r * width];
    let mut best: Vec<Match> = Vec::with_capacity(r + 1);
    for j in 0..o {
        for (s, e) in tiles(width, cfg.patch_len, cfg.offset(j)) {
            let len = e - s;
            let query = &query_line[s..e];
            best.clear();
            for a in lo..=hi {
                let cand_line = line(a);
                for pos in 0..=width - len {
                    let cand = &cand_line[pos..pos + len];
                    let mut d = 0.0;
                    for (x, y) in cand.iter().zip(query) {
                        d += (x - y) * (x - y);
                    }
                    let m = Match {
                        dist: d / len as f64,
                        angle: a,
                        pos,
                    };
                    if best.len() == r && !better(&m, &best[r - 1]) {
                        continue;
                    }
                    let at = best.iter().position(|b| better(&m, b)).unwrap_or(best.len());
                    best.insert(at, m);
                    best.truncate(r);
                }
            }
            for (rank, m) in best.iter().enumerate() {
                let src = &line(m.angle)[m.pos..m.pos + len];
                let base = (j * r + rank) * width;
                frames[base + s..base + e].copy_from_slice(src);
                distances[base + s..base + e].iter_mut().for_each(|d| *d = m.dist);
            }
        }
    }
    Ok(Frames {
        n_offsets: o,
        n_neighbors: r,
        width,
        frames,
        distances,
    })
}
