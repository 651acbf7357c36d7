//! Grouped token masking: sampling connected patch groups and applying them
//! to images in pixel space.
//!
//! Masks are built by repeatedly dropping a random rectangle (side lengths
//! geometric, configurable mean) onto the grid until the masked count first
//! reaches the target fraction; the final block is then trimmed
//! token-by-token so the count lands exactly on `ceil(ratio·n)`. Rectangles
//! may stick out past the grid border and are clipped — each one is placed
//! uniformly over every position that meets the grid, which puts every cell
//! under exactly `bh·bw` placements and keeps the per-token masking
//! probability uniform across the grid, border included. A placement that
//! adds no new patch is redrawn, so every accepted block makes progress.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::ImageBatch;
use crate::error::{Error, Result};

/// One corrupted view: the token mask, its pixel-space dilation, and the
/// masked images. Masks store exact 0.0/1.0 values.
#[derive(Debug, Clone)]
pub struct MaskPair {
    /// (N, n); 1 = masked token.
    pub token_mask: Array2<f32>,
    /// (N, H·W); 1 = manipulated pixel. Exactly the patch-wise dilation of
    /// `token_mask`.
    pub pixel_mask: Array2<f32>,
    /// Input images with masked patches zeroed.
    pub corrupted: ImageBatch,
}

/// Sample a grouped mask over a `grid.0 × grid.1` patch grid with the given
/// target masked fraction. Returns one 0/1 flag per patch in row-major
/// order.
pub fn sample_group_mask(
    grid: (usize, usize),
    ratio: f64,
    mean_block_side: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<u8>> {
    let (gh, gw) = grid;
    let n = gh * gw;
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Data(format!("mask ratio must lie in [0, 1], got {ratio}")));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let target = ((ratio * n as f64).ceil() as usize).min(n);

    let mut mask = vec![0u8; n];
    let mut count = 0usize;
    let mut newly: Vec<usize> = Vec::new();
    while count < target {
        let bh = geometric_side(mean_block_side, rng).min(gh) as i64;
        let bw = geometric_side(mean_block_side, rng).min(gw) as i64;
        // Uniform over every placement whose rectangle meets the grid: cell
        // (r, c) lies under exactly bh·bw of them, so the border is masked
        // as often as the interior. Out-of-grid cells are clipped, and a
        // placement that adds nothing new is redrawn, which is what makes
        // the loop advance toward the target.
        let top = rng.random_range(1 - bh..gh as i64);
        let left = rng.random_range(1 - bw..gw as i64);

        newly.clear();
        for r in top..top + bh {
            if r < 0 || r >= gh as i64 {
                continue;
            }
            for c in left..left + bw {
                if c < 0 || c >= gw as i64 {
                    continue;
                }
                let idx = r as usize * gw + c as usize;
                if mask[idx] == 0 {
                    mask[idx] = 1;
                    count += 1;
                    newly.push(idx);
                }
            }
        }
    }

    // Trim the overshoot uniformly among the last block's additions.
    while count > target {
        let i = rng.random_range(0..newly.len());
        mask[newly.swap_remove(i)] = 0;
        count -= 1;
    }
    Ok(mask)
}

/// Geometric side length with the given mean (support 1, 2, …).
fn geometric_side(mean: f64, rng: &mut ChaCha8Rng) -> usize {
    let p = (1.0 / mean.max(1.0)).min(1.0);
    if p >= 1.0 {
        return 1;
    }
    let u: f64 = rng.random_range(0.0..1.0);
    let k = 1.0 + ((1.0 - u).ln() / (1.0 - p).ln()).floor();
    k.max(1.0) as usize
}

/// Zero the masked patches of every image, producing the coupled token and
/// pixel masks. `token_mask` is (N, n) with n matching the batch geometry.
pub fn apply_mask(batch: &ImageBatch, token_mask: &Array2<f32>, p: usize) -> Result<MaskPair> {
    let (h, w) = (batch.height, batch.width);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Data(format!("image {h}x{w} not divisible by patch size {p}")));
    }
    let (gh, gw) = (h / p, w / p);
    let n = gh * gw;
    if token_mask.dim() != (batch.len(), n) {
        return Err(Error::Data(format!(
            "token mask shape {:?} does not match batch geometry ({}, {})",
            token_mask.dim(),
            batch.len(),
            n
        )));
    }

    let mut pixel_mask = Array2::zeros((batch.len(), h * w));
    let mut corrupted = batch.images.clone();
    for i in 0..batch.len() {
        for t in 0..n {
            if token_mask[(i, t)] == 0.0 {
                continue;
            }
            let (pr, pc) = (t / gw, t % gw);
            for a in 0..p {
                let row = (pr * p + a) * w + pc * p;
                for b in 0..p {
                    pixel_mask[(i, row + b)] = 1.0;
                    corrupted[(i, row + b)] = 0.0;
                }
            }
        }
    }

    let corrupted = ImageBatch {
        images: corrupted,
        height: h,
        width: w,
        labels: batch.labels.clone(),
        ids: batch.ids.clone(),
    };
    Ok(MaskPair { token_mask: token_mask.clone(), pixel_mask, corrupted })
}

/// Connected components of the masked set under 4-connectivity, as lists of
/// token indices. Used by mask-quality diagnostics and tests.
pub fn masked_components(mask: &[u8], grid: (usize, usize)) -> Vec<Vec<usize>> {
    let (gh, gw) = grid;
    assert_eq!(mask.len(), gh * gw, "mask length vs grid");
    let mut seen = vec![false; mask.len()];
    let mut comps = Vec::new();
    for start in 0..mask.len() {
        if mask[start] == 0 || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut queue = std::collections::VecDeque::from([start]);
        seen[start] = true;
        while let Some(idx) = queue.pop_front() {
            comp.push(idx);
            let (r, c) = (idx / gw, idx % gw);
            let mut push = |nr: isize, nc: isize| {
                if nr < 0 || nc < 0 || nr >= gh as isize || nc >= gw as isize {
                    return;
                }
                let nidx = nr as usize * gw + nc as usize;
                if mask[nidx] == 1 && !seen[nidx] {
                    seen[nidx] = true;
                    queue.push_back(nidx);
                }
            };
            push(r as isize - 1, c as isize);
            push(r as isize + 1, c as isize);
            push(r as isize, c as isize - 1);
            push(r as isize, c as isize + 1);
        }
        comps.push(comp);
    }
    comps
}
