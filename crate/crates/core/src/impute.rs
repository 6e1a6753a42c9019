//! Cross-view KNN imputation and the augmentation pipeline.
//!
//! The per-view neighbor rankings are precomputed once over the dataset's
//! own mask; per-iteration view dropout only re-runs the cheap selection
//! phase, never the O(N^2) search. The combined preprocessing (KIDA)
//! produces a clean neighbor stack and an augmented twin per sample:
//! view dropout marks existing views as missing before imputation, then
//! Gaussian noise and elementwise dropout perturb the imputed stack.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::mvdata::{missing_fraction, Matrix, MultiViewDataset};
use crate::rng::normal;

/// Cosine distance `1 - cos(a, b)`, in `[0, 2]`. The distance to a zero
/// vector is defined as the maximum, 2; such vectors only arise as padding
/// and are always attention-masked downstream.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 2.0;
    }
    // sqrt of the product (not the product of sqrts) keeps the distance of
    // parallel vectors at exactly 0, so id tie-breaking applies there.
    (1.0 - dot / (na * nb).sqrt()).clamp(0.0, 2.0)
}

/// Per-view exact neighbor rankings by ascending cosine distance, ties
/// broken by ascending sample id. Samples missing in a view have no list
/// there and never appear in that view's lists.
pub struct KnnIndex {
    /// `lists[v][i]` = ranked neighbor ids of sample `i` in view `v`
    /// (empty when the view is unavailable for `i`).
    lists: Vec<Vec<Vec<u32>>>,
}

impl KnnIndex {
    pub fn neighbors(&self, view: usize, sample: usize) -> &[u32] {
        &self.lists[view][sample]
    }
}

/// Rank every available sample's neighbors in every view (exact,
/// non-approximate). A view with fewer than 2 available samples yields
/// empty lists; downstream imputation pads.
pub fn build_knn_index(ds: &MultiViewDataset) -> KnnIndex {
    let n = ds.n();
    let v = ds.num_views();
    let mut lists = Vec::with_capacity(v);
    for view in 0..v {
        let available: Vec<u32> =
            (0..n).filter(|&i| ds.available(i, view)).map(|i| i as u32).collect();
        let mut per_view = vec![Vec::new(); n];
        if available.len() >= 2 {
            let data = ds.view(view);
            for &i in &available {
                let mut ranked: Vec<(f64, u32)> = available
                    .iter()
                    .filter(|&&j| j != i)
                    .map(|&j| (cosine_distance(data.row(i as usize), data.row(j as usize)), j))
                    .collect();
                ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                per_view[i as usize] = ranked.into_iter().map(|(_, j)| j).collect();
            }
        }
        lists.push(per_view);
    }
    KnnIndex { lists }
}

/// One sample's neighbor stack: per view a `k x d_v` matrix plus the
/// `k x V` validity mask (1 = real vector, 0 = zero padding).
#[derive(Debug, Clone)]
pub struct ImputedSample {
    pub views: Vec<Matrix>,
    /// Row-major `k x V`.
    pub validity: Vec<u8>,
    pub k: usize,
}

impl ImputedSample {
    pub fn validity_column(&self, view: usize) -> Vec<u8> {
        let v = self.views.len();
        (0..self.k).map(|r| self.validity[r * v + view]).collect()
    }
}

/// Fill the `k`-row stack for one (sample, view) pair.
///
/// For an existing view the stack is the sample's own vector followed by its
/// ranked neighbors. For a missing view, candidates are gathered
/// rank-major: for each neighbor rank, iterate the sample's existing views
/// in ascending index and take that view's rank-th neighbor if the target
/// view exists for it. Candidates are deduplicated by sample id (first
/// occurrence wins), truncated to `k`, and zero-padded with validity 0.
pub fn knn_impute(
    ds: &MultiViewDataset,
    index: &KnnIndex,
    sample: usize,
    view: usize,
    k: usize,
    effective_mask: &[u8],
) -> (Matrix, Vec<u8>) {
    let d = ds.view_dim(view);
    let mut out = Matrix::zeros(k, d);
    let mut validity = vec![0u8; k];
    if effective_mask[view] == 1 {
        out.row_mut(0).copy_from_slice(ds.view(view).row(sample));
        validity[0] = 1;
        for (slot, &j) in index.neighbors(view, sample).iter().take(k - 1).enumerate() {
            out.row_mut(slot + 1).copy_from_slice(ds.view(view).row(j as usize));
            validity[slot + 1] = 1;
        }
        return (out, validity);
    }
    let num_views = ds.num_views();
    let mut candidates: Vec<u32> = Vec::with_capacity(k);
    let mut seen = vec![false; ds.n()];
    'outer: for rank in 0..k {
        for b in 0..num_views {
            if b == view || effective_mask[b] == 0 {
                continue;
            }
            let list = index.neighbors(b, sample);
            // A view can run out of neighbors before rank k; skip it.
            if rank >= list.len() {
                continue;
            }
            let j = list[rank] as usize;
            if ds.available(j, view) && !seen[j] {
                seen[j] = true;
                candidates.push(j as u32);
                if candidates.len() == k {
                    break 'outer;
                }
            }
        }
    }
    for (slot, &j) in candidates.iter().enumerate() {
        out.row_mut(slot).copy_from_slice(ds.view(view).row(j as usize));
        validity[slot] = 1;
    }
    (out, validity)
}

// ---------------------------------------------------------------------------
// Augmentation.
// ---------------------------------------------------------------------------

/// Augmentation strengths. `phi1` drives view dropout, `phi2` scales the
/// Gaussian noise, `phi3` is the elementwise dropout probability, and
/// `epsilon` is the floor of the `phi1` schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentationParams {
    pub phi1: f64,
    pub phi2: f64,
    pub phi3: f64,
    pub epsilon: f64,
}

impl Default for AugmentationParams {
    fn default() -> Self {
        AugmentationParams { phi1: 0.15, phi2: 0.05, phi3: 0.05, epsilon: 0.15 }
    }
}

impl AugmentationParams {
    /// Set `phi1` from the dataset's actual missing fraction.
    pub fn with_scheduled_phi1(mut self, mask: &[u8]) -> Self {
        self.phi1 = phi1_schedule(mask, self.epsilon);
        self
    }
}

/// View-dropout probability growing with the actual missing rate:
/// `epsilon + (1 - epsilon) * missing_fraction^2`.
pub fn phi1_schedule(mask: &[u8], epsilon: f64) -> f64 {
    phi1_from_fraction(missing_fraction(mask), epsilon)
}

pub fn phi1_from_fraction(fraction: f64, epsilon: f64) -> f64 {
    epsilon + (1.0 - epsilon) * fraction * fraction
}

/// Drop each existing view independently with probability `phi1`; if
/// nothing survives, resample so the row keeps at least one view, matching
/// the dataset restriction. `phi1 >= 1` degenerates to keeping a single
/// uniformly chosen existing view.
pub fn view_dropout(mask_row: &[u8], phi1: f64, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let existing: Vec<usize> =
        mask_row.iter().enumerate().filter(|(_, &m)| m == 1).map(|(i, _)| i).collect();
    assert!(!existing.is_empty(), "view_dropout needs at least one existing view");
    if phi1 <= 0.0 {
        return mask_row.to_vec();
    }
    if phi1 >= 1.0 {
        let keep = existing[rng.gen_range(0..existing.len())];
        let mut out = vec![0u8; mask_row.len()];
        out[keep] = 1;
        return out;
    }
    loop {
        let mut out = vec![0u8; mask_row.len()];
        let mut survivors = 0;
        for &v in &existing {
            if rng.gen::<f64>() >= phi1 {
                out[v] = 1;
                survivors += 1;
            }
        }
        if survivors > 0 {
            return out;
        }
    }
}

/// Add `phi2`-scaled Gaussian noise to every element, then zero each element
/// independently with probability `phi3`. Applied uniformly, padding
/// included; padded rows stay inert because they are attention-masked.
pub fn noise_and_dropout(stack: &mut ImputedSample, phi2: f64, phi3: f64, rng: &mut ChaCha8Rng) {
    for view in &mut stack.views {
        for x in &mut view.data {
            if phi2 > 0.0 {
                *x += phi2 * normal(rng);
            }
            if phi3 > 0.0 && rng.gen::<f64>() < phi3 {
                *x = 0.0;
            }
        }
    }
}

/// Clean and augmented neighbor stacks for one sample, with the effective
/// view masks that produced them.
#[derive(Debug, Clone)]
pub struct KidaOutput {
    pub clean: ImputedSample,
    pub clean_mask: Vec<u8>,
    pub augmented: ImputedSample,
    pub augmented_mask: Vec<u8>,
}

fn impute_all_views(
    ds: &MultiViewDataset,
    index: &KnnIndex,
    sample: usize,
    k: usize,
    effective_mask: &[u8],
) -> ImputedSample {
    let num_views = ds.num_views();
    let mut views = Vec::with_capacity(num_views);
    let mut validity = vec![0u8; k * num_views];
    for v in 0..num_views {
        let (stack, col) = knn_impute(ds, index, sample, v, k, effective_mask);
        for (r, &c) in col.iter().enumerate() {
            validity[r * num_views + v] = c;
        }
        views.push(stack);
    }
    ImputedSample { views, validity, k }
}

/// The full preprocessing for one sample: imputation under the original
/// mask, plus an augmented twin produced by view dropout, re-imputation
/// under the reduced mask, and noise/dropout. With `training = false` the
/// twin equals the clean stack.
pub fn kida(
    ds: &MultiViewDataset,
    index: &KnnIndex,
    sample: usize,
    k: usize,
    params: &AugmentationParams,
    rng: &mut ChaCha8Rng,
    training: bool,
) -> KidaOutput {
    let clean_mask = ds.mask_row(sample).to_vec();
    let clean = impute_all_views(ds, index, sample, k, &clean_mask);
    if !training {
        return KidaOutput {
            augmented: clean.clone(),
            augmented_mask: clean_mask.clone(),
            clean,
            clean_mask,
        };
    }
    let augmented_mask = view_dropout(&clean_mask, params.phi1, rng);
    let mut augmented = impute_all_views(ds, index, sample, k, &augmented_mask);
    noise_and_dropout(&mut augmented, params.phi2, params.phi3, rng);
    KidaOutput { clean, clean_mask, augmented, augmented_mask }
}
