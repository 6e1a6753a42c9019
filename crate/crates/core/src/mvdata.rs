//! Multi-view dataset model: per-view feature matrices, the binary missing
//! indicator matrix, the two-parameter missing protocol, synthetic data
//! generation, and the on-disk formats.
//!
//! The mask is the single source of truth for availability: features of
//! missing views are stored and used as zeros, and every sample keeps at
//! least one available view.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("format error in {field}: {reason}")]
    Format { field: String, reason: String },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

type Result<T> = std::result::Result<T, DataError>;

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_data(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Matrix { rows, cols, data }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }
}

/// Incomplete multi-view dataset: `V` feature matrices sharing `N` rows, an
/// `N x V` binary availability mask, and optional ground-truth labels.
#[derive(Debug, Clone)]
pub struct MultiViewDataset {
    views: Vec<Matrix>,
    /// Row-major `N x V`, 1 = available.
    mask: Vec<u8>,
    labels: Option<Vec<u32>>,
    /// Number of clusters the labels draw from (0 = unknown).
    pub num_clusters: u32,
}

impl MultiViewDataset {
    /// Build and validate a dataset. Features of masked-out views are zeroed
    /// so the mask stays the single source of truth.
    pub fn new(
        views: Vec<Matrix>,
        mask: Vec<u8>,
        labels: Option<Vec<u32>>,
        num_clusters: u32,
    ) -> Result<Self> {
        if views.is_empty() {
            return Err(DataError::Invalid("dataset needs at least one view".into()));
        }
        let n = views[0].rows;
        let v = views.len();
        for (i, view) in views.iter().enumerate() {
            if view.rows != n {
                return Err(DataError::Invalid(format!(
                    "view {i} has {} rows, expected {n}",
                    view.rows
                )));
            }
            if view.cols == 0 {
                return Err(DataError::Invalid(format!("view {i} has zero columns")));
            }
        }
        if mask.len() != n * v {
            return Err(DataError::Invalid(format!(
                "mask has {} entries, expected {}",
                mask.len(),
                n * v
            )));
        }
        if mask.iter().any(|&m| m > 1) {
            return Err(DataError::Invalid("mask entries must be 0 or 1".into()));
        }
        for i in 0..n {
            if mask[i * v..(i + 1) * v].iter().all(|&m| m == 0) {
                return Err(DataError::Invalid(format!(
                    "sample {i} has no available view (mask row sums to 0)"
                )));
            }
        }
        if let Some(ref l) = labels {
            if l.len() != n {
                return Err(DataError::Invalid(format!(
                    "labels have {} entries, expected {n}",
                    l.len()
                )));
            }
            if num_clusters > 0 {
                if let Some(&bad) = l.iter().find(|&&x| x >= num_clusters) {
                    return Err(DataError::Invalid(format!(
                        "label {bad} out of range for {num_clusters} clusters"
                    )));
                }
            }
        }
        let mut ds = MultiViewDataset { views, mask, labels, num_clusters };
        ds.zero_masked();
        Ok(ds)
    }

    fn zero_masked(&mut self) {
        let v = self.views.len();
        for i in 0..self.n() {
            for (j, view) in self.views.iter_mut().enumerate() {
                if self.mask[i * v + j] == 0 {
                    view.row_mut(i).fill(0.0);
                }
            }
        }
    }

    pub fn n(&self) -> usize {
        self.views[0].rows
    }

    pub fn num_views(&self) -> usize {
        self.views.len()
    }

    pub fn view(&self, v: usize) -> &Matrix {
        &self.views[v]
    }

    pub fn view_dim(&self, v: usize) -> usize {
        self.views[v].cols
    }

    pub fn available(&self, i: usize, v: usize) -> bool {
        self.mask[i * self.num_views() + v] == 1
    }

    pub fn mask_row(&self, i: usize) -> &[u8] {
        let v = self.num_views();
        &self.mask[i * v..(i + 1) * v]
    }

    pub fn mask(&self) -> &[u8] {
        &self.mask
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    /// Fraction of missing entries: `1 - sum(M) / (N * V)`.
    pub fn missing_fraction(&self) -> f64 {
        missing_fraction(&self.mask)
    }

    /// Intersect the current mask with `extra` (used by the `mask` command
    /// and sweeps). A sample left with no views is an error.
    pub fn apply_mask(&self, extra: &[u8]) -> Result<Self> {
        if extra.len() != self.mask.len() {
            return Err(DataError::Invalid(format!(
                "mask has {} entries, expected {}",
                extra.len(),
                self.mask.len()
            )));
        }
        let mask: Vec<u8> = self.mask.iter().zip(extra).map(|(a, b)| a & b).collect();
        MultiViewDataset::new(self.views.clone(), mask, self.labels.clone(), self.num_clusters)
    }
}

/// Fraction of zeros in a binary mask.
pub fn missing_fraction(mask: &[u8]) -> f64 {
    let ones: usize = mask.iter().map(|&m| m as usize).sum();
    1.0 - ones as f64 / mask.len() as f64
}

// ---------------------------------------------------------------------------
// Missing protocol.
// ---------------------------------------------------------------------------

/// Two-parameter view-missing protocol: `missing_rate` controls the fraction
/// of incomplete samples and `missing_views` how many views each of them
/// loses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MissingProtocol {
    pub missing_rate: f64,
    pub missing_views: usize,
    pub seed: u64,
}

/// Generate an `n x v` mask: `floor(n * missing_rate)` samples are drawn
/// uniformly without replacement and each loses `missing_views` distinct
/// views chosen uniformly. Every row keeps at least one view.
pub fn generate_missing_mask(n: usize, v: usize, protocol: &MissingProtocol) -> Result<Vec<u8>> {
    if protocol.missing_views >= v {
        return Err(DataError::Protocol(format!(
            "missing_views = {} must be < number of views = {v}",
            protocol.missing_views
        )));
    }
    if !(0.0..=1.0).contains(&protocol.missing_rate) {
        return Err(DataError::Protocol(format!(
            "missing_rate = {} must be in [0, 1]",
            protocol.missing_rate
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(protocol.seed);
    let mut mask = vec![1u8; n * v];
    let incomplete = (n as f64 * protocol.missing_rate).floor() as usize;
    let mut sample_ids: Vec<usize> = (0..n).collect();
    sample_ids.shuffle(&mut rng);
    let mut view_ids: Vec<usize> = (0..v).collect();
    for &i in sample_ids.iter().take(incomplete) {
        view_ids.sort_unstable();
        view_ids.shuffle(&mut rng);
        for &j in view_ids.iter().take(protocol.missing_views) {
            mask[i * v + j] = 0;
        }
    }
    Ok(mask)
}

// ---------------------------------------------------------------------------
// Synthetic data.
// ---------------------------------------------------------------------------

/// Desk-scale synthetic multi-view generator: shared latent Gaussian blobs
/// pushed through fixed random linear maps per view.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n: usize,
    pub views: usize,
    pub clusters: usize,
    pub view_dim: usize,
    /// Distance between latent cluster centers, in units of the unit
    /// within-cluster standard deviation.
    pub separation: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n: 600,
            views: 2,
            clusters: 3,
            view_dim: 16,
            separation: 6.0,
            noise: 0.1,
            seed: 7,
        }
    }
}

use crate::rng::normal;

/// Generate a labeled dataset, deterministic per seed. Cluster ids are
/// assigned round-robin so label counts are balanced. Latent centers sit on
/// a scaled simplex with exact pairwise distance `separation`; each view
/// applies a fixed random linear map plus per-view Gaussian noise.
pub fn synthesize(spec: &SyntheticSpec) -> Result<MultiViewDataset> {
    if spec.clusters == 0 || spec.n == 0 || spec.views == 0 || spec.view_dim == 0 {
        return Err(DataError::Invalid("synthetic spec dimensions must be positive".into()));
    }
    if spec.separation < 0.0 || spec.noise < 0.0 {
        return Err(DataError::Invalid("separation and noise must be nonnegative".into()));
    }
    let latent_dim = spec.clusters;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // Fixed per-view maps, drawn before any sample so the sample count does
    // not change them.
    let scale = 1.0 / (latent_dim as f64).sqrt();
    let maps: Vec<Matrix> = (0..spec.views)
        .map(|_| {
            let data = (0..latent_dim * spec.view_dim).map(|_| normal(&mut rng) * scale).collect();
            Matrix::from_data(latent_dim, spec.view_dim, data)
        })
        .collect();

    let center_coord = spec.separation / std::f64::consts::SQRT_2;
    let mut views: Vec<Matrix> =
        (0..spec.views).map(|_| Matrix::zeros(spec.n, spec.view_dim)).collect();
    let mut labels = Vec::with_capacity(spec.n);
    let mut latent = vec![0.0; latent_dim];
    for i in 0..spec.n {
        let label = (i % spec.clusters) as u32;
        labels.push(label);
        for (d, l) in latent.iter_mut().enumerate() {
            let center = if d == label as usize { center_coord } else { 0.0 };
            *l = center + normal(&mut rng);
        }
        for (v, map) in maps.iter().enumerate() {
            let row = views[v].row_mut(i);
            for (j, r) in row.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (d, l) in latent.iter().enumerate() {
                    acc += l * map.get(d, j);
                }
                *r = acc + spec.noise * normal(&mut rng);
            }
        }
    }

    let mask = vec![1u8; spec.n * spec.views];
    MultiViewDataset::new(views, mask, Some(labels), spec.clusters as u32)
}

// ---------------------------------------------------------------------------
// Binary format (MVDS).
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 4] = b"MVDS";
const VERSION: u32 = 1;

fn read_u32(r: &mut impl Read, field: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| DataError::Format {
        field: field.into(),
        reason: format!("truncated: {e}"),
    })?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f64s(r: &mut impl Read, count: usize, field: &str) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; count * 8];
    r.read_exact(&mut bytes).map_err(|e| DataError::Format {
        field: field.into(),
        reason: format!("truncated: {e}"),
    })?;
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

/// Write a dataset in the little-endian MVDS container.
pub fn save_dataset(ds: &MultiViewDataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(ds.n() as u32).to_le_bytes())?;
    w.write_all(&(ds.num_views() as u32).to_le_bytes())?;
    w.write_all(&ds.num_clusters.to_le_bytes())?;
    for v in 0..ds.num_views() {
        let view = ds.view(v);
        w.write_all(&(view.cols as u32).to_le_bytes())?;
        for x in &view.data {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.write_all(&ds.mask)?;
    match ds.labels() {
        Some(labels) => {
            w.write_all(&[1u8])?;
            for &l in labels {
                w.write_all(&l.to_le_bytes())?;
            }
        }
        None => w.write_all(&[0u8])?,
    }
    w.flush()?;
    Ok(())
}

/// Read an MVDS container, validating the framing and the dataset
/// invariants. Features of masked entries are zeroed on load.
pub fn load_dataset(path: &Path) -> Result<MultiViewDataset> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| DataError::Format {
        field: "magic".into(),
        reason: format!("truncated: {e}"),
    })?;
    if &magic != MAGIC {
        return Err(DataError::Format {
            field: "magic".into(),
            reason: format!("expected MVDS, got {:?}", magic),
        });
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(DataError::Format {
            field: "version".into(),
            reason: format!("unsupported version {version}"),
        });
    }
    let n = read_u32(&mut r, "n")? as usize;
    let v = read_u32(&mut r, "views")? as usize;
    let num_clusters = read_u32(&mut r, "clusters")?;
    if n == 0 || v == 0 {
        return Err(DataError::Format {
            field: "header".into(),
            reason: format!("empty dataset (n={n}, views={v})"),
        });
    }
    let mut views = Vec::with_capacity(v);
    for vi in 0..v {
        let dim = read_u32(&mut r, &format!("view {vi} dim"))? as usize;
        if dim == 0 {
            return Err(DataError::Format {
                field: format!("view {vi} dim"),
                reason: "zero-dimensional view".into(),
            });
        }
        let data = read_f64s(&mut r, n * dim, &format!("view {vi} data"))?;
        views.push(Matrix::from_data(n, dim, data));
    }
    let mut mask = vec![0u8; n * v];
    r.read_exact(&mut mask).map_err(|e| DataError::Format {
        field: "mask".into(),
        reason: format!("truncated: {e}"),
    })?;
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag).map_err(|e| DataError::Format {
        field: "labels flag".into(),
        reason: format!("truncated: {e}"),
    })?;
    let labels = if flag[0] == 1 {
        let mut ls = Vec::with_capacity(n);
        for i in 0..n {
            ls.push(read_u32(&mut r, &format!("label {i}"))?);
        }
        Some(ls)
    } else {
        None
    };
    MultiViewDataset::new(views, mask, labels, num_clusters)
}

// ---------------------------------------------------------------------------
// CSV alternative: view_<v>.csv, mask.csv, labels.csv (headerless).
// ---------------------------------------------------------------------------

/// Write the headerless CSV layout into `dir`.
pub fn save_dataset_csv(ds: &MultiViewDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for v in 0..ds.num_views() {
        let mut w = BufWriter::new(File::create(dir.join(format!("view_{v}.csv")))?);
        let view = ds.view(v);
        for i in 0..view.rows {
            let row: Vec<String> = view.row(i).iter().map(|x| format!("{x}")).collect();
            writeln!(w, "{}", row.join(","))?;
        }
    }
    let mut w = BufWriter::new(File::create(dir.join("mask.csv"))?);
    let v = ds.num_views();
    for i in 0..ds.n() {
        let row: Vec<String> =
            ds.mask[i * v..(i + 1) * v].iter().map(|m| m.to_string()).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    if let Some(labels) = ds.labels() {
        let mut w = BufWriter::new(File::create(dir.join("labels.csv"))?);
        for &l in labels {
            writeln!(w, "{l}")?;
        }
    }
    Ok(())
}

fn read_csv_matrix(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for cell in line.split(',') {
            row.push(cell.trim().parse::<f64>().map_err(|e| DataError::Format {
                field: format!("{}:{}", path.display(), ln + 1),
                reason: format!("bad number {cell:?}: {e}"),
            })?);
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Read the headerless CSV layout from `dir`. `num_clusters` is inferred
/// from the labels when present.
pub fn load_dataset_csv(dir: &Path) -> Result<MultiViewDataset> {
    let mut views = Vec::new();
    for v in 0.. {
        let p = dir.join(format!("view_{v}.csv"));
        if !p.exists() {
            break;
        }
        let rows = read_csv_matrix(&p)?;
        let n = rows.len();
        if n == 0 {
            return Err(DataError::Format {
                field: p.display().to_string(),
                reason: "empty".into(),
            });
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(DataError::Format {
                field: p.display().to_string(),
                reason: "ragged rows".into(),
            });
        }
        views.push(Matrix::from_data(n, cols, rows.into_iter().flatten().collect()));
    }
    if views.is_empty() {
        return Err(DataError::Format {
            field: dir.display().to_string(),
            reason: "no view_<v>.csv files found".into(),
        });
    }
    let mask_rows = read_csv_matrix(&dir.join("mask.csv"))?;
    let mask: Vec<u8> = mask_rows
        .into_iter()
        .flatten()
        .map(|x| {
            if x == 0.0 {
                Ok(0u8)
            } else if x == 1.0 {
                Ok(1u8)
            } else {
                Err(DataError::Format {
                    field: "mask.csv".into(),
                    reason: format!("mask entry {x} is not 0/1"),
                })
            }
        })
        .collect::<Result<_>>()?;
    let labels_path = dir.join("labels.csv");
    let (labels, num_clusters) = if labels_path.exists() {
        let rows = read_csv_matrix(&labels_path)?;
        let ls: Vec<u32> = rows.into_iter().flatten().map(|x| x as u32).collect();
        let k = ls.iter().copied().max().map_or(0, |m| m + 1);
        (Some(ls), k)
    } else {
        (None, 0)
    };
    MultiViewDataset::new(views, mask, labels, num_clusters)
}
