//! Exhaustive Euclidean-distance retrieval and the evaluation metrics,
//! plus the on-disk embedding exchange format.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

/// Which camera produced an embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    Drone,
    Satellite,
}

/// Retrieval direction; the first view queries the second.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    DroneToSatellite,
    SatelliteToDrone,
}

impl Direction {
    pub fn query_view(&self) -> View {
        match self {
            Direction::DroneToSatellite => View::Drone,
            Direction::SatelliteToDrone => View::Satellite,
        }
    }
    pub fn gallery_view(&self) -> View {
        match self {
            Direction::DroneToSatellite => View::Satellite,
            Direction::SatelliteToDrone => View::Drone,
        }
    }
}

/// Immutable embedding collection: unit-norm rows, a location id and a
/// view tag per row.
#[derive(Debug, Clone)]
pub struct GalleryIndex {
    embeddings: Tensor<f32>,
    ids: Vec<u64>,
    views: Vec<View>,
}

impl GalleryIndex {
    pub fn new(embeddings: Tensor<f32>, ids: Vec<u64>, views: Vec<View>) -> Result<Self> {
        let s = embeddings.shape();
        if s.len() != 2 || s[0] == 0 || s[1] == 0 {
            return Err(Error::Dimension(format!(
                "gallery wants a non-empty [M,d] matrix, got {:?}",
                s
            )));
        }
        let (m, d) = (s[0], s[1]);
        if ids.len() != m || views.len() != m {
            return Err(Error::Dimension(format!(
                "{} ids and {} view tags for {} embeddings",
                ids.len(),
                views.len(),
                m
            )));
        }
        for r in 0..m {
            let row = &embeddings.values()[r * d..(r + 1) * d];
            let norm: f64 = row.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::Data(format!(
                    "embedding row {} (id {}) has norm {}, expected unit length",
                    r, ids[r], norm
                )));
            }
        }
        Ok(GalleryIndex { embeddings, ids, views })
    }

    /// All rows share one view tag; the common case for a loaded file.
    pub fn with_uniform_view(embeddings: Tensor<f32>, ids: Vec<u64>, view: View) -> Result<Self> {
        let n = ids.len();
        Self::new(embeddings, ids, vec![view; n])
    }

    pub fn len(&self) -> usize {
        self.embeddings.shape()[0]
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    pub fn dim(&self) -> usize {
        self.embeddings.shape()[1]
    }
    pub fn ids(&self) -> &[u64] {
        &self.ids
    }
    pub fn views(&self) -> &[View] {
        &self.views
    }
    pub fn embeddings(&self) -> &Tensor<f32> {
        &self.embeddings
    }
    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.dim();
        &self.embeddings.values()[i * d..(i + 1) * d]
    }

    /// Sub-index containing only rows with the given view tag.
    pub fn filter_view(&self, view: View) -> Result<GalleryIndex> {
        let d = self.dim();
        let mut values = Vec::new();
        let mut ids = Vec::new();
        for i in 0..self.len() {
            if self.views[i] == view {
                values.extend_from_slice(self.row(i));
                ids.push(self.ids[i]);
            }
        }
        if ids.is_empty() {
            return Err(Error::Data(format!("no {:?} entries in the index", view)));
        }
        let m = ids.len();
        GalleryIndex::new(Tensor::new(vec![m, d], values)?, ids.clone(), vec![view; m])
    }
}

/// Full gallery ordering for one query, nearest first.
#[derive(Debug, Clone)]
pub struct RankingResult {
    /// Gallery row indices, best match first.
    pub order: Vec<usize>,
    /// Location ids in ranked order.
    pub ids: Vec<u64>,
    /// Euclidean distances, nondecreasing.
    pub distances: Vec<f64>,
}

impl RankingResult {
    pub fn len(&self) -> usize {
        self.order.len()
    }
    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

/// Exhaustive exact ranking by Euclidean distance, ties broken by
/// ascending gallery index.
pub fn rank(query: &[f32], gallery: &GalleryIndex) -> Result<RankingResult> {
    if query.len() != gallery.dim() {
        return Err(Error::Dimension(format!(
            "query dim {} vs gallery dim {}",
            query.len(),
            gallery.dim()
        )));
    }
    let mut scored: Vec<(f64, usize)> = (0..gallery.len())
        .map(|i| {
            let row = gallery.row(i);
            let mut acc = 0.0f64;
            for (&q, &g) in query.iter().zip(row) {
                let d = q as f64 - g as f64;
                acc += d * d;
            }
            (acc, i)
        })
        .collect();
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let order: Vec<usize> = scored.iter().map(|&(_, i)| i).collect();
    let ids: Vec<u64> = order.iter().map(|&i| gallery.ids()[i]).collect();
    let distances: Vec<f64> = scored.iter().map(|&(d, _)| d.sqrt()).collect();
    Ok(RankingResult { order, ids, distances })
}

/// Mean of precision-at-k over the ranks holding relevant items, divided
/// by the number of relevant items present in the gallery.
pub fn average_precision(ranking: &RankingResult, relevant: &BTreeSet<u64>) -> Result<f64> {
    if relevant.is_empty() {
        return Err(Error::Domain("empty relevant set".into()));
    }
    let mut hits = 0usize;
    let mut acc = 0.0f64;
    for (k, id) in ranking.ids.iter().enumerate() {
        if relevant.contains(id) {
            hits += 1;
            acc += hits as f64 / (k + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(Error::Domain("no relevant ids present in the gallery".into()));
    }
    Ok(acc / hits as f64)
}

/// Retrieval cutoff: an absolute rank or a percentage of the gallery.
#[derive(Debug, Clone, Copy)]
pub enum Cutoff {
    Rank(usize),
    Percent(f64),
}

impl Cutoff {
    fn count(&self, gallery_size: usize) -> Result<usize> {
        match *self {
            Cutoff::Rank(k) => {
                if k == 0 {
                    return Err(Error::Domain("rank cutoff must be at least 1".into()));
                }
                Ok(k.min(gallery_size))
            }
            Cutoff::Percent(p) => {
                if !(p > 0.0) {
                    return Err(Error::Domain(format!("percent cutoff {} must be positive", p)));
                }
                Ok(((p / 100.0 * gallery_size as f64).ceil() as usize).max(1))
            }
        }
    }
}

/// Hit-based recall: 1 when any relevant item appears within the cutoff.
pub fn recall_at(ranking: &RankingResult, relevant: &BTreeSet<u64>, cutoff: Cutoff) -> Result<f64> {
    if relevant.is_empty() {
        return Err(Error::Domain("empty relevant set".into()));
    }
    let c = cutoff.count(ranking.len())?;
    let hit = ranking.ids[..c].iter().any(|id| relevant.contains(id));
    Ok(if hit { 1.0 } else { 0.0 })
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PerQueryMetrics {
    pub ap: Vec<f64>,
    pub r1: Vec<f64>,
    pub r5: Vec<f64>,
    pub r10: Vec<f64>,
    pub r1pct: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct MeanMetrics {
    pub ap: f64,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub r1pct: f64,
}

/// Evaluation result: per-query metric arrays plus arithmetic means.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub queries: usize,
    pub gallery_size: usize,
    pub per_query: PerQueryMetrics,
    pub mean: MeanMetrics,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Rank every query against the gallery and aggregate the five metrics.
/// Every query id must appear in the gallery.
pub fn evaluate_pair(queries: &GalleryIndex, gallery: &GalleryIndex) -> Result<MetricsReport> {
    if queries.dim() != gallery.dim() {
        return Err(Error::Dimension(format!(
            "query dim {} vs gallery dim {}",
            queries.dim(),
            gallery.dim()
        )));
    }
    let gallery_ids: BTreeSet<u64> = gallery.ids().iter().copied().collect();
    for (i, id) in queries.ids().iter().enumerate() {
        if !gallery_ids.contains(id) {
            return Err(Error::Data(format!(
                "query {} has id {} with no gallery entry",
                i, id
            )));
        }
    }
    let rows: Vec<(f64, f64, f64, f64, f64)> = (0..queries.len())
        .into_par_iter()
        .map(|qi| {
            let ranking = rank(queries.row(qi), gallery)?;
            let relevant: BTreeSet<u64> = [queries.ids()[qi]].into_iter().collect();
            Ok((
                average_precision(&ranking, &relevant)?,
                recall_at(&ranking, &relevant, Cutoff::Rank(1))?,
                recall_at(&ranking, &relevant, Cutoff::Rank(5))?,
                recall_at(&ranking, &relevant, Cutoff::Rank(10))?,
                recall_at(&ranking, &relevant, Cutoff::Percent(1.0))?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    let per_query = PerQueryMetrics {
        ap: rows.iter().map(|r| r.0).collect(),
        r1: rows.iter().map(|r| r.1).collect(),
        r5: rows.iter().map(|r| r.2).collect(),
        r10: rows.iter().map(|r| r.3).collect(),
        r1pct: rows.iter().map(|r| r.4).collect(),
    };
    let mean = MeanMetrics {
        ap: mean(&per_query.ap),
        r1: mean(&per_query.r1),
        r5: mean(&per_query.r5),
        r10: mean(&per_query.r10),
        r1pct: mean(&per_query.r1pct),
    };
    Ok(MetricsReport {
        queries: queries.len(),
        gallery_size: gallery.len(),
        per_query,
        mean,
    })
}

/// Evaluate one direction within a mixed-view index.
pub fn evaluate(index: &GalleryIndex, direction: Direction) -> Result<MetricsReport> {
    let queries = index.filter_view(direction.query_view())?;
    let gallery = index.filter_view(direction.gallery_view())?;
    evaluate_pair(&queries, &gallery)
}

// ── embedding file format ────────────────────────────────────────────

const EMBED_MAGIC: &[u8; 4] = b"EGSE";
const EMBED_VERSION: u32 = 1;

/// Write embeddings as: magic "EGSE", version u32, count u64, dim u64,
/// then per record an id u64 and the f32 vector, all little-endian.
/// The write is atomic (temp file + rename).
pub fn write_embeddings(path: &Path, ids: &[u64], embeddings: &Tensor<f32>) -> Result<()> {
    let s = embeddings.shape();
    if s.len() != 2 || s[0] != ids.len() {
        return Err(Error::Dimension(format!(
            "{} ids for embedding matrix {:?}",
            ids.len(),
            s
        )));
    }
    let (m, d) = (s[0], s[1]);
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let w = tmp.as_file_mut();
        w.write_all(EMBED_MAGIC)?;
        w.write_all(&EMBED_VERSION.to_le_bytes())?;
        w.write_all(&(m as u64).to_le_bytes())?;
        w.write_all(&(d as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(8 + d * 4);
        for r in 0..m {
            buf.clear();
            buf.extend_from_slice(&ids[r].to_le_bytes());
            for &x in &embeddings.values()[r * d..(r + 1) * d] {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.flush()?;
    }
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Read a file produced by [`write_embeddings`].
pub fn read_embeddings(path: &Path) -> Result<(Vec<u64>, Tensor<f32>)> {
    let mut f = std::fs::File::open(path)?;
    let mut head = [0u8; 4 + 4 + 8 + 8];
    f.read_exact(&mut head).map_err(|_| {
        Error::Format(format!("{}: truncated embedding header", path.display()))
    })?;
    if &head[0..4] != EMBED_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic, not an embedding file",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != EMBED_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported embedding version {}",
            path.display(),
            version
        )));
    }
    let m = u64::from_le_bytes(head[8..16].try_into().unwrap()) as usize;
    let d = u64::from_le_bytes(head[16..24].try_into().unwrap()) as usize;
    if m == 0 || d == 0 || m.saturating_mul(d) > (1 << 34) {
        return Err(Error::Format(format!(
            "{}: implausible embedding extent {}x{}",
            path.display(),
            m,
            d
        )));
    }
    let mut ids = Vec::with_capacity(m);
    let mut values = Vec::with_capacity(m * d);
    let mut record = vec![0u8; 8 + d * 4];
    for r in 0..m {
        f.read_exact(&mut record).map_err(|_| {
            Error::Format(format!(
                "{}: truncated at record {} of {}",
                path.display(),
                r,
                m
            ))
        })?;
        ids.push(u64::from_le_bytes(record[0..8].try_into().unwrap()));
        for c in 0..d {
            let off = 8 + c * 4;
            values.push(f32::from_le_bytes(record[off..off + 4].try_into().unwrap()));
        }
    }
    let mut trailer = [0u8; 1];
    if f.read(&mut trailer)? != 0 {
        return Err(Error::Format(format!(
            "{}: trailing bytes after {} records",
            path.display(),
            m
        )));
    }
    let t = Tensor::new(vec![m, d], values)
        .map_err(|e| Error::Format(format!("{}: {}", path.display(), e)))?;
    Ok((ids, t))
}
