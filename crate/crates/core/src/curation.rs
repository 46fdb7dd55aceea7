//! Dataset statistics and occlusion-driven clip selection.
//!
//! Occlusion maps (on a `[0, 255]` scale) and flow magnitudes are consumed
//! from precomputed files. Candidate clips are patches on a spatial grid
//! crossed with temporal windows; each is scored by its mean occlusion and
//! the highest-scoring non-overlapping clips are kept.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::io::{read_flo, read_pgm};
use crate::tensor::Tensor;

/// Occlusion and flow-magnitude maps of one scene at its sampled frames.
#[derive(Debug, Clone)]
pub struct SceneMaps {
    scene: String,
    frames: Vec<usize>,
    occlusion: Vec<Tensor>,
    flow_magnitude: Vec<Tensor>,
}

impl SceneMaps {
    pub fn new(scene: impl Into<String>, frames: Vec<usize>, occlusion: Vec<Tensor>, flow_magnitude: Vec<Tensor>) -> Result<Self> {
        let scene = scene.into();
        if frames.is_empty() {
            return Err(Error::invalid(format!("scene {scene}: no frames")));
        }
        if occlusion.len() != frames.len() || flow_magnitude.len() != frames.len() {
            return Err(Error::invalid(format!(
                "scene {scene}: {} frame indices, {} occlusion maps, {} flow maps",
                frames.len(),
                occlusion.len(),
                flow_magnitude.len()
            )));
        }
        if frames.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(format!("scene {scene}: frame indices must increase")));
        }
        let shape = occlusion[0].shape();
        for (o, f) in occlusion.iter().zip(&flow_magnitude) {
            o.expect_channels("occlusion map", 1)?;
            if o.shape() != shape {
                return Err(Error::shape("occlusion map", shape, o.shape()));
            }
            if f.shape() != shape {
                return Err(Error::shape("flow magnitude map", shape, f.shape()));
            }
            if o.data().iter().any(|v| !(0.0..=255.0).contains(v)) {
                return Err(Error::invalid(format!("scene {scene}: occlusion outside [0, 255]")));
            }
            if f.data().iter().any(|&v| v < 0.0) {
                return Err(Error::invalid(format!("scene {scene}: negative flow magnitude")));
            }
        }
        Ok(Self {
            scene,
            frames,
            occlusion,
            flow_magnitude,
        })
    }

    pub fn scene(&self) -> &str {
        &self.scene
    }

    pub fn frames(&self) -> &[usize] {
        &self.frames
    }

    pub fn height(&self) -> usize {
        self.occlusion[0].height()
    }

    pub fn width(&self) -> usize {
        self.occlusion[0].width()
    }

    pub fn occlusion(&self) -> &[Tensor] {
        &self.occlusion
    }

    pub fn flow_magnitude(&self) -> &[Tensor] {
        &self.flow_magnitude
    }
}

/// How positions are laid out along one axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    /// Every `n` units from the start while the window fits.
    Stride(usize),
    /// Exactly `n` positions spread evenly from the first to the last
    /// fitting origin.
    Count(usize),
}

impl Placement {
    /// Origins for windows of `size` inside `0..extent`.
    pub fn positions(&self, extent: usize, size: usize) -> Result<Vec<usize>> {
        if size > extent {
            return Err(Error::invalid(format!("window {size} larger than extent {extent}")));
        }
        let span = extent - size;
        match *self {
            Placement::Stride(0) | Placement::Count(0) => Err(Error::invalid("placement needs a positive value")),
            Placement::Stride(s) => Ok((0..=span).step_by(s).collect()),
            Placement::Count(1) => Ok(vec![0]),
            Placement::Count(n) => {
                if n - 1 > span {
                    return Err(Error::invalid(format!(
                        "{n} distinct positions do not fit in a span of {}",
                        span + 1
                    )));
                }
                Ok((0..n)
                    .map(|i| ((i * span) as f64 / (n - 1) as f64).round() as usize)
                    .collect())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurationConfig {
    pub patch: usize,
    pub columns: Placement,
    pub rows: Placement,
    pub clip_len: usize,
    pub temporal: Placement,
    pub top_fraction: f64,
    /// When false, kept clips may not overlap in space and time.
    pub allow_overlap: bool,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            patch: 768,
            columns: Placement::Count(81),
            rows: Placement::Count(31),
            clip_len: 65,
            temporal: Placement::Stride(32),
            top_fraction: 0.10,
            allow_overlap: false,
        }
    }
}

impl CurationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 {
            return Err(Error::invalid("patch size must be positive"));
        }
        if self.clip_len < 2 {
            return Err(Error::invalid("clips need at least two frames"));
        }
        if !(self.top_fraction > 0.0 && self.top_fraction <= 1.0) {
            return Err(Error::invalid(format!(
                "top fraction {} outside (0, 1]",
                self.top_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClipRecord {
    pub scene: String,
    pub x: usize,
    pub y: usize,
    pub patch: usize,
    pub start: usize,
    pub length: usize,
    pub score: f64,
}

impl ClipRecord {
    pub fn overlaps(&self, other: &ClipRecord) -> bool {
        let span = |a: usize, la: usize, b: usize, lb: usize| a < b + lb && b < a + la;
        self.scene == other.scene
            && span(self.x, self.patch, other.x, other.patch)
            && span(self.y, self.patch, other.y, other.patch)
            && span(self.start, self.length, other.start, other.length)
    }

    /// Total order used for selection: score descending, then scene,
    /// origin `(x, y)` and start frame ascending.
    fn rank(&self, other: &ClipRecord) -> Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then_with(|| self.scene.cmp(&other.scene))
            .then_with(|| (self.x, self.y, self.start).cmp(&(other.x, other.y, other.start)))
    }
}

/// Linear-interpolation percentiles with inclusive endpoints.
pub fn percentile_stats(values: &[f64], percentiles: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::invalid("percentiles of an empty list"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("percentiles of non-finite values"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let last = (sorted.len() - 1) as f64;
    percentiles
        .iter()
        .map(|&p| {
            if !(0.0..=100.0).contains(&p) {
                return Err(Error::invalid(format!("percentile {p} outside [0, 100]")));
            }
            let rank = p / 100.0 * last;
            let lo = rank.floor() as usize;
            let hi = rank.ceil() as usize;
            Ok(sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64))
        })
        .collect()
}

fn mean(t: &Tensor) -> f64 {
    t.data().iter().map(|&v| v as f64).sum::<f64>() / t.data().len() as f64
}

/// 25/50/75th percentiles of per-clip mean occlusion and flow magnitude.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub clips: usize,
    pub occlusion: [f64; 3],
    pub flow_magnitude: [f64; 3],
}

impl DatasetStats {
    pub fn table(&self, name: &str) -> String {
        let trio = |v: &[f64; 3]| format!("{:.2} / {:.2} / {:.2}", v[0], v[1], v[2]);
        let header = format!(
            "{:<16} {:>6}  {:<28} {}",
            "Dataset", "Clips", "Occlusion (25/50/75%)", "Flow magnitude (25/50/75%)"
        );
        let row = format!(
            "{:<16} {:>6}  {:<28} {}",
            name,
            self.clips,
            trio(&self.occlusion),
            trio(&self.flow_magnitude)
        );
        format!("{header}\n{row}\n")
    }
}

/// Each scene counts as one clip.
pub fn dataset_stats(scenes: &[SceneMaps]) -> Result<DatasetStats> {
    if scenes.is_empty() {
        return Err(Error::invalid("dataset statistics need at least one scene"));
    }
    let pooled = |maps: fn(&SceneMaps) -> &[Tensor]| -> Vec<f64> {
        scenes
            .iter()
            .map(|s| maps(s).iter().map(mean).sum::<f64>() / maps(s).len() as f64)
            .collect()
    };
    let q = [25.0, 50.0, 75.0];
    let o = percentile_stats(&pooled(SceneMaps::occlusion), &q)?;
    let f = percentile_stats(&pooled(SceneMaps::flow_magnitude), &q)?;
    Ok(DatasetStats {
        clips: scenes.len(),
        occlusion: [o[0], o[1], o[2]],
        flow_magnitude: [f[0], f[1], f[2]],
    })
}

/// Summed-area table with a zero border row and column.
struct Integral {
    w: usize,
    sums: Vec<f64>,
}

impl Integral {
    fn new(map: &Tensor) -> Self {
        let (h, w) = (map.height(), map.width());
        let mut sums = vec![0.0; (h + 1) * (w + 1)];
        let plane = map.channel(0);
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += plane[y * w + x] as f64;
                sums[(y + 1) * (w + 1) + x + 1] = sums[y * (w + 1) + x + 1] + row;
            }
        }
        Self { w: w + 1, sums }
    }

    fn window_mean(&self, x: usize, y: usize, size: usize) -> f64 {
        let at = |yy: usize, xx: usize| self.sums[yy * self.w + xx];
        let total = at(y + size, x + size) - at(y, x + size) - at(y + size, x) + at(y, x);
        total / (size * size) as f64
    }
}

/// Temporal windows `(start, sampled map indices)` fully covered by the
/// scene's sampled frames.
fn windows(scene: &SceneMaps, cfg: &CurationConfig) -> Result<Vec<(usize, Vec<usize>)>> {
    let first = scene.frames[0];
    let last = *scene.frames.last().expect("non-empty");
    let extent = last - first + 1;
    if cfg.clip_len > extent {
        return Err(Error::invalid(format!(
            "scene {}: clip length {} exceeds the {extent} mapped frames",
            scene.scene, cfg.clip_len
        )));
    }
    Ok(cfg
        .temporal
        .positions(extent, cfg.clip_len)?
        .into_iter()
        .map(|offset| {
            let start = first + offset;
            let sampled = (0..scene.frames.len())
                .filter(|&i| (start..start + cfg.clip_len).contains(&scene.frames[i]))
                .collect();
            (start, sampled)
        })
        .collect())
}

/// Every grid cell crossed with every temporal window, scored by the mean
/// occlusion inside the patch over the clip's sampled maps.
pub fn score_clips(scene: &SceneMaps, cfg: &CurationConfig) -> Result<Vec<ClipRecord>> {
    cfg.validate()?;
    let (h, w) = (scene.height(), scene.width());
    if cfg.patch > h || cfg.patch > w {
        return Err(Error::invalid(format!(
            "scene {}: patch {} larger than the {w}x{h} maps",
            scene.scene, cfg.patch
        )));
    }
    let xs = cfg.columns.positions(w, cfg.patch)?;
    let ys = cfg.rows.positions(h, cfg.patch)?;
    let wins = windows(scene, cfg)?;
    let integrals: Vec<Integral> = scene.occlusion.par_iter().map(Integral::new).collect();

    let cells: Vec<(usize, usize)> = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect();
    Ok(wins
        .iter()
        .flat_map(|(start, sampled)| {
            let integrals = &integrals;
            cells.par_iter().map(move |&(x, y)| {
                let score = sampled.iter().map(|&i| integrals[i].window_mean(x, y, cfg.patch)).sum::<f64>()
                    / sampled.len() as f64;
                ClipRecord {
                    scene: scene.scene.clone(),
                    x,
                    y,
                    patch: cfg.patch,
                    start: *start,
                    length: cfg.clip_len,
                    score,
                }
            }).collect::<Vec<_>>()
        })
        .collect())
}

/// Greedy top selection: highest score first, skipping records that overlap
/// an already kept one, until `ceil(top_fraction * n)` are kept.
pub fn select_top(records: &[ClipRecord], cfg: &CurationConfig) -> Result<Vec<ClipRecord>> {
    cfg.validate()?;
    let target = ((cfg.top_fraction * records.len() as f64) - 1e-9).ceil().max(0.0) as usize;
    let mut order: Vec<&ClipRecord> = records.iter().collect();
    order.sort_by(|a, b| a.rank(b));
    let mut kept: Vec<ClipRecord> = Vec::with_capacity(target);
    for r in order {
        if kept.len() >= target {
            break;
        }
        if cfg.allow_overlap || !kept.iter().any(|k| k.overlaps(r)) {
            kept.push(r.clone());
        }
    }
    Ok(kept)
}

/// One manifest line: scene, frame index, occlusion map path(s), flow path.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub scene: String,
    pub frame: usize,
    /// One map, or two (forward and backward) to be averaged.
    pub occlusion: Vec<PathBuf>,
    pub flow: PathBuf,
}

/// Parses a tab-separated manifest. Blank lines and `#` comments are
/// skipped; relative paths are resolved against `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::invalid(format!(
                "manifest line {}: expected 4 tab-separated fields, found {}",
                n + 1,
                fields.len()
            )));
        }
        let frame = fields[1]
            .trim()
            .parse()
            .map_err(|_| Error::invalid(format!("manifest line {}: bad frame index {:?}", n + 1, fields[1])))?;
        let occlusion: Vec<PathBuf> = fields[2].split(',').map(|p| base.join(p.trim())).collect();
        if occlusion.len() > 2 {
            return Err(Error::invalid(format!("manifest line {}: more than two occlusion maps", n + 1)));
        }
        entries.push(ManifestEntry {
            scene: fields[0].trim().to_string(),
            frame,
            occlusion,
            flow: base.join(fields[3].trim()),
        });
    }
    if entries.is_empty() {
        return Err(Error::invalid("manifest lists no frames"));
    }
    Ok(entries)
}

/// Loads every scene referenced by a manifest file, in order of first
/// appearance.
pub fn load_scenes(manifest: impl AsRef<Path>) -> Result<Vec<SceneMaps>> {
    let manifest = manifest.as_ref();
    let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let entries = parse_manifest(&text, base)?;

    let mut order: Vec<String> = Vec::new();
    let mut grouped: HashMap<String, Vec<&ManifestEntry>> = HashMap::new();
    for e in &entries {
        if !grouped.contains_key(&e.scene) {
            order.push(e.scene.clone());
        }
        grouped.entry(e.scene.clone()).or_default().push(e);
    }
    order
        .iter()
        .map(|scene| {
            let list = &grouped[scene];
            let mut frames = Vec::with_capacity(list.len());
            let mut occ = Vec::with_capacity(list.len());
            let mut mag = Vec::with_capacity(list.len());
            for e in list {
                frames.push(e.frame);
                let maps = e.occlusion.iter().map(read_pgm).collect::<Result<Vec<_>>>()?;
                let mut o = maps[0].clone();
                if let Some(second) = maps.get(1) {
                    o = o.zip_with(second, "occlusion pair", |a, b| ((a as f64 + b as f64) * 0.5) as f32)?;
                }
                occ.push(o);
                let flow = read_flo(&e.flow)?;
                let m = flow
                    .as_tensor()
                    .channel(0)
                    .iter()
                    .zip(flow.as_tensor().channel(1))
                    .map(|(&u, &v)| ((u as f64).hypot(v as f64)) as f32)
                    .collect();
                mag.push(Tensor::from_vec(1, flow.height(), flow.width(), m)?);
            }
            SceneMaps::new(scene.clone(), frames, occ, mag)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene_with(name: &str, frames: Vec<usize>, h: usize, w: usize, occ: impl Fn(usize, usize, usize) -> f32) -> SceneMaps {
        let n = frames.len();
        let occlusion = (0..n).map(|i| Tensor::from_fn(1, h, w, |_, y, x| occ(i, y, x))).collect();
        let flow = (0..n).map(|_| Tensor::full(1, h, w, 1.0)).collect();
        SceneMaps::new(name, frames, occlusion, flow).unwrap()
    }

    #[test]
    fn percentile_examples() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile_stats(&v, &[50.0]).unwrap(), vec![50.5]);
        assert_eq!(percentile_stats(&[7.0], &[0.0, 33.0, 100.0]).unwrap(), vec![7.0; 3]);
        assert_eq!(percentile_stats(&[4.0, 8.0], &[50.0]).unwrap(), vec![6.0]);
        let mut shuffled = v.clone();
        shuffled.reverse();
        shuffled.swap(3, 70);
        assert_eq!(
            percentile_stats(&shuffled, &[25.0, 75.0]).unwrap(),
            percentile_stats(&v, &[25.0, 75.0]).unwrap()
        );
        assert!(percentile_stats(&[], &[50.0]).is_err());
    }

    #[test]
    fn grid_reproduces_81_by_31_cells() {
        let cfg = CurationConfig::default();
        let xs = cfg.columns.positions(4096, 768).unwrap();
        let ys = cfg.rows.positions(2160, 768).unwrap();
        assert_eq!(xs.len() * ys.len(), 2511);
        assert_eq!((xs[0], *xs.last().unwrap()), (0, 4096 - 768));
        assert_eq!((ys[0], *ys.last().unwrap()), (0, 2160 - 768));
        assert_eq!(Placement::Stride(41).positions(4096, 768).unwrap().len(), 82);
        assert!(Placement::Count(10).positions(12, 8).is_err());
    }

    #[test]
    fn stats_examples() {
        let s = scene_with("a", vec![0, 32], 4, 4, |_, _, _| 10.0);
        let st = dataset_stats(&[s]).unwrap();
        assert_eq!(st.occlusion, [10.0; 3]);
        assert_eq!(st.table("toy").lines().count(), 2);

        let a = scene_with("a", vec![0], 4, 4, |_, _, _| 4.0);
        let b = scene_with("b", vec![0], 4, 4, |_, _, _| 8.0);
        assert_eq!(dataset_stats(&[a, b]).unwrap().occlusion[1], 6.0);
        assert!(dataset_stats(&[]).is_err());
    }

    fn toy_cfg() -> CurationConfig {
        CurationConfig {
            patch: 8,
            columns: Placement::Stride(4),
            rows: Placement::Stride(4),
            clip_len: 9,
            temporal: Placement::Stride(4),
            top_fraction: 0.1,
            allow_overlap: false,
        }
    }

    #[test]
    fn scoring_counts_and_hot_spot() {
        let cfg = toy_cfg();
        let uniform = scene_with("u", vec![0, 4, 8, 12, 16], 16, 24, |_, _, _| 3.0);
        let recs = score_clips(&uniform, &cfg).unwrap();
        // 3 rows x 5 columns x 3 temporal windows.
        assert_eq!(recs.len(), 3 * 5 * 3);
        assert!(recs.iter().all(|r| r.score == 3.0));

        let hot = scene_with("h", vec![0, 4, 8, 12, 16], 16, 24, |i, y, x| {
            if (4..12).contains(&y) && (12..20).contains(&x) && (2..=4).contains(&i) {
                200.0
            } else {
                5.0
            }
        });
        let recs = score_clips(&hot, &cfg).unwrap();
        let top = select_top(&recs, &cfg).unwrap();
        assert_eq!((top[0].x, top[0].y, top[0].start), (12, 4, 8));
        assert!(top.len() <= 5);
        for (i, a) in top.iter().enumerate() {
            assert!(top[i + 1..].iter().all(|b| !a.overlaps(b)));
        }
    }

    #[test]
    fn score_errors() {
        let s = scene_with("s", vec![0, 4], 8, 8, |_, _, _| 1.0);
        let mut cfg = toy_cfg();
        cfg.patch = 9;
        assert!(score_clips(&s, &cfg).is_err());
        let cfg = toy_cfg();
        assert!(score_clips(&s, &cfg).is_err(), "clip longer than the mapped span");
    }

    fn rec(scene: &str, x: usize, y: usize, start: usize, score: f64) -> ClipRecord {
        ClipRecord {
            scene: scene.into(),
            x,
            y,
            patch: 10,
            start,
            length: 5,
            score,
        }
    }

    #[test]
    fn selection_examples() {
        let mut cfg = toy_cfg();
        cfg.top_fraction = 0.5;
        let disjoint: Vec<_> = (0..10).map(|i| rec("s", i * 20, 0, 0, i as f64)).collect();
        let top = select_top(&disjoint, &cfg).unwrap();
        let scores: Vec<f64> = top.iter().map(|r| r.score).collect();
        assert_eq!(scores, vec![9.0, 8.0, 7.0, 6.0, 5.0]);

        cfg.top_fraction = 1.0;
        let pair = vec![rec("s", 0, 0, 0, 1.0), rec("s", 0, 0, 0, 2.0)];
        assert_eq!(select_top(&pair, &cfg).unwrap(), vec![pair[1].clone()]);
    }

    #[test]
    fn greedy_twenty_record_oracle() {
        // Records on a line, 10-wide patches every 5 pixels: neighbours
        // overlap, records two apart do not. Scores peak at index 7, then 12.
        let scores = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 9.0, 10.0, 9.5, 3.0, 2.0, 7.0, 8.0, 7.5, 1.0, 0.5, 0.2, 4.5, 4.4, 0.1];
        let records: Vec<_> = scores.iter().enumerate().map(|(i, &s)| rec("s", i * 5, 0, 0, s)).collect();
        let cfg = CurationConfig {
            top_fraction: 0.25,
            ..toy_cfg()
        };
        let top = select_top(&records, &cfg).unwrap();
        let xs: Vec<usize> = top.iter().map(|r| r.x / 5).collect();
        // Hand-run greedy: keep 7, skip 8 and 6, keep 12, skip 13 and 11,
        // keep 5, skip 4, keep 17, skip 18, keep 3.
        assert_eq!(xs, vec![7, 12, 5, 17, 3]);
    }
}
