//! Tiling, normalization, scene-level splits, label budgets and label noise.

use crate::dem_synth::{self, SceneBundle};
use crate::error::{Error, Result};
use crate::metrics;
use crate::raster::{Grid, Mask};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Pretext,
    Segmentation,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Pretext => "pretext",
            Task::Segmentation => "segmentation",
        })
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretext" => Ok(Task::Pretext),
            "segmentation" => Ok(Task::Segmentation),
            o => Err(Error::Config(format!("unknown task `{o}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            o => Err(Error::Config(format!("unknown split `{o}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormStats {
    pub offset: f32,
    pub scale: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormMode {
    /// `(x − min) / max(max − min, 1 m)` per tile.
    PerTileMinshift,
    /// Fixed `(x − offset) / scale` for every tile.
    GlobalAffine { offset: f32, scale: f32 },
}

impl Default for NormMode {
    fn default() -> Self {
        NormMode::PerTileMinshift
    }
}

/// Supervision attached to a tile.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    /// Bare-earth DTM window (same frame as the input once normalized).
    Terrain(Grid),
    /// Footprint mask plus the clean mask it was derived from.
    Footprint { mask: Mask, clean: Mask },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TileRecord {
    pub tile_id: String,
    pub scene_id: String,
    pub row: usize,
    pub col: usize,
    pub input: Grid,
    pub target: Target,
    pub norm: Option<NormStats>,
}

impl TileRecord {
    pub fn size(&self) -> (usize, usize) {
        self.input.shape()
    }

    pub fn mask(&self) -> Option<&Mask> {
        match &self.target {
            Target::Footprint { mask, .. } => Some(mask),
            Target::Terrain(_) => None,
        }
    }

    pub fn clean_mask(&self) -> Option<&Mask> {
        match &self.target {
            Target::Footprint { clean, .. } => Some(clean),
            Target::Terrain(_) => None,
        }
    }

    pub fn terrain(&self) -> Option<&Grid> {
        match &self.target {
            Target::Terrain(g) => Some(g),
            Target::Footprint { .. } => None,
        }
    }
}

/// Cuts a scene into `tile_px` windows at `stride_px`; incomplete border
/// windows are dropped.
pub fn tile_scene(scene: &SceneBundle, tile_px: usize, stride_px: usize, task: Task) -> Result<Vec<TileRecord>> {
    let (rows, cols) = scene.shape();
    if tile_px == 0 || tile_px > rows || tile_px > cols {
        return Err(Error::Config(format!("tile {tile_px} px does not fit scene {rows}×{cols}")));
    }
    if stride_px == 0 {
        return Err(Error::Config("stride must be ≥ 1".into()));
    }
    let mut out = Vec::new();
    for r in (0..=rows - tile_px).step_by(stride_px) {
        for c in (0..=cols - tile_px).step_by(stride_px) {
            let (input, target) = match task {
                Task::Pretext => (
                    scene.dsm.window(r, c, tile_px, tile_px),
                    Target::Terrain(scene.dtm.window(r, c, tile_px, tile_px)),
                ),
                Task::Segmentation => {
                    let m = scene.footprint.window(r, c, tile_px, tile_px);
                    (scene.ndsm.window(r, c, tile_px, tile_px), Target::Footprint { mask: m.clone(), clean: m })
                }
            };
            out.push(TileRecord {
                tile_id: format!("{}-r{r}-c{c}", scene.scene_id),
                scene_id: scene.scene_id.clone(),
                row: r,
                col: c,
                input,
                target,
                norm: None,
            });
        }
    }
    Ok(out)
}

/// Normalizes the input (and a terrain target, in the same frame).
pub fn normalize_tile(tile: &TileRecord, mode: NormMode) -> Result<TileRecord> {
    if tile.norm.is_some() {
        return Err(Error::Contract(format!("tile {} is already normalized", tile.tile_id)));
    }
    if tile.input.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data(format!("tile {} has non-finite input values", tile.tile_id)));
    }
    let stats = match mode {
        NormMode::PerTileMinshift => {
            let (lo, hi) = tile.input.min_max();
            NormStats { offset: lo, scale: (hi - lo).max(1.0) }
        }
        NormMode::GlobalAffine { offset, scale } => {
            if !(scale > 0.0) || !offset.is_finite() {
                return Err(Error::Config("global-affine normalization needs finite offset and scale > 0".into()));
            }
            NormStats { offset, scale }
        }
    };
    let apply = |g: &Grid| Grid::new(g.rows, g.cols, g.data.iter().map(|v| (v - stats.offset) / stats.scale).collect());
    let target = match &tile.target {
        Target::Terrain(t) => {
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("tile {} has non-finite target values", tile.tile_id)));
            }
            Target::Terrain(apply(t))
        }
        other => other.clone(),
    };
    Ok(TileRecord { input: apply(&tile.input), target, norm: Some(stats), ..tile.clone() })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub record: TileRecord,
    pub split: Split,
    pub labeled: bool,
}

/// Index of tiles with split assignment and label budget.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub task: Task,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
    /// Label fraction last applied by [`subsample_labels`].
    pub label_fraction: f64,
    /// Label noise applied so far, in order.
    pub noise: Vec<NoiseSpec>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn labeled(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| e.labeled)
    }

    pub fn scenes_in(&self, split: Split) -> Vec<String> {
        let mut v: Vec<String> = self.split(split).map(|e| e.record.scene_id.clone()).collect();
        v.sort();
        v.dedup();
        v
    }
}

/// Assigns whole scenes to train/val/test.
pub fn make_splits(records: Vec<TileRecord>, fractions: [f64; 3], task: Task, seed: u64) -> Result<DatasetManifest> {
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be ≥ 0 and sum to 1")));
    }
    let mut scenes: Vec<String> = records.iter().map(|r| r.scene_id.clone()).collect();
    scenes.sort();
    scenes.dedup();
    let wanted = fractions.iter().filter(|f| **f > 0.0).count();
    if scenes.len() < wanted {
        return Err(Error::Config(format!("{} scenes cannot fill {wanted} splits", scenes.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    scenes.shuffle(&mut rng);
    let counts = allocate(scenes.len(), &fractions);
    let mut assign: HashMap<String, Split> = HashMap::new();
    let mut it = scenes.into_iter();
    for (split, n) in Split::ALL.iter().zip(counts) {
        for s in it.by_ref().take(n) {
            assign.insert(s, *split);
        }
    }
    let entries = records
        .into_iter()
        .map(|record| {
            let split = assign[&record.scene_id];
            ManifestEntry { labeled: split == Split::Train, split, record }
        })
        .collect();
    Ok(DatasetManifest { task, seed, entries, label_fraction: 1.0, noise: Vec::new() })
}

/// Largest-remainder allocation; every non-zero fraction gets at least one.
fn allocate(n: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let mut counts = [0usize; 3];
    let mut rema = [0f64; 3];
    for i in 0..3 {
        let exact = fractions[i] * n as f64;
        counts[i] = exact.floor() as usize;
        rema[i] = exact - counts[i] as f64;
    }
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|a, b| rema[*b].partial_cmp(&rema[*a]).unwrap().then(a.cmp(b)));
    for &i in order.iter().cycle().take(3 * n) {
        if left == 0 {
            break;
        }
        if fractions[i] > 0.0 {
            counts[i] += 1;
            left -= 1;
        }
    }
    for i in 0..3 {
        if fractions[i] > 0.0 && counts[i] == 0 {
            let donor = (0..3).max_by_key(|j| counts[*j]).unwrap();
            counts[donor] -= 1;
            counts[i] = 1;
        }
    }
    counts
}

/// Number of labeled tiles for a budget: `⌈fraction × n⌉`.
pub fn label_budget(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Marks a seeded-permutation prefix of the train tiles as labeled, so
/// budgets drawn with the same seed are nested.
pub fn subsample_labels(manifest: &DatasetManifest, fraction: f64, seed: u64) -> Result<DatasetManifest> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("label fraction {fraction} outside (0, 1]")));
    }
    if manifest.task != Task::Segmentation {
        return Err(Error::Config("label budgets apply to segmentation manifests".into()));
    }
    let train: Vec<usize> =
        manifest.entries.iter().enumerate().filter(|(_, e)| e.split == Split::Train).map(|(i, _)| i).collect();
    let k = label_budget(fraction, train.len());
    if k == 0 {
        return Err(Error::Config(format!("label fraction {fraction} of {} train tiles yields no labels", train.len())));
    }
    let mut perm = train.clone();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = manifest.clone();
    for e in &mut out.entries {
        e.labeled = false;
    }
    for &i in perm.iter().take(k) {
        out.entries[i].labeled = true;
    }
    out.label_fraction = fraction;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Label noise
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    pub p_remove_building: f64,
    pub p_add_phantom_building: f64,
    pub max_shift_px: usize,
    pub p_boundary_erode_dilate: f64,
    /// Side length range of phantom rectangles, in pixels.
    pub phantom_size_px: [usize; 2],
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            p_remove_building: 0.0,
            p_add_phantom_building: 0.0,
            max_shift_px: 0,
            p_boundary_erode_dilate: 0.0,
            phantom_size_px: [4, 14],
            seed: 0,
        }
    }
}

impl NoiseSpec {
    /// Label corruption used for the distribution-shift benchmark.
    pub fn shift_benchmark(seed: u64) -> Self {
        NoiseSpec { p_remove_building: 0.15, p_add_phantom_building: 0.1, max_shift_px: 3, seed, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_remove_building", self.p_remove_building),
            ("p_add_phantom_building", self.p_add_phantom_building),
            ("p_boundary_erode_dilate", self.p_boundary_erode_dilate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("noise.{name} = {p} outside [0, 1]")));
            }
        }
        if self.phantom_size_px[0] == 0 || self.phantom_size_px[0] > self.phantom_size_px[1] {
            return Err(Error::Config("noise.phantom_size_px must be a non-empty range ≥ 1".into()));
        }
        Ok(())
    }

    pub fn is_noop(&self) -> bool {
        self.p_remove_building == 0.0
            && self.p_add_phantom_building == 0.0
            && self.max_shift_px == 0
            && self.p_boundary_erode_dilate == 0.0
    }
}

/// What a noise pass did to one mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct NoiseStats {
    pub buildings: usize,
    pub removed: usize,
    pub phantoms: usize,
    pub morphed: usize,
    pub shift: (isize, isize),
}

fn stream_seed(seed: u64, key: &str) -> u64 {
    let d = Sha256::digest(format!("{seed}:{key}").as_bytes());
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// Corrupts one mask: drop components, morph boundaries, add phantom
/// rectangles, then translate the whole mask.
pub fn corrupt_mask(clean: &Mask, spec: &NoiseSpec, seed: u64) -> (Mask, NoiseStats) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (labels, n) = clean.components();
    let mut stats = NoiseStats { buildings: n, ..Default::default() };
    let mut out = Mask::zeros(clean.rows, clean.cols);
    for comp in 1..=n as u32 {
        let remove = rng.gen_bool(spec.p_remove_building);
        let morph = rng.gen_bool(spec.p_boundary_erode_dilate);
        let grow = rng.gen_bool(0.5);
        if remove {
            stats.removed += 1;
            continue;
        }
        let mut part = Mask::new(clean.rows, clean.cols, labels.iter().map(|l| (*l == comp) as u8).collect());
        if morph {
            stats.morphed += 1;
            part = if grow { metrics::dilate(&part, 1) } else { metrics::erode(&part, 1) };
        }
        for (o, p) in out.data.iter_mut().zip(&part.data) {
            *o |= *p;
        }
    }
    for _ in 0..n {
        if !rng.gen_bool(spec.p_add_phantom_building) {
            continue;
        }
        let [lo, hi] = spec.phantom_size_px;
        let h = rng.gen_range(lo..=hi).min(clean.rows);
        let w = rng.gen_range(lo..=hi).min(clean.cols);
        let r0 = rng.gen_range(0..=clean.rows - h);
        let c0 = rng.gen_range(0..=clean.cols - w);
        for r in r0..r0 + h {
            for c in c0..c0 + w {
                out.set(r, c, 1);
            }
        }
        stats.phantoms += 1;
    }
    if spec.max_shift_px > 0 {
        let m = spec.max_shift_px as isize;
        let dy = rng.gen_range(-m..=m);
        let dx = rng.gen_range(-m..=m);
        stats.shift = (dy, dx);
        let mut shifted = Mask::zeros(clean.rows, clean.cols);
        for r in 0..clean.rows as isize {
            for c in 0..clean.cols as isize {
                let (sr, sc) = (r - dy, c - dx);
                if sr >= 0 && sc >= 0 && sr < clean.rows as isize && sc < clean.cols as isize {
                    shifted.set(r as usize, c as usize, out.at(sr as usize, sc as usize));
                }
            }
        }
        out = shifted;
    }
    (out, stats)
}

/// Applies label noise to every segmentation target. Inputs are untouched and
/// each tile keeps its clean mask.
pub fn inject_label_noise(manifest: &DatasetManifest, spec: &NoiseSpec) -> Result<DatasetManifest> {
    if manifest.task != Task::Segmentation {
        return Err(Error::Config("label noise applies to segmentation manifests".into()));
    }
    spec.validate()?;
    let mut out = manifest.clone();
    if spec.is_noop() {
        out.noise.push(spec.clone());
        return Ok(out);
    }
    for e in &mut out.entries {
        if let Target::Footprint { mask, .. } = &mut e.record.target {
            let (noisy, _) = corrupt_mask(mask, spec, stream_seed(spec.seed, &e.record.tile_id));
            *mask = noisy;
        }
    }
    out.noise.push(spec.clone());
    Ok(out)
}

// ---------------------------------------------------------------------------
// Raster ingestion
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RasterKind {
    Dtm,
    Dsm,
    Ndsm,
    Mask,
}

/// What an ingestion adapter hands back.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceGrid {
    pub bands: usize,
    pub rows: usize,
    pub cols: usize,
    /// Band-sequential, row-major.
    pub values: Vec<f32>,
    pub resolution_m: Option<f64>,
    pub nodata: Option<f32>,
}

/// Adapter contract: return one grid with its ground resolution and the
/// value used for void pixels. NaN is always treated as void.
pub trait RasterSource {
    fn read_grid(&self) -> Result<SourceGrid>;
}

/// Adapter over an in-memory grid.
#[derive(Clone, Debug)]
pub struct MemorySource(pub SourceGrid);

impl RasterSource for MemorySource {
    fn read_grid(&self) -> Result<SourceGrid> {
        Ok(self.0.clone())
    }
}

/// Adapter over a headerless little-endian `f32` file.
#[derive(Clone, Debug)]
pub struct F32FileSource {
    pub path: PathBuf,
    pub rows: usize,
    pub cols: usize,
    pub resolution_m: Option<f64>,
    pub nodata: Option<f32>,
}

impl RasterSource for F32FileSource {
    fn read_grid(&self) -> Result<SourceGrid> {
        Ok(SourceGrid {
            bands: 1,
            rows: self.rows,
            cols: self.cols,
            values: crate::raster::read_f32(&self.path, self.rows * self.cols)?,
            resolution_m: self.resolution_m,
            nodata: self.nodata,
        })
    }
}

/// Validated single-band raster.
#[derive(Clone, Debug, PartialEq)]
pub struct ElevationRaster {
    pub kind: RasterKind,
    pub grid: Grid,
    pub resolution_m: f64,
    /// 1 where a void pixel was filled.
    pub fill_mask: Mask,
}

impl ElevationRaster {
    pub fn to_mask(&self) -> Mask {
        Mask::new(self.grid.rows, self.grid.cols, self.grid.data.iter().map(|v| (*v >= 0.5) as u8).collect())
    }
}

pub fn ingest_raster(source: &dyn RasterSource, kind: RasterKind) -> Result<ElevationRaster> {
    let g = source.read_grid()?;
    if g.bands != 1 {
        return Err(Error::Ingest(format!("expected a single band, found {}", g.bands)));
    }
    let resolution_m = g.resolution_m.ok_or_else(|| Error::Ingest("missing ground resolution".into()))?;
    if !(resolution_m > 0.0) {
        return Err(Error::Ingest(format!("invalid resolution {resolution_m}")));
    }
    if g.values.len() != g.rows * g.cols || g.rows == 0 || g.cols == 0 {
        return Err(Error::Ingest(format!("{} values for a {}×{} grid", g.values.len(), g.rows, g.cols)));
    }
    let void = |v: f32| !v.is_finite() || g.nodata.is_some_and(|nd| v == nd);
    let mut values = g.values.clone();
    let mut fill = Mask::zeros(g.rows, g.cols);
    let mut queue = VecDeque::new();
    let mut done = vec![false; values.len()];
    for (i, v) in values.iter().enumerate() {
        if !void(*v) {
            done[i] = true;
            queue.push_back(i);
        } else {
            fill.data[i] = 1;
        }
    }
    if queue.is_empty() {
        return Err(Error::Ingest("grid has no valid pixels".into()));
    }
    // Breadth-first fill from valid pixels (4-neighbour nearest).
    while let Some(i) = queue.pop_front() {
        let (r, c) = (i / g.cols, i % g.cols);
        let mut nb = [None; 4];
        if r > 0 {
            nb[0] = Some(i - g.cols);
        }
        if r + 1 < g.rows {
            nb[1] = Some(i + g.cols);
        }
        if c > 0 {
            nb[2] = Some(i - 1);
        }
        if c + 1 < g.cols {
            nb[3] = Some(i + 1);
        }
        for j in nb.into_iter().flatten() {
            if !done[j] {
                done[j] = true;
                values[j] = values[i];
                queue.push_back(j);
            }
        }
    }
    Ok(ElevationRaster { kind, grid: Grid::new(g.rows, g.cols, values), resolution_m, fill_mask: fill })
}

/// Tolerance below which a negative nDSM is reported.
pub const NDSM_TOLERANCE_M: f32 = 0.01;

/// `dsm − dtm`, with the number of pixels more negative than the tolerance.
pub fn ndsm_from_pair(dsm: &ElevationRaster, dtm: &ElevationRaster) -> Result<(Grid, usize)> {
    if dsm.grid.shape() != dtm.grid.shape() {
        return Err(Error::Ingest("DSM and DTM shapes differ".into()));
    }
    let data: Vec<f32> = dsm.grid.data.iter().zip(&dtm.grid.data).map(|(s, t)| s - t).collect();
    let below = data.iter().filter(|v| **v < -NDSM_TOLERANCE_M).count();
    if below > 0 {
        log::warn!("{below} pixels have nDSM below -{NDSM_TOLERANCE_M} m");
    }
    Ok((Grid::new(dsm.grid.rows, dsm.grid.cols, data), below))
}

/// Builds a scene from ingested rasters; negative nDSM values are clamped so
/// the scene algebra holds.
pub fn scene_from_rasters(
    scene_id: &str,
    dtm: &ElevationRaster,
    dsm: &ElevationRaster,
    footprint: &ElevationRaster,
) -> Result<SceneBundle> {
    let shape = dtm.grid.shape();
    if dsm.grid.shape() != shape || footprint.grid.shape() != shape {
        return Err(Error::Ingest("raster shapes differ".into()));
    }
    let dsm_fixed: Vec<f32> = dsm.grid.data.iter().zip(&dtm.grid.data).map(|(s, t)| s.max(*t)).collect();
    let ndsm: Vec<f32> = dsm_fixed.iter().zip(&dtm.grid.data).map(|(s, t)| s - t).collect();
    let mask = footprint.to_mask();
    let kind = Mask::new(shape.0, shape.1, mask.data.iter().map(|v| *v * dem_synth::KIND_BUILDING).collect());
    Ok(SceneBundle {
        scene_id: scene_id.to_string(),
        resolution_m: dtm.resolution_m,
        seed: 0,
        dtm: dtm.grid.clone(),
        dsm: Grid::new(shape.0, shape.1, dsm_fixed),
        ndsm: Grid::new(shape.0, shape.1, ndsm),
        footprint: mask,
        kind_map: kind,
    })
}

// ---------------------------------------------------------------------------
// Manifest files
// ---------------------------------------------------------------------------

pub const MANIFEST_HEADER: &str = "# terra-ssl manifest v1";

/// Writes the manifest as line-oriented text. `scene_dirs` maps scene ids to
/// the directories holding their rasters (stored relative to the manifest).
pub fn write_manifest(manifest: &DatasetManifest, scene_dirs: &BTreeMap<String, PathBuf>, norm: NormMode, path: &Path) -> Result<()> {
    use std::fmt::Write as _;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut s = String::new();
    let _ = writeln!(s, "{MANIFEST_HEADER}");
    let _ = writeln!(s, "task={}", manifest.task);
    let _ = writeln!(s, "seed={}", manifest.seed);
    let _ = writeln!(s, "label_fraction={:?}", manifest.label_fraction);
    let _ = writeln!(s, "norm={}", toml::to_string(&NormWrapper { mode: norm }).unwrap().trim().replace('\n', ";"));
    for spec in &manifest.noise {
        let _ = writeln!(s, "noise={}", toml::to_string(spec).unwrap().trim().replace('\n', ";"));
    }
    let _ = writeln!(s, "tile_id\tscene_id\trow\tcol\tsize\tsplit\tlabeled\tscene_dir\toffset\tscale");
    for e in &manifest.entries {
        let r = &e.record;
        let dir = scene_dirs
            .get(&r.scene_id)
            .ok_or_else(|| Error::Contract(format!("no scene directory for {}", r.scene_id)))?;
        let rel = dir.strip_prefix(base).unwrap_or(dir);
        let (off, sc) = r.norm.map_or((f32::NAN, f32::NAN), |n| (n.offset, n.scale));
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:?}\t{:?}",
            r.tile_id,
            r.scene_id,
            r.row,
            r.col,
            r.input.rows,
            e.split,
            e.labeled as u8,
            rel.display(),
            off,
            sc
        );
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct NormWrapper {
    mode: NormMode,
}

/// Reads a manifest, cutting tiles from the referenced scene directories and
/// re-applying normalization and recorded label noise.
pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Missing(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(Error::format(path, "missing manifest header"));
    }
    let mut task = None;
    let mut seed = 0u64;
    let mut label_fraction = 1.0;
    let mut norm = NormMode::PerTileMinshift;
    let mut noise = Vec::new();
    let mut scenes: HashMap<PathBuf, SceneBundle> = HashMap::new();
    let mut entries = Vec::new();
    let mut in_table = false;
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        if !in_table {
            if line.starts_with("tile_id\t") {
                in_table = true;
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(path, format!("line {lineno}: expected key=value")))?;
            let bad = |what: &str| Error::format(path, format!("line {lineno}: bad {what}"));
            match k {
                "task" => task = Some(v.parse::<Task>()?),
                "seed" => seed = v.parse().map_err(|_| bad("seed"))?,
                "label_fraction" => label_fraction = v.parse().map_err(|_| bad("label_fraction"))?,
                "norm" => {
                    norm = toml::from_str::<NormWrapper>(&v.replace(';', "\n")).map_err(|_| bad("norm"))?.mode;
                }
                "noise" => noise.push(toml::from_str::<NoiseSpec>(&v.replace(';', "\n")).map_err(|_| bad("noise"))?),
                other => return Err(Error::format(path, format!("line {lineno}: unknown key `{other}`"))),
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 10 {
            return Err(Error::format(path, format!("line {lineno}: expected 10 fields")));
        }
        let task = task.ok_or_else(|| Error::format(path, "task missing before table"))?;
        let num = |j: usize| -> Result<usize> {
            f[j].parse().map_err(|_| Error::format(path, format!("line {lineno}: bad integer `{}`", f[j])))
        };
        let (row, col, size) = (num(2)?, num(3)?, num(4)?);
        let dir = base.join(f[7]);
        if !scenes.contains_key(&dir) {
            let sc = dem_synth::read_scene(&dir)?;
            scenes.insert(dir.clone(), sc);
        }
        let scene = &scenes[&dir];
        let (sr, sc) = scene.shape();
        if row + size > sr || col + size > sc {
            return Err(Error::format(path, format!("line {lineno}: window outside scene")));
        }
        let (input, target) = match task {
            Task::Pretext => (scene.dsm.window(row, col, size, size), Target::Terrain(scene.dtm.window(row, col, size, size))),
            Task::Segmentation => {
                let m = scene.footprint.window(row, col, size, size);
                (scene.ndsm.window(row, col, size, size), Target::Footprint { mask: m.clone(), clean: m })
            }
        };
        let mut record = TileRecord {
            tile_id: f[0].to_string(),
            scene_id: f[1].to_string(),
            row,
            col,
            input,
            target,
            norm: None,
        };
        let offset: f32 = f[8].parse().map_err(|_| Error::format(path, format!("line {lineno}: bad offset")))?;
        if !offset.is_nan() {
            record = normalize_tile(&record, norm)?;
        }
        entries.push(ManifestEntry { record, split: f[5].parse()?, labeled: f[6] == "1" });
    }
    let task = task.ok_or_else(|| Error::format(path, "manifest has no task"))?;
    let mut m = DatasetManifest { task, seed, entries, label_fraction, noise: Vec::new() };
    for spec in &noise {
        m = inject_label_noise(&m, spec)?;
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dem_synth::SynthConfig;

    fn scene(size: usize, seed: u64) -> SceneBundle {
        dem_synth::generate_scene(&SynthConfig { size_px: size, seed, ..Default::default() }).unwrap()
    }

    #[test]
    fn tiling_counts() {
        let s = scene(256, 1);
        assert_eq!(tile_scene(&s, 128, 128, Task::Segmentation).unwrap().len(), 4);
        let mut big = scene(300, 2);
        big.scene_id = "x".into();
        assert_eq!(tile_scene(&big, 128, 128, Task::Pretext).unwrap().len(), 4);
        assert!(tile_scene(&s, 512, 128, Task::Pretext).is_err());
    }

    #[test]
    fn normalization_examples() {
        let mut t = tile_scene(&scene(64, 3), 32, 32, Task::Pretext).unwrap().remove(0);
        t.input = Grid::filled(32, 32, 7.0);
        let n = normalize_tile(&t, NormMode::PerTileMinshift).unwrap();
        assert!(n.input.data.iter().all(|v| *v == 0.0));
        assert_eq!(n.norm.unwrap(), NormStats { offset: 7.0, scale: 1.0 });
        let mut data = vec![110.0f32; 32 * 32];
        data[0] = 100.0;
        data[1] = 120.0;
        t.input = Grid::new(32, 32, data);
        let n = normalize_tile(&t, NormMode::PerTileMinshift).unwrap();
        assert_eq!(n.norm.unwrap(), NormStats { offset: 100.0, scale: 20.0 });
        assert!(n.input.data.iter().all(|v| (0.0..=1.0).contains(v)));
        t.input.data[5] = f32::NAN;
        assert!(matches!(normalize_tile(&t, NormMode::PerTileMinshift), Err(Error::Data(_))));
    }

    #[test]
    fn split_counts_and_errors() {
        let recs: Vec<TileRecord> = (0..10)
            .flat_map(|i| {
                let mut s = scene(64, 100 + i);
                s.scene_id = format!("s{i}");
                tile_scene(&s, 32, 32, Task::Segmentation).unwrap()
            })
            .collect();
        let m = make_splits(recs.clone(), [0.8, 0.1, 0.1], Task::Segmentation, 5).unwrap();
        assert_eq!(m.scenes_in(Split::Train).len(), 8);
        assert_eq!(m.scenes_in(Split::Val).len(), 1);
        assert_eq!(m.scenes_in(Split::Test).len(), 1);
        assert_eq!(m, make_splits(recs.clone(), [0.8, 0.1, 0.1], Task::Segmentation, 5).unwrap());
        let two: Vec<TileRecord> = recs.into_iter().filter(|r| r.scene_id == "s0" || r.scene_id == "s1").collect();
        assert!(make_splits(two, [0.8, 0.1, 0.1], Task::Segmentation, 5).is_err());
    }

    #[test]
    fn noop_noise_keeps_masks() {
        let recs = tile_scene(&scene(64, 4), 32, 32, Task::Segmentation).unwrap();
        let mut recs2 = recs.clone();
        for (i, r) in recs2.iter_mut().enumerate() {
            r.scene_id = format!("s{i}");
        }
        let m = make_splits(recs2, [0.5, 0.25, 0.25], Task::Segmentation, 1).unwrap();
        let n = inject_label_noise(&m, &NoiseSpec::default()).unwrap();
        for (a, b) in m.entries.iter().zip(&n.entries) {
            assert_eq!(a.record.mask(), b.record.mask());
        }
    }

    #[test]
    fn ingestion_fills_voids() {
        let mut values: Vec<f32> = (0..64 * 64).map(|i| i as f32 * 0.01).collect();
        let src = MemorySource(SourceGrid {
            bands: 1,
            rows: 64,
            cols: 64,
            values: values.clone(),
            resolution_m: Some(1.0),
            nodata: None,
        });
        let r = ingest_raster(&src, RasterKind::Dsm).unwrap();
        assert_eq!(r.grid.data, values);
        assert_eq!(r.fill_mask.count(), 0);
        values[100] = f32::NAN;
        let r = ingest_raster(&MemorySource(SourceGrid { values, ..src.0.clone() }), RasterKind::Dsm).unwrap();
        assert_eq!(r.fill_mask.count(), 1);
        assert!(r.grid.data[100].is_finite());
        let multi = SourceGrid { bands: 3, ..src.0.clone() };
        assert!(matches!(ingest_raster(&MemorySource(multi), RasterKind::Dsm), Err(Error::Ingest(_))));
        let nores = SourceGrid { resolution_m: None, ..src.0.clone() };
        assert!(matches!(ingest_raster(&MemorySource(nores), RasterKind::Dsm), Err(Error::Ingest(_))));
    }

    #[test]
    fn ndsm_pair_tolerance() {
        let mk = |v: Vec<f32>| ElevationRaster {
            kind: RasterKind::Dsm,
            grid: Grid::new(1, 3, v),
            resolution_m: 1.0,
            fill_mask: Mask::zeros(1, 3),
        };
        let (_, below) = ndsm_from_pair(&mk(vec![10.0, 5.0, 4.995]), &mk(vec![9.0, 5.0, 5.0])).unwrap();
        assert_eq!(below, 0);
        let (_, below) = ndsm_from_pair(&mk(vec![10.0, 4.9, 5.0]), &mk(vec![9.0, 5.0, 5.0])).unwrap();
        assert_eq!(below, 1);
    }

    fn many_scene_records(n: usize, size: usize, tile: usize) -> Vec<TileRecord> {
        (0..n)
            .flat_map(|i| {
                let mut s = scene(size, 300 + i as u64);
                s.scene_id = format!("s{i:02}");
                tile_scene(&s, tile, tile, Task::Segmentation).unwrap()
            })
            .collect()
    }

    #[test]
    fn label_budget_rounds_up() {
        assert_eq!(label_budget(0.01, 2500), 25);
        assert_eq!(label_budget(1.0, 2500), 2500);
        assert_eq!(label_budget(0.1, 2500), 250);
        assert_eq!(label_budget(0.01, 10), 1);
    }

    #[test]
    fn subsample_counts_and_errors() {
        let m = make_splits(many_scene_records(8, 64, 32), [0.75, 0.125, 0.125], Task::Segmentation, 2).unwrap();
        let n = m.count(Split::Train);
        let full = subsample_labels(&m, 1.0, 4).unwrap();
        assert_eq!(full.labeled().count(), n);
        let small = subsample_labels(&m, 0.1, 4).unwrap();
        assert_eq!(small.labeled().count(), label_budget(0.1, n));
        assert_eq!(small, subsample_labels(&m, 0.1, 4).unwrap());
        assert!(subsample_labels(&m, 0.0, 4).is_err());
    }

    #[test]
    fn tiles_reassemble_scene_interior() {
        let s = scene(100, 8);
        let tiles = tile_scene(&s, 32, 32, Task::Pretext).unwrap();
        assert_eq!(tiles.len(), 9);
        let seg = tile_scene(&s, 32, 32, Task::Segmentation).unwrap();
        for (t, g) in tiles.iter().zip(&seg) {
            for r in 0..32 {
                for c in 0..32 {
                    let (y, x) = (t.row + r, t.col + c);
                    assert_eq!(t.input.at(r, c).to_bits(), s.dsm.at(y, x).to_bits());
                    assert_eq!(t.terrain().unwrap().at(r, c).to_bits(), s.dtm.at(y, x).to_bits());
                    assert_eq!(g.input.at(r, c).to_bits(), s.ndsm.at(y, x).to_bits());
                    assert_eq!(g.mask().unwrap().at(r, c), s.footprint.at(y, x));
                }
            }
        }
    }

    #[test]
    fn pretext_frame_is_shared() {
        let s = scene(64, 9);
        for t in tile_scene(&s, 32, 32, Task::Pretext).unwrap() {
            let n = normalize_tile(&t, NormMode::PerTileMinshift).unwrap();
            let scale = n.norm.unwrap().scale;
            let (x, y) = (&n.input.data, &n.terrain().unwrap().data);
            for (i, (a, b)) in x.iter().zip(y).enumerate() {
                let ndsm = t.input.data[i] - t.terrain().unwrap().data[i];
                assert!(((a - b) - ndsm / scale).abs() < 1e-5);
            }
        }
    }

    fn reference_footprint() -> Mask {
        let cfg = SynthConfig { seed: 11, size_px: 512, building_density: 76.0, ..Default::default() };
        dem_synth::generate_scene(&cfg).unwrap().footprint
    }

    #[test]
    fn phantom_count_is_locked() {
        let clean = reference_footprint();
        let spec = NoiseSpec { p_add_phantom_building: 0.5, ..Default::default() };
        let (noisy, stats) = corrupt_mask(&clean, &spec, 0);
        assert_eq!(stats.buildings, 20);
        assert!((8..=12).contains(&stats.phantoms), "{}", stats.phantoms);
        assert_eq!(stats.phantoms, LOCKED_PHANTOMS);
        assert!(noisy.count() > clean.count());
    }

    const LOCKED_PHANTOMS: usize = 12;

    #[test]
    fn full_removal_empties_mask() {
        let clean = reference_footprint();
        let spec = NoiseSpec { p_remove_building: 1.0, ..Default::default() };
        let (noisy, stats) = corrupt_mask(&clean, &spec, 3);
        assert_eq!(stats.removed, 20);
        assert_eq!(noisy.count(), 0);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(16))]

        #[test]
        fn manifest_invariants(
            scenes in 3usize..9,
            seed in 0u64..1000,
            train in 0.4f64..0.8,
            val_share in 0.2f64..0.8,
        ) {
            let val = (1.0 - train) * val_share;
            let fractions = [train, val, 1.0 - train - val];
            let m = make_splits(many_scene_records(scenes, 64, 32), fractions, Task::Segmentation, seed).unwrap();
            let sets: Vec<_> = [Split::Train, Split::Val, Split::Test].iter().map(|s| m.scenes_in(*s)).collect();
            for a in 0..3 {
                for b in a + 1..3 {
                    proptest::prop_assert!(sets[a].iter().all(|s| !sets[b].contains(s)));
                }
            }
            let few = subsample_labels(&m, 0.1, seed).unwrap();
            let more = subsample_labels(&m, 0.5, seed).unwrap();
            for (x, y) in few.entries.iter().zip(&more.entries) {
                proptest::prop_assert!(!x.labeled || y.labeled);
                proptest::prop_assert!(!y.labeled || y.split == Split::Train);
            }
            let noisy = inject_label_noise(&more, &NoiseSpec { p_boundary_erode_dilate: 0.3, ..NoiseSpec::shift_benchmark(seed) }).unwrap();
            for (x, y) in more.entries.iter().zip(&noisy.entries) {
                proptest::prop_assert_eq!(&x.record.input, &y.record.input);
                proptest::prop_assert_eq!(x.record.mask(), y.record.clean_mask());
            }
        }
    }
}
