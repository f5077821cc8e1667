//! Procedural elevation scenes: bare-earth terrain (DTM), above-ground
//! structures, and the derived surface (DSM), normalized surface (nDSM) and
//! building footprint rasters.

use crate::error::{Error, Result};
use crate::model::config_digest;
use crate::raster::{self, Grid, KeyValues, Mask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const KIND_GROUND: u8 = 0;
pub const KIND_BUILDING: u8 = 1;
pub const KIND_VEGETATION: u8 = 2;

/// Pixels closer than this to an existing building reject a candidate.
const BUILDING_MARGIN_PX: isize = 2;
/// Vegetation lower than this is treated as ground.
const VEGETATION_FLOOR_M: f64 = 0.5;
const PLACEMENT_TRIES_PER_BUILDING: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub size_px: usize,
    pub resolution_m: f64,
    pub terrain_amplitude_m: f64,
    /// Exponent of the amplitude spectrum falloff, `|A(f)| ∝ f^-roughness`.
    /// Larger values give smoother terrain.
    pub terrain_roughness: f64,
    /// Highest retained spatial frequency as a fraction of Nyquist.
    pub terrain_band_limit: f64,
    /// Buildings per km².
    pub building_density: f64,
    pub building_height_m: [f64; 2],
    pub building_size_m: [f64; 2],
    pub gable_probability: f64,
    /// Acceptance of a candidate site is `exp(-slope / slope_scale)`.
    pub slope_scale: f64,
    /// Vegetation clusters per km².
    pub vegetation_density: f64,
    pub vegetation_height_m: [f64; 2],
    pub trees_per_cluster: [usize; 2],
    pub tree_radius_m: [f64; 2],
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            size_px: 256,
            resolution_m: 1.0,
            terrain_amplitude_m: 50.0,
            terrain_roughness: 2.0,
            terrain_band_limit: 0.25,
            building_density: 80.0,
            building_height_m: [3.0, 15.0],
            building_size_m: [6.0, 40.0],
            gable_probability: 0.5,
            slope_scale: 0.15,
            vegetation_density: 60.0,
            vegetation_height_m: [2.0, 25.0],
            trees_per_cluster: [3, 12],
            tree_radius_m: [1.5, 4.0],
            seed: 0,
        }
    }
}

fn check_range(name: &str, r: [f64; 2], min: f64) -> Result<()> {
    if !(r[0] >= min && r[1] >= r[0] && r[1].is_finite()) {
        return Err(Error::Config(format!("synth.{name} = {r:?} is not a valid range")));
    }
    Ok(())
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size_px < 32 {
            return Err(Error::Config(format!("synth.size_px = {} < 32", self.size_px)));
        }
        if !(self.resolution_m > 0.0) {
            return Err(Error::Config("synth.resolution_m must be > 0".into()));
        }
        if !(self.terrain_amplitude_m >= 0.0) || !self.terrain_roughness.is_finite() {
            return Err(Error::Config("synth terrain amplitude/roughness invalid".into()));
        }
        if !(self.terrain_band_limit > 0.0 && self.terrain_band_limit <= 1.0) {
            return Err(Error::Config("synth.terrain_band_limit must be in (0, 1]".into()));
        }
        if !(self.building_density >= 0.0) || !(self.vegetation_density >= 0.0) {
            return Err(Error::Config("synth densities must be ≥ 0".into()));
        }
        if !(0.0..=1.0).contains(&self.gable_probability) || !(self.slope_scale > 0.0) {
            return Err(Error::Config("synth.gable_probability or slope_scale invalid".into()));
        }
        check_range("building_height_m", self.building_height_m, f64::MIN_POSITIVE)?;
        check_range("building_size_m", self.building_size_m, f64::MIN_POSITIVE)?;
        check_range("vegetation_height_m", self.vegetation_height_m, 0.0)?;
        check_range("tree_radius_m", self.tree_radius_m, f64::MIN_POSITIVE)?;
        if self.trees_per_cluster[0] > self.trees_per_cluster[1] {
            return Err(Error::Config("synth.trees_per_cluster range inverted".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        config_digest(&format!("{self:?}"))
    }

    fn area_km2(&self) -> f64 {
        let side = self.size_px as f64 * self.resolution_m;
        side * side / 1e6
    }
}

/// Bare-earth heights.
#[derive(Clone, Debug, PartialEq)]
pub struct TerrainField {
    pub heights: Grid,
    pub resolution_m: f64,
    pub seed: u64,
}

/// Above-ground additions to a terrain.
#[derive(Clone, Debug, PartialEq)]
pub struct StructureLayer {
    pub add_heights: Grid,
    pub footprint: Mask,
    pub kind_map: Mask,
}

impl StructureLayer {
    pub fn empty(rows: usize, cols: usize) -> Self {
        StructureLayer {
            add_heights: Grid::filled(rows, cols, 0.0),
            footprint: Mask::zeros(rows, cols),
            kind_map: Mask::zeros(rows, cols),
        }
    }
}

/// Aligned DTM, DSM, nDSM and footprint rasters for one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneBundle {
    pub scene_id: String,
    pub resolution_m: f64,
    pub seed: u64,
    pub dtm: Grid,
    pub dsm: Grid,
    pub ndsm: Grid,
    pub footprint: Mask,
    pub kind_map: Mask,
}

impl SceneBundle {
    pub fn shape(&self) -> (usize, usize) {
        self.dtm.shape()
    }
}

fn fft2(data: &mut [Complex<f64>], n: usize, inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let fft = if inverse { planner.plan_fft_inverse(n) } else { planner.plan_fft_forward(n) };
    for row in data.chunks_exact_mut(n) {
        fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); n];
    for c in 0..n {
        for r in 0..n {
            col[r] = data[r * n + c];
        }
        fft.process(&mut col);
        for r in 0..n {
            data[r * n + c] = col[r];
        }
    }
}

/// Band-limited power-law noise, zero mean and unit standard deviation.
fn spectral_noise(n: usize, roughness: f64, band_limit: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = (0..n * n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            Complex::new(z, 0.0)
        })
        .collect();
    fft2(&mut buf, n, false);
    let f_max = 0.5 * band_limit;
    for r in 0..n {
        let fr = r.min(n - r) as f64 / n as f64;
        for c in 0..n {
            let fc = c.min(n - c) as f64 / n as f64;
            let f = (fr * fr + fc * fc).sqrt();
            let gain = if f == 0.0 || f > f_max { 0.0 } else { f.powf(-roughness) };
            buf[r * n + c] *= gain;
        }
    }
    fft2(&mut buf, n, true);
    let vals: Vec<f64> = buf.iter().map(|z| z.re).collect();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
    let sd = var.sqrt();
    if sd == 0.0 {
        return vec![0.0; vals.len()];
    }
    vals.iter().map(|v| (v - mean) / sd).collect()
}

/// Generates a smooth terrain whose standard deviation is a sixth of
/// `terrain_amplitude_m`.
pub fn generate_terrain(config: &SynthConfig) -> Result<TerrainField> {
    config.validate()?;
    let n = config.size_px;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let heights = if config.terrain_amplitude_m == 0.0 {
        vec![0.0f32; n * n]
    } else {
        let sd = config.terrain_amplitude_m / 6.0;
        spectral_noise(n, config.terrain_roughness, config.terrain_band_limit, &mut rng)
            .into_iter()
            .map(|v| (v * sd) as f32)
            .collect()
    };
    Ok(TerrainField { heights: Grid::new(n, n, heights), resolution_m: config.resolution_m, seed: config.seed })
}

/// Gradient magnitude (m/m) by central differences, one-sided at borders.
pub fn slope_map(heights: &Grid, resolution_m: f64) -> Vec<f64> {
    let (h, w) = heights.shape();
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let (r0, r1) = (r.saturating_sub(1), (r + 1).min(h - 1));
            let (c0, c1) = (c.saturating_sub(1), (c + 1).min(w - 1));
            let gy = (heights.at(r1, c) - heights.at(r0, c)) as f64 / ((r1 - r0).max(1) as f64 * resolution_m);
            let gx = (heights.at(r, c1) - heights.at(r, c0)) as f64 / ((c1 - c0).max(1) as f64 * resolution_m);
            out[r * w + c] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

/// Probability that a candidate site with the given mean slope is accepted.
pub fn site_acceptance(slope: f64, slope_scale: f64) -> f64 {
    (-slope / slope_scale).exp()
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.gen_range(r[0]..r[1])
    } else {
        r[0]
    }
}

struct Footprint {
    pixels: Vec<(usize, usize)>,
    /// Normalized distance across the short axis, in [0, 1] (0 on the ridge).
    across: Vec<f64>,
}

fn rasterize_rect(cy: f64, cx: f64, long: f64, short: f64, theta: f64, rows: usize, cols: usize) -> Option<Footprint> {
    let (s, c) = theta.sin_cos();
    let reach = 0.5 * (long * long + short * short).sqrt() + 1.0;
    let (r0, r1) = ((cy - reach).floor() as isize, (cy + reach).ceil() as isize);
    let (c0, c1) = ((cx - reach).floor() as isize, (cx + reach).ceil() as isize);
    if r0 < 0 || c0 < 0 || r1 >= rows as isize || c1 >= cols as isize {
        return None;
    }
    let mut pixels = Vec::new();
    let mut across = Vec::new();
    for r in r0..=r1 {
        for col in c0..=c1 {
            let dy = r as f64 + 0.5 - cy;
            let dx = col as f64 + 0.5 - cx;
            let u = dx * c + dy * s;
            let v = -dx * s + dy * c;
            if u.abs() <= long / 2.0 && v.abs() <= short / 2.0 {
                pixels.push((r as usize, col as usize));
                across.push((v.abs() / (short / 2.0)).min(1.0));
            }
        }
    }
    (!pixels.is_empty()).then_some(Footprint { pixels, across })
}

/// Places buildings (preferring gentle slopes) and vegetation clusters.
pub fn place_structures(terrain: &TerrainField, config: &SynthConfig) -> Result<StructureLayer> {
    config.validate()?;
    let (rows, cols) = terrain.heights.shape();
    if terrain.heights.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("terrain contains non-finite heights".into()));
    }
    let res = terrain.resolution_m;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_B011_D1E5);
    let slope = slope_map(&terrain.heights, res);
    let mut layer = StructureLayer::empty(rows, cols);
    let mut occupied = Mask::zeros(rows, cols);

    let n_buildings = (config.building_density * config.area_km2()).round() as usize;
    let budget = PLACEMENT_TRIES_PER_BUILDING * n_buildings.max(1);
    let mut placed = 0;
    let mut tries = 0;
    while placed < n_buildings {
        if tries >= budget {
            return Err(Error::Generation {
                param: "building_density",
                reason: format!("placed {placed} of {n_buildings} buildings after {budget} attempts"),
            });
        }
        tries += 1;
        let a = uniform(&mut rng, config.building_size_m) / res;
        let b = uniform(&mut rng, config.building_size_m) / res;
        let (long, short) = if a >= b { (a, b) } else { (b, a) };
        let theta = if rng.gen_bool(0.5) { 0.0 } else { rng.gen_range(0.0..std::f64::consts::FRAC_PI_2) };
        let cy = rng.gen_range(0.0..rows as f64);
        let cx = rng.gen_range(0.0..cols as f64);
        let u: f64 = rng.gen();
        let Some(fp) = rasterize_rect(cy, cx, long, short, theta, rows, cols) else { continue };
        let clash = fp.pixels.iter().any(|&(r, c)| {
            (-BUILDING_MARGIN_PX..=BUILDING_MARGIN_PX).any(|dr| {
                (-BUILDING_MARGIN_PX..=BUILDING_MARGIN_PX).any(|dc| {
                    let (y, x) = (r as isize + dr, c as isize + dc);
                    y >= 0 && x >= 0 && y < rows as isize && x < cols as isize && occupied.at(y as usize, x as usize) != 0
                })
            })
        });
        if clash {
            continue;
        }
        let mean_slope = fp.pixels.iter().map(|&(r, c)| slope[r * cols + c]).sum::<f64>() / fp.pixels.len() as f64;
        if u >= site_acceptance(mean_slope, config.slope_scale) {
            continue;
        }
        let height = uniform(&mut rng, config.building_height_m);
        let gable = if rng.gen_bool(config.gable_probability) { rng.gen_range(0.0..0.3) } else { 0.0 };
        let base = fp.pixels.iter().map(|&(r, c)| terrain.heights.at(r, c) as f64).fold(f64::NEG_INFINITY, f64::max);
        for (&(r, c), &t) in fp.pixels.iter().zip(&fp.across) {
            let roof = base + height + height * gable * (1.0 - t);
            let idx = r * cols + c;
            layer.add_heights.data[idx] = (roof - terrain.heights.data[idx] as f64) as f32;
            layer.footprint.data[idx] = 1;
            layer.kind_map.data[idx] = KIND_BUILDING;
            occupied.data[idx] = 1;
        }
        placed += 1;
    }

    let n_clusters = (config.vegetation_density * config.area_km2()).round() as usize;
    let mut canopy = vec![0.0f64; rows * cols];
    for _ in 0..n_clusters {
        let cy = rng.gen_range(0.0..rows as f64);
        let cx = rng.gen_range(0.0..cols as f64);
        let k = rng.gen_range(config.trees_per_cluster[0]..=config.trees_per_cluster[1]);
        for _ in 0..k {
            let oy: f64 = StandardNormal.sample(&mut rng);
            let ox: f64 = StandardNormal.sample(&mut rng);
            let ty = cy + oy * 8.0 / res;
            let tx = cx + ox * 8.0 / res;
            let h = uniform(&mut rng, config.vegetation_height_m);
            let sigma = uniform(&mut rng, config.tree_radius_m) / res;
            let reach = (3.0 * sigma).ceil() as isize;
            let (iy, ix) = (ty.floor() as isize, tx.floor() as isize);
            for r in (iy - reach).max(0)..=(iy + reach).min(rows as isize - 1) {
                for c in (ix - reach).max(0)..=(ix + reach).min(cols as isize - 1) {
                    let dy = r as f64 + 0.5 - ty;
                    let dx = c as f64 + 0.5 - tx;
                    let v = h * (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
                    let idx = r as usize * cols + c as usize;
                    if v > canopy[idx] {
                        canopy[idx] = v;
                    }
                }
            }
        }
    }
    for (idx, v) in canopy.iter().enumerate() {
        if *v >= VEGETATION_FLOOR_M && layer.kind_map.data[idx] == KIND_GROUND {
            layer.add_heights.data[idx] = *v as f32;
            layer.kind_map.data[idx] = KIND_VEGETATION;
        }
    }
    Ok(layer)
}

/// `dsm = dtm + add_heights`, `ndsm = dsm − dtm`.
pub fn compose_scene(terrain: &TerrainField, layer: &StructureLayer) -> Result<SceneBundle> {
    let shape = terrain.heights.shape();
    if layer.add_heights.shape() != shape
        || (layer.footprint.rows, layer.footprint.cols) != shape
        || (layer.kind_map.rows, layer.kind_map.cols) != shape
    {
        return Err(Error::Contract("structure layer shape does not match terrain".into()));
    }
    let dtm = terrain.heights.clone();
    let dsm_data: Vec<f32> = dtm.data.iter().zip(&layer.add_heights.data).map(|(t, a)| t + a.max(0.0)).collect();
    let ndsm_data: Vec<f32> = dsm_data.iter().zip(&dtm.data).map(|(s, t)| s - t).collect();
    Ok(SceneBundle {
        scene_id: format!("scene-{:016x}", terrain.seed),
        resolution_m: terrain.resolution_m,
        seed: terrain.seed,
        dsm: Grid::new(shape.0, shape.1, dsm_data),
        ndsm: Grid::new(shape.0, shape.1, ndsm_data),
        dtm,
        footprint: layer.footprint.clone(),
        kind_map: layer.kind_map.clone(),
    })
}

pub fn generate_scene(config: &SynthConfig) -> Result<SceneBundle> {
    let terrain = generate_terrain(config)?;
    let layer = place_structures(&terrain, config)?;
    compose_scene(&terrain, &layer)
}

/// Nearest-neighbour upsampling by an integer factor (finer ground sampling,
/// objects span `factor`× more pixels). The nDSM is recomputed from the
/// resampled DSM and DTM so the scene algebra stays exact.
pub fn rescale_scene(scene: &SceneBundle, factor: usize) -> Result<SceneBundle> {
    if factor == 0 {
        return Err(Error::Config("rescale factor must be ≥ 1".into()));
    }
    let (h, w) = scene.shape();
    let (nh, nw) = (h * factor, w * factor);
    let up_g = |g: &Grid| {
        let data = (0..nh * nw).map(|i| g.at(i / nw / factor, (i % nw) / factor)).collect();
        Grid::new(nh, nw, data)
    };
    let up_m = |m: &Mask| {
        let data = (0..nh * nw).map(|i| m.at(i / nw / factor, (i % nw) / factor)).collect();
        Mask::new(nh, nw, data)
    };
    let dtm = up_g(&scene.dtm);
    let dsm = up_g(&scene.dsm);
    let ndsm_data = dsm.data.iter().zip(&dtm.data).map(|(s, t)| s - t).collect();
    Ok(SceneBundle {
        scene_id: format!("{}-x{factor}", scene.scene_id),
        resolution_m: scene.resolution_m / factor as f64,
        seed: scene.seed,
        ndsm: Grid::new(nh, nw, ndsm_data),
        dtm,
        dsm,
        footprint: up_m(&scene.footprint),
        kind_map: up_m(&scene.kind_map),
    })
}

/// Texture tile unrelated to terrain: power-law noise of random roughness with
/// its 8×8 blocks randomly permuted, scaled to [0, 1].
pub fn shuffled_texture(size: usize, seed: u64) -> Grid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7E77_0E5);
    let roughness = rng.gen_range(0.5..2.5);
    let noise = spectral_noise(size, roughness, 1.0, &mut rng);
    let block = 8.min(size);
    let nb = size / block;
    let mut order: Vec<usize> = (0..nb * nb).collect();
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut out = vec![0.0f32; size * size];
    for (dst_b, &src_b) in order.iter().enumerate() {
        let (dr, dc) = (dst_b / nb * block, dst_b % nb * block);
        let (sr, sc) = (src_b / nb * block, src_b % nb * block);
        for y in 0..block {
            for x in 0..block {
                out[(dr + y) * size + dc + x] = noise[(sr + y) * size + sc + x] as f32;
            }
        }
    }
    let (lo, hi) = out.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    let span = (hi - lo).max(1e-6);
    for v in &mut out {
        *v = (*v - lo) / span;
    }
    Grid::new(size, size, out)
}

// ---------------------------------------------------------------------------
// Scene directories
// ---------------------------------------------------------------------------

pub const SCENE_MANIFEST: &str = "scene.txt";

pub fn write_scene(scene: &SceneBundle, config_hash: &str, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (rows, cols) = scene.shape();
    let mut kv = KeyValues::default();
    kv.push("format", "terra-ssl-scene/1");
    kv.push("scene_id", &scene.scene_id);
    kv.push("rows", rows);
    kv.push("cols", cols);
    kv.push("resolution_m", format!("{:?}", scene.resolution_m));
    kv.push("seed", scene.seed);
    kv.push("config_hash", config_hash);
    kv.write(&dir.join(SCENE_MANIFEST))?;
    raster::write_f32(&dir.join("dtm.f32"), &scene.dtm.data)?;
    raster::write_f32(&dir.join("dsm.f32"), &scene.dsm.data)?;
    raster::write_f32(&dir.join("ndsm.f32"), &scene.ndsm.data)?;
    raster::write_u8(&dir.join("footprint.u8"), &scene.footprint.data)?;
    raster::write_u8(&dir.join("kind.u8"), &scene.kind_map.data)?;
    Ok(())
}

pub fn read_scene(dir: &Path) -> Result<SceneBundle> {
    let mpath = dir.join(SCENE_MANIFEST);
    let kv = KeyValues::read(&mpath)?;
    let rows: usize = kv.parse("rows", &mpath)?;
    let cols: usize = kv.parse("cols", &mpath)?;
    let n = rows * cols;
    Ok(SceneBundle {
        scene_id: kv.require("scene_id", &mpath)?.to_string(),
        resolution_m: kv.parse("resolution_m", &mpath)?,
        seed: kv.parse("seed", &mpath)?,
        dtm: Grid::new(rows, cols, raster::read_f32(&dir.join("dtm.f32"), n)?),
        dsm: Grid::new(rows, cols, raster::read_f32(&dir.join("dsm.f32"), n)?),
        ndsm: Grid::new(rows, cols, raster::read_f32(&dir.join("ndsm.f32"), n)?),
        footprint: Mask::new(rows, cols, raster::read_u8(&dir.join("footprint.u8"), n)?),
        kind_map: Mask::new(rows, cols, raster::read_u8(&dir.join("kind.u8"), n)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn terrain_is_deterministic_and_zero_amplitude_is_flat() {
        let cfg = SynthConfig { seed: 7, size_px: 64, ..Default::default() };
        let a = generate_terrain(&cfg).unwrap();
        let b = generate_terrain(&cfg).unwrap();
        assert!(a.heights.data.iter().zip(&b.heights.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        let flat = generate_terrain(&SynthConfig { terrain_amplitude_m: 0.0, ..cfg }).unwrap();
        assert!(flat.heights.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn small_size_rejected() {
        let cfg = SynthConfig { size_px: 16, ..Default::default() };
        assert!(matches!(generate_terrain(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn empty_layer_when_densities_zero() {
        let cfg = SynthConfig { size_px: 64, building_density: 0.0, vegetation_density: 0.0, ..Default::default() };
        let t = generate_terrain(&cfg).unwrap();
        let l = place_structures(&t, &cfg).unwrap();
        assert!(l.add_heights.data.iter().all(|v| *v == 0.0));
        assert_eq!(l.footprint.count(), 0);
        let s = compose_scene(&t, &l).unwrap();
        assert_eq!(s.dsm, s.dtm);
        assert!(s.ndsm.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn impossible_density_names_parameter() {
        let cfg = SynthConfig { size_px: 64, building_density: 20_000.0, ..Default::default() };
        let t = generate_terrain(&cfg).unwrap();
        match place_structures(&t, &cfg) {
            Err(Error::Generation { param, .. }) => assert_eq!(param, "building_density"),
            other => panic!("expected generation error, got {other:?}"),
        }
    }

    #[test]
    fn single_building_on_flat_ground() {
        let n = 32;
        let terrain = TerrainField { heights: Grid::filled(n, n, 0.0), resolution_m: 1.0, seed: 1 };
        let mut layer = StructureLayer::empty(n, n);
        for r in 10..20 {
            for c in 5..15 {
                let i = r * n + c;
                layer.add_heights.data[i] = 10.0;
                layer.footprint.data[i] = 1;
                layer.kind_map.data[i] = KIND_BUILDING;
            }
        }
        let s = compose_scene(&terrain, &layer).unwrap();
        for i in 0..n * n {
            let expect = if layer.footprint.data[i] == 1 { 10.0 } else { 0.0 };
            assert_eq!(s.dsm.data[i], expect);
        }
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let terrain = TerrainField { heights: Grid::filled(32, 32, 0.0), resolution_m: 1.0, seed: 1 };
        let layer = StructureLayer::empty(33, 32);
        assert!(matches!(compose_scene(&terrain, &layer), Err(Error::Contract(_))));
    }

    #[test]
    fn rescale_doubles_extent() {
        let cfg = SynthConfig { size_px: 64, seed: 3, ..Default::default() };
        let s = generate_scene(&cfg).unwrap();
        let r = rescale_scene(&s, 2).unwrap();
        assert_eq!(r.shape(), (128, 128));
        assert_eq!(r.footprint.count(), 4 * s.footprint.count());
        assert_eq!(r.resolution_m, 0.5);
    }

    #[test]
    fn texture_is_unit_range() {
        let t = shuffled_texture(64, 9);
        let (lo, hi) = t.min_max();
        assert_eq!(lo, 0.0);
        assert!((hi - 1.0).abs() < 1e-6);
    }

    #[test]
    fn reference_terrain_range_is_locked() {
        let cfg = SynthConfig { seed: 7, size_px: 256, terrain_amplitude_m: 50.0, terrain_roughness: 2.0, ..Default::default() };
        let t = generate_terrain(&cfg).unwrap();
        let (lo, hi) = t.heights.min_max();
        let range = (hi - lo) as f64;
        assert!((10.0..=50.0).contains(&range), "{range}");
        assert!((range - LOCKED_RANGE_M).abs() < 1e-3, "{range}");
    }

    const LOCKED_RANGE_M: f64 = 38.453804;

    #[test]
    fn default_terrain_is_smooth() {
        for seed in 0..4 {
            let cfg = SynthConfig { seed, ..Default::default() };
            let t = generate_terrain(&cfg).unwrap();
            let g = &t.heights;
            let mut worst = 0.0f32;
            for r in 0..g.rows {
                for c in 0..g.cols {
                    if c + 1 < g.cols {
                        worst = worst.max((g.at(r, c + 1) - g.at(r, c)).abs());
                    }
                    if r + 1 < g.rows {
                        worst = worst.max((g.at(r + 1, c) - g.at(r, c)).abs());
                    }
                }
            }
            assert!((worst as f64) <= cfg.terrain_amplitude_m / 4.0, "seed {seed}: {worst}");
        }
    }

    #[test]
    fn reference_building_count_is_locked() {
        let cfg = SynthConfig { seed: 11, size_px: 512, building_density: 76.0, ..Default::default() };
        let s = generate_scene(&cfg).unwrap();
        let (_, n) = s.footprint.components();
        assert!((15..=25).contains(&n), "{n}");
        assert_eq!(n, LOCKED_BUILDINGS);
    }

    const LOCKED_BUILDINGS: usize = 20;

    #[test]
    fn buildings_prefer_gentle_slopes() {
        let mut under = 0.0;
        let mut overall = 0.0;
        for seed in 0..10 {
            let cfg = SynthConfig { seed, ..Default::default() };
            let s = generate_scene(&cfg).unwrap();
            let slope = slope_map(&s.dtm, s.resolution_m);
            let fp: Vec<f64> = slope.iter().zip(&s.footprint.data).filter(|(_, m)| **m != 0).map(|(v, _)| *v).collect();
            under += fp.iter().sum::<f64>() / fp.len().max(1) as f64;
            overall += slope.iter().sum::<f64>() / slope.len() as f64;
        }
        assert!(under <= overall, "{under} > {overall}");
    }

    #[test]
    fn scene_files_roundtrip_bit_exact() {
        let s = generate_scene(&SynthConfig { size_px: 64, seed: 5, ..Default::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_scene(&s, "abc", dir.path()).unwrap();
        let back = read_scene(dir.path()).unwrap();
        assert_eq!(back.footprint, s.footprint);
        for (a, b) in [(&back.dtm, &s.dtm), (&back.dsm, &s.dsm), (&back.ndsm, &s.ndsm)] {
            assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(12))]

        #[test]
        fn scene_invariants_hold(seed in 0u64..10_000, amp in 0.0f64..30.0, veg in 0.0f64..120.0, dens in 0.0f64..150.0) {
            let cfg = SynthConfig {
                size_px: 128,
                seed,
                terrain_amplitude_m: amp,
                vegetation_density: veg,
                building_density: dens,
                ..Default::default()
            };
            let s = generate_scene(&cfg).unwrap();
            let again = generate_scene(&cfg).unwrap();
            proptest::prop_assert_eq!(&s, &again);
            for i in 0..s.dsm.data.len() {
                proptest::prop_assert!(s.dsm.data[i] >= s.dtm.data[i]);
                proptest::prop_assert!(s.ndsm.data[i] >= 0.0);
                proptest::prop_assert_eq!((s.dsm.data[i] - s.dtm.data[i]).to_bits(), s.ndsm.data[i].to_bits());
                if s.footprint.data[i] != 0 {
                    proptest::prop_assert!(s.ndsm.data[i] > 0.0);
                }
            }
        }
    }
}
