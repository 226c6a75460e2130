use rand::Rng;
use serde::{Deserialize, Serialize};

use super::rir::image_lattice_absorption;
use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

/// Sabine constant in s/m.
const SABINE: f64 = 0.161;

/// How a target RT60 is turned into wall absorption.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbsorptionModel {
    /// Inverse Sabine formula.
    Sabine,
    /// Decay of the specular image lattice itself; see
    /// [`image_lattice_absorption`].
    #[default]
    ImageLattice,
}

impl AbsorptionModel {
    pub fn absorption(self, rt60_s: f64, dims: Point3) -> Result<f64> {
        match self {
            AbsorptionModel::Sabine => rt60_to_absorption(rt60_s, dims),
            AbsorptionModel::ImageLattice => image_lattice_absorption(rt60_s, dims),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    /// Length, width, height in metres.
    pub dims: Point3,
    pub rt60_s: f64,
    /// Energy absorption coefficient shared by all six walls.
    pub absorption: f64,
}

impl RoomSpec {
    /// Room with the absorption that gives `rt60_s` under `model`.
    pub fn with_rt60(dims: Point3, rt60_s: f64, model: AbsorptionModel) -> Result<Self> {
        Ok(Self {
            dims,
            rt60_s,
            absorption: model.absorption(rt60_s, dims)?,
        })
    }

    pub fn volume(&self) -> f64 {
        self.dims.iter().product()
    }

    pub fn surface(&self) -> f64 {
        surface(self.dims)
    }

    /// Pressure reflection coefficient `sqrt(1 - absorption)`.
    pub fn reflection(&self) -> f64 {
        (1.0 - self.absorption).max(0.0).sqrt()
    }

    pub fn contains(&self, p: Point3) -> bool {
        p.iter().zip(&self.dims).all(|(&x, &d)| x > 0.0 && x < d)
    }

    /// Distance from `p` to the nearest wall, floor or ceiling.
    pub fn wall_distance(&self, p: Point3) -> f64 {
        p.iter()
            .zip(&self.dims)
            .map(|(&x, &d)| x.min(d - x))
            .fold(f64::INFINITY, f64::min)
    }
}

fn surface(dims: Point3) -> f64 {
    let [l, w, h] = dims;
    2.0 * (l * w + l * h + w * h)
}

/// Inverts Sabine's formula, `alpha = 0.161 V / (rt60 * S)`. Errors when
/// the room is too small to reach `rt60_s` (alpha above 1).
pub fn rt60_to_absorption(rt60_s: f64, dims: Point3) -> Result<f64> {
    if !(rt60_s.is_finite() && rt60_s > 0.0) {
        return Err(Error::invalid(format!("RT60 must be positive, got {rt60_s}")));
    }
    if dims.iter().any(|&d| !(d.is_finite() && d > 0.0)) {
        return Err(Error::invalid(format!("invalid room dimensions {dims:?}")));
    }
    let volume: f64 = dims.iter().product();
    let alpha = SABINE * volume / (rt60_s * surface(dims));
    if alpha > 1.0 {
        return Err(Error::invalid(format!(
            "a {dims:?} room cannot reach RT60 {rt60_s} s (absorption {alpha:.3} > 1)"
        )));
    }
    Ok(alpha)
}

/// Linear microphone array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    pub mic_positions: Vec<Point3>,
    pub aperture_m: f64,
}

impl ArrayGeometry {
    /// `n_mics` evenly spaced over `aperture_m`, centred on `center`, along
    /// the horizontal direction `azimuth` (radians).
    pub fn linear(center: Point3, n_mics: usize, aperture_m: f64, azimuth: f64) -> Result<Self> {
        if n_mics < 2 {
            return Err(Error::invalid("a linear array needs at least two microphones"));
        }
        let (s, c) = azimuth.sin_cos();
        let mic_positions = (0..n_mics)
            .map(|i| {
                let u = aperture_m * (i as f64 / (n_mics - 1) as f64 - 0.5);
                [center[0] + u * c, center[1] + u * s, center[2]]
            })
            .collect();
        Ok(Self {
            mic_positions,
            aperture_m,
        })
    }

    pub fn n_mics(&self) -> usize {
        self.mic_positions.len()
    }

    pub fn center(&self) -> Point3 {
        let n = self.mic_positions.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.mic_positions {
            for k in 0..3 {
                c[k] += p[k] / n;
            }
        }
        c
    }

    /// Largest distance between any two microphones.
    pub fn max_pairwise_distance(&self) -> f64 {
        let mut best: f64 = 0.0;
        for (i, a) in self.mic_positions.iter().enumerate() {
            for b in &self.mic_positions[i + 1..] {
                best = best.max(distance(*a, *b));
            }
        }
        best
    }

    /// True when every microphone lies on the line through the end points.
    pub fn is_collinear(&self, tol: f64) -> bool {
        let (Some(&a), Some(&b)) = (self.mic_positions.first(), self.mic_positions.last()) else {
            return true;
        };
        let dir = sub(b, a);
        let len = norm(dir);
        if len == 0.0 {
            return false;
        }
        self.mic_positions.iter().all(|&p| norm(cross(sub(p, a), dir)) / len <= tol)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourcePlacement {
    pub position: Point3,
    pub speaker_id: String,
}

pub fn distance(a: Point3, b: Point3) -> f64 {
    norm(sub(a, b))
}

fn sub(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm(a: Point3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

fn cross(a: Point3, b: Point3) -> Point3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Ranges rooms, arrays and speakers are drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoomSampling {
    pub floor_range: (f64, f64),
    pub height_range: (f64, f64),
    pub rt60_range: (f64, f64),
    /// Use this RT60 for every room instead of sampling.
    pub fixed_rt60: Option<f64>,
    pub absorption_model: AbsorptionModel,
    pub aperture_m: f64,
    pub max_array_offset: f64,
    pub array_height: (f64, f64),
    pub wall_margin: f64,
    /// Speakers closer than this to any microphone are re-drawn.
    pub min_source_mic_distance: f64,
}

impl Default for RoomSampling {
    fn default() -> Self {
        Self {
            floor_range: (3.0, 8.0),
            height_range: (2.4, 3.0),
            rt60_range: (0.4, 1.0),
            fixed_rt60: None,
            absorption_model: AbsorptionModel::default(),
            aperture_m: 0.10,
            max_array_offset: 0.5,
            array_height: (0.6, 0.8),
            wall_margin: 0.5,
            min_source_mic_distance: 0.3,
        }
    }
}

/// Violated constraints of a sampled scene, empty when it is valid.
pub fn check_scene(
    cfg: &RoomSampling,
    room: &RoomSpec,
    array: &ArrayGeometry,
    sources: &[Point3],
) -> Vec<String> {
    let mut bad = Vec::new();
    let in_range = |x: f64, (lo, hi): (f64, f64)| x >= lo - 1e-12 && x <= hi + 1e-12;
    let [l, w, h] = room.dims;
    if !in_range(l, cfg.floor_range) || !in_range(w, cfg.floor_range) {
        bad.push(format!("floor {l} x {w} outside {:?}", cfg.floor_range));
    }
    if !in_range(h, cfg.height_range) {
        bad.push(format!("height {h} outside {:?}", cfg.height_range));
    }
    if !in_range(room.rt60_s, cfg.rt60_range) {
        bad.push(format!("RT60 {} outside {:?}", room.rt60_s, cfg.rt60_range));
    }
    if !(room.absorption > 0.0 && room.absorption <= 1.0) {
        bad.push(format!("absorption {} outside (0, 1]", room.absorption));
    }
    if !(2..=4).contains(&array.n_mics()) {
        bad.push(format!("{} microphones", array.n_mics()));
    }
    if (array.max_pairwise_distance() - cfg.aperture_m).abs() > 1e-9 {
        bad.push(format!("aperture {}", array.max_pairwise_distance()));
    }
    if !array.is_collinear(1e-9) {
        bad.push("microphones are not collinear".into());
    }
    let c = array.center();
    let offset = ((c[0] - l / 2.0).powi(2) + (c[1] - w / 2.0).powi(2)).sqrt();
    if offset > cfg.max_array_offset + 1e-12 {
        bad.push(format!("array centre {offset} m from room centre"));
    }
    if !in_range(c[2], cfg.array_height) {
        bad.push(format!("array height {}", c[2]));
    }
    if array.mic_positions.iter().any(|&m| !room.contains(m)) {
        bad.push("microphone outside the room".into());
    }
    for s in sources {
        if room.wall_distance(*s) < cfg.wall_margin - 1e-12 {
            bad.push(format!("source {s:?} closer than {} m to a wall", cfg.wall_margin));
        }
    }
    bad
}

/// Draws a room, a linear array and `n_sources` speaker positions,
/// re-drawing until every constraint holds.
pub fn sample_room<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &RoomSampling,
    n_mics: usize,
    n_sources: usize,
) -> Result<(RoomSpec, ArrayGeometry, Vec<Point3>)> {
    if !(2..=4).contains(&n_mics) {
        return Err(Error::invalid(format!("arrays have 2 to 4 microphones, got {n_mics}")));
    }
    let uniform = |rng: &mut R, (lo, hi): (f64, f64)| if hi > lo { rng.random_range(lo..=hi) } else { lo };
    for _ in 0..10_000 {
        let dims = [
            uniform(rng, cfg.floor_range),
            uniform(rng, cfg.floor_range),
            uniform(rng, cfg.height_range),
        ];
        let rt60 = cfg.fixed_rt60.unwrap_or_else(|| uniform(rng, cfg.rt60_range));
        let Ok(room) = RoomSpec::with_rt60(dims, rt60, cfg.absorption_model) else {
            continue;
        };
        // Uniform point in the disc around the room centre.
        let r = cfg.max_array_offset * rng.random::<f64>().sqrt();
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        let center = [
            dims[0] / 2.0 + r * phi.cos(),
            dims[1] / 2.0 + r * phi.sin(),
            uniform(rng, cfg.array_height),
        ];
        let azimuth = rng.random_range(0.0..std::f64::consts::PI);
        let array = ArrayGeometry::linear(center, n_mics, cfg.aperture_m, azimuth)?;
        let m = cfg.wall_margin;
        let sources: Vec<Point3> = (0..n_sources)
            .map(|_| [0, 1, 2].map(|k| uniform(rng, (m, dims[k] - m))))
            .collect();
        let too_close = sources.iter().any(|s| {
            array
                .mic_positions
                .iter()
                .any(|&mic| distance(*s, mic) < cfg.min_source_mic_distance)
        });
        if too_close || !check_scene(cfg, &room, &array, &sources).is_empty() {
            continue;
        }
        return Ok((room, array, sources));
    }
    Err(Error::invalid("room constraints could not be satisfied"))
}
