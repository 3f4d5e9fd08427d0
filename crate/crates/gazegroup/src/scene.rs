//! Procedural synthetic gaze scenes.
//!
//! Each scene holds persons with normalized head boxes, appearance vectors
//! that carry a noisy copy of the person's gaze direction, optional gaze
//! targets, zero or more shared-attention groups, and a small feature grid
//! whose first channel marks salient locations (everything somebody looks
//! at, plus a few idle objects). Generation is pure per (config, index):
//! the same config and seed always produce bit-identical datasets.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;
use thiserror::Error;

use crate::autodiff::Mat;
use crate::grid::{self, GridError};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("unsatisfiable config: {0}")]
    UnsatisfiableConfig(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("scene validation failed: {0}")]
    Validation(String),
    #[error("record parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub grid_height: usize,
    pub grid_width: usize,
    pub grid_channels: usize,
    pub max_persons: usize,
    pub max_groups: usize,
    /// Probability that a scene contains at least one group.
    pub positive_fraction: f64,
    /// Width of rendered gaze-target bumps, in normalized units.
    pub gaussian_sigma: f64,
    pub appearance_dim: usize,
    pub seed: u64,
    /// Std of the noise mixed into the gaze direction inside appearance.
    pub appearance_noise: f64,
    /// Probability that a person belongs to two groups at once.
    pub group_overlap_prob: f64,
    /// Probability that a non-member looks out of frame.
    pub out_of_frame_prob: f64,
    /// Probability that a non-member fixates just beside a group target.
    pub distractor_near_prob: f64,
    /// Minimum separation between distinct group targets.
    pub min_group_separation: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            grid_height: 32,
            grid_width: 32,
            grid_channels: 8,
            max_persons: 6,
            max_groups: 2,
            positive_fraction: 0.435,
            gaussian_sigma: 0.06,
            appearance_dim: 16,
            seed: 0,
            appearance_noise: 0.05,
            group_overlap_prob: 0.0,
            out_of_frame_prob: 0.1,
            distractor_near_prob: 0.35,
            min_group_separation: 0.15,
        }
    }
}

impl GeneratorConfig {
    /// Low-positive preset mirroring a child-caregiver style distribution.
    pub fn childplay_preset() -> Self {
        GeneratorConfig {
            positive_fraction: 0.073,
            ..GeneratorConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if self.grid_height < 8 || self.grid_width < 8 {
            return Err(SceneError::InvalidConfig(
                "image grid must be at least 8x8".into(),
            ));
        }
        if self.grid_channels == 0 {
            return Err(SceneError::InvalidConfig("grid_channels must be >= 1".into()));
        }
        if self.max_groups < 1 {
            return Err(SceneError::InvalidConfig("max_groups must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return Err(SceneError::InvalidConfig(
                "positive_fraction must lie in [0,1]".into(),
            ));
        }
        if self.gaussian_sigma <= 0.0 {
            return Err(SceneError::InvalidConfig("gaussian_sigma must be > 0".into()));
        }
        if self.max_persons < 2 {
            if self.positive_fraction > 0.0 {
                return Err(SceneError::UnsatisfiableConfig(
                    "groups need at least two persons but max_persons < 2 \
                     with positive_fraction > 0"
                        .into(),
                ));
            }
            return Err(SceneError::InvalidConfig("max_persons must be >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Person {
    /// [x_min, y_min, x_max, y_max] in normalized coordinates.
    pub head_box: [f64; 4],
    pub appearance: Vec<f64>,
    /// Present exactly when `in_frame` is true.
    pub gaze_target: Option<(f64, f64)>,
    pub in_frame: bool,
}

impl Person {
    pub fn head_center(&self) -> (f64, f64) {
        (
            0.5 * (self.head_box[0] + self.head_box[2]),
            0.5 * (self.head_box[1] + self.head_box[3]),
        )
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroupAnnotation {
    /// Sorted, distinct person indices; always at least two.
    pub members: Vec<usize>,
    pub sa_point: (f64, f64),
    /// Box around the attended region, containing `sa_point`.
    pub sa_box: [f64; 4],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeatureGrid {
    /// [height, width, channels].
    pub shape: [usize; 3],
    /// Row-major (h, w, c) values.
    pub data: Vec<f64>,
}

impl FeatureGrid {
    pub fn height(&self) -> usize {
        self.shape[0]
    }
    pub fn width(&self) -> usize {
        self.shape[1]
    }
    pub fn channels(&self) -> usize {
        self.shape[2]
    }
    pub fn at(&self, i: usize, j: usize, c: usize) -> f64 {
        self.data[(i * self.shape[1] + j) * self.shape[2] + c]
    }
    /// Flattened (H*W) x C matrix of cell features, cells in row-major order.
    pub fn cells(&self) -> Mat {
        let (h, w, c) = (self.shape[0], self.shape[1], self.shape[2]);
        Array2::from_shape_vec((h * w, c), self.data.clone()).expect("grid shape")
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: String,
    pub persons: Vec<Person>,
    pub groups: Vec<GroupAnnotation>,
    pub grid: FeatureGrid,
}

impl Scene {
    pub fn is_positive(&self) -> bool {
        !self.groups.is_empty()
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(index.wrapping_add(1))))
}

fn box_iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    let area = |r: &[f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

fn unit(v: (f64, f64)) -> (f64, f64) {
    let n = (v.0 * v.0 + v.1 * v.1).sqrt();
    if n < 1e-12 {
        (1.0, 0.0)
    } else {
        (v.0 / n, v.1 / n)
    }
}

/// Fixed appearance mixing matrix, a function of the dataset seed only so
/// that train and test splits drawn from one seed agree on the encoding.
fn appearance_basis(seed: u64, dim: usize) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x61707065_6172616e));
    let normal = Normal::new(0.0, 1.0).unwrap();
    (0..dim)
        .map(|_| (normal.sample(&mut rng), normal.sample(&mut rng)))
        .collect()
}

struct BumpField {
    bumps: Vec<(f64, f64, f64, f64)>, // (x, y, inv_two_sigma_sq, amplitude)
}

impl BumpField {
    fn eval(&self, x: f64, y: f64) -> f64 {
        self.bumps
            .iter()
            .map(|&(bx, by, inv, amp)| amp * (-((x - bx).powi(2) + (y - by).powi(2)) * inv).exp())
            .sum()
    }
    fn eval_max(&self, x: f64, y: f64) -> f64 {
        self.bumps
            .iter()
            .map(|&(bx, by, inv, amp)| amp * (-((x - bx).powi(2) + (y - by).powi(2)) * inv).exp())
            .fold(0.0, f64::max)
    }
}

/// Generate one scene. Pure in (config, index): repeated calls agree bitwise.
pub fn generate_scene(cfg: &GeneratorConfig, index: u64) -> Result<Scene, SceneError> {
    cfg.validate()?;
    let mut rng = scene_rng(cfg.seed, index);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let n_persons = rng.gen_range(2..=cfg.max_persons);

    // Head boxes by rejection so no pair overlaps above 50% IoU.
    let mut boxes: Vec<[f64; 4]> = Vec::with_capacity(n_persons);
    for _ in 0..n_persons {
        let mut placed = false;
        for _try in 0..300 {
            let hx = rng.gen_range(0.03..0.07);
            let hy = rng.gen_range(0.04..0.08);
            let cx = rng.gen_range(0.08..0.92);
            let cy = rng.gen_range(0.08..0.92);
            let b = [cx - hx, cy - hy, cx + hx, cy + hy];
            if boxes.iter().all(|o| box_iou(o, &b) <= 0.5) {
                boxes.push(b);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(SceneError::Validation(
                "could not place non-overlapping head boxes".into(),
            ));
        }
    }

    // Group layout.
    let positive = cfg.positive_fraction > 0.0 && rng.gen_bool(cfg.positive_fraction);
    let mut groups: Vec<GroupAnnotation> = Vec::new();
    let mut unassigned: Vec<usize> = (0..n_persons).collect();
    if positive {
        let mut want = 1usize;
        while want < cfg.max_groups && rng.gen_bool(0.3) {
            want += 1;
        }
        let mut sa_points: Vec<(f64, f64)> = Vec::new();
        for _ in 0..want {
            if unassigned.len() < 2 {
                break;
            }
            let mut point = None;
            for _try in 0..200 {
                let p = (rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9));
                if sa_points
                    .iter()
                    .all(|&q| dist(p, q) >= cfg.min_group_separation)
                {
                    point = Some(p);
                    break;
                }
            }
            let Some(sa_point) = point else { break };
            let size_roll: f64 = rng.gen();
            let want_size = if size_roll < 0.6 {
                2
            } else if size_roll < 0.9 {
                3
            } else {
                4
            };
            let size = want_size.min(unassigned.len());
            let mut members = Vec::with_capacity(size);
            for _ in 0..size {
                let k = rng.gen_range(0..unassigned.len());
                members.push(unassigned.swap_remove(k));
            }
            members.sort_unstable();
            let ex = rng.gen_range(0.04..0.1);
            let ey = rng.gen_range(0.04..0.1);
            let sa_box = [
                (sa_point.0 - ex).max(0.0),
                (sa_point.1 - ey).max(0.0),
                (sa_point.0 + ex).min(1.0),
                (sa_point.1 + ey).min(1.0),
            ];
            sa_points.push(sa_point);
            groups.push(GroupAnnotation {
                members,
                sa_point,
                sa_box,
            });
        }
        // Optional dual membership: the person keeps gazing at their first
        // group's target, so the strict gaze==sa_point rule is relaxed to
        // "gaze matches one of the person's groups".
        if groups.len() >= 2 && cfg.group_overlap_prob > 0.0 && rng.gen_bool(cfg.group_overlap_prob)
        {
            let donor = groups[0].members[rng.gen_range(0..groups[0].members.len())];
            if !groups[1].members.contains(&donor) {
                groups[1].members.push(donor);
                groups[1].members.sort_unstable();
            }
        }
    }
    let sa_points: Vec<(f64, f64)> = groups.iter().map(|g| g.sa_point).collect();

    // Gaze targets.
    let mut first_group_of = vec![None::<usize>; n_persons];
    for (gi, g) in groups.iter().enumerate() {
        for &m in &g.members {
            if first_group_of[m].is_none() {
                first_group_of[m] = Some(gi);
            }
        }
    }
    let mut targets: Vec<Option<(f64, f64)>> = Vec::with_capacity(n_persons);
    for p in 0..n_persons {
        if let Some(gi) = first_group_of[p] {
            targets.push(Some(groups[gi].sa_point));
            continue;
        }
        if rng.gen_bool(cfg.out_of_frame_prob) {
            targets.push(None);
            continue;
        }
        let near = !sa_points.is_empty() && rng.gen_bool(cfg.distractor_near_prob);
        let t = if near {
            let anchor = sa_points[rng.gen_range(0..sa_points.len())];
            let mut pick = (0.5, 0.5);
            for _try in 0..20 {
                let r = rng.gen_range(0.06..0.10);
                let a = rng.gen_range(0.0..std::f64::consts::TAU);
                let c = (anchor.0 + r * a.cos(), anchor.1 + r * a.sin());
                pick = (c.0.clamp(0.02, 0.98), c.1.clamp(0.02, 0.98));
                if (0.02..=0.98).contains(&c.0) && (0.02..=0.98).contains(&c.1) {
                    break;
                }
            }
            pick
        } else {
            let mut pick = (rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95));
            for _try in 0..200 {
                if sa_points.iter().all(|&q| dist(pick, q) >= 0.12) {
                    break;
                }
                pick = (rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95));
            }
            pick
        };
        targets.push(Some(t));
    }

    // Appearance: a personal random vector plus a fixed projection of the
    // noisy gaze direction. Out-of-frame persons get a random direction.
    let basis = appearance_basis(cfg.seed, cfg.appearance_dim);
    let mut persons = Vec::with_capacity(n_persons);
    for p in 0..n_persons {
        let center = (
            0.5 * (boxes[p][0] + boxes[p][2]),
            0.5 * (boxes[p][1] + boxes[p][3]),
        );
        let dir = match targets[p] {
            Some(t) => unit((t.0 - center.0, t.1 - center.1)),
            None => {
                let a = rng.gen_range(0.0..std::f64::consts::TAU);
                (a.cos(), a.sin())
            }
        };
        let noisy = unit((
            dir.0 + cfg.appearance_noise * normal.sample(&mut rng),
            dir.1 + cfg.appearance_noise * normal.sample(&mut rng),
        ));
        let appearance: Vec<f64> = basis
            .iter()
            .map(|&(bx, by)| 0.3 * normal.sample(&mut rng) + bx * noisy.0 + by * noisy.1)
            .collect();
        persons.push(Person {
            head_box: boxes[p],
            appearance,
            gaze_target: targets[p],
            in_frame: targets[p].is_some(),
        });
    }

    // Feature grid: saliency at everything gazed at plus idle objects, then
    // coordinate ramps and smooth clutter fields.
    let (h, w, c) = (cfg.grid_height, cfg.grid_width, cfg.grid_channels);
    let mut salient: Vec<(f64, f64, f64, f64)> = targets
        .iter()
        .flatten()
        .map(|&(x, y)| (x, y, 1.0 / (2.0 * 0.05 * 0.05), 1.0))
        .collect();
    for _ in 0..rng.gen_range(0..=2) {
        salient.push((
            rng.gen_range(0.05..0.95),
            rng.gen_range(0.05..0.95),
            1.0 / (2.0 * 0.05 * 0.05),
            1.0,
        ));
    }
    let saliency = BumpField { bumps: salient };
    let clutter: Vec<BumpField> = (0..c.saturating_sub(4))
        .map(|_| BumpField {
            bumps: (0..3)
                .map(|_| {
                    let s: f64 = rng.gen_range(0.15..0.4);
                    (
                        rng.gen_range(0.0..1.0),
                        rng.gen_range(0.0..1.0),
                        1.0 / (2.0 * s * s),
                        rng.gen_range(-0.5..0.5),
                    )
                })
                .collect(),
        })
        .collect();
    let mut data = Vec::with_capacity(h * w * c);
    for i in 0..h {
        let y = (i as f64 + 0.5) / h as f64;
        for j in 0..w {
            let x = (j as f64 + 0.5) / w as f64;
            for ch in 0..c {
                let v = match ch {
                    0 => saliency.eval_max(x, y),
                    1 => x,
                    2 => y,
                    3 => 0.5 * ((8.0 * x).sin() + (8.0 * y).cos()) * 0.3,
                    k => clutter[k - 4].eval(x, y),
                };
                data.push(v);
            }
        }
    }

    Ok(Scene {
        scene_id: format!("s{}-{:06}", cfg.seed, index),
        persons,
        groups,
        grid: FeatureGrid {
            shape: [h, w, c],
            data,
        },
    })
}

pub fn generate_dataset(
    cfg: &GeneratorConfig,
    count: u64,
    start_index: u64,
) -> Result<Vec<Scene>, SceneError> {
    (start_index..start_index + count)
        .map(|i| generate_scene(cfg, i))
        .collect()
}

/// Zero-filled target for an out-of-frame person, Gaussian bump otherwise.
pub fn gt_heatmap_for_person(
    scene: &Scene,
    person: usize,
    sigma: f64,
    h: usize,
    w: usize,
) -> Result<Mat, SceneError> {
    match scene.persons[person].gaze_target {
        Some(t) => Ok(grid::render_gaussian(t, sigma, h, w)?),
        None => Ok(Mat::zeros((h, w))),
    }
}

/// K x N binary membership rows, one per annotated group.
pub fn gt_membership(scene: &Scene) -> Mat {
    let n = scene.persons.len();
    let k = scene.groups.len();
    let mut m = Mat::zeros((k, n));
    for (gi, g) in scene.groups.iter().enumerate() {
        for &p in &g.members {
            m[(gi, p)] = 1.0;
        }
    }
    m
}

/// K x (H*W) stack of target maps, one Gaussian per annotated group.
pub fn gt_sa_maps(scene: &Scene, sigma: f64, h: usize, w: usize) -> Result<Mat, SceneError> {
    let k = scene.groups.len();
    let mut out = Mat::zeros((k, h * w));
    for (gi, g) in scene.groups.iter().enumerate() {
        let m = grid::render_gaussian(g.sa_point, sigma, h, w)?;
        for (c, v) in m.iter().enumerate() {
            out[(gi, c)] = *v;
        }
    }
    Ok(out)
}

// ====================== serialization ======================

pub fn encode_scene(scene: &Scene) -> Result<String, SceneError> {
    Ok(serde_json::to_string(scene)?)
}

pub fn decode_scene(line: &str) -> Result<Scene, SceneError> {
    let scene: Scene = serde_json::from_str(line)?;
    validate_scene(&scene)?;
    Ok(scene)
}

fn validate_box(b: &[f64; 4], what: &str) -> Result<(), SceneError> {
    if b.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
        return Err(SceneError::Validation(format!(
            "{what}: components must lie in [0,1]"
        )));
    }
    if b[0] > b[2] || b[1] > b[3] {
        return Err(SceneError::Validation(format!(
            "{what}: expected x_min <= x_max and y_min <= y_max"
        )));
    }
    Ok(())
}

pub fn validate_scene(scene: &Scene) -> Result<(), SceneError> {
    if scene.scene_id.is_empty() {
        return Err(SceneError::Validation("scene_id: must be non-empty".into()));
    }
    if scene.persons.is_empty() {
        return Err(SceneError::Validation("persons: must be non-empty".into()));
    }
    let app_dim = scene.persons[0].appearance.len();
    for (i, p) in scene.persons.iter().enumerate() {
        validate_box(&p.head_box, &format!("persons[{i}].head_box"))?;
        if p.appearance.len() != app_dim {
            return Err(SceneError::Validation(format!(
                "persons[{i}].appearance: inconsistent length"
            )));
        }
        if p.gaze_target.is_some() != p.in_frame {
            return Err(SceneError::Validation(format!(
                "persons[{i}].gaze_target: present iff in_frame"
            )));
        }
        if let Some((x, y)) = p.gaze_target {
            if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
                return Err(SceneError::Validation(format!(
                    "persons[{i}].gaze_target: must lie in [0,1]^2"
                )));
            }
        }
    }
    let mut group_count = vec![0usize; scene.persons.len()];
    for g in &scene.groups {
        for &m in &g.members {
            if m < group_count.len() {
                group_count[m] += 1;
            }
        }
    }
    for (gi, g) in scene.groups.iter().enumerate() {
        if g.members.len() < 2 {
            return Err(SceneError::Validation(format!(
                "groups[{gi}].members: need at least two members"
            )));
        }
        let mut sorted = g.members.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != g.members.len() {
            return Err(SceneError::Validation(format!(
                "groups[{gi}].members: duplicate person index"
            )));
        }
        validate_box(&g.sa_box, &format!("groups[{gi}].sa_box"))?;
        let (sx, sy) = g.sa_point;
        if !(g.sa_box[0]..=g.sa_box[2]).contains(&sx) || !(g.sa_box[1]..=g.sa_box[3]).contains(&sy)
        {
            return Err(SceneError::Validation(format!(
                "groups[{gi}].sa_point: must lie inside sa_box"
            )));
        }
        for &m in &g.members {
            if m >= scene.persons.len() {
                return Err(SceneError::Validation(format!(
                    "groups[{gi}].members: person index {m} out of range"
                )));
            }
            let p = &scene.persons[m];
            let gaze_matches = p.gaze_target == Some(g.sa_point);
            if !gaze_matches && group_count[m] < 2 {
                return Err(SceneError::Validation(format!(
                    "groups[{gi}].members: person {m} does not gaze at sa_point"
                )));
            }
        }
    }
    let g = &scene.grid;
    if g.shape[0] == 0 || g.shape[1] == 0 || g.shape[2] == 0 {
        return Err(SceneError::Validation("grid.shape: must be positive".into()));
    }
    if g.data.len() != g.shape[0] * g.shape[1] * g.shape[2] {
        return Err(SceneError::Validation(format!(
            "grid.data: expected {} values, found {}",
            g.shape[0] * g.shape[1] * g.shape[2],
            g.data.len()
        )));
    }
    if g.data.iter().any(|v| !v.is_finite()) {
        return Err(SceneError::Validation("grid.data: non-finite value".into()));
    }
    Ok(())
}

pub fn write_dataset(scenes: &[Scene], path: &Path) -> Result<(), SceneError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in scenes {
        writeln!(out, "{}", encode_scene(s)?)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<Scene>, SceneError> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut scenes = Vec::new();
    for line in file.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        scenes.push(decode_scene(&line)?);
    }
    Ok(scenes)
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct DatasetSummary {
    pub scenes: usize,
    pub positive_fraction: f64,
    pub mean_group_size: f64,
}

pub fn summarize(scenes: &[Scene]) -> DatasetSummary {
    let positives = scenes.iter().filter(|s| s.is_positive()).count();
    let mut total_members = 0usize;
    let mut total_groups = 0usize;
    for s in scenes {
        for g in &s.groups {
            total_members += g.members.len();
            total_groups += 1;
        }
    }
    DatasetSummary {
        scenes: scenes.len(),
        positive_fraction: positives as f64 / scenes.len().max(1) as f64,
        mean_group_size: if total_groups == 0 {
            0.0
        } else {
            total_members as f64 / total_groups as f64
        },
    }
}
