//! Procedural object set: physical parameters, point-cloud features,
//! joint-to-rotation coupling and optional jam regions.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::EnvError;
use crate::policy::dims::{NUM_CATEGORIES, NUM_JOINTS, PC_FEATURE_DIM};
use crate::seed;

/// Objects with id below this are the training split; the rest are held out.
pub const TRAIN_COUNT: usize = 100;

const CATEGORY_NAMES: [&str; NUM_CATEGORIES] = ["compact", "footwear", "animal", "sculpture", "airplane", "train"];

pub fn category_name(c: usize) -> &'static str {
    CATEGORY_NAMES.get(c).copied().unwrap_or("unknown")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CategoryFlags {
    pub jam: bool,
}

impl CategoryFlags {
    pub fn of(category: usize) -> Self {
        Self { jam: matches!(category, 4 | 5) }
    }
}

/// Axis-aligned joint-space box; rotation locks while `q` is inside it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JamRegion {
    pub lo: [f64; NUM_JOINTS],
    pub hi: [f64; NUM_JOINTS],
}

impl JamRegion {
    pub fn contains(&self, q: &[f64; NUM_JOINTS]) -> bool {
        q.iter().zip(&self.lo).zip(&self.hi).all(|((v, lo), hi)| lo <= v && v <= hi)
    }

    fn half_space(joint: usize, threshold: f64, above: bool) -> Self {
        let mut lo = [-1.0; NUM_JOINTS];
        let mut hi = [1.0; NUM_JOINTS];
        if above {
            lo[joint] = threshold;
        } else {
            hi[joint] = threshold;
        }
        Self { lo, hi }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub id: usize,
    pub category: usize,
    pub mass: f64,
    pub com: [f64; 3],
    pub friction: f64,
    pub scale: f64,
    pub pc_feature: Vec<f64>,
    /// Row-major 3×11: angular velocity per unit joint velocity (before `f/m`).
    pub coupling: [[f64; NUM_JOINTS]; 3],
    pub q_grasp: [f64; NUM_JOINTS],
    pub jam_region: Option<JamRegion>,
}

impl ObjectSpec {
    /// `f/m`, the gain from coupled joint velocity to object angular velocity.
    pub fn gain(&self) -> f64 {
        self.friction / self.mass
    }
}

/// Joint pairs driving the x, y and z axes, with the sign of the second joint.
/// Category 0 is identity-like: one joint per axis.
const AXIS_JOINTS: [[(usize, usize, f64); 3]; NUM_CATEGORIES] = [
    [(0, 0, 0.0), (1, 1, 0.0), (2, 2, 0.0)],
    [(3, 4, 1.0), (5, 6, -1.0), (7, 8, 1.0)],
    [(6, 9, -1.0), (2, 10, 1.0), (0, 4, 1.0)],
    [(1, 8, 1.0), (3, 7, 1.0), (5, 10, -1.0)],
    [(0, 5, 1.0), (2, 9, -1.0), (4, 7, 1.0)],
    [(1, 6, -1.0), (4, 8, 1.0), (3, 10, 1.0)],
];

fn base_coupling(category: usize) -> [[f64; NUM_JOINTS]; 3] {
    let mut b = [[0.0; NUM_JOINTS]; 3];
    for (row, &(j1, j2, s2)) in b.iter_mut().zip(&AXIS_JOINTS[category]) {
        if j1 == j2 {
            row[j1] = 1.0;
        } else {
            row[j1] = std::f64::consts::FRAC_1_SQRT_2;
            row[j2] = s2 * std::f64::consts::FRAC_1_SQRT_2;
        }
    }
    b
}

/// Jam boxes sit on the first joint of an axis pair, so the second joint of the
/// pair can still drive that axis.
fn jam_region(category: usize) -> Option<JamRegion> {
    match category {
        4 => Some(JamRegion::half_space(0, 0.3, true)),
        5 => Some(JamRegion::half_space(1, -0.3, false)),
        _ => None,
    }
}

/// Two point-cloud sub-prototypes per category, so each category has internal
/// cluster structure.
fn prototype(seed_value: u64, category: usize, sub: usize) -> Vec<f64> {
    let mut rng = seed::rng(seed_value, &[seed::tag("pc-prototype"), category as u64]);
    let shared: Vec<f64> = (0..PC_FEATURE_DIM).map(|_| rng.gen_range(-0.4..0.4)).collect();
    let mut sub_rng = seed::rng(seed_value, &[seed::tag("pc-sub"), category as u64, sub as u64]);
    shared.into_iter().map(|v| v + sub_rng.gen_range(-0.1..0.1)).collect()
}

fn make_object(seed_value: u64, id: usize, category: usize) -> ObjectSpec {
    let mut rng = seed::rng(seed_value, &[seed::tag("object"), id as u64]);
    let sub = rng.gen_range(0..2);
    let noise = Normal::new(0.0, 0.02).expect("valid std");
    let pc_feature: Vec<f64> = prototype(seed_value, category, sub)
        .into_iter()
        .map(|v| v + noise.sample(&mut rng))
        .collect();

    let mut coupling = base_coupling(category);
    for (k, row) in coupling.iter_mut().enumerate() {
        for (j, c) in row.iter_mut().enumerate() {
            *c += 0.1 * pc_feature[k * NUM_JOINTS + j];
        }
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }

    let mut grasp_rng = seed::rng(seed_value, &[seed::tag("grasp"), category as u64]);
    let mut q_grasp = [0.0; NUM_JOINTS];
    for q in &mut q_grasp {
        *q = grasp_rng.gen_range(-0.15..0.15) + rng.gen_range(-0.03..0.03);
    }

    ObjectSpec {
        id,
        category,
        mass: rng.gen_range(0.22..0.34),
        com: [rng.gen_range(-0.01..0.01), rng.gen_range(-0.01..0.01), rng.gen_range(-0.01..0.01)],
        friction: rng.gen_range(0.8..1.2),
        scale: rng.gen_range(0.7..1.2),
        pc_feature,
        coupling,
        q_grasp,
        jam_region: jam_region(category),
    }
}

/// `count` objects with categories assigned round-robin over all six.
pub fn generate_objects(count: usize, seed_value: u64) -> Result<Vec<ObjectSpec>, EnvError> {
    let all: Vec<usize> = (0..NUM_CATEGORIES).collect();
    generate_objects_with(count, seed_value, &all)
}

/// `count` objects with categories assigned round-robin over `categories`.
pub fn generate_objects_with(count: usize, seed_value: u64, categories: &[usize]) -> Result<Vec<ObjectSpec>, EnvError> {
    if count == 0 || categories.is_empty() {
        return Err(EnvError::EmptyObjectSet);
    }
    if let Some(&c) = categories.iter().find(|&&c| c >= NUM_CATEGORIES) {
        return Err(EnvError::Format { what: "category list", detail: format!("category {c} out of range") });
    }
    Ok((0..count).map(|id| make_object(seed_value, id, categories[id % categories.len()])).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Ood,
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "ood" => Ok(Split::Ood),
            other => Err(format!("unknown split `{other}` (train|ood)")),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Ood => "ood",
        })
    }
}

/// Objects with id `< train_count` are the training split.
pub fn split_objects(objects: &[ObjectSpec], split: Split, train_count: usize) -> Vec<ObjectSpec> {
    objects
        .iter()
        .filter(|o| (o.id < train_count) == (split == Split::Train))
        .cloned()
        .collect()
}

const OBJECT_MAGIC: &[u8; 8] = b"DXMOBJ\0\0";
const OBJECT_VERSION: u32 = 1;
/// id, category, has_jam as u64; then f64 fields.
const RECORD_F64S: usize = 1 + 3 + 1 + 1 + PC_FEATURE_DIM + 3 * NUM_JOINTS + NUM_JOINTS + 2 * NUM_JOINTS;
const RECORD_BYTES: usize = 3 * 8 + RECORD_F64S * 8;

fn encode_object(o: &ObjectSpec, out: &mut Vec<u8>) {
    out.extend((o.id as u64).to_le_bytes());
    out.extend((o.category as u64).to_le_bytes());
    out.extend((o.jam_region.is_some() as u64).to_le_bytes());
    let mut put = |v: f64| out.extend(v.to_le_bytes());
    put(o.mass);
    o.com.iter().for_each(|&v| put(v));
    put(o.friction);
    put(o.scale);
    o.pc_feature.iter().for_each(|&v| put(v));
    o.coupling.iter().flatten().for_each(|&v| put(v));
    o.q_grasp.iter().for_each(|&v| put(v));
    let (lo, hi) = match &o.jam_region {
        Some(j) => (j.lo, j.hi),
        None => ([0.0; NUM_JOINTS], [0.0; NUM_JOINTS]),
    };
    lo.iter().chain(&hi).for_each(|&v| put(v));
}

fn format_err(detail: impl Into<String>) -> EnvError {
    EnvError::Format { what: "object file", detail: detail.into() }
}

fn decode_object(rec: &[u8]) -> Result<ObjectSpec, EnvError> {
    let u = |i: usize| u64::from_le_bytes(rec[i * 8..i * 8 + 8].try_into().unwrap());
    let (id, category, has_jam) = (u(0) as usize, u(1) as usize, u(2));
    if category >= NUM_CATEGORIES || has_jam > 1 {
        return Err(format_err(format!("bad record header for object {id}")));
    }
    let mut vals = rec[24..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut take = |n: usize| -> Vec<f64> { vals.by_ref().take(n).collect() };
    let mass = take(1)[0];
    let com: [f64; 3] = take(3).try_into().unwrap();
    let friction = take(1)[0];
    let scale = take(1)[0];
    let pc_feature = take(PC_FEATURE_DIM);
    let c = take(3 * NUM_JOINTS);
    let mut coupling = [[0.0; NUM_JOINTS]; 3];
    for (row, chunk) in coupling.iter_mut().zip(c.chunks_exact(NUM_JOINTS)) {
        row.copy_from_slice(chunk);
    }
    let q_grasp: [f64; NUM_JOINTS] = take(NUM_JOINTS).try_into().unwrap();
    let lo: [f64; NUM_JOINTS] = take(NUM_JOINTS).try_into().unwrap();
    let hi: [f64; NUM_JOINTS] = take(NUM_JOINTS).try_into().unwrap();
    Ok(ObjectSpec {
        id,
        category,
        mass,
        com,
        friction,
        scale,
        pc_feature,
        coupling,
        q_grasp,
        jam_region: (has_jam == 1).then_some(JamRegion { lo, hi }),
    })
}

/// Header (magic, version, count, record size) followed by fixed-width records.
pub fn write_object_file(path: &Path, objects: &[ObjectSpec]) -> Result<(), EnvError> {
    let mut buf = Vec::with_capacity(24 + objects.len() * RECORD_BYTES);
    buf.extend_from_slice(OBJECT_MAGIC);
    buf.extend(OBJECT_VERSION.to_le_bytes());
    buf.extend((objects.len() as u64).to_le_bytes());
    buf.extend((RECORD_BYTES as u32).to_le_bytes());
    for o in objects {
        encode_object(o, &mut buf);
    }
    crate::io::write_atomic(path, &buf)?;
    Ok(())
}

pub fn read_object_file(path: &Path) -> Result<Vec<ObjectSpec>, EnvError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 24 || &bytes[..8] != OBJECT_MAGIC {
        return Err(format_err("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != OBJECT_VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let rec = u32::from_le_bytes(bytes[20..24].try_into().unwrap()) as usize;
    if rec != RECORD_BYTES || bytes.len() != 24 + count * rec {
        return Err(format_err(format!("expected {count} records of {RECORD_BYTES} bytes")));
    }
    bytes[24..].chunks_exact(rec).map(decode_object).collect()
}
