//! Oracle segmenter and region volume counting.
//!
//! The segmenter denoises with [`FILTER_PASSES`] rounds of a 3×3×3 mean filter
//! restricted to neighbours whose intensity lies within
//! [`SIMILARITY_TOLERANCE`] of the centre voxel, then assigns each voxel to the
//! nearest intensity prototype. Prototypes are at least 0.07 apart, so
//! neighbours of a different label never enter the average of a noiseless
//! image and the rendered labeling is recovered exactly.
//!
//! Ventricle voxels reachable from the background through other ventricle
//! voxels are partial-volume voxels of the brain surface, whose intensity
//! falls between background and tissue. They are reassigned to the nearer of
//! those two. Ventricles never touch the background in a phantom, so this
//! leaves exact recovery intact.

use super::{LabelMap, Volume3D, PROTOTYPES};
use std::collections::VecDeque;

use crate::region::{RegionId, RegionMap, BACKGROUND, NUM_LABELS, TISSUE};

/// Must stay below the smallest prototype gap (0.07).
pub const SIMILARITY_TOLERANCE: f32 = 0.06;
pub const FILTER_PASSES: usize = 2;

/// Voxel count per region.
pub type RawVolumes = RegionMap<u64>;

/// Index of the nearest prototype; ties go to the lower label code.
pub fn nearest_prototype(v: f32) -> u8 {
    let mut best = 0u8;
    let mut best_d = f32::INFINITY;
    for (label, &p) in PROTOTYPES.iter().enumerate() {
        let d = (v - p).abs();
        if d < best_d {
            best_d = d;
            best = label as u8;
        }
    }
    best
}

/// Edge-preserving 3×3×3 mean filter.
pub fn similarity_filter(dims: [usize; 3], data: &[f32]) -> Vec<f32> {
    let [dx, dy, dz] = dims;
    let mut out = vec![0.0f32; data.len()];
    for x in 0..dx {
        let xs = x.saturating_sub(1)..(x + 2).min(dx);
        for y in 0..dy {
            let ys = y.saturating_sub(1)..(y + 2).min(dy);
            for z in 0..dz {
                let zs = z.saturating_sub(1)..(z + 2).min(dz);
                let c = data[(x * dy + y) * dz + z];
                let mut sum = 0.0f32;
                let mut n = 0u32;
                for i in xs.clone() {
                    for j in ys.clone() {
                        let row = (i * dy + j) * dz;
                        for &v in &data[row + zs.start..row + zs.end] {
                            if (v - c).abs() <= SIMILARITY_TOLERANCE {
                                sum += v;
                                n += 1;
                            }
                        }
                    }
                }
                // n >= 1: the centre always qualifies.
                out[(x * dy + y) * dz + z] = sum / n as f32;
            }
        }
    }
    out
}

/// Recovers a label map from an image rendered with the prototype intensity model.
pub fn oracle_segment(vol: &Volume3D) -> LabelMap {
    let mut filtered = vol.data().to_vec();
    for _ in 0..FILTER_PASSES {
        filtered = similarity_filter(vol.dims(), &filtered);
    }
    let mut labels: Vec<u8> = filtered.iter().map(|&v| nearest_prototype(v)).collect();
    reassign_surface_ventricle(vol.dims(), &filtered, &mut labels);
    LabelMap::from_vec(vol.dims(), labels).expect("dims preserved")
}

/// Flood from the background through ventricle-labeled voxels, relabeling
/// each as background or tissue by intensity. Only voxels that become
/// background keep the flood going.
fn reassign_surface_ventricle(dims: [usize; 3], intensity: &[f32], labels: &mut [u8]) {
    let ven = RegionId::Ven.label();
    let [dx, dy, dz] = dims;
    let cut = 0.5 * (PROTOTYPES[BACKGROUND as usize] + PROTOTYPES[TISSUE as usize]);
    let mut queue: VecDeque<usize> = (0..labels.len()).filter(|&i| labels[i] == BACKGROUND).collect();
    while let Some(i) = queue.pop_front() {
        let (x, y, z) = (i / (dy * dz), (i / dz) % dy, i % dz);
        let mut visit = |j: usize| {
            if labels[j] == ven {
                if intensity[j] < cut {
                    labels[j] = BACKGROUND;
                    queue.push_back(j);
                } else {
                    labels[j] = TISSUE;
                }
            }
        };
        if x > 0 {
            visit(i - dy * dz);
        }
        if x + 1 < dx {
            visit(i + dy * dz);
        }
        if y > 0 {
            visit(i - dz);
        }
        if y + 1 < dy {
            visit(i + dz);
        }
        if z > 0 {
            visit(i - 1);
        }
        if z + 1 < dz {
            visit(i + 1);
        }
    }
}

/// Exact voxel count per region label.
pub fn region_volumes(labels: &LabelMap) -> RawVolumes {
    let mut hist = [0u64; NUM_LABELS];
    for &l in labels.data() {
        hist[l as usize] += 1;
    }
    RegionMap::from_fn(|r| hist[r.label() as usize])
}

/// Dice overlap of one label between two maps; 1.0 when absent from both.
pub fn dice(a: &LabelMap, b: &LabelMap, label: u8) -> f64 {
    assert_eq!(a.dims(), b.dims(), "dice on mismatched label maps");
    let (mut inter, mut na, mut nb) = (0u64, 0u64, 0u64);
    for (&la, &lb) in a.data().iter().zip(b.data()) {
        let (ia, ib) = (la == label, lb == label);
        na += ia as u64;
        nb += ib as u64;
        inter += (ia && ib) as u64;
    }
    if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    }
}

/// Dice for every region.
pub fn region_dice(a: &LabelMap, b: &LabelMap) -> RegionMap<f64> {
    RegionMap::from_fn(|r: RegionId| dice(a, b, r.label()))
}
