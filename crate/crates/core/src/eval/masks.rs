use std::collections::BTreeMap;

use crate::data::slice::percentile_sorted;
use crate::data::{LabelVolume, Modality, Volume, VolumeMeta};
use crate::error::{Error, Result};

fn same_dims(a: &LabelVolume, b: &LabelVolume) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("volume dims {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Foreground Dice `2|A n B| / (|A| + |B|)` on `label > 0`; 1 when both
/// foregrounds are empty.
pub fn dice3d(a: &LabelVolume, b: &LabelVolume) -> Result<f64> {
    same_dims(a, b)?;
    let (mut na, mut nb, mut both) = (0u64, 0u64, 0u64);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        na += u64::from(x > 0);
        nb += u64::from(y > 0);
        both += u64::from(x > 0 && y > 0);
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Foreground voxels with a 6-connected background or out-of-bounds neighbour.
pub fn boundary_voxels(v: &LabelVolume) -> Vec<[i64; 3]> {
    let [w, h, d] = v.dims();
    let fg = |x: i64, y: i64, z: i64| {
        x >= 0
            && y >= 0
            && z >= 0
            && (x as usize) < w
            && (y as usize) < h
            && (z as usize) < d
            && v.get(x as usize, y as usize, z as usize, 0) > 0
    };
    let mut out = Vec::new();
    for z in 0..d as i64 {
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                if !fg(x, y, z) {
                    continue;
                }
                let edge = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
                    .iter()
                    .any(|&(dx, dy, dz)| !fg(x + dx, y + dy, z + dz));
                if edge {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

/// Squared anisotropic distance between voxel centres.
#[inline]
pub fn dist2(a: [i64; 3], b: [i64; 3], spacing: [f64; 3]) -> f64 {
    let dx = (a[0] - b[0]) as f64 * spacing[0];
    let dy = (a[1] - b[1]) as f64 * spacing[1];
    let dz = (a[2] - b[2]) as f64 * spacing[2];
    dx * dx + dy * dy + dz * dz
}

/// Static 3-d tree over voxel coordinates for exact nearest-neighbour queries.
pub struct KdTree {
    points: Vec<[i64; 3]>,
    spacing: [f64; 3],
}

impl KdTree {
    pub fn new(mut points: Vec<[i64; 3]>, spacing: [f64; 3]) -> Self {
        fn build(p: &mut [[i64; 3]], depth: usize) {
            if p.len() <= 1 {
                return;
            }
            let axis = depth % 3;
            let mid = p.len() / 2;
            p.select_nth_unstable_by_key(mid, |q| q[axis]);
            let (lo, hi) = p.split_at_mut(mid);
            build(lo, depth + 1);
            build(&mut hi[1..], depth + 1);
        }
        build(&mut points, 0);
        Self { points, spacing }
    }

    /// Smallest squared distance from `q` to any stored point.
    pub fn nearest_dist2(&self, q: [i64; 3]) -> f64 {
        let mut best = f64::INFINITY;
        self.search(&self.points, 0, q, &mut best);
        best
    }

    fn search(&self, p: &[[i64; 3]], depth: usize, q: [i64; 3], best: &mut f64) {
        if p.is_empty() {
            return;
        }
        let axis = depth % 3;
        let mid = p.len() / 2;
        let d = dist2(p[mid], q, self.spacing);
        if d < *best {
            *best = d;
        }
        let diff = q[axis] - p[mid][axis];
        let (near, far) = if diff < 0 {
            (&p[..mid], &p[mid + 1..])
        } else {
            (&p[mid + 1..], &p[..mid])
        };
        self.search(near, depth + 1, q, best);
        // A partial sum of non-negative squares never exceeds the full sum,
        // so this bound cannot discard the true minimum.
        let plane = diff as f64 * self.spacing[axis];
        if plane * plane < *best {
            self.search(far, depth + 1, q, best);
        }
    }
}

/// Nearest-surface distances from every point of `from` to the set `to`.
pub fn directed_distances(from: &[[i64; 3]], to: &[[i64; 3]], spacing: [f64; 3]) -> Vec<f64> {
    let tree = KdTree::new(to.to_vec(), spacing);
    from.iter().map(|&p| tree.nearest_dist2(p).sqrt()).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hd95Mode {
    /// 95th percentile of both directed distance sets pooled together.
    #[default]
    Pooled,
    /// Larger of the two directed 95th percentiles.
    DirectedMax,
}

fn p95(mut d: Vec<f64>) -> f64 {
    d.sort_by(f64::total_cmp);
    percentile_sorted(&d, 95.0)
}

/// 95th-percentile surface distance in micrometres.
pub fn hd95(a: &LabelVolume, b: &LabelVolume, spacing_um: [f64; 3], mode: Hd95Mode) -> Result<f64> {
    same_dims(a, b)?;
    if spacing_um.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::Parameter(format!("spacing {spacing_um:?} must be positive")));
    }
    let ba = boundary_voxels(a);
    let bb = boundary_voxels(b);
    if ba.is_empty() || bb.is_empty() {
        return Err(Error::UndefinedMetric(
            "HD95 needs a non-empty foreground in both volumes".into(),
        ));
    }
    let ab = directed_distances(&ba, &bb, spacing_um);
    let ba_dist = directed_distances(&bb, &ba, spacing_um);
    Ok(match mode {
        Hd95Mode::Pooled => p95(ab.into_iter().chain(ba_dist).collect()),
        Hd95Mode::DirectedMax => p95(ab).max(p95(ba_dist)),
    })
}

/// Voxel counts per non-zero label.
pub fn instance_sizes(v: &LabelVolume) -> BTreeMap<u32, u64> {
    let mut sizes = BTreeMap::new();
    for &l in v.data().iter().filter(|&&l| l > 0) {
        *sizes.entry(l).or_insert(0) += 1;
    }
    sizes
}

/// Mean physical volume of the distinct non-zero labels.
pub fn mean_instance_volume(v: &LabelVolume) -> Result<f64> {
    let sizes = instance_sizes(v);
    if sizes.is_empty() {
        return Err(Error::UndefinedMetric("no labelled instances".into()));
    }
    let voxel = v.meta.voxel_volume_um3();
    let total: f64 = sizes.values().map(|&n| n as f64 * voxel).sum();
    Ok(total / sizes.len() as f64)
}

/// One 2-D instance mask (0 = background).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSlice {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
}

/// Links 2-D instances across slices by greedy IoU matching.
///
/// Every instance of slice `z + 1` joins the slice-`z` instance with the
/// largest IoU when that IoU reaches `iou_threshold` (ties go to the lower 3-D
/// id); otherwise it starts a new 3-D instance.
pub fn stack_masks_2d_to_3d(slices: &[LabelSlice], spacing_um: [f64; 3], iou_threshold: f64) -> Result<LabelVolume> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::Parameter(format!("IoU threshold {iou_threshold} outside (0, 1]")));
    }
    let first = slices.first().ok_or_else(|| Error::Shape("no slices to stack".into()))?;
    let (w, h) = (first.width, first.height);
    for (z, s) in slices.iter().enumerate() {
        if s.width != w || s.height != h || s.labels.len() != w * h {
            return Err(Error::Shape(format!(
                "slice {z} is {}x{} with {} labels, expected {w}x{h}",
                s.width,
                s.height,
                s.labels.len()
            )));
        }
    }
    let meta = VolumeMeta::new([w, h, slices.len()], spacing_um, Modality::Label)?;
    let mut out: LabelVolume = Volume::filled(meta, 1, 0);
    let mut next_id = 1u32;
    let mut prev: Option<(&LabelSlice, BTreeMap<u32, u64>, BTreeMap<u32, u32>)> = None;
    for (z, s) in slices.iter().enumerate() {
        let areas = label_areas(s);
        // (current label, previous label) -> shared pixel count
        let mut overlap: BTreeMap<(u32, u32), u64> = BTreeMap::new();
        if let Some((ps, _, _)) = &prev {
            for (&l, &pl) in s.labels.iter().zip(&ps.labels) {
                if l > 0 && pl > 0 {
                    *overlap.entry((l, pl)).or_insert(0) += 1;
                }
            }
        }
        let mut map = BTreeMap::new();
        for (&label, &area) in &areas {
            let mut chosen: Option<(f64, u32)> = None;
            if let Some((_, prev_areas, pmap)) = &prev {
                for (&(_, pl), &inter) in overlap.range((label, 0)..=(label, u32::MAX)) {
                    let iou = inter as f64 / (area + prev_areas[&pl] - inter) as f64;
                    let id = pmap[&pl];
                    let better = match chosen {
                        None => true,
                        Some((bi, bid)) => iou > bi || (iou == bi && id < bid),
                    };
                    if better {
                        chosen = Some((iou, id));
                    }
                }
            }
            let id = match chosen {
                Some((iou, id)) if iou >= iou_threshold => id,
                _ => {
                    next_id += 1;
                    next_id - 1
                }
            };
            map.insert(label, id);
        }
        let dst = out.slice_mut(z);
        for (o, &l) in dst.iter_mut().zip(&s.labels) {
            if l > 0 {
                *o = map[&l];
            }
        }
        prev = Some((s, areas, map));
    }
    Ok(out)
}

fn label_areas(s: &LabelSlice) -> BTreeMap<u32, u64> {
    let mut m = BTreeMap::new();
    for &l in s.labels.iter().filter(|&&l| l > 0) {
        *m.entry(l).or_insert(0) += 1;
    }
    m
}

/// 4-connected components of a binary mask, labelled 1.. in raster order.
pub fn connected_components(mask: &[bool], width: usize, height: usize) -> Vec<u32> {
    let mut labels = vec![0u32; mask.len()];
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (x, y) = (p % width, p / width);
            let mut visit = |q: usize| {
                if mask[q] && labels[q] == 0 {
                    labels[q] = next;
                    stack.push(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < width {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - width);
            }
            if y + 1 < height {
                visit(p + width);
            }
        }
    }
    labels
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(dims: [usize; 3], fg: &[[usize; 3]]) -> LabelVolume {
        let meta = VolumeMeta::new(dims, [1.0; 3], Modality::Label).unwrap();
        let mut v = Volume::filled(meta, 1, 0u32);
        for &[x, y, z] in fg {
            v.set(x, y, z, 0, 1);
        }
        v
    }

    fn cube(dims: [usize; 3], o: [usize; 3], s: usize) -> LabelVolume {
        let mut pts = Vec::new();
        for z in 0..s {
            for y in 0..s {
                for x in 0..s {
                    pts.push([o[0] + x, o[1] + y, o[2] + z]);
                }
            }
        }
        vol(dims, &pts)
    }

    #[test]
    fn dice_cases() {
        let a = cube([5, 5, 5], [0, 0, 0], 2);
        let b = cube([5, 5, 5], [1, 0, 0], 2);
        assert_eq!(dice3d(&a, &a).unwrap(), 1.0);
        assert_eq!(dice3d(&a, &b).unwrap(), 0.5);
        assert_eq!(dice3d(&a, &cube([5, 5, 5], [3, 3, 3], 2)).unwrap(), 0.0);
        let empty = vol([5, 5, 5], &[]);
        assert_eq!(dice3d(&empty, &empty).unwrap(), 1.0);
        assert_eq!(dice3d(&a, &empty).unwrap(), 0.0);
        assert!(dice3d(&a, &vol([4, 5, 5], &[])).is_err());
    }

    #[test]
    fn hd95_cases() {
        let a = vol([4, 1, 1], &[[0, 0, 0]]);
        let b = vol([4, 1, 1], &[[3, 0, 0]]);
        assert_eq!(hd95(&a, &b, [1.0; 3], Hd95Mode::Pooled).unwrap(), 3.0);
        assert_eq!(hd95(&a, &b, [0.5, 1.0, 1.0], Hd95Mode::DirectedMax).unwrap(), 1.5);
        let c = cube([6, 6, 6], [1, 1, 1], 3);
        assert_eq!(hd95(&c, &c, [1.0; 3], Hd95Mode::Pooled).unwrap(), 0.0);
        let empty = vol([4, 1, 1], &[]);
        assert!(matches!(hd95(&a, &empty, [1.0; 3], Hd95Mode::Pooled), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn boundary_excludes_interior() {
        let c = cube([5, 5, 5], [1, 1, 1], 3);
        let b = boundary_voxels(&c);
        assert_eq!(b.len(), 26);
        assert!(!b.contains(&[2, 2, 2]));
    }

    #[test]
    fn instance_volumes() {
        let meta = VolumeMeta::new([10, 10, 1], [0.5, 0.5, 1.0], Modality::Label).unwrap();
        let v = Volume::new(meta, 1, vec![4; 100]).unwrap();
        assert_eq!(mean_instance_volume(&v).unwrap(), 25.0);
        let mut data = vec![0u32; 100];
        data[..10].fill(1);
        data[10..40].fill(9);
        let v = Volume::new(meta, 1, data).unwrap();
        assert_eq!(mean_instance_volume(&v).unwrap(), 5.0);
        let empty = Volume::new(meta, 1, vec![0; 100]).unwrap();
        assert!(matches!(mean_instance_volume(&empty), Err(Error::UndefinedMetric(_))));
    }

    fn slice(w: usize, h: usize, labels: Vec<u32>) -> LabelSlice {
        LabelSlice {
            width: w,
            height: h,
            labels,
        }
    }

    #[test]
    fn stacking_cases() {
        let a = slice(4, 1, vec![1, 1, 0, 0]);
        let single = stack_masks_2d_to_3d(std::slice::from_ref(&a), [1.0; 3], 0.5).unwrap();
        assert_eq!(single.data(), &[1, 1, 0, 0]);
        let two = stack_masks_2d_to_3d(&[a.clone(), slice(4, 1, vec![7, 7, 0, 0])], [1.0; 3], 0.5).unwrap();
        assert_eq!(instance_sizes(&two).len(), 1);
        let apart = stack_masks_2d_to_3d(&[a, slice(4, 1, vec![0, 0, 3, 3])], [1.0; 3], 0.5).unwrap();
        assert_eq!(instance_sizes(&apart).len(), 2);
        // IoU 1/3 links at 0.3 but not at 0.5.
        let s = [slice(4, 1, vec![1, 1, 0, 0]), slice(4, 1, vec![0, 2, 2, 0])];
        assert_eq!(instance_sizes(&stack_masks_2d_to_3d(&s, [1.0; 3], 0.3).unwrap()).len(), 1);
        assert_eq!(instance_sizes(&stack_masks_2d_to_3d(&s, [1.0; 3], 0.5).unwrap()).len(), 2);
        assert!(stack_masks_2d_to_3d(&s, [1.0; 3], 0.0).is_err());
    }

    #[test]
    fn stacking_tie_goes_to_lower_id() {
        let s = [slice(4, 1, vec![1, 1, 2, 2]), slice(4, 1, vec![0, 5, 5, 0])];
        let v = stack_masks_2d_to_3d(&s, [1.0; 3], 0.3).unwrap();
        assert_eq!(v.slice(1), &[0, 1, 1, 0]);
    }

    #[test]
    fn components() {
        let m = [true, true, false, true, false, false, false, true, true];
        assert_eq!(connected_components(&m, 3, 3), vec![1, 1, 0, 1, 0, 0, 0, 2, 2]);
    }
}
