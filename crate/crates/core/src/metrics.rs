//! Overlap and surface-distance metrics on binary volumes.

use serde::Serialize;

use crate::error::{Result, TensorError};

fn check_len(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(TensorError::ShapeMismatch {
            op,
            expected: vec![b],
            got: vec![a],
        });
    }
    Ok(())
}

/// Dice coefficient in percent. Both empty is 100, exactly one empty is 0.
pub fn dsc(m: &[bool], g: &[bool]) -> Result<f64> {
    check_len("dsc", m.len(), g.len())?;
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in m.iter().zip(g) {
        a += x as usize;
        b += y as usize;
        both += (x && y) as usize;
    }
    if a + b == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * 2.0 * both as f64 / (a + b) as f64)
}

/// Foreground voxels with at least one background (or out-of-volume) 6-neighbour.
pub fn boundary(mask: &[bool], shape: [usize; 3]) -> Vec<bool> {
    let [d, h, w] = shape;
    let at = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
    let mut out = vec![false; mask.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = at(z, y, x);
                if !mask[i] {
                    continue;
                }
                let edge = z == 0
                    || y == 0
                    || x == 0
                    || z + 1 == d
                    || y + 1 == h
                    || x + 1 == w
                    || !mask[at(z - 1, y, x)]
                    || !mask[at(z + 1, y, x)]
                    || !mask[at(z, y - 1, x)]
                    || !mask[at(z, y + 1, x)]
                    || !mask[at(z, y, x - 1)]
                    || !mask[at(z, y, x + 1)];
                out[i] = edge;
            }
        }
    }
    out
}

/// Lower envelope of parabolas `f(q) + w (p - q)^2` along one line.
fn edt_line(f: &mut [f64], w: f64, v: &mut Vec<usize>, zs: &mut Vec<f64>, out: &mut Vec<f64>) {
    v.clear();
    zs.clear();
    for q in 0..f.len() {
        if !f[q].is_finite() {
            continue;
        }
        let fq = f[q] + w * (q * q) as f64;
        while let Some(&r) = v.last() {
            let fr = f[r] + w * (r * r) as f64;
            let s = (fq - fr) / (2.0 * w * (q - r) as f64);
            if s <= *zs.last().expect("one boundary per vertex") {
                v.pop();
                zs.pop();
            } else {
                zs.push(s);
                break;
            }
        }
        if v.is_empty() {
            zs.push(f64::NEG_INFINITY);
        }
        v.push(q);
    }
    if v.is_empty() {
        return;
    }
    out.clear();
    let mut k = 0;
    for p in 0..f.len() {
        while k + 1 < v.len() && zs[k + 1] < p as f64 {
            k += 1;
        }
        let q = v[k];
        let dp = p as f64 - q as f64;
        out.push(f[q] + w * dp * dp);
    }
    f.copy_from_slice(out);
}

/// Squared Euclidean distance from every voxel to the nearest `feature` voxel.
pub fn squared_distance_field(feature: &[bool], shape: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let [d, h, w] = shape;
    let mut field: Vec<f64> = feature
        .iter()
        .map(|&b| if b { 0.0 } else { f64::INFINITY })
        .collect();
    let (mut v, mut zs, mut out) = (Vec::new(), Vec::new(), Vec::new());
    let strides = [h * w, w, 1];
    for axis in 0..3 {
        let n = shape[axis];
        let stride = strides[axis];
        let weight = spacing[axis] * spacing[axis];
        let mut line = vec![0.0; n];
        for base in 0..d * h * w {
            if (base / stride) % n != 0 {
                continue;
            }
            for (i, l) in line.iter_mut().enumerate() {
                *l = field[base + i * stride];
            }
            edt_line(&mut line, weight, &mut v, &mut zs, &mut out);
            for (i, l) in line.iter().enumerate() {
                field[base + i * stride] = *l;
            }
        }
    }
    field
}

/// Linear-interpolated `q`-quantile of sorted values.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// 95th percentile of pooled symmetric boundary-to-boundary distances.
/// `None` when either mask is empty.
pub fn hd95(m: &[bool], g: &[bool], shape: [usize; 3], spacing: [f64; 3]) -> Result<Option<f64>> {
    check_len("hd95", m.len(), g.len())?;
    check_len("hd95 shape", m.len(), shape.iter().product())?;
    let bm = boundary(m, shape);
    let bg = boundary(g, shape);
    if !bm.contains(&true) || !bg.contains(&true) {
        return Ok(None);
    }
    let to_g = squared_distance_field(&bg, shape, spacing);
    let to_m = squared_distance_field(&bm, shape, spacing);
    let mut dists = Vec::new();
    for i in 0..m.len() {
        if bm[i] {
            dists.push(to_g[i].sqrt());
        }
        if bg[i] {
            dists.push(to_m[i].sqrt());
        }
    }
    dists.sort_by(f64::total_cmp);
    Ok(Some(quantile_sorted(&dists, 0.95)))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub dsc: f64,
    pub hd95: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub classes: Vec<ClassMetrics>,
}

impl MetricReport {
    pub fn mean_dsc(&self) -> f64 {
        self.classes.iter().map(|c| c.dsc).sum::<f64>() / self.classes.len().max(1) as f64
    }

    pub fn mean_hd95(&self) -> Option<f64> {
        let v: Vec<f64> = self.classes.iter().filter_map(|c| c.hd95).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,dsc_percent,hd95\n");
        for c in &self.classes {
            let hd = c
                .hd95
                .map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"));
            s.push_str(&format!("{},{:.6},{}\n", c.class, c.dsc, hd));
        }
        s
    }
}

/// Per-class DSC and HD95 of label volumes (labels `1..=num_classes`).
pub fn evaluate(
    pred: &[u8],
    truth: &[u8],
    shape: [usize; 3],
    num_classes: usize,
    spacing: [f64; 3],
) -> Result<MetricReport> {
    check_len("evaluate", pred.len(), truth.len())?;
    let mut classes = Vec::with_capacity(num_classes);
    for c in 1..=num_classes {
        let m: Vec<bool> = pred.iter().map(|&l| l as usize == c).collect();
        let g: Vec<bool> = truth.iter().map(|&l| l as usize == c).collect();
        classes.push(ClassMetrics {
            class: c,
            dsc: dsc(&m, &g)?,
            hd95: hd95(&m, &g, shape, spacing)?,
        });
    }
    Ok(MetricReport { classes })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dsc_hand_case() {
        let mut m = vec![false; 10];
        let mut g = vec![false; 10];
        m[..4].fill(true);
        g[1..7].fill(true);
        assert_eq!(dsc(&m, &g).unwrap(), 60.0);
        assert_eq!(dsc(&[false; 3], &[false; 3]).unwrap(), 100.0);
    }

    #[test]
    fn single_voxels_three_apart() {
        let shape = [1, 1, 8];
        let mut m = vec![false; 8];
        let mut g = vec![false; 8];
        m[1] = true;
        g[4] = true;
        assert_eq!(hd95(&m, &g, shape, [1.0; 3]).unwrap(), Some(3.0));
    }

    #[test]
    fn empty_mask_is_undefined() {
        let m = vec![false; 8];
        let mut g = vec![false; 8];
        g[0] = true;
        assert_eq!(hd95(&m, &g, [2, 2, 2], [1.0; 3]).unwrap(), None);
    }

    #[test]
    fn distance_field_matches_brute_force_with_spacing() {
        let shape = [5, 4, 6];
        let feature: Vec<bool> = (0..120).map(|i| i % 17 == 3).collect();
        let spacing = [2.0, 0.5, 1.0];
        let field = squared_distance_field(&feature, shape, spacing);
        for (i, &f) in field.iter().enumerate() {
            let (z, y, x) = (i / 24, (i / 6) % 4, i % 6);
            let best = (0..120)
                .filter(|&j| feature[j])
                .map(|j| {
                    let (a, b, c) = (j / 24, (j / 6) % 4, j % 6);
                    let dz = (z as f64 - a as f64) * 2.0;
                    let dy = (y as f64 - b as f64) * 0.5;
                    let dx = x as f64 - c as f64;
                    dz * dz + dy * dy + dx * dx
                })
                .fold(f64::INFINITY, f64::min);
            assert!((f - best).abs() < 1e-12, "voxel {i}: {f} vs {best}");
        }
    }
}
