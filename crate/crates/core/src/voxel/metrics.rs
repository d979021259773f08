use super::{BinaryMask, GridMeta};
use crate::error::{Error, Result};

/// Dice overlap `2|A∩B| / (|A|+|B|)`.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.meta.ensure_same(&b.meta)?;
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        na += x as usize;
        nb += y as usize;
        both += (x && y) as usize;
    }
    if na + nb == 0 {
        return Err(Error::EmptyMask("dice of two empty masks".into()));
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Exact symmetric Hausdorff distance between voxel-centre sets, mm.
pub fn hausdorff_mm(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.meta.ensure_same(&b.meta)?;
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyMask(
            "hausdorff distance needs two non-empty masks".into(),
        ));
    }
    Ok(directed_sq(a, b).max(directed_sq(b, a)).sqrt())
}

/// `max_{a∈A} min_{b∈B} |a-b|^2`, only voxels of A outside B can contribute.
fn directed_sq(a: &BinaryMask, b: &BinaryMask) -> f64 {
    if a.data.iter().zip(&b.data).all(|(&x, &y)| !x || y) {
        return 0.0;
    }
    let dt = squared_distance_transform(b);
    a.data
        .iter()
        .zip(&dt)
        .filter(|(&x, _)| x)
        .fold(0.0, |m, (_, &d)| m.max(d))
}

/// Squared Euclidean distance (mm²) from every voxel centre to the nearest
/// occupied voxel centre, by separable lower envelopes of parabolas.
///
/// Voxels are at infinite distance when the mask is empty.
pub fn squared_distance_transform(mask: &BinaryMask) -> Vec<f64> {
    let meta: &GridMeta = &mask.meta;
    let mut d: Vec<f64> = mask
        .data
        .iter()
        .map(|&b| if b { 0.0 } else { f64::INFINITY })
        .collect();
    let strides = [1, meta.shape[0], meta.shape[0] * meta.shape[1]];
    let longest = *meta.shape.iter().max().unwrap_or(&1);
    let mut line = vec![0.0; longest];
    let mut out = vec![0.0; longest];
    let mut scratch = Envelope::with_capacity(longest);

    for axis in 0..3 {
        let n = meta.shape[axis];
        let stride = strides[axis];
        let s2 = meta.spacing[axis] * meta.spacing[axis];
        let (o1, o2) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for j in 0..meta.shape[o2] {
            for i in 0..meta.shape[o1] {
                let base = i * strides[o1] + j * strides[o2];
                for (k, v) in line[..n].iter_mut().enumerate() {
                    *v = d[base + k * stride];
                }
                scratch.transform(&line[..n], s2, &mut out[..n]);
                for (k, v) in out[..n].iter().enumerate() {
                    d[base + k * stride] = *v;
                }
            }
        }
    }
    d
}

struct Envelope {
    sites: Vec<usize>,
    bounds: Vec<f64>,
}

impl Envelope {
    fn with_capacity(n: usize) -> Self {
        Self {
            sites: Vec::with_capacity(n),
            bounds: Vec::with_capacity(n + 1),
        }
    }

    /// `out[q] = min_p s2·(q-p)^2 + f[p]` over finite `f[p]`.
    fn transform(&mut self, f: &[f64], s2: f64, out: &mut [f64]) {
        self.sites.clear();
        self.bounds.clear();
        for (q, &fq) in f.iter().enumerate() {
            if !fq.is_finite() {
                continue;
            }
            let qf = q as f64;
            loop {
                let Some(&p) = self.sites.last() else {
                    self.sites.push(q);
                    self.bounds.push(f64::NEG_INFINITY);
                    break;
                };
                let pf = p as f64;
                let s = ((fq + s2 * qf * qf) - (f[p] + s2 * pf * pf)) / (2.0 * s2 * (qf - pf));
                if s <= *self.bounds.last().unwrap() {
                    self.sites.pop();
                    self.bounds.pop();
                } else {
                    self.sites.push(q);
                    self.bounds.push(s);
                    break;
                }
            }
        }
        if self.sites.is_empty() {
            out.fill(f64::INFINITY);
            return;
        }
        let mut k = 0;
        for (q, o) in out.iter_mut().enumerate() {
            let qf = q as f64;
            while k + 1 < self.sites.len() && self.bounds[k + 1] < qf {
                k += 1;
            }
            let p = self.sites[k];
            let dp = qf - p as f64;
            *o = s2 * dp * dp + f[p];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel::GridMeta;

    #[test]
    fn dice_cases() {
        let meta = GridMeta::cube(10, 1.0).unwrap();
        let a = BinaryMask::from_fn(meta, |p| p[0] < 5);
        let b = BinaryMask::from_fn(meta, |p| p[0] >= 5);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
        let e = BinaryMask::empty(meta);
        assert!(matches!(dice(&e, &e), Err(Error::EmptyMask(_))));
        assert_eq!(dice(&a, &e).unwrap(), 0.0);
    }

    #[test]
    fn dice_of_constructed_pair_is_point_eight() {
        // |A| = |B| = 100, |A∩B| = 80
        let meta = GridMeta::new([120, 1, 1], [1.0; 3], [0.0; 3]).unwrap();
        let a = BinaryMask::from_fn(meta, |p| p[0] < 100);
        let b = BinaryMask::from_fn(meta, |p| p[0] >= 20);
        assert_eq!(dice(&a, &b).unwrap(), 0.8);
    }

    #[test]
    fn hausdorff_two_points() {
        let meta = GridMeta::cube(8, 1.0).unwrap();
        let a = BinaryMask::from_fn(meta, |p| p == [1, 2, 3]);
        let b = BinaryMask::from_fn(meta, |p| p == [4, 2, 3]);
        assert_eq!(hausdorff_mm(&a, &b).unwrap(), 3.0);
        assert_eq!(hausdorff_mm(&a, &a).unwrap(), 0.0);
        assert!(hausdorff_mm(&a, &BinaryMask::empty(meta)).is_err());
    }

    #[test]
    fn hausdorff_respects_anisotropic_spacing() {
        let meta = GridMeta::new([6, 6, 6], [0.5, 2.0, 1.0], [0.0; 3]).unwrap();
        let a = BinaryMask::from_fn(meta, |p| p == [0, 0, 0]);
        let b = BinaryMask::from_fn(meta, |p| p == [4, 1, 2]);
        let want = (2.0f64 * 2.0 + 2.0 * 2.0 + 2.0 * 2.0).sqrt();
        assert!((hausdorff_mm(&a, &b).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn distance_transform_of_empty_mask_is_infinite() {
        let meta = GridMeta::cube(3, 1.0).unwrap();
        let dt = squared_distance_transform(&BinaryMask::empty(meta));
        assert!(dt.iter().all(|d| d.is_infinite()));
    }
}
