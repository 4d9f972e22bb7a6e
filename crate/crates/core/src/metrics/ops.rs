//! Lip-sync, dynamics and diversity metrics over decoded mesh sequences.

use ndarray::Array3;

use crate::error::{invalid, Error, Result};
use crate::face::{FaceTemplate, MeshSequence};

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn same_length(pred: &MeshSequence, gt: &MeshSequence) -> Result<()> {
    if pred.vertices.dim() != gt.vertices.dim() {
        return Err(invalid!(
            "prediction {:?} and ground truth {:?} differ in shape",
            pred.vertices.dim(),
            gt.vertices.dim()
        ));
    }
    Ok(())
}

/// Mean over frames of the largest lip-vertex L2 error.
pub fn lve(pred: &MeshSequence, gt: &MeshSequence, lip_idx: &[usize]) -> Result<f64> {
    same_length(pred, gt)?;
    let t = gt.frames();
    if t == 0 || lip_idx.is_empty() {
        return Err(invalid!("LVE needs frames and lip vertices"));
    }
    let mut acc = 0.0;
    for f in 0..t {
        let worst = lip_idx
            .iter()
            .map(|&i| dist(pred.vertex(f, i), gt.vertex(f, i)))
            .fold(0.0, f64::max);
        acc += worst;
    }
    Ok(acc / t as f64)
}

/// Per-frame distance between the upper and lower lip mid-points.
pub fn lip_opening(mesh: &MeshSequence, template: &FaceTemplate) -> Vec<f64> {
    (0..mesh.frames())
        .map(|f| dist(mesh.vertex(f, template.upper_lip_mid), mesh.vertex(f, template.lower_lip_mid)))
        .collect()
}

/// Classic DTW with `|a_i - b_j|` cost and steps (1,0), (0,1), (1,1); returns
/// the optimal accumulated cost divided by the number of path cells. Among
/// equal-cost paths the shortest is taken.
pub fn dtw(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(invalid!("DTW needs two non-empty series"));
    }
    let (n, m) = (a.len(), b.len());
    let mut acc = vec![vec![(f64::INFINITY, 0usize); m]; n];
    for i in 0..n {
        for j in 0..m {
            let c = (a[i] - b[j]).abs();
            if i == 0 && j == 0 {
                acc[0][0] = (c, 1);
                continue;
            }
            let mut best: Option<(f64, usize)> = None;
            let preds = [
                (i > 0).then(|| acc[i - 1][j]),
                (j > 0).then(|| acc[i][j - 1]),
                (i > 0 && j > 0).then(|| acc[i - 1][j - 1]),
            ];
            for (pc, pl) in preds.into_iter().flatten() {
                let cand = (pc + c, pl + 1);
                if best.is_none_or(|b| cand.0 < b.0 || (cand.0 == b.0 && cand.1 < b.1)) {
                    best = Some(cand);
                }
            }
            acc[i][j] = best.expect("at least one predecessor");
        }
    }
    let (cost, len) = acc[n - 1][m - 1];
    Ok(cost / len as f64)
}

pub fn dtw_lip(pred: &MeshSequence, gt: &MeshSequence, template: &FaceTemplate) -> Result<f64> {
    dtw(&lip_opening(pred, template), &lip_opening(gt, template))
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n)
}

/// Pearson and concordance correlation of two series (population moments).
/// PCC is 0 when the first series is constant.
pub fn pcc_ccc(x: &[f64], y: &[f64]) -> (f64, f64) {
    let (mx, vx) = mean_var(x);
    let (my, vy) = mean_var(y);
    let cov = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / x.len() as f64;
    let pcc = if vx > 0.0 && vy > 0.0 { cov / (vx.sqrt() * vy.sqrt()) } else { 0.0 };
    let ccc = 2.0 * cov / (vx + vy + (mx - my).powi(2));
    (pcc, ccc)
}

pub const DEGENERATE_VARIANCE: f64 = 1e-12;

/// Mean PCC and CCC over the coordinate series of `mouth_idx`, skipping
/// coordinates whose ground-truth variance is below 1e-12.
pub fn lip_correlation(pred: &MeshSequence, gt: &MeshSequence, mouth_idx: &[usize]) -> Result<(f64, f64)> {
    same_length(pred, gt)?;
    let t = gt.frames();
    if t < 2 {
        return Err(invalid!("lip correlation needs at least 2 frames"));
    }
    let (mut ps, mut cs, mut k) = (0.0, 0.0, 0usize);
    for &i in mouth_idx {
        for c in 0..3 {
            let col = 3 * i + c;
            let x: Vec<f64> = pred.vertices.column(col).to_vec();
            let y: Vec<f64> = gt.vertices.column(col).to_vec();
            if mean_var(&y).1 < DEGENERATE_VARIANCE {
                continue;
            }
            let (p, q) = pcc_ccc(&x, &y);
            ps += p;
            cs += q;
            k += 1;
        }
    }
    if k == 0 {
        return Err(Error::DegenerateInput(
            "every ground-truth mouth coordinate is constant".into(),
        ));
    }
    Ok((ps / k as f64, cs / k as f64))
}

fn dynamics(x: &MeshSequence, i: usize) -> f64 {
    let t = x.frames();
    let mut mean = [0.0; 3];
    for f in 0..t {
        let v = x.vertex(f, i);
        for c in 0..3 {
            mean[c] += v[c];
        }
    }
    mean.iter_mut().for_each(|m| *m /= t as f64);
    let mags: Vec<f64> = (0..t).map(|f| dist(x.vertex(f, i), mean)).collect();
    mean_var(&mags).1.sqrt()
}

/// Mean over `vertex_idx` of `dyn(gt) - dyn(pred)`, where `dyn` is the
/// temporal std of the distance from the vertex's mean position.
pub fn fdd(pred: &MeshSequence, gt: &MeshSequence, vertex_idx: &[usize]) -> Result<f64> {
    same_length(pred, gt)?;
    if gt.frames() < 2 {
        return Err(invalid!("FDD needs at least 2 frames"));
    }
    if vertex_idx.is_empty() {
        return Err(invalid!("FDD needs at least one vertex"));
    }
    let s: f64 = vertex_idx
        .iter()
        .map(|&i| dynamics(gt, i) - dynamics(pred, i))
        .sum();
    Ok(s / vertex_idx.len() as f64)
}

/// Per-vertex prediction-to-ground-truth distances, one `S×T×n_v` block per
/// sequence.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DistanceTensor {
    pub seqs: Vec<Array3<f64>>,
}

/// `S×T×n_v` distances of each sample to the ground truth.
pub fn distance_block(samples: &[MeshSequence], gt: &MeshSequence) -> Result<Array3<f64>> {
    let (t, n_v) = (gt.frames(), gt.num_vertices());
    let mut out = Array3::zeros((samples.len(), t, n_v));
    for (s, p) in samples.iter().enumerate() {
        same_length(p, gt)?;
        for f in 0..t {
            for i in 0..n_v {
                out[[s, f, i]] = dist(p.vertex(f, i), gt.vertex(f, i));
            }
        }
    }
    Ok(out)
}

fn pop_std<I: Iterator<Item = f64> + Clone>(it: I) -> f64 {
    let n = it.clone().count() as f64;
    let m = it.clone().sum::<f64>() / n;
    (it.map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt()
}

/// Running sums behind the four diversity scores.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DiversityAccumulator {
    sums: [f64; 4],
    counts: [usize; 4],
}

impl DiversityAccumulator {
    /// Adds one `S×T×n_v` block.
    pub fn add(&mut self, block: &Array3<f64>, upper_idx: &[usize], lower_idx: &[usize]) -> Result<()> {
        let (s, t, _) = block.dim();
        if s < 2 || t < 2 {
            return Err(invalid!("diversity needs S >= 2 and T >= 2, got S={s}, T={t}"));
        }
        for (r, idx) in [upper_idx, lower_idx].into_iter().enumerate() {
            for &i in idx {
                for f in 0..t {
                    self.sums[r] += pop_std((0..s).map(|k| block[[k, f, i]]));
                    self.counts[r] += 1;
                }
                for k in 0..s {
                    self.sums[2 + r] += pop_std((0..t).map(|f| block[[k, f, i]]));
                    self.counts[2 + r] += 1;
                }
            }
        }
        Ok(())
    }

    /// `(s_div_u, s_div_l, t_div_u, t_div_l)`.
    pub fn finish(&self) -> Result<(f64, f64, f64, f64)> {
        if self.counts.contains(&0) {
            return Err(invalid!("diversity over an empty tensor or vertex set"));
        }
        let v: Vec<f64> = (0..4).map(|k| self.sums[k] / self.counts[k] as f64).collect();
        Ok((v[0], v[1], v[2], v[3]))
    }
}

/// Sample-axis (S-DIV) and time-axis (T-DIV) population standard deviations,
/// averaged over the remaining entries of each vertex set.
pub fn diversity(tensor: &DistanceTensor, upper_idx: &[usize], lower_idx: &[usize]) -> Result<(f64, f64, f64, f64)> {
    let mut acc = DiversityAccumulator::default();
    for b in &tensor.seqs {
        acc.add(b, upper_idx, lower_idx)?;
    }
    acc.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use lipcycle_grad::Mat;
    use proptest::prelude::*;

    fn mesh(t: usize, n_v: usize, seed_value: u64) -> MeshSequence {
        let mut r = seed::rng(seed_value);
        MeshSequence {
            vertices: seed::standard_normal(&mut r, t, 3 * n_v),
        }
    }

    fn translate(m: &MeshSequence, d: [f64; 3]) -> MeshSequence {
        MeshSequence {
            vertices: Mat::from_shape_fn(m.vertices.dim(), |(f, k)| m.vertices[[f, k]] + d[k % 3]),
        }
    }

    #[test]
    fn lve_cases() {
        let gt = mesh(4, 5, 1);
        assert_eq!(lve(&gt, &gt, &[0, 2]).unwrap(), 0.0);
        let shifted = translate(&gt, [0.3, 0.0, 0.4]);
        assert!((lve(&shifted, &gt, &[0, 1, 4]).unwrap() - 0.5).abs() < 1e-12);
        let pred = mesh(3, 5, 2);
        let gt = mesh(3, 5, 3);
        let lips = [1, 3, 4];
        let mut oracle = 0.0;
        for f in 0..3 {
            let mut worst = 0.0f64;
            for &i in &lips {
                let mut s = 0.0;
                for c in 0..3 {
                    s += (pred.vertices[[f, 3 * i + c]] - gt.vertices[[f, 3 * i + c]]).powi(2);
                }
                worst = worst.max(s.sqrt());
            }
            oracle += worst;
        }
        assert_eq!(lve(&pred, &gt, &lips).unwrap(), oracle / 3.0);
        assert!(lve(&mesh(2, 5, 1), &gt, &lips).is_err());
    }

    /// Every monotone path from (0,0) to (n-1,m-1); min cost, then min length.
    fn dtw_exhaustive(a: &[f64], b: &[f64]) -> f64 {
        fn walk(a: &[f64], b: &[f64], i: usize, j: usize, cost: f64, len: usize, best: &mut (f64, usize)) {
            let cost = cost + (a[i] - b[j]).abs();
            let len = len + 1;
            if i == a.len() - 1 && j == b.len() - 1 {
                if cost < best.0 || (cost == best.0 && len < best.1) {
                    *best = (cost, len);
                }
                return;
            }
            if i + 1 < a.len() {
                walk(a, b, i + 1, j, cost, len, best);
            }
            if j + 1 < b.len() {
                walk(a, b, i, j + 1, cost, len, best);
            }
            if i + 1 < a.len() && j + 1 < b.len() {
                walk(a, b, i + 1, j + 1, cost, len, best);
            }
        }
        let mut best = (f64::INFINITY, 0);
        walk(a, b, 0, 0, 0.0, 0, &mut best);
        best.0 / best.1 as f64
    }

    #[test]
    fn dtw_matches_exhaustive_enumeration() {
        let mut r = seed::rng(7);
        use rand::Rng as _;
        for _ in 0..50 {
            let n = r.random_range(1..=6);
            let m = r.random_range(1..=6);
            let a: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..m).map(|_| r.random_range(-1.0..1.0)).collect();
            assert_eq!(dtw(&a, &b).unwrap(), dtw_exhaustive(&a, &b));
            assert_eq!(dtw(&a, &b).unwrap(), dtw(&b, &a).unwrap());
        }
        assert_eq!(dtw(&[0.0, 1.0, 2.0], &[0.0, 1.0, 2.0, 2.0]).unwrap(), 0.0);
        assert!(dtw(&[], &[1.0]).is_err());
    }

    #[test]
    fn correlation_oracles() {
        let mut r = seed::rng(9);
        let x: Vec<f64> = seed::standard_normal(&mut r, 10, 1).into_raw_vec_and_offset().0;
        let y: Vec<f64> = seed::standard_normal(&mut r, 10, 1).into_raw_vec_and_offset().0;
        let n = 10.0;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let sxy: f64 = (0..10).map(|i| (x[i] - mx) * (y[i] - my)).sum::<f64>() / n;
        let sxx: f64 = (0..10).map(|i| (x[i] - mx) * (x[i] - mx)).sum::<f64>() / n;
        let syy: f64 = (0..10).map(|i| (y[i] - my) * (y[i] - my)).sum::<f64>() / n;
        let (p, c) = pcc_ccc(&x, &y);
        assert!((p - sxy / (sxx * syy).sqrt()).abs() < 1e-10);
        assert!((c - 2.0 * sxy / (sxx + syy + (mx - my).powi(2))).abs() < 1e-10);
        let (p1, c1) = pcc_ccc(&x, &x);
        assert!((p1 - 1.0).abs() < 1e-12 && (c1 - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = x.iter().map(|v| -(v - mx)).collect();
        let cen: Vec<f64> = x.iter().map(|v| v - mx).collect();
        assert!((pcc_ccc(&neg, &cen).0 + 1.0).abs() < 1e-12);
        let off: Vec<f64> = y.iter().map(|v| v + 0.7).collect();
        assert!(pcc_ccc(&off, &y).1 < pcc_ccc(&y, &y).1);
    }

    #[test]
    fn lip_correlation_skips_constant_coordinates() {
        let gt = mesh(10, 3, 4);
        let mut flat = gt.clone();
        flat.vertices.column_mut(4).fill(2.0);
        let (p, c) = lip_correlation(&flat, &flat, &[0, 1, 2]).unwrap();
        assert!((p - 1.0).abs() < 1e-12 && (c - 1.0).abs() < 1e-12);
        let still = MeshSequence {
            vertices: Mat::ones((5, 9)),
        };
        assert!(matches!(
            lip_correlation(&still, &still, &[0, 1]),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn fdd_by_hand() {
        let gt = mesh(6, 4, 5);
        assert_eq!(fdd(&gt, &gt, &[0, 1]).unwrap(), 0.0);
        // one vertex moving along x by 0, 1, 2: mean 1, distances 1, 0, 1
        let moving = MeshSequence {
            vertices: Mat::from_shape_fn((3, 3), |(f, k)| if k == 0 { f as f64 } else { 0.0 }),
        };
        let still = MeshSequence {
            vertices: Mat::zeros((3, 3)),
        };
        let mags = [1.0f64, 0.0, 1.0];
        let m = 2.0 / 3.0;
        let sd = (mags.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 3.0).sqrt();
        assert!((fdd(&still, &moving, &[0]).unwrap() - sd).abs() < 1e-15);
        assert!(fdd(&still, &moving, &[0]).unwrap() > 0.0);
        assert!(fdd(&mesh(1, 4, 1), &mesh(1, 4, 2), &[0]).is_err());
    }

    #[test]
    fn diversity_toy_by_hand() {
        // N=1, S=2, T=2, one vertex: values [[1, 3], [2, 7]]
        let mut b = Array3::zeros((2, 2, 1));
        b[[0, 0, 0]] = 1.0;
        b[[0, 1, 0]] = 3.0;
        b[[1, 0, 0]] = 2.0;
        b[[1, 1, 0]] = 7.0;
        let t = DistanceTensor { seqs: vec![b] };
        let (su, sl, tu, tl) = diversity(&t, &[0], &[0]).unwrap();
        // S axis: std(1,2)=0.5, std(3,7)=2 -> 1.25; T axis: std(1,3)=1, std(2,7)=2.5 -> 1.75
        assert_eq!((su, sl, tu, tl), (1.25, 1.25, 1.75, 1.75));
        let same = DistanceTensor {
            seqs: vec![Array3::from_shape_fn((3, 4, 2), |(_, f, i)| (f * 2 + i) as f64)],
        };
        let (su, sl, _, _) = diversity(&same, &[0], &[1]).unwrap();
        assert_eq!((su, sl), (0.0, 0.0));
        let frozen = DistanceTensor {
            seqs: vec![Array3::from_shape_fn((3, 4, 2), |(s, _, i)| (s * 2 + i) as f64)],
        };
        let (_, _, tu, tl) = diversity(&frozen, &[0], &[1]).unwrap();
        assert_eq!((tu, tl), (0.0, 0.0));
        let small = DistanceTensor {
            seqs: vec![Array3::zeros((1, 4, 2))],
        };
        assert!(diversity(&small, &[0], &[1]).is_err());
    }

    #[test]
    fn diversity_matches_a_loop_oracle() {
        let mut r = seed::rng(10);
        let vals = seed::standard_normal(&mut r, 2, 3 * 4).mapv(f64::abs);
        let b = Array3::from_shape_fn((2, 3, 4), |(s, f, i)| vals[[s, f * 4 + i]]);
        let (upper, lower) = ([0usize, 2], [1usize, 3]);
        let std = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
        };
        let mut s_u = 0.0;
        for &i in &upper {
            for f in 0..3 {
                s_u += std(&[b[[0, f, i]], b[[1, f, i]]]);
            }
        }
        let mut t_l = 0.0;
        for &i in &lower {
            for s in 0..2 {
                t_l += std(&[b[[s, 0, i]], b[[s, 1, i]], b[[s, 2, i]]]);
            }
        }
        let t = DistanceTensor { seqs: vec![b] };
        let (su, _, _, tl) = diversity(&t, &upper, &lower).unwrap();
        assert_eq!(su, s_u / 6.0);
        assert_eq!(tl, t_l / 4.0);
    }

    proptest! {
        #[test]
        fn distance_metrics_ignore_a_shared_translation(dx in -5.0f64..5.0, dy in -5.0f64..5.0, dz in -5.0f64..5.0, s in 0u64..1000) {
            let pred = mesh(5, 4, s);
            let gt = mesh(5, 4, s + 1);
            let (pt, gtt) = (translate(&pred, [dx, dy, dz]), translate(&gt, [dx, dy, dz]));
            let idx = [0usize, 1, 3];
            prop_assert!((lve(&pred, &gt, &idx).unwrap() - lve(&pt, &gtt, &idx).unwrap()).abs() < 1e-9);
            prop_assert!((fdd(&pred, &gt, &idx).unwrap() - fdd(&pt, &gtt, &idx).unwrap()).abs() < 1e-9);
            let b0 = distance_block(std::slice::from_ref(&pred), &gt).unwrap();
            let b1 = distance_block(std::slice::from_ref(&pt), &gtt).unwrap();
            prop_assert!(b0.iter().zip(b1.iter()).all(|(a, b)| (a - b).abs() < 1e-9));
        }

        #[test]
        fn dtw_is_nonnegative_and_zero_on_itself(a in proptest::collection::vec(-3.0f64..3.0, 1..12), b in proptest::collection::vec(-3.0f64..3.0, 1..12)) {
            prop_assert!(dtw(&a, &b).unwrap() >= 0.0);
            prop_assert_eq!(dtw(&a, &a).unwrap(), 0.0);
        }

        #[test]
        fn correlations_ignore_a_shared_offset(c in -10.0f64..10.0, s in 0u64..1000) {
            let mut r = seed::rng(s);
            let x = seed::standard_normal(&mut r, 12, 1).into_raw_vec_and_offset().0;
            let y = seed::standard_normal(&mut r, 12, 1).into_raw_vec_and_offset().0;
            let xs: Vec<f64> = x.iter().map(|v| v + c).collect();
            let ys: Vec<f64> = y.iter().map(|v| v + c).collect();
            let (p0, c0) = pcc_ccc(&x, &y);
            let (p1, c1) = pcc_ccc(&xs, &ys);
            prop_assert!((p0 - p1).abs() < 1e-9 && (c0 - c1).abs() < 1e-9);
        }
    }
}
