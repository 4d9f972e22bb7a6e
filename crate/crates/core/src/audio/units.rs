//! Discrete speech units: k-means over mel frames.

use lipcycle_grad::Mat;
use ndarray::ArrayView1;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::dsp::MelSpectrogram;
use crate::error::{invalid, Error, Result};
use crate::seed;

const MAX_ITERS: usize = 100;
const SHIFT_TOL: f64 = 1e-6;
/// Independent seedings per fit; the lowest-inertia run is kept.
pub const KMEANS_RESTARTS: u64 = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitCodebook {
    pub centroids: Mat,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeechUnits {
    pub ids: Vec<usize>,
}

impl SpeechUnits {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

impl UnitCodebook {
    pub fn new(centroids: Mat) -> Result<Self> {
        let k = centroids.nrows();
        if k < 2 {
            return Err(invalid!("codebook needs at least 2 centroids, got {k}"));
        }
        if centroids.iter().any(|v| !v.is_finite()) {
            return Err(invalid!("codebook centroids must be finite"));
        }
        for i in 0..k {
            for j in 0..i {
                if centroids.row(i) == centroids.row(j) {
                    return Err(invalid!("centroids {j} and {i} coincide"));
                }
            }
        }
        Ok(Self { centroids })
    }

    pub fn num_units(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.ncols()
    }

    /// Reorders centroids so that new index `i` holds old centroid `order[i]`.
    pub fn reordered(&self, order: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.num_units()];
        if order.len() != seen.len() || order.iter().any(|&o| o >= seen.len() || std::mem::replace(&mut seen[o], true)) {
            return Err(invalid!("reordering must be a permutation of 0..{}", seen.len()));
        }
        let mut c = Mat::zeros(self.centroids.dim());
        for (i, &o) in order.iter().enumerate() {
            c.row_mut(i).assign(&self.centroids.row(o));
        }
        Ok(Self { centroids: c })
    }

    /// Index of the nearest centroid; ties go to the lowest index.
    pub fn nearest(&self, frame: ArrayView1<f64>) -> usize {
        let mut best = (0, f64::INFINITY);
        for (k, c) in self.centroids.rows().into_iter().enumerate() {
            let d = sq_dist(frame, c);
            if d < best.1 {
                best = (k, d);
            }
        }
        best.0
    }
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's k-means on raw row vectors with k-means++ seeding. Requires at
/// least `10 k` rows and `k` distinct rows.
pub fn kmeans(data: &Mat, k: usize, seed: u64) -> Result<Mat> {
    let n = data.nrows();
    if k == 0 {
        return Err(invalid!("cluster count must be positive"));
    }
    if n < 10 * k {
        return Err(invalid!("{n} frames are too few for {k} units (need {})", 10 * k));
    }
    let mut rng = seed::rng(seed);
    let mut centroids = Mat::zeros((k, data.ncols()));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&data.row(first));
    let mut d2: Vec<f64> = data.rows().into_iter().map(|r| sq_dist(r, data.row(first))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            return Err(Error::DegenerateInput(format!(
                "only {c} distinct frames available for {k} units"
            )));
        }
        let mut target = rng.random::<f64>() * total;
        let mut pick = n - 1;
        for (i, d) in d2.iter().enumerate() {
            if *d > 0.0 && target < *d {
                pick = i;
                break;
            }
            target -= d;
        }
        if d2[pick] <= 0.0 {
            pick = d2.iter().rposition(|d| *d > 0.0).expect("total is positive");
        }
        centroids.row_mut(c).assign(&data.row(pick));
        for (i, r) in data.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(r, data.row(pick)));
        }
    }

    let mut assign = vec![0usize; n];
    for _ in 0..MAX_ITERS {
        for (i, r) in data.rows().into_iter().enumerate() {
            let mut best = (0, f64::INFINITY);
            for (j, c) in centroids.rows().into_iter().enumerate() {
                let d = sq_dist(r, c);
                if d < best.1 {
                    best = (j, d);
                }
            }
            assign[i] = best.0;
        }
        let mut sums = Mat::zeros(centroids.dim());
        let mut counts = vec![0usize; k];
        for (i, r) in data.rows().into_iter().enumerate() {
            let mut s = sums.row_mut(assign[i]);
            s += &r;
            counts[assign[i]] += 1;
        }
        let mut shift = 0.0f64;
        for j in 0..k {
            if counts[j] == 0 {
                continue;
            }
            let new = sums.row(j).mapv(|v| v / counts[j] as f64);
            shift = shift.max(sq_dist(new.view(), centroids.row(j)).sqrt());
            centroids.row_mut(j).assign(&new);
        }
        if shift < SHIFT_TOL {
            break;
        }
    }
    Ok(centroids)
}

fn stack_frames(mels: &[&MelSpectrogram]) -> Mat {
    let total: usize = mels.iter().map(|m| m.len()).sum();
    let bins = mels.first().map_or(0, |m| m.frames.ncols());
    let mut data = Mat::zeros((total, bins));
    let mut at = 0;
    for m in mels {
        data.slice_mut(ndarray::s![at..at + m.len(), ..]).assign(&m.frames);
        at += m.len();
    }
    data
}

/// Sum of squared distances from each row to its nearest centroid.
pub fn inertia(data: &Mat, centroids: &Mat) -> f64 {
    data.rows()
        .into_iter()
        .map(|r| {
            centroids
                .rows()
                .into_iter()
                .map(|c| sq_dist(r, c))
                .fold(f64::INFINITY, f64::min)
        })
        .sum()
}

pub fn fit_unit_codebook(mels: &[&MelSpectrogram], n_units: usize, seed: u64) -> Result<UnitCodebook> {
    if n_units < 2 {
        return Err(invalid!("n_units must be at least 2, got {n_units}"));
    }
    let data = stack_frames(mels);
    let mut best: Option<(f64, Mat)> = None;
    for r in 0..KMEANS_RESTARTS {
        let c = kmeans(&data, n_units, seed::derive_seed(seed, r))?;
        let j = inertia(&data, &c);
        if best.as_ref().is_none_or(|(b, _)| j < *b) {
            best = Some((j, c));
        }
    }
    UnitCodebook::new(best.expect("at least one restart").1)
}

pub fn quantize_units(mel: &MelSpectrogram, codebook: &UnitCodebook) -> Result<SpeechUnits> {
    quantize_frames(&mel.frames, codebook)
}

pub fn quantize_frames(frames: &Mat, codebook: &UnitCodebook) -> Result<SpeechUnits> {
    if frames.ncols() != codebook.dim() {
        return Err(invalid!(
            "frames have {} bins but codebook has {}",
            frames.ncols(),
            codebook.dim()
        ));
    }
    Ok(SpeechUnits {
        ids: frames.rows().into_iter().map(|r| codebook.nearest(r)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::dsp::MEL_BINS;
    use rand_distr::{Distribution, StandardNormal};

    fn planted(k: usize, per: usize, radius: f64, sep: f64, seed: u64) -> (Mat, Vec<usize>, Mat) {
        let mut r = seed::rng(seed);
        let centers = Mat::from_shape_fn((k, MEL_BINS), |(i, j)| {
            if j == i {
                sep
            } else {
                0.0
            }
        });
        let mut data = Mat::zeros((k * per, MEL_BINS));
        let mut labels = Vec::new();
        for i in 0..k * per {
            let c = (i * 7) % k;
            labels.push(c);
            for j in 0..MEL_BINS {
                let u: f64 = StandardNormal.sample(&mut r);
                data[[i, j]] = centers[[c, j]] + radius * u / (MEL_BINS as f64).sqrt();
            }
        }
        (data, labels, centers)
    }

    fn mel_of(data: &Mat) -> MelSpectrogram {
        MelSpectrogram::new(data.clone()).unwrap()
    }

    #[test]
    fn separated_clusters_get_one_centroid_each() {
        let (data, labels, centers) = planted(8, 20, 0.05, 5.0, 3);
        let cb = fit_unit_codebook(&[&mel_of(&data)], 8, 11).unwrap();
        for c in centers.rows() {
            let hits = cb
                .centroids
                .rows()
                .into_iter()
                .filter(|x| sq_dist(*x, c).sqrt() < 0.05)
                .count();
            assert_eq!(hits, 1);
        }
        // Recovered labels agree with the planted ones up to a permutation.
        let ids = quantize_units(&mel_of(&data), &cb).unwrap().ids;
        let mut map = [usize::MAX; 8];
        for (p, q) in labels.iter().zip(&ids) {
            if map[*p] == usize::MAX {
                map[*p] = *q;
            }
            assert_eq!(map[*p], *q);
        }
    }

    #[test]
    fn fitting_is_deterministic() {
        let (data, _, _) = planted(4, 30, 1.0, 1.0, 5);
        let a = fit_unit_codebook(&[&mel_of(&data)], 4, 9).unwrap();
        let b = fit_unit_codebook(&[&mel_of(&data)], 4, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let (data, _, _) = planted(3, 10, 1.0, 2.0, 1);
        let c = kmeans(&data, 1, 0).unwrap();
        let mean = data.mean_axis(ndarray::Axis(0)).unwrap();
        for (a, b) in c.row(0).iter().zip(mean.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn too_few_frames_is_rejected() {
        let (data, _, _) = planted(2, 10, 1.0, 2.0, 1);
        assert!(matches!(
            fit_unit_codebook(&[&mel_of(&data)], 3, 0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn quantization_breaks_ties_toward_lower_index() {
        let mut c = Mat::zeros((6, MEL_BINS));
        for k in 0..6 {
            c[[k, k]] = 1.0;
        }
        let cb = UnitCodebook::new(c.clone()).unwrap();
        let mut frames = Mat::zeros((2, MEL_BINS));
        frames.row_mut(0).assign(&c.row(3));
        frames[[1, 2]] = 0.5;
        frames[[1, 5]] = 0.5;
        let ids = quantize_frames(&frames, &cb).unwrap().ids;
        assert_eq!(ids, vec![3, 2]);
    }

    #[test]
    fn quantization_matches_exhaustive_search() {
        let mut r = seed::rng(4);
        let c = seed::standard_normal(&mut r, 8, MEL_BINS);
        let frames = seed::standard_normal(&mut r, 64, MEL_BINS);
        let cb = UnitCodebook::new(c.clone()).unwrap();
        let ids = quantize_frames(&frames, &cb).unwrap().ids;
        for (t, id) in ids.iter().enumerate() {
            let d: Vec<f64> = (0..8)
                .map(|k| (0..MEL_BINS).map(|j| (frames[[t, j]] - c[[k, j]]).powi(2)).sum())
                .collect();
            let best = (0..8).fold(0, |b, k| if d[k] < d[b] { k } else { b });
            assert_eq!(*id, best);
        }
        assert!(quantize_frames(&Mat::zeros((2, 3)), &cb).is_err());
    }

    #[test]
    fn reordering_permutes_rows() {
        let mut r = seed::rng(2);
        let cb = UnitCodebook::new(seed::standard_normal(&mut r, 3, 4)).unwrap();
        let p = cb.reordered(&[2, 0, 1]).unwrap();
        assert_eq!(p.centroids.row(0), cb.centroids.row(2));
        assert!(cb.reordered(&[0, 0, 1]).is_err());
    }
}
