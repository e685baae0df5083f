//! Difference image, fuzzy-clustering pseudo-labels, sample selection and
//! patch extraction.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GksError, Result};
use crate::grid::{Image, Mask};
use crate::tensor::Tensor;

pub const DEFAULT_LOG_EPS: f64 = 1e-3;
pub const FCM_FUZZIFIER: f64 = 2.0;
pub const FCM_TOL: f64 = 1e-5;
pub const FCM_MAX_ITER: usize = 100;
/// Smallest share of a draw given to the minority class when it has enough pixels.
pub const MINORITY_FLOOR: f64 = 0.2;

/// Two co-registered acquisitions, optionally with a reference change mask.
#[derive(Debug, Clone)]
pub struct ImagePair {
    img1: Image,
    img2: Image,
    ground_truth: Option<Mask>,
}

impl ImagePair {
    pub fn new(img1: Image, img2: Image, ground_truth: Option<Mask>) -> Result<Self> {
        if !img1.same_dims(&img2) {
            return Err(GksError::InvalidInput(format!(
                "image extents differ: {:?} vs {:?}",
                img1.dims(),
                img2.dims()
            )));
        }
        if let Some(gt) = &ground_truth {
            if !gt.same_dims(&img1) {
                return Err(GksError::InvalidInput(format!(
                    "ground truth extents {:?} differ from images {:?}",
                    gt.dims(),
                    img1.dims()
                )));
            }
        }
        if img1.is_empty() {
            return Err(GksError::InvalidInput("empty image pair".into()));
        }
        let bad = |img: &Image| img.data().iter().any(|v| !(v.is_finite() && *v >= 0.0));
        if bad(&img1) || bad(&img2) {
            return Err(GksError::InvalidInput(
                "intensities must be finite and nonnegative".into(),
            ));
        }
        Ok(ImagePair {
            img1,
            img2,
            ground_truth,
        })
    }

    pub fn img1(&self) -> &Image {
        &self.img1
    }

    pub fn img2(&self) -> &Image {
        &self.img2
    }

    pub fn ground_truth(&self) -> Option<&Mask> {
        self.ground_truth.as_ref()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.img1.dims()
    }
}

/// Normalized absolute log-ratio, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DifferenceImage(pub Image);

impl DifferenceImage {
    pub fn image(&self) -> &Image {
        &self.0
    }
}

pub fn log_ratio_di(pair: &ImagePair, eps: f64) -> Result<DifferenceImage> {
    if !(eps > 0.0) {
        return Err(GksError::Config(format!("log-ratio eps must be positive, got {eps}")));
    }
    let raw = Image::new(
        pair.img1.height(),
        pair.img1.width(),
        pair.img1
            .data()
            .iter()
            .zip(pair.img2.data())
            .map(|(a, b)| ((b + eps) / (a + eps)).ln().abs())
            .collect(),
    )?;
    Ok(DifferenceImage(raw.normalized()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PixelClass {
    Changed,
    Unchanged,
    Uncertain,
}

impl PixelClass {
    /// Binary training label, `None` for uncertain pixels.
    pub fn label(self) -> Option<u8> {
        match self {
            PixelClass::Changed => Some(1),
            PixelClass::Unchanged => Some(0),
            PixelClass::Uncertain => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreclassMap {
    pub labels: crate::grid::Grid<PixelClass>,
}

impl PreclassMap {
    /// Treats a reference mask as fully confident labels (for labeled source data).
    pub fn from_mask(mask: &Mask) -> Self {
        PreclassMap {
            labels: mask.map(|&v| {
                if v != 0 {
                    PixelClass::Changed
                } else {
                    PixelClass::Unchanged
                }
            }),
        }
    }

    pub fn count(&self, class: PixelClass) -> usize {
        self.labels.data().iter().filter(|&&c| c == class).count()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.labels.dims()
    }
}

// ---------------------------------------------------------------------------
// fuzzy c-means

#[derive(Debug, Clone)]
pub struct FcmResult {
    /// Cluster centers in ascending order.
    pub centers: Vec<f64>,
    /// Row-major `n × c`; column `j` belongs to `centers[j]`.
    pub memberships: Vec<f64>,
    /// Objective after each iteration.
    pub objective: Vec<f64>,
    pub iterations: usize,
}

impl FcmResult {
    pub fn clusters(&self) -> usize {
        self.centers.len()
    }

    pub fn membership_row(&self, i: usize) -> &[f64] {
        let c = self.centers.len();
        &self.memberships[i * c..(i + 1) * c]
    }

    /// Index of the maximum-membership cluster for point `i`.
    pub fn hard_label(&self, i: usize) -> usize {
        let row = self.membership_row(i);
        let mut best = 0;
        for j in 1..row.len() {
            if row[j] > row[best] {
                best = j;
            }
        }
        best
    }
}

fn distinct_sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

fn update_memberships(values: &[f64], centers: &[f64], m: f64, u: &mut [f64]) {
    let c = centers.len();
    let p = 2.0 / (m - 1.0);
    let mut d = vec![0.0; c];
    for (x, row) in values.iter().zip(u.chunks_exact_mut(c)) {
        let mut zeros = 0;
        for j in 0..c {
            d[j] = (x - centers[j]).abs();
            if d[j] == 0.0 {
                zeros += 1;
            }
        }
        if zeros > 0 {
            for j in 0..c {
                row[j] = if d[j] == 0.0 { 1.0 / zeros as f64 } else { 0.0 };
            }
            continue;
        }
        for j in 0..c {
            let s: f64 = (0..c).map(|k| (d[j] / d[k]).powf(p)).sum();
            row[j] = 1.0 / s;
        }
    }
}

fn objective(values: &[f64], centers: &[f64], m: f64, u: &[f64]) -> f64 {
    let c = centers.len();
    values
        .iter()
        .zip(u.chunks_exact(c))
        .map(|(x, row)| {
            row.iter()
                .zip(centers)
                .map(|(uv, cv)| uv.powf(m) * (x - cv) * (x - cv))
                .sum::<f64>()
        })
        .sum()
}

/// Fuzzy c-means on scalar values.
///
/// Initial centers are drawn one per stratum of the sorted distinct values,
/// so the result depends only on the seed and the set of values.
pub fn fcm(values: &[f64], c: usize, m: f64, tol: f64, max_iter: usize, seed: u64) -> Result<FcmResult> {
    if c < 2 {
        return Err(GksError::Config(format!("fcm needs at least 2 clusters, got {c}")));
    }
    if !(m > 1.0) {
        return Err(GksError::Config(format!("fcm fuzzifier must exceed 1, got {m}")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(GksError::NonFinite("fcm input".into()));
    }
    let distinct = distinct_sorted(values);
    if distinct.len() < c {
        return Err(GksError::InvalidInput(format!(
            "fcm with {c} clusters needs at least {c} distinct values, got {}",
            distinct.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<f64> = (0..c)
        .map(|j| {
            let lo = j * distinct.len() / c;
            let hi = ((j + 1) * distinct.len() / c).max(lo + 1);
            distinct[rng.random_range(lo..hi)]
        })
        .collect();

    let n = values.len();
    let mut u = vec![0.0; n * c];
    let mut history = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iter.max(1) {
        iterations += 1;
        update_memberships(values, &centers, m, &mut u);
        let mut num = vec![0.0; c];
        let mut den = vec![0.0; c];
        for (x, row) in values.iter().zip(u.chunks_exact(c)) {
            for j in 0..c {
                let w = row[j].powf(m);
                num[j] += w * x;
                den[j] += w;
            }
        }
        let mut shift: f64 = 0.0;
        for j in 0..c {
            if den[j] > 0.0 {
                let nc = num[j] / den[j];
                shift = shift.max((nc - centers[j]).abs());
                centers[j] = nc;
            }
        }
        history.push(objective(values, &centers, m, &u));
        if shift < tol {
            break;
        }
    }
    update_memberships(values, &centers, m, &mut u);

    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| centers[a].total_cmp(&centers[b]));
    let sorted_centers: Vec<f64> = order.iter().map(|&j| centers[j]).collect();
    let mut sorted_u = vec![0.0; n * c];
    for (src, dst) in u.chunks_exact(c).zip(sorted_u.chunks_exact_mut(c)) {
        for (k, &j) in order.iter().enumerate() {
            dst[k] = src[j];
        }
    }
    Ok(FcmResult {
        centers: sorted_centers,
        memberships: sorted_u,
        objective: history,
        iterations,
    })
}

/// Splits a difference image into changed, unchanged and uncertain pixels
/// with a two-stage fuzzy clustering.
///
/// Stage one (two clusters) yields a low and a high center. Stage two (five
/// clusters) assigns each pixel to its maximum-membership cluster; clusters
/// centered at or above the high center are changed, at or below the low
/// center unchanged, the rest uncertain.
pub fn hierarchical_preclassify(di: &DifferenceImage, seed: u64) -> Result<PreclassMap> {
    let values = di.0.data();
    let distinct = distinct_sorted(values);
    if distinct.len() <= 1 {
        log::warn!("difference image is constant; labelling every pixel unchanged");
        return Ok(PreclassMap {
            labels: di.0.map(|_| PixelClass::Unchanged),
        });
    }
    if distinct.len() < 5 {
        return Err(GksError::InvalidInput(format!(
            "difference image has only {} distinct values; at least 5 are needed",
            distinct.len()
        )));
    }
    let coarse = fcm(values, 2, FCM_FUZZIFIER, FCM_TOL, FCM_MAX_ITER, seed)?;
    let (low, high) = (coarse.centers[0], coarse.centers[1]);
    let fine = fcm(values, 5, FCM_FUZZIFIER, FCM_TOL, FCM_MAX_ITER, seed.wrapping_add(1))?;
    let cluster_class: Vec<PixelClass> = fine
        .centers
        .iter()
        .map(|&c| {
            if c >= high {
                PixelClass::Changed
            } else if c <= low {
                PixelClass::Unchanged
            } else {
                PixelClass::Uncertain
            }
        })
        .collect();
    let labels = (0..values.len())
        .map(|i| cluster_class[fine.hard_label(i)])
        .collect();
    Ok(PreclassMap {
        labels: crate::grid::Grid::new(di.0.height(), di.0.width(), labels)?,
    })
}

// ---------------------------------------------------------------------------
// sample selection

/// Pixel position, `(row, col)`.
pub type Center = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledCenter {
    pub row: usize,
    pub col: usize,
    pub label: u8,
}

/// Draws `round(ratio * h * w)` confident pixels without replacement.
pub fn select_training_samples(map: &PreclassMap, ratio: f64, seed: u64) -> Result<Vec<LabeledCenter>> {
    let (h, w) = map.dims();
    let mut changed = Vec::new();
    let mut unchanged = Vec::new();
    for (i, c) in map.labels.data().iter().enumerate() {
        match c {
            PixelClass::Changed => changed.push(i),
            PixelClass::Unchanged => unchanged.push(i),
            PixelClass::Uncertain => {}
        }
    }
    if changed.is_empty() {
        return Err(GksError::InvalidInput(
            "no changed pixels to train a two-class model".into(),
        ));
    }
    let confident = changed.len() + unchanged.len();
    if !(ratio > 0.0) || ratio * (h * w) as f64 > confident as f64 + 1e-9 {
        return Err(GksError::Config(format!(
            "sample ratio {ratio} must be positive and at most the confident fraction {:.4}",
            confident as f64 / (h * w) as f64
        )));
    }
    let total = ((ratio * (h * w) as f64).round() as usize).clamp(1, confident);

    let mut n_changed =
        ((total as f64) * changed.len() as f64 / confident as f64).round() as usize;
    let floor = (MINORITY_FLOOR * total as f64).ceil() as usize;
    let changed_is_minority = changed.len() <= unchanged.len();
    if changed_is_minority {
        if n_changed < floor && changed.len() >= floor {
            n_changed = floor;
        }
    } else {
        let n_unchanged = total - n_changed.min(total);
        if n_unchanged < floor && unchanged.len() >= floor {
            n_changed = total - floor;
        }
    }
    n_changed = n_changed.clamp(total.saturating_sub(unchanged.len()), changed.len().min(total));
    let n_unchanged = total - n_changed;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<LabeledCenter> = Vec::with_capacity(total);
    for (pool, k, label) in [(&changed, n_changed, 1u8), (&unchanged, n_unchanged, 0u8)] {
        for idx in sample(&mut rng, pool.len(), k).into_iter() {
            let p = pool[idx];
            out.push(LabeledCenter {
                row: p / w,
                col: p % w,
                label,
            });
        }
    }
    out.shuffle(&mut rng);
    Ok(out)
}

// ---------------------------------------------------------------------------
// patches

pub const PATCH_CHANNELS: usize = 3;

/// `r×r×3` input window (I1, I2, DI) around a pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    pub center: Center,
    pub patch: Tensor,
    pub label: u8,
    pub r: usize,
}

/// Reflects an out-of-range index back into `0..n` without repeating the edge.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut k = i.rem_euclid(period);
    if k >= n as isize {
        k = period - k;
    }
    k as usize
}

/// Image-wide normalized channels, ready for repeated patch extraction.
#[derive(Debug, Clone)]
pub struct PatchExtractor {
    height: usize,
    width: usize,
    /// Interleaved `(I1, I2, DI)` per pixel.
    stacked: Vec<f64>,
}

impl PatchExtractor {
    pub fn new(pair: &ImagePair, di: &DifferenceImage) -> Result<Self> {
        if !pair.img1.same_dims(&di.0) {
            return Err(GksError::InvalidInput(format!(
                "difference image extents {:?} differ from pair {:?}",
                di.0.dims(),
                pair.dims()
            )));
        }
        let a = pair.img1.normalized();
        let b = pair.img2.normalized();
        let mut stacked = Vec::with_capacity(a.len() * PATCH_CHANNELS);
        for ((x, y), z) in a.data().iter().zip(b.data()).zip(di.0.data()) {
            stacked.extend_from_slice(&[*x, *y, *z]);
        }
        Ok(PatchExtractor {
            height: a.height(),
            width: a.width(),
            stacked,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn check(&self, center: Center, r: usize) -> Result<()> {
        if r < 3 || r % 2 == 0 {
            return Err(GksError::Config(format!("patch side must be odd and >= 3, got {r}")));
        }
        if center.0 >= self.height || center.1 >= self.width {
            return Err(GksError::InvalidInput(format!(
                "center {:?} outside {}x{} image",
                center, self.height, self.width
            )));
        }
        Ok(())
    }

    /// Writes the `r·r·3` window into `out`.
    pub fn write_patch(&self, center: Center, r: usize, out: &mut [f64]) -> Result<()> {
        self.check(center, r)?;
        let half = (r / 2) as isize;
        let mut o = 0;
        for dy in -half..=half {
            let y = reflect_index(center.0 as isize + dy, self.height);
            for dx in -half..=half {
                let x = reflect_index(center.1 as isize + dx, self.width);
                let src = (y * self.width + x) * PATCH_CHANNELS;
                out[o..o + PATCH_CHANNELS].copy_from_slice(&self.stacked[src..src + PATCH_CHANNELS]);
                o += PATCH_CHANNELS;
            }
        }
        Ok(())
    }

    pub fn extract(&self, center: Center, r: usize, label: u8) -> Result<PatchSample> {
        let mut data = vec![0.0; r * r * PATCH_CHANNELS];
        self.write_patch(center, r, &mut data)?;
        Ok(PatchSample {
            center,
            patch: Tensor::new(&[r, r, PATCH_CHANNELS], data)?,
            label,
            r,
        })
    }

    /// Stacks patches for many centers into a `B×r×r×3` batch.
    pub fn batch(&self, centers: &[Center], r: usize) -> Result<Tensor> {
        let len = r * r * PATCH_CHANNELS;
        let mut data = vec![0.0; centers.len() * len];
        for (c, chunk) in centers.iter().zip(data.chunks_exact_mut(len.max(1))) {
            self.write_patch(*c, r, chunk)?;
        }
        Tensor::new(&[centers.len(), r, r, PATCH_CHANNELS], data)
    }
}

/// One-off patch extraction; prefer [`PatchExtractor`] for many centers.
pub fn extract_patch(
    pair: &ImagePair,
    di: &DifferenceImage,
    center: Center,
    r: usize,
    label: u8,
) -> Result<PatchSample> {
    PatchExtractor::new(pair, di)?.extract(center, r, label)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;

    fn pair_from(a: Vec<f64>, b: Vec<f64>, h: usize, w: usize) -> ImagePair {
        ImagePair::new(Grid::new(h, w, a).unwrap(), Grid::new(h, w, b).unwrap(), None).unwrap()
    }

    #[test]
    fn identical_pair_gives_zero_di() {
        let a: Vec<f64> = (0..12).map(|i| i as f64 * 0.1).collect();
        let p = pair_from(a.clone(), a, 3, 4);
        let di = log_ratio_di(&p, 1e-3).unwrap();
        assert!(di.0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_extremum_normalizes_to_one() {
        let eps = 1e-3;
        let a = vec![1.0; 9];
        let mut b = vec![1.0; 9];
        b[4] = std::f64::consts::E - eps;
        let di = log_ratio_di(&pair_from(a, b, 3, 3), eps).unwrap();
        assert_eq!(di.0.data()[4], 1.0);
        assert_eq!(di.0.data().iter().filter(|&&v| v == 0.0).count(), 8);
    }

    #[test]
    fn mismatched_pair_rejected() {
        let r = ImagePair::new(Grid::filled(2, 2, 1.0), Grid::filled(2, 3, 1.0), None);
        assert!(r.is_err());
        let r = ImagePair::new(Grid::filled(2, 2, 1.0), Grid::filled(2, 2, -1.0), None);
        assert!(r.is_err());
    }

    #[test]
    fn fcm_needs_distinct_values() {
        assert!(fcm(&[0.5; 10], 2, 2.0, 1e-5, 100, 0).is_err());
        assert!(fcm(&[0.1, 0.2], 2, 1.0, 1e-5, 100, 0).is_err());
    }

    #[test]
    fn constant_di_is_all_unchanged() {
        let di = DifferenceImage(Grid::filled(4, 4, 0.3));
        let m = hierarchical_preclassify(&di, 1).unwrap();
        assert_eq!(m.count(PixelClass::Unchanged), 16);
    }

    #[test]
    fn sample_count_and_determinism() {
        let labels = Grid::from_fn(100, 100, |r, _| {
            if r < 20 {
                PixelClass::Changed
            } else {
                PixelClass::Unchanged
            }
        });
        let map = PreclassMap { labels };
        let s = select_training_samples(&map, 0.03, 7).unwrap();
        assert_eq!(s.len(), 300);
        assert_eq!(s, select_training_samples(&map, 0.03, 7).unwrap());
        let changed = s.iter().filter(|c| c.label == 1).count();
        assert_eq!(changed, 60);
        for c in &s {
            assert_eq!(c.label == 1, c.row < 20);
        }
    }

    #[test]
    fn minority_floor_applies() {
        let labels = Grid::from_fn(100, 100, |r, c| {
            if r < 5 && c < 100 {
                PixelClass::Changed
            } else {
                PixelClass::Unchanged
            }
        });
        let s = select_training_samples(&PreclassMap { labels }, 0.05, 3).unwrap();
        assert_eq!(s.len(), 500);
        assert_eq!(s.iter().filter(|c| c.label == 1).count(), 100);
    }

    #[test]
    fn no_changed_pixels_is_an_error() {
        let map = PreclassMap {
            labels: Grid::filled(10, 10, PixelClass::Unchanged),
        };
        assert!(select_training_samples(&map, 0.1, 0).is_err());
    }

    #[test]
    fn ratio_above_confident_fraction_rejected() {
        let labels = Grid::from_fn(10, 10, |r, _| match r {
            0 => PixelClass::Changed,
            1 => PixelClass::Unchanged,
            _ => PixelClass::Uncertain,
        });
        let map = PreclassMap { labels };
        assert!(select_training_samples(&map, 0.5, 0).is_err());
        assert_eq!(select_training_samples(&map, 0.2, 0).unwrap().len(), 20);
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect_index(-1, 5), 1);
        assert_eq!(reflect_index(-2, 5), 2);
        assert_eq!(reflect_index(5, 5), 3);
        assert_eq!(reflect_index(6, 5), 2);
        assert_eq!(reflect_index(3, 1), 0);
        assert_eq!(reflect_index(-3, 2), 1);
    }

    #[test]
    fn patch_errors() {
        let p = pair_from(vec![1.0; 16], vec![2.0; 16], 4, 4);
        let di = log_ratio_di(&p, 1e-3).unwrap();
        assert!(extract_patch(&p, &di, (4, 0), 3, 0).is_err());
        assert!(extract_patch(&p, &di, (0, 0), 4, 0).is_err());
        assert!(extract_patch(&p, &di, (0, 0), 1, 0).is_err());
    }
}
