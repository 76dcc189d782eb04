//! Class centers maintained by exponential moving average.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::store::StoreError;

pub const CENTER_INIT_SCALE: f64 = 0.02;
pub const DEFAULT_GAMMA2: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum CenterError {
    #[error("class {class} out of range for {k} centers")]
    ClassOutOfRange { class: usize, k: usize },
    #[error("expected a vector of length {expected}, got {found}")]
    Dim { expected: usize, found: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("class {0} has no samples")]
    EmptyClass(usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// `K` centers of width `e` with their EMA rate.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterBank {
    centers: Array2<f64>,
    pub gamma2: f64,
    update_count: Vec<u64>,
}

impl CenterBank {
    pub fn from_centers(centers: Array2<f64>, gamma2: f64) -> Result<CenterBank, CenterError> {
        if centers.iter().any(|v| !v.is_finite()) {
            return Err(CenterError::NonFinite("centers"));
        }
        let k = centers.nrows();
        Ok(CenterBank { centers, gamma2, update_count: vec![0; k] })
    }

    /// i.i.d. standard normal entries scaled by 0.02.
    pub fn init_gaussian(k: usize, e: usize, seed: u64, gamma2: f64) -> CenterBank {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers = Array2::from_shape_simple_fn((k, e), || {
            CENTER_INIT_SCALE * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
        });
        CenterBank { centers, gamma2, update_count: vec![0; k] }
    }

    pub fn num_classes(&self) -> usize {
        self.centers.nrows()
    }

    pub fn width(&self) -> usize {
        self.centers.ncols()
    }

    pub fn centers(&self) -> &Array2<f64> {
        &self.centers
    }

    pub fn center(&self, class: usize) -> ArrayView1<'_, f64> {
        self.centers.row(class)
    }

    pub fn update_count(&self, class: usize) -> u64 {
        self.update_count[class]
    }

    /// `μ_c ← (1 − γ₂)·μ_c + γ₂·target`; no other row is touched.
    pub fn ema_update(&mut self, class: usize, target: ArrayView1<'_, f64>) -> Result<(), CenterError> {
        let k = self.num_classes();
        if class >= k {
            return Err(CenterError::ClassOutOfRange { class, k });
        }
        if target.len() != self.width() {
            return Err(CenterError::Dim { expected: self.width(), found: target.len() });
        }
        if target.iter().any(|v| !v.is_finite()) {
            return Err(CenterError::NonFinite("EMA target"));
        }
        let g = self.gamma2;
        self.centers
            .row_mut(class)
            .zip_mut_with(&target, |mu, &t| *mu = (1.0 - g) * *mu + g * t);
        self.update_count[class] += 1;
        Ok(())
    }

    pub fn round_to_f32(&mut self) {
        self.centers.mapv_inplace(|v| v as f32 as f64);
    }

    /// Per-class arithmetic mean of `vectors`; every class in `0..k` needs at
    /// least one vector.
    pub fn from_class_means<'a>(
        k: usize,
        vectors: impl IntoIterator<Item = (usize, ArrayView1<'a, f64>)>,
    ) -> Result<CenterBank, CenterError> {
        let mut sums: Option<Array2<f64>> = None;
        let mut counts = vec![0usize; k];
        for (class, v) in vectors {
            if class >= k {
                return Err(CenterError::ClassOutOfRange { class, k });
            }
            let sums = sums.get_or_insert_with(|| Array2::zeros((k, v.len())));
            if v.len() != sums.ncols() {
                return Err(CenterError::Dim { expected: sums.ncols(), found: v.len() });
            }
            sums.row_mut(class).scaled_add(1.0, &v);
            counts[class] += 1;
        }
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(CenterError::EmptyClass(c));
        }
        let mut sums = sums.expect("k > 0 and every class non-empty");
        for (mut row, &n) in sums.rows_mut().into_iter().zip(&counts) {
            row.mapv_inplace(|v| v / n as f64);
        }
        CenterBank::from_centers(sums, 0.0)
    }
}

pub const CENTERS_MAGIC: &[u8; 4] = b"TGCB";

/// `"TGCB" | K u32 | e u32 | gamma2 f32 | centers K·e f32`.
pub fn encode_centers(bank: &CenterBank) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + 4 * bank.centers.len());
    buf.extend_from_slice(CENTERS_MAGIC);
    buf.extend_from_slice(&(bank.num_classes() as u32).to_le_bytes());
    buf.extend_from_slice(&(bank.width() as u32).to_le_bytes());
    buf.extend_from_slice(&(bank.gamma2 as f32).to_le_bytes());
    for &v in bank.centers.iter() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    buf
}

pub fn decode_centers(bytes: &[u8]) -> Result<CenterBank, CenterError> {
    let bad = |m: String| CenterError::Checkpoint(m);
    if bytes.len() < 16 {
        return Err(bad("truncated header".into()));
    }
    if &bytes[..4] != CENTERS_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let k = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let e = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let gamma2 = f32::from_le_bytes(bytes[12..16].try_into().unwrap()) as f64;
    if bytes.len() != 16 + 4 * k * e {
        return Err(bad(format!("expected {} bytes, found {}", 16 + 4 * k * e, bytes.len())));
    }
    let values: Vec<f64> = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    CenterBank::from_centers(Array2::from_shape_vec((k, e), values).unwrap(), gamma2)
}

pub fn save_centers(bank: &CenterBank, path: &Path) -> Result<(), CenterError> {
    fs::write(path, encode_centers(bank)).map_err(|e| StoreError::io(path, e).into())
}

pub fn load_centers(path: &Path) -> Result<CenterBank, CenterError> {
    let bytes = fs::read(path).map_err(|e| StoreError::io(path, e))?;
    decode_centers(&bytes)
}

pub(crate) fn l2(v: ArrayView1<'_, f64>) -> f64 {
    v.dot(&v).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};
    use proptest::prelude::*;

    #[test]
    fn gaussian_init_is_seeded() {
        let a = CenterBank::init_gaussian(4, 8, 3, DEFAULT_GAMMA2);
        assert_eq!(a, CenterBank::init_gaussian(4, 8, 3, DEFAULT_GAMMA2));
        assert_ne!(a, CenterBank::init_gaussian(4, 8, 4, DEFAULT_GAMMA2));
        let big = CenterBank::init_gaussian(1000, 512, 0, DEFAULT_GAMMA2);
        assert_eq!(big.centers().dim(), (1000, 512));
        let std = (big.centers().iter().map(|v| v * v).sum::<f64>() / (1000.0 * 512.0)).sqrt();
        assert!((std - 0.02).abs() < 2e-4, "{std}");
    }

    #[test]
    fn update_from_zero_center() {
        let mut bank = CenterBank::from_centers(Array2::zeros((2, 3)), 1e-4).unwrap();
        bank.ema_update(1, array![1.0, -2.0, 4.0].view()).unwrap();
        assert_eq!(bank.center(1).to_vec(), vec![1e-4, -2e-4, 4e-4]);
        assert_eq!(bank.center(0).to_vec(), vec![0.0; 3]);
        assert_eq!(bank.update_count(1), 1);
        assert_eq!(bank.update_count(0), 0);
    }

    #[test]
    fn target_equal_to_center_is_fixed() {
        let v = array![0.3, -0.7, 1.1];
        let mut bank = CenterBank::from_centers(v.clone().insert_axis(ndarray::Axis(0)), 1e-4).unwrap();
        bank.ema_update(0, v.view()).unwrap();
        for (a, b) in bank.center(0).iter().zip(&v) {
            assert!((a - b).abs() <= 1e-16);
        }
    }

    #[test]
    fn two_updates_match_unrolled_recurrence() {
        let g: f64 = 1e-4;
        let mu0 = array![0.5, -1.0];
        let (v1, v2) = (array![2.0, 3.0], array![-4.0, 0.25]);
        let mut bank = CenterBank::from_centers(mu0.clone().insert_axis(ndarray::Axis(0)), g).unwrap();
        bank.ema_update(0, v1.view()).unwrap();
        bank.ema_update(0, v2.view()).unwrap();
        let expected = &mu0 * (1.0 - g).powi(2) + &v1 * (g * (1.0 - g)) + &v2 * g;
        for (a, b) in bank.center(0).iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn out_of_range_and_bad_target() {
        let mut bank = CenterBank::init_gaussian(2, 3, 0, 1e-4);
        assert!(matches!(bank.ema_update(2, array![0.0, 0.0, 0.0].view()), Err(CenterError::ClassOutOfRange { .. })));
        assert!(matches!(bank.ema_update(0, array![0.0].view()), Err(CenterError::Dim { .. })));
        assert!(matches!(bank.ema_update(0, array![f64::NAN, 0.0, 0.0].view()), Err(CenterError::NonFinite(_))));
    }

    #[test]
    fn class_means() {
        let vs = [array![1.0, 2.0], array![3.0, 4.0], array![-1.0, 0.0]];
        let bank = CenterBank::from_class_means(2, [(0, vs[0].view()), (0, vs[1].view()), (1, vs[2].view())]).unwrap();
        assert_eq!(bank.center(0).to_vec(), vec![2.0, 3.0]);
        assert_eq!(bank.center(1).to_vec(), vec![-1.0, 0.0]);
        assert!(matches!(
            CenterBank::from_class_means(3, [(0, vs[0].view())]),
            Err(CenterError::EmptyClass(1))
        ));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut bank = CenterBank::init_gaussian(3, 5, 9, 1e-4);
        bank.round_to_f32();
        let bytes = encode_centers(&bank);
        assert_eq!(bytes.len(), 16 + 4 * 15);
        let back = decode_centers(&bytes).unwrap();
        assert_eq!(back.centers(), bank.centers());
        assert_eq!(back.gamma2, 1e-4f32 as f64);
        assert!(decode_centers(&bytes[..20]).is_err());
    }

    proptest! {
        #[test]
        fn update_is_convex_and_local(
            mu in proptest::collection::vec(-5.0f64..5.0, 4),
            other in proptest::collection::vec(-5.0f64..5.0, 4),
            target in proptest::collection::vec(-5.0f64..5.0, 4),
            gamma in 0.0f64..=1.0,
        ) {
            let centers = Array2::from_shape_vec((2, 4), mu.iter().chain(&other).copied().collect()).unwrap();
            let mut bank = CenterBank::from_centers(centers, gamma).unwrap();
            let before = bank.clone();
            let t = Array1::from(target);
            bank.ema_update(0, t.view()).unwrap();
            // untouched row is bit-identical
            prop_assert_eq!(bank.center(1), before.center(1));
            let new = bank.center(0).to_owned();
            let old = before.center(0).to_owned();
            prop_assert!(l2(new.view()) <= l2(old.view()).max(l2(t.view())) + 1e-12);
            for i in 0..4 {
                let (lo, hi) = (old[i].min(t[i]), old[i].max(t[i]));
                prop_assert!(new[i] >= lo - 1e-12 && new[i] <= hi + 1e-12);
            }
        }
    }
}
