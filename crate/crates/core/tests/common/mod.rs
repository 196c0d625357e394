#![allow(dead_code)]

use poolcal_core::data::{assemble, Record};
use poolcal_core::{CategoryScheme, PooledDataset};

/// `(study, stratum, case, w, x_cat if calibrated)`
pub type Row<'a> = (&'a str, &'a str, bool, f64, Option<usize>);

pub fn dataset(rows: &[Row<'_>], categories: usize) -> PooledDataset {
    let scheme = CategoryScheme::direct(categories).unwrap();
    let records = rows
        .iter()
        .enumerate()
        .map(|(i, &(study, stratum, case, w, cat))| Record {
            row: i + 1,
            study_id: study.into(),
            stratum_id: stratum.into(),
            case,
            local_value: Some(w),
            ref_category: cat,
            in_calibration: cat.is_some(),
            ..Record::default()
        })
        .collect();
    assemble(records, &scheme, 0).unwrap()
}

/// Small deterministic generator so fixtures do not depend on the
/// library's own random streams.
pub struct Lcg(pub u64);

impl Lcg {
    pub fn next_f64(&mut self) -> f64 {
        self.0 = self
            .0
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        ((self.0 >> 11) as f64) / ((1u64 << 53) as f64)
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_f64() * n as f64) as usize).min(n - 1)
    }

    /// A random point of the `p`-simplex, bounded away from the faces.
    pub fn simplex(&mut self, p: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..p).map(|_| self.range(0.05, 1.0)).collect();
        let total: f64 = raw.iter().sum();
        raw.iter().map(|v| v / total).collect()
    }
}
