//! Writes `data/synthetic_pooled.csv`: two studies, 615 matched sets,
//! mostly one case to two controls (about 97%), with 29 re-assayed controls per study.
//! Biomarker values are on a nmol/L-like scale cut at 30 and 50.

use std::io::Write;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

struct Lab {
    name: &'static str,
    strata: usize,
    intercept: f64,
    slope: f64,
    noise: f64,
}

const LABS: [Lab; 2] = [
    Lab {
        name: "studyA",
        strata: 267,
        intercept: 8.0,
        slope: 0.8,
        noise: 15.0,
    },
    Lab {
        name: "studyB",
        strata: 348,
        intercept: -5.0,
        slope: 1.15,
        noise: 20.0,
    },
];
const LOG_RR: [f64; 3] = [0.0, -0.22, -0.43];
const Z_EFFECT: f64 = 0.2;
const CALIBRATION_SIZE: usize = 29;

fn level(x: f64) -> usize {
    if x < 30.0 {
        0
    } else if x < 50.0 {
        1
    } else {
        2
    }
}

fn main() -> std::io::Result<()> {
    let out = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/data/synthetic_pooled.csv").into());
    let mut rng = ChaCha20Rng::seed_from_u64(615);
    let truth: Normal<f64> = Normal::new(52.0, 20.0).unwrap();
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let mut file = std::io::BufWriter::new(std::fs::File::create(&out)?);
    writeln!(file, "study_id,stratum_id,id,case,w,z1,x_cat,x,in_calibration")?;
    for lab in &LABS {
        let lab_noise = Normal::new(0.0, lab.noise).unwrap();
        let mut rows = Vec::new();
        for j in 1..=lab.strata {
            let size = if rng.random::<f64>() < 0.97 { 3 } else { 2 };
            let members: Vec<(f64, f64, f64)> = (0..size)
                .map(|_| {
                    let x: f64 = truth.sample(&mut rng);
                    let x = x.max(5.0);
                    let w = lab.intercept + lab.slope * x + lab_noise.sample(&mut rng);
                    let z: f64 = std_normal.sample(&mut rng);
                    (
                        (x * 10.0).round() / 10.0,
                        (w.max(1.0) * 10.0).round() / 10.0,
                        (z * 100.0).round() / 100.0,
                    )
                })
                .collect();
            let weights: Vec<f64> = members
                .iter()
                .map(|&(x, _, z)| (LOG_RR[level(x)] + Z_EFFECT * z).exp())
                .collect();
            let mut u = rng.random::<f64>() * weights.iter().sum::<f64>();
            let mut case = size - 1;
            for (i, wt) in weights.iter().enumerate() {
                if u < *wt {
                    case = i;
                    break;
                }
                u -= wt;
            }
            for (i, m) in members.into_iter().enumerate() {
                rows.push((j, i, i == case, m));
            }
        }
        let controls: Vec<usize> = (0..rows.len()).filter(|&r| !rows[r].2).collect();
        let mut chosen = vec![false; rows.len()];
        for k in sample(&mut rng, controls.len(), CALIBRATION_SIZE) {
            chosen[controls[k]] = true;
        }
        for (r, &(j, i, case, (x, w, z))) in rows.iter().enumerate() {
            let (x_cat, x_val) = if chosen[r] {
                ((level(x) + 1).to_string(), x.to_string())
            } else {
                (String::new(), String::new())
            };
            writeln!(
                file,
                "{},{j},{}-{j:03}-{},{},{w},{z},{x_cat},{x_val},{}",
                lab.name,
                lab.name,
                i + 1,
                u8::from(case),
                u8::from(chosen[r])
            )?;
        }
    }
    file.flush()
}
