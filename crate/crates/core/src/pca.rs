//! Three-component PCA of per-patch flow channels for visualization.

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::rng::seeded;
use crate::tensor::Tensor;

pub const PCA_ITERS: usize = 100;
pub const PCA_TOL: f64 = 1e-10;
const PCA_SEED: u64 = 0x5eed_0f_ca;

#[derive(Clone, Debug)]
pub struct PcaRgb {
    /// `N×3`, every entry in `[0, 1]`.
    pub rgb: Tensor,
    /// Variance captured by each of the three components.
    pub explained: [f64; 3],
}

/// Projects the rows of an `N×F` matrix onto its top three principal
/// directions and min-max normalizes each component to `[0, 1]`.
///
/// A component with no spread maps to `0` everywhere.
pub fn pca_rgb(flow: &Tensor) -> Result<PcaRgb> {
    let (n, f) = flow.dims2()?;
    if f < 3 {
        return Err(Error::Validation(format!(
            "PCA to 3 components needs at least 3 channels, got {f}; pad the channels with zeros"
        )));
    }
    if n == 0 {
        return Err(dim_err("PCA needs at least one row"));
    }
    let mut mean = vec![0.0; f];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(flow.row(i)) {
            *m += v / n as f64;
        }
    }
    let centered: Vec<f64> = (0..n)
        .flat_map(|i| flow.row(i).iter().zip(&mean).map(|(v, m)| v - m).collect::<Vec<_>>())
        .collect();
    let mut cov = vec![0.0; f * f];
    for i in 0..n {
        let r = &centered[i * f..(i + 1) * f];
        for a in 0..f {
            for b in 0..f {
                cov[a * f + b] += r[a] * r[b] / n as f64;
            }
        }
    }

    let mut rng = seeded(PCA_SEED);
    let mut explained = [0.0; 3];
    let mut rgb = vec![0.0; n * 3];
    for k in 0..3 {
        let mut v: Vec<f64> = (0..f).map(|_| rng.gen_range(-1.0..1.0)).collect();
        normalize(&mut v);
        for _ in 0..PCA_ITERS {
            let mut w = matvec(&cov, &v, f);
            if normalize(&mut w) == 0.0 {
                v = w;
                break;
            }
            let delta = v.iter().zip(&w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            v = w;
            if delta < PCA_TOL {
                break;
            }
        }
        // fix the sign so the largest loading is positive
        let pivot = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if pivot < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        let cv = matvec(&cov, &v, f);
        let lambda = v.iter().zip(&cv).map(|(a, b)| a * b).sum::<f64>().max(0.0);
        explained[k] = lambda;
        for a in 0..f {
            for b in 0..f {
                cov[a * f + b] -= lambda * v[a] * v[b];
            }
        }
        let proj: Vec<f64> = (0..n)
            .map(|i| centered[i * f..(i + 1) * f].iter().zip(&v).map(|(x, y)| x * y).sum())
            .collect();
        let lo = proj.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = proj.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let spread = hi - lo;
        let negligible = lambda <= 1e-12 * explained[0].max(f64::MIN_POSITIVE) || spread <= 0.0;
        for i in 0..n {
            rgb[i * 3 + k] = if negligible { 0.0 } else { ((proj[i] - lo) / spread).clamp(0.0, 1.0) };
        }
    }
    Ok(PcaRgb {
        rgb: Tensor::new(vec![n, 3], rgb)?,
        explained,
    })
}

/// [`pca_rgb`] for each block's flow matrix.
pub fn pca_flow_rgb(blocks: &[Tensor]) -> Result<Vec<PcaRgb>> {
    blocks.iter().map(pca_rgb).collect()
}

fn matvec(m: &[f64], v: &[f64], f: usize) -> Vec<f64> {
    (0..f).map(|a| (0..f).map(|b| m[a * f + b] * v[b]).sum()).collect()
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_one_input_has_one_component() {
        let dir = [1.0, -2.0, 0.5, 3.0];
        let rows: Vec<f64> = (0..10).flat_map(|i| dir.map(|d| d * i as f64)).collect();
        let out = pca_rgb(&Tensor::new(vec![10, 4], rows).unwrap()).unwrap();
        assert!(out.explained[0] > 1.0);
        assert!(out.explained[1] < 1e-9 * out.explained[0]);
        assert!(out.explained[2] < 1e-9 * out.explained[0]);
        for i in 0..10 {
            assert_eq!(out.rgb.at2(i, 1), 0.0);
            assert_eq!(out.rgb.at2(i, 2), 0.0);
        }
        // monotone ramp in the first channel
        let first: Vec<f64> = (0..10).map(|i| out.rgb.at2(i, 0)).collect();
        assert!(first.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(first[0], 0.0);
        assert_eq!(first[9], 1.0);
    }

    #[test]
    fn duplicated_rows_share_colour_and_values_are_normalized() {
        let mut rng = seeded(5);
        let mut t = Tensor::uniform(vec![8, 5], 2.0, &mut rng);
        let dup = t.row(2).to_vec();
        t.data_mut()[6 * 5..7 * 5].copy_from_slice(&dup);
        let out = pca_rgb(&t).unwrap();
        assert_eq!(out.rgb.row(2), out.rgb.row(6));
        assert!(out.rgb.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(out.explained[0] >= out.explained[1] && out.explained[1] >= out.explained[2]);
    }

    #[test]
    fn too_few_channels_is_rejected() {
        assert!(matches!(pca_rgb(&Tensor::zeros(vec![4, 2])), Err(Error::Validation(_))));
    }

    #[test]
    fn constant_input_maps_to_zero() {
        let out = pca_rgb(&Tensor::ones(vec![6, 4])).unwrap();
        assert!(out.rgb.data().iter().all(|v| *v == 0.0));
    }
}
