use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::protocol::DWIProtocol;
use super::Tensor;
use crate::error::{Error, Result};
use crate::volume::Volume;

/// Relative eigenvalue gap below which the closed form gives way to Jacobi
/// rotations.
const DEGENERACY_GAP: f64 = 1e-4;

/// Floor for non-positive signals, relative to S0.
const SIGNAL_FLOOR: f64 = 1e-6;

fn quadratic_form(t: &Tensor, g: &[f64; 3]) -> f64 {
    t[0] * g[0] * g[0]
        + t[1] * g[1] * g[1]
        + t[2] * g[2] * g[2]
        + 2.0 * (t[3] * g[0] * g[1] + t[4] * g[0] * g[2] + t[5] * g[1] * g[2])
}

fn full(t: &Tensor) -> [[f64; 3]; 3] {
    [[t[0], t[3], t[4]], [t[3], t[1], t[5]], [t[4], t[5], t[2]]]
}

fn sort_desc(mut v: [f64; 3]) -> [f64; 3] {
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

fn jacobi_eigenvalues(t: &Tensor) -> [f64; 3] {
    let mut a = full(t);
    for _ in 0..50 {
        let off = a[0][1].powi(2) + a[0][2].powi(2) + a[1][2].powi(2);
        if off == 0.0 {
            break;
        }
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            if a[p][q] == 0.0 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
            let tn = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let tn = if theta == 0.0 { 1.0 } else { tn };
            let c = 1.0 / (tn * tn + 1.0).sqrt();
            let s = tn * c;
            for k in 0..3 {
                let (akp, akq) = (a[k][p], a[k][q]);
                a[k][p] = c * akp - s * akq;
                a[k][q] = s * akp + c * akq;
            }
            for k in 0..3 {
                let (apk, aqk) = (a[p][k], a[q][k]);
                a[p][k] = c * apk - s * aqk;
                a[q][k] = s * apk + c * aqk;
            }
        }
    }
    sort_desc([a[0][0], a[1][1], a[2][2]])
}

/// Eigenvalues of a symmetric tensor, largest first.
pub fn eigenvalues(t: &Tensor) -> [f64; 3] {
    let p1 = t[3] * t[3] + t[4] * t[4] + t[5] * t[5];
    if p1 == 0.0 {
        return sort_desc([t[0], t[1], t[2]]);
    }
    let q = (t[0] + t[1] + t[2]) / 3.0;
    let p2 = (t[0] - q).powi(2) + (t[1] - q).powi(2) + (t[2] - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    let b = full(&[
        (t[0] - q) / p,
        (t[1] - q) / p,
        (t[2] - q) / p,
        t[3] / p,
        t[4] / p,
        t[5] / p,
    ]);
    let det = b[0][0] * (b[1][1] * b[2][2] - b[1][2] * b[2][1])
        - b[0][1] * (b[1][0] * b[2][2] - b[1][2] * b[2][0])
        + b[0][2] * (b[1][0] * b[2][1] - b[1][1] * b[2][0]);
    let phi = (0.5 * det).clamp(-1.0, 1.0).acos() / 3.0;
    let l1 = q + 2.0 * p * phi.cos();
    let l3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::FRAC_PI_3).cos();
    let l2 = 3.0 * q - l1 - l3;
    let scale = l1.abs().max(l3.abs());
    let gap = (l1 - l2).min(l2 - l3);
    if scale > 0.0 && gap < DEGENERACY_GAP * scale {
        return jacobi_eigenvalues(t);
    }
    [l1, l2, l3]
}

/// `(FA, MD, E1, E2, E3)` of one tensor.
pub fn tensor_params(t: &Tensor) -> [f64; 5] {
    let [l1, l2, l3] = eigenvalues(t);
    let md = (l1 + l2 + l3) / 3.0;
    let num = (l1 - md).powi(2) + (l2 - md).powi(2) + (l3 - md).powi(2);
    let den = l1 * l1 + l2 * l2 + l3 * l3;
    let fa = if den > 0.0 {
        (1.5 * num / den).sqrt().clamp(0.0, 1.0)
    } else {
        0.0
    };
    [fa, md, l1, l2, l3]
}

fn tensor_at(tensors: &Volume<f64>, m: usize) -> Tensor {
    let n = tensors.dims().voxels();
    let d = tensors.data();
    std::array::from_fn(|c| d[c * n + m])
}

fn require_tensor_field(tensors: &Volume<f64>) -> Result<()> {
    if tensors.channels() != 6 {
        return Err(Error::shape(format!(
            "tensor field needs 6 channels, got {}",
            tensors.channels()
        )));
    }
    Ok(())
}

/// Scatters per-voxel records into a channel-major volume.
fn assemble<const C: usize>(like: &Volume<f64>, per_voxel: Vec<[f64; C]>) -> Result<Volume<f64>> {
    let n = per_voxel.len();
    let mut data = vec![0.0; C * n];
    for (m, v) in per_voxel.iter().enumerate() {
        for c in 0..C {
            data[c * n + m] = v[c];
        }
    }
    Volume::new(like.dims(), C, like.voxel_size(), data)
}

/// Five-channel `(FA, MD, E1, E2, E3)` maps.
pub fn derive_params(tensors: &Volume<f64>) -> Result<Volume<f64>> {
    require_tensor_field(tensors)?;
    let per_voxel: Vec<[f64; 5]> = (0..tensors.dims().voxels())
        .into_par_iter()
        .map(|m| tensor_params(&tensor_at(tensors, m)))
        .collect();
    assemble(tensors, per_voxel)
}

/// Signal per measurement, with Rician noise when `sigma > 0`. Each voxel
/// draws from its own counter-based stream, so results do not depend on
/// scheduling.
pub fn simulate_dwi(
    tensors: &Volume<f64>,
    s0: &Volume<f64>,
    protocol: &DWIProtocol,
    seed: u64,
) -> Result<Volume<f64>> {
    require_tensor_field(tensors)?;
    protocol.validate()?;
    if s0.dims() != tensors.dims() || s0.channels() != 1 {
        return Err(Error::shape(
            "S0 map must be one channel with the tensor field's dims",
        ));
    }
    let n = tensors.dims().voxels();
    let k_total = protocol.measurements();
    let sigma = protocol.sigma;
    let per_voxel: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|m| {
            let t = tensor_at(tensors, m);
            let base = s0.data()[m];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(m as u64);
            (0..k_total)
                .map(|k| {
                    let s =
                        base * (-protocol.bvals[k] * quadratic_form(&t, &protocol.bvecs[k])).exp();
                    if sigma > 0.0 {
                        let e1: f64 = rng.sample::<f64, _>(StandardNormal) * sigma;
                        let e2: f64 = rng.sample::<f64, _>(StandardNormal) * sigma;
                        ((s + e1).powi(2) + e2 * e2).sqrt()
                    } else {
                        s
                    }
                })
                .collect()
        })
        .collect();
    let mut data = vec![0.0; k_total * n];
    for (m, v) in per_voxel.iter().enumerate() {
        for (k, &s) in v.iter().enumerate() {
            data[k * n + m] = s;
        }
    }
    Volume::new(tensors.dims(), k_total, tensors.voxel_size(), data)
}

/// Log-linear least-squares tensor fit.
pub fn fit_dti(dwi: &Volume<f64>, protocol: &DWIProtocol) -> Result<Volume<f64>> {
    if dwi.channels() != protocol.measurements() || protocol.bvecs.len() != protocol.bvals.len() {
        return Err(Error::shape(format!(
            "DWI has {} measurements, protocol has {}",
            dwi.channels(),
            protocol.measurements()
        )));
    }
    let b0: Vec<usize> = (0..protocol.measurements())
        .filter(|&k| protocol.is_b0(k))
        .collect();
    let weighted: Vec<usize> = (0..protocol.measurements())
        .filter(|&k| !protocol.is_b0(k))
        .collect();
    if b0.is_empty() {
        return Err(Error::Protocol(
            "fit needs at least one b = 0 measurement".into(),
        ));
    }
    let rows = weighted.len();
    let design = DMatrix::from_fn(rows.max(1), 6, |i, j| {
        if rows == 0 {
            return 0.0;
        }
        let k = weighted[i];
        let g = protocol.bvecs[k];
        let coef = match j {
            0 => g[0] * g[0],
            1 => g[1] * g[1],
            2 => g[2] * g[2],
            3 => 2.0 * g[0] * g[1],
            4 => 2.0 * g[0] * g[2],
            _ => 2.0 * g[1] * g[2],
        };
        -protocol.bvals[k] * coef
    });
    let svd = design.svd(true, true);
    let smax = svd.singular_values.max();
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&s| s > 1e-10 * smax)
        .count();
    if rows < 6 || rank < 6 {
        return Err(Error::Protocol(format!(
            "design matrix has rank {rank} < 6; directions are degenerate"
        )));
    }
    let pinv = svd
        .pseudo_inverse(1e-10 * smax)
        .map_err(|e| Error::Protocol(e.to_string()))?;
    let n = dwi.dims().voxels();
    let data = dwi.data();
    let per_voxel: Vec<[f64; 6]> = (0..n)
        .into_par_iter()
        .map(|m| {
            let s0 = b0.iter().map(|&k| data[k * n + m]).sum::<f64>() / b0.len() as f64;
            if s0 <= 0.0 {
                return [0.0; 6];
            }
            let floor = SIGNAL_FLOOR * s0;
            let y = DVector::from_iterator(
                rows,
                weighted
                    .iter()
                    .map(|&k| (data[k * n + m].max(floor) / s0).ln()),
            );
            let d = &pinv * y;
            std::array::from_fn(|c| d[c])
        })
        .collect();
    assemble(dwi, per_voxel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{diagonal, isotropic};
    use crate::volume::{Dims, DEFAULT_VOXEL_SIZE};

    fn constant_field(t: Tensor, dims: Dims) -> (Volume<f64>, Volume<f64>) {
        let tensors = Volume::from_fn(dims, 6, DEFAULT_VOXEL_SIZE, |c, _| t[c]).unwrap();
        let s0 = Volume::from_fn(dims, 1, DEFAULT_VOXEL_SIZE, |_, _| 1.0).unwrap();
        (tensors, s0)
    }

    fn rotated(l: [f64; 3], angle: f64) -> Tensor {
        // R diag(l) R^T with R a rotation about (1, 1, 1)/sqrt(3).
        let u = [1.0 / 3f64.sqrt(); 3];
        let (c, s) = (angle.cos(), angle.sin());
        let r: [[f64; 3]; 3] = std::array::from_fn(|i| {
            std::array::from_fn(|j| {
                let cross = match (i, j) {
                    (0, 1) => -u[2],
                    (0, 2) => u[1],
                    (1, 0) => u[2],
                    (1, 2) => -u[0],
                    (2, 0) => -u[1],
                    (2, 1) => u[0],
                    _ => 0.0,
                };
                (if i == j { c } else { 0.0 }) + s * cross + (1.0 - c) * u[i] * u[j]
            })
        });
        let e = |i: usize, j: usize| (0..3).map(|k| r[i][k] * l[k] * r[j][k]).sum::<f64>();
        [e(0, 0), e(1, 1), e(2, 2), e(0, 1), e(0, 2), e(1, 2)]
    }

    #[test]
    fn scalar_params() {
        let [fa, md, e1, e2, e3] = tensor_params(&diagonal(1.7e-3, 0.3e-3, 0.3e-3));
        assert!((md - 7.666666666666667e-4).abs() < 1e-15);
        assert!((fa - 0.7990222037494893).abs() < 1e-12, "{fa}");
        assert_eq!([e1, e2, e3], [1.7e-3, 0.3e-3, 0.3e-3]);
        let [fa, md, e1, e2, e3] = tensor_params(&isotropic(1e-3));
        assert_eq!((fa, md, e1, e2, e3), (0.0, 1e-3, 1e-3, 1e-3, 1e-3));
        assert!((tensor_params(&diagonal(1e-3, 0.0, 0.0))[0] - 1.0).abs() < 1e-15);
        assert_eq!(tensor_params(&[0.0; 6])[0], 0.0);
    }

    #[test]
    fn eigenvalues_of_rotated_tensors() {
        for (l, angle) in [
            ([1.7e-3, 0.3e-3, 0.2e-3], 0.7),
            ([2.0e-3, 1.0e-3, 1.0e-3], 1.3),
            ([1.0e-3, 1.0e-3, 1.0e-3], 0.4),
            ([3.0, 2.0, 1.0], 2.1),
        ] {
            let ev = eigenvalues(&rotated(l, angle));
            for i in 0..3 {
                assert!((ev[i] - l[i]).abs() <= 1e-12 * l[0], "{l:?} {ev:?}");
            }
            let jac = jacobi_eigenvalues(&rotated(l, angle));
            for i in 0..3 {
                assert!((jac[i] - l[i]).abs() <= 1e-12 * l[0], "{l:?} {jac:?}");
            }
        }
    }

    #[test]
    fn signal_equation() {
        let dims = Dims::new(2, 1, 1);
        let (t, s0) = constant_field(diagonal(1.7e-3, 0.3e-3, 0.3e-3), dims);
        let mut bvals = vec![0.0, 1000.0];
        let mut bvecs = vec![[0.0; 3], [1.0, 0.0, 0.0]];
        for g in super::super::fibonacci_hemisphere(6) {
            bvals.push(1000.0);
            bvecs.push(g);
        }
        let p = DWIProtocol::new(bvals, bvecs, 0.0).unwrap();
        let dwi = simulate_dwi(&t, &s0, &p, 0).unwrap();
        assert_eq!(dwi.get(0, 0, 0, 0), 1.0);
        assert!((dwi.get(1, 0, 0, 0) - 0.18268352405273466).abs() < 1e-15);

        let (t, s0) = constant_field(isotropic(0.8e-3), dims);
        let dwi = simulate_dwi(&t, &s0, &p, 0).unwrap();
        for k in 1..p.measurements() {
            assert!((dwi.get(k, 1, 0, 0) - (-0.8f64).exp()).abs() < 1e-14);
        }
    }

    #[test]
    fn noiseless_round_trip() {
        let dims = Dims::new(3, 2, 2);
        let truth = rotated([1.7e-3, 0.5e-3, 0.3e-3], 0.9);
        let (t, s0) = constant_field(truth, dims);
        let p = DWIProtocol::single_shell(1000.0, 30, 2, 0.0).unwrap();
        let fit = fit_dti(&simulate_dwi(&t, &s0, &p, 0).unwrap(), &p).unwrap();
        for c in 0..6 {
            for &v in fit.channel(c) {
                assert!(
                    (v - truth[c]).abs() <= 1e-8,
                    "component {c}: {v} vs {}",
                    truth[c]
                );
            }
        }
        let a = derive_params(&fit).unwrap();
        let b = derive_params(&t).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-7);
        }
    }

    #[test]
    fn noisy_fit_rmse() {
        let dims = Dims::new(16, 16, 8);
        let truth = diagonal(1.7e-3, 0.3e-3, 0.3e-3);
        let (t, s0) = constant_field(truth, dims);
        let p = DWIProtocol::single_shell(1000.0, 30, 2, 0.01).unwrap();
        let fit = fit_dti(&simulate_dwi(&t, &s0, &p, 7).unwrap(), &p).unwrap();
        let n = dims.voxels() as f64;
        for c in 0..6 {
            let rmse = (fit
                .channel(c)
                .iter()
                .map(|v| (v - truth[c]).powi(2))
                .sum::<f64>()
                / n)
                .sqrt();
            assert!(rmse < 5e-5, "component {c}: rmse {rmse}");
        }
    }

    #[test]
    fn noise_is_reproducible_and_per_voxel() {
        let dims = Dims::new(4, 4, 2);
        let (t, s0) = constant_field(isotropic(1e-3), dims);
        let p = DWIProtocol::toy();
        let a = simulate_dwi(&t, &s0, &p, 11).unwrap();
        assert_eq!(a, simulate_dwi(&t, &s0, &p, 11).unwrap());
        assert_ne!(a, simulate_dwi(&t, &s0, &p, 12).unwrap());
        assert_ne!(a.get(3, 0, 0, 0), a.get(3, 1, 0, 0));
    }

    #[test]
    fn degenerate_protocols_rejected() {
        let dims = Dims::new(2, 2, 1);
        let dwi = Volume::from_fn(dims, 3, DEFAULT_VOXEL_SIZE, |_, _| 1.0).unwrap();
        let only_b0 = DWIProtocol {
            bvals: vec![0.0; 3],
            bvecs: vec![[0.0; 3]; 3],
            sigma: 0.0,
        };
        assert!(matches!(fit_dti(&dwi, &only_b0), Err(Error::Protocol(_))));
        let planar = DWIProtocol {
            bvals: vec![0.0, 1000.0, 1000.0],
            bvecs: vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            sigma: 0.0,
        };
        assert!(matches!(fit_dti(&dwi, &planar), Err(Error::Protocol(_))));
        let no_b0 = DWIProtocol {
            bvals: vec![1000.0; 3],
            bvecs: vec![[1.0, 0.0, 0.0]; 3],
            sigma: 0.0,
        };
        assert!(matches!(fit_dti(&dwi, &no_b0), Err(Error::Protocol(_))));
    }

    #[test]
    fn nonpositive_signal_is_floored() {
        let dims = Dims::new(1, 1, 1);
        let p = DWIProtocol::single_shell(1000.0, 6, 1, 0.0).unwrap();
        let mut vals = vec![1.0; 7];
        vals[3] = -0.5;
        let dwi = Volume::new(dims, 7, DEFAULT_VOXEL_SIZE, vals).unwrap();
        let fit = fit_dti(&dwi, &p).unwrap();
        assert!(fit.data().iter().all(|v| v.is_finite()));
    }
}
