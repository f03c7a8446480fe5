use crate::error::{Error, Result};
use crate::kv::{KvFile, KvReader};

/// Measurement scheme: one `(b, g)` pair per acquired volume.
#[derive(Debug, Clone, PartialEq)]
pub struct DWIProtocol {
    /// s/mm².
    pub bvals: Vec<f64>,
    /// Unit vectors for `b > 0`; ignored for `b = 0`.
    pub bvecs: Vec<[f64; 3]>,
    /// Rician noise level, in units of the signal.
    pub sigma: f64,
}

/// `n` roughly uniform unit vectors on the upper hemisphere.
pub fn fibonacci_hemisphere(n: usize) -> Vec<[f64; 3]> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            [r * phi.cos(), r * phi.sin(), z]
        })
        .collect()
}

fn norm(g: &[f64; 3]) -> f64 {
    (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt()
}

impl DWIProtocol {
    pub fn new(bvals: Vec<f64>, bvecs: Vec<[f64; 3]>, sigma: f64) -> Result<Self> {
        let p = DWIProtocol {
            bvals,
            bvecs,
            sigma,
        };
        p.validate()?;
        Ok(p)
    }

    /// `b0_count` unweighted volumes followed by `directions` at `b`.
    pub fn single_shell(b: f64, directions: usize, b0_count: usize, sigma: f64) -> Result<Self> {
        let mut bvals = vec![0.0; b0_count];
        let mut bvecs = vec![[0.0; 3]; b0_count];
        for g in fibonacci_hemisphere(directions) {
            bvals.push(b);
            bvecs.push(g);
        }
        Self::new(bvals, bvecs, sigma)
    }

    /// b = 1000 s/mm², 30 directions, two b0 volumes, sigma 0.01.
    pub fn toy() -> Self {
        Self::single_shell(1000.0, 30, 2, 0.01).expect("valid default protocol")
    }

    pub fn measurements(&self) -> usize {
        self.bvals.len()
    }

    pub fn is_b0(&self, k: usize) -> bool {
        self.bvals[k] == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.bvals.len() != self.bvecs.len() {
            return Err(Error::Protocol(format!(
                "{} b-values for {} directions",
                self.bvals.len(),
                self.bvecs.len()
            )));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Protocol(format!(
                "noise sigma must be >= 0, got {}",
                self.sigma
            )));
        }
        let mut unique: Vec<[f64; 3]> = Vec::new();
        let mut b0 = 0;
        for (k, (&b, g)) in self.bvals.iter().zip(&self.bvecs).enumerate() {
            if !(b >= 0.0 && b.is_finite()) {
                return Err(Error::Protocol(format!(
                    "measurement {k}: invalid b-value {b}"
                )));
            }
            if b == 0.0 {
                b0 += 1;
                continue;
            }
            if (norm(g) - 1.0).abs() > 1e-6 {
                return Err(Error::Protocol(format!(
                    "measurement {k}: direction {g:?} is not unit length"
                )));
            }
            // Antipodal directions measure the same thing.
            let same = |u: &[f64; 3]| {
                let d: f64 = (0..3).map(|i| u[i] * g[i]).sum();
                (d.abs() - 1.0).abs() < 1e-9
            };
            if !unique.iter().any(same) {
                unique.push(*g);
            }
        }
        if b0 == 0 {
            return Err(Error::Protocol(
                "protocol needs at least one b = 0 volume".into(),
            ));
        }
        if unique.len() < 6 {
            return Err(Error::Protocol(format!(
                "protocol needs at least 6 distinct diffusion directions, got {}",
                unique.len()
            )));
        }
        Ok(())
    }

    /// Single-shell protocol from `b`, `directions`, `b0` and `sigma` keys.
    pub fn from_kv(r: &KvReader<'_>) -> Result<Self> {
        Self::single_shell(
            r.get_or("b", 1000.0)?,
            r.get_or("directions", 30)?,
            r.get_or("b0", 2)?,
            r.get_or("sigma", 0.01)?,
        )
    }

    /// Inverse of [`DWIProtocol::from_kv`] for single-shell protocols.
    pub fn to_kv(&self) -> KvFile {
        let b = self.bvals.iter().copied().find(|&b| b > 0.0).unwrap_or(0.0);
        let mut f = KvFile::new();
        f.set("b", b);
        f.set(
            "directions",
            self.bvals.iter().filter(|&&b| b > 0.0).count(),
        );
        f.set("b0", self.bvals.iter().filter(|&&b| b == 0.0).count());
        f.set("sigma", self.sigma);
        f
    }
}
