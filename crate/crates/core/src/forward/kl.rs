//! Truncated Karhunen–Loève basis for a squared-exponential Gaussian field
//! on the nodal grid of the unit square.
//!
//! With uniform `h²` quadrature weights the weighted covariance matrix is
//! `σ_v² (K₁·h) ⊗ (K₁·h)`, where `K₁` is the 1-D kernel matrix on the grid
//! coordinates. Its eigenpairs are products of the 1-D eigenpairs, so only
//! an `n × n` symmetric eigenproblem is solved.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};

use super::field::Field2D;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct KlConstants {
    /// Nodes per side.
    pub grid: usize,
    pub sigma_v: f64,
    /// Squared length scale `ℓ²`.
    pub length_sq: f64,
    pub n_modes: usize,
}

impl Default for KlConstants {
    fn default() -> Self {
        Self {
            grid: 65,
            sigma_v: 1.0,
            length_sq: 0.1,
            n_modes: 16,
        }
    }
}

impl KlConstants {
    pub fn h(&self) -> f64 {
        1.0 / (self.grid - 1) as f64
    }

    /// `c(x, z) = σ_v² exp(−‖x − z‖² / 2ℓ²)`
    pub fn kernel(&self, a: (f64, f64), b: (f64, f64)) -> f64 {
        let d2 = (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2);
        self.sigma_v * self.sigma_v * (-d2 / (2.0 * self.length_sq)).exp()
    }

    fn cache_name(&self) -> String {
        format!(
            "kl_g{}_sv{:016x}_l{:016x}_m{}.bin",
            self.grid,
            self.sigma_v.to_bits(),
            self.length_sq.to_bits(),
            self.n_modes
        )
    }
}

/// Leading eigenpairs of the weighted covariance operator.
#[derive(Clone, Debug, PartialEq)]
pub struct KlBasis {
    pub constants: KlConstants,
    /// Non-increasing.
    pub eigenvalues: Vec<f64>,
    /// `φ_k` at every node, normalized so that `Σ φ_k² h² = 1`.
    pub modes: Vec<Vec<f64>>,
    /// Trace of the weighted covariance, i.e. the sum of all eigenvalues.
    pub total_variance: f64,
}

const CACHE_MAGIC: &[u8; 4] = b"CFMK";
const CACHE_VERSION: u32 = 1;

impl KlBasis {
    pub fn build(constants: &KlConstants) -> Result<Self> {
        let n = constants.grid;
        if n < 2 || constants.n_modes == 0 || constants.n_modes > n * n {
            return Err(crate::error::invalid(format!(
                "invalid KL configuration {constants:?}"
            )));
        }
        let h = constants.h();
        let k1 = DMatrix::from_fn(n, n, |a, b| {
            let d = (a as f64 - b as f64) * h;
            (-d * d / (2.0 * constants.length_sq)).exp() * h
        });
        let eig = SymmetricEigen::try_new(k1, f64::EPSILON, 10_000)
            .ok_or_else(|| crate::error::invalid("1-D kernel eigensolver failed to converge"))?;

        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let values1: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k].max(0.0)).collect();
        let vectors1: Vec<Vec<f64>> = order
            .iter()
            .map(|&k| {
                let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
                // fix the sign: largest-magnitude component positive
                let pivot = v
                    .iter()
                    .copied()
                    .fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
                if pivot < 0.0 {
                    v.iter_mut().for_each(|x| *x = -*x);
                }
                v
            })
            .collect();

        let var = constants.sigma_v * constants.sigma_v;
        let mut pairs: Vec<(f64, usize, usize)> = (0..n)
            .flat_map(|a| (0..n).map(move |b| (a, b)))
            .map(|(a, b)| (var * values1[a] * values1[b], a, b))
            .collect();
        // ties between (a, b) and (b, a) break on the index pair
        pairs.sort_by(|x, y| y.0.total_cmp(&x.0).then((x.1, x.2).cmp(&(y.1, y.2))));

        let mut eigenvalues = Vec::with_capacity(constants.n_modes);
        let mut modes = Vec::with_capacity(constants.n_modes);
        for &(lambda, a, b) in pairs.iter().take(constants.n_modes) {
            eigenvalues.push(lambda);
            let (va, vb) = (&vectors1[a], &vectors1[b]);
            let mut phi = Vec::with_capacity(n * n);
            for i in 0..n {
                for j in 0..n {
                    phi.push(va[i] * vb[j] / h);
                }
            }
            modes.push(phi);
        }
        Ok(Self {
            constants: constants.clone(),
            eigenvalues,
            modes,
            total_variance: var * (n * n) as f64 * h * h,
        })
    }

    pub fn n_modes(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn captured_fraction(&self) -> f64 {
        self.eigenvalues.iter().sum::<f64>() / self.total_variance
    }

    /// `log κ(x) = Σ m_k √λ_k φ_k(x)`.
    pub fn expand(&self, coefficients: &[f64]) -> Result<Field2D> {
        if coefficients.len() != self.n_modes() {
            return Err(crate::error::invalid(format!(
                "expected {} KL coefficients, got {}",
                self.n_modes(),
                coefficients.len()
            )));
        }
        let n = self.constants.grid;
        let mut values = vec![0.0; n * n];
        for ((&c, &lambda), phi) in coefficients.iter().zip(&self.eigenvalues).zip(&self.modes) {
            let w = c * lambda.sqrt();
            for (v, &p) in values.iter_mut().zip(phi) {
                *v += w * p;
            }
        }
        Field2D::new(n, values)
    }

    /// Truncated pointwise variance `Σ λ_k φ_k(node)²`.
    pub fn pointwise_variance(&self, node: usize) -> f64 {
        self.eigenvalues
            .iter()
            .zip(&self.modes)
            .map(|(&l, phi)| l * phi[node] * phi[node])
            .sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let c = &self.constants;
        w.write_all(CACHE_MAGIC)?;
        w.write_all(&CACHE_VERSION.to_le_bytes())?;
        w.write_all(&(c.grid as u32).to_le_bytes())?;
        w.write_all(&c.sigma_v.to_le_bytes())?;
        w.write_all(&c.length_sq.to_le_bytes())?;
        w.write_all(&(c.n_modes as u32).to_le_bytes())?;
        w.write_all(&self.total_variance.to_le_bytes())?;
        for &l in &self.eigenvalues {
            w.write_all(&l.to_le_bytes())?;
        }
        for phi in &self.modes {
            for &p in phi {
                w.write_all(&p.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        let truncated = || Error::Truncated {
            path: path.to_path_buf(),
        };
        let mut pos = 0usize;
        let mut take = |len: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + len).ok_or_else(truncated)?;
            pos += len;
            Ok(s)
        };
        if take(4)? != CACHE_MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: "CFMK".into(),
            });
        }
        let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes"));
        let f64_at = |s: &[u8]| f64::from_le_bytes(s.try_into().expect("8 bytes"));
        let version = u32_at(take(4)?);
        if version != CACHE_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: CACHE_VERSION,
            });
        }
        let grid = u32_at(take(4)?) as usize;
        let sigma_v = f64_at(take(8)?);
        let length_sq = f64_at(take(8)?);
        let n_modes = u32_at(take(4)?) as usize;
        let total_variance = f64_at(take(8)?);
        let eigenvalues = (0..n_modes)
            .map(|_| take(8).map(f64_at))
            .collect::<Result<Vec<_>>>()?;
        let modes = (0..n_modes)
            .map(|_| {
                (0..grid * grid)
                    .map(|_| take(8).map(f64_at))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            constants: KlConstants {
                grid,
                sigma_v,
                length_sq,
                n_modes,
            },
            eigenvalues,
            modes,
            total_variance,
        })
    }

    /// Load the basis for `constants` from `dir`, building and storing it on
    /// a miss. A cached file whose key does not match is rebuilt.
    pub fn load_or_build(dir: &Path, constants: &KlConstants) -> Result<Self> {
        let path: PathBuf = dir.join(constants.cache_name());
        if path.exists() {
            match Self::load(&path) {
                Ok(b) if &b.constants == constants => return Ok(b),
                Ok(_) => log::warn!("KL cache {} has a different key; rebuilding", path.display()),
                Err(e) => log::warn!("ignoring unreadable KL cache {}: {e}", path.display()),
            }
        }
        let basis = Self::build(constants)?;
        std::fs::create_dir_all(dir)?;
        basis.save(&path)?;
        Ok(basis)
    }
}
