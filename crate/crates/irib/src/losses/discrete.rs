//! Exhaustive small-instance oracles for the variational information
//! bottleneck bounds: exact mutual informations by enumeration, their
//! variational counterparts, and the enumerated VIB objective. Everything is
//! in nats with the 0 ln 0 = 0 convention.

use crate::{Error, Result};

const SIMPLEX_TOL: f64 = 1e-9;

fn xlnx(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

fn check_simplex(v: &[f64], what: &str) -> Result<()> {
    if v.is_empty() || v.iter().any(|p| *p < 0.0 || !p.is_finite()) {
        return Err(Error::invalid(format!("{what} must be non-negative and finite")));
    }
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::invalid(format!("{what} sums to {s}, not 1")));
    }
    Ok(())
}

fn check_rows(m: &[Vec<f64>], cols: usize, what: &str) -> Result<()> {
    if m.is_empty() {
        return Err(Error::invalid(format!("{what} is empty")));
    }
    for row in m {
        if row.len() != cols {
            return Err(Error::invalid(format!("{what} rows must have {cols} entries")));
        }
        check_simplex(row, what)?;
    }
    Ok(())
}

/// Finite joint p(x, y) with a stochastic encoder q(z|x). Under the Markov
/// chain Y - X - Z every marginal and mutual information is enumerable.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteJoint {
    p: Vec<Vec<f64>>,
    encoder: Vec<Vec<f64>>,
}

impl DiscreteJoint {
    pub fn new(p: Vec<Vec<f64>>, encoder: Vec<Vec<f64>>) -> Result<Self> {
        if p.is_empty() || p[0].is_empty() {
            return Err(Error::invalid("joint matrix is empty"));
        }
        let y_n = p[0].len();
        let mut total = 0.0;
        for row in &p {
            if row.len() != y_n {
                return Err(Error::invalid("ragged joint matrix"));
            }
            if row.iter().any(|v| *v < 0.0 || !v.is_finite()) {
                return Err(Error::invalid("joint entries must be non-negative and finite"));
            }
            total += row.iter().sum::<f64>();
        }
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::invalid(format!("joint sums to {total}, not 1")));
        }
        if encoder.len() != p.len() {
            return Err(Error::invalid("encoder must have one row per x"));
        }
        let z_n = encoder[0].len();
        check_rows(&encoder, z_n, "encoder")?;
        Ok(DiscreteJoint { p, encoder })
    }

    pub fn x_count(&self) -> usize {
        self.p.len()
    }

    pub fn y_count(&self) -> usize {
        self.p[0].len()
    }

    pub fn z_count(&self) -> usize {
        self.encoder[0].len()
    }

    pub fn p_x(&self) -> Vec<f64> {
        self.p.iter().map(|row| row.iter().sum()).collect()
    }

    pub fn p_y(&self) -> Vec<f64> {
        (0..self.y_count()).map(|y| self.p.iter().map(|row| row[y]).sum()).collect()
    }

    pub fn p_z(&self) -> Vec<f64> {
        let px = self.p_x();
        (0..self.z_count())
            .map(|z| px.iter().zip(&self.encoder).map(|(p, q)| p * q[z]).sum())
            .collect()
    }

    /// Joint over (z, y) via the Markov chain: p(z, y) = sum_x p(x, y) q(z|x).
    pub fn p_zy(&self) -> Vec<Vec<f64>> {
        let mut zy = vec![vec![0.0; self.y_count()]; self.z_count()];
        for (x, row) in self.p.iter().enumerate() {
            for (y, pxy) in row.iter().enumerate() {
                for (z, cell) in zy.iter_mut().enumerate() {
                    cell[y] += pxy * self.encoder[x][z];
                }
            }
        }
        zy
    }

    pub fn h_y(&self) -> f64 {
        -self.p_y().iter().map(|p| xlnx(*p)).sum::<f64>()
    }

    pub fn mi_xz(&self) -> f64 {
        let px = self.p_x();
        let pz = self.p_z();
        let mut mi = 0.0;
        for (x, q) in self.encoder.iter().enumerate() {
            for (z, qz) in q.iter().enumerate() {
                let w = px[x] * qz;
                if w > 0.0 {
                    mi += w * (qz / pz[z]).ln();
                }
            }
        }
        mi
    }

    pub fn mi_zy(&self) -> f64 {
        let zy = self.p_zy();
        let pz: Vec<f64> = zy.iter().map(|row| row.iter().sum()).collect();
        let py = self.p_y();
        let mut mi = 0.0;
        for (z, row) in zy.iter().enumerate() {
            for (y, pzy) in row.iter().enumerate() {
                if *pzy > 0.0 {
                    mi += pzy * (pzy / (pz[z] * py[y])).ln();
                }
            }
        }
        mi
    }
}

/// Exact informations next to their variational counterparts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundReport {
    pub ixz: f64,
    pub ixz_upper: f64,
    pub izy: f64,
    pub izy_lower: f64,
    pub h_y: f64,
}

/// Enumerates I(X;Z) with its marginal-replacement upper bound
/// E_x[KL(q(z|x) || r)], and I(Z;Y) with its decoder lower bound
/// H(Y) + E[ln dec(y|z)]. `decoder` defaults to the exact posterior p(y|z),
/// which makes the lower bound tight.
pub fn ib_bound_check(
    joint: &DiscreteJoint,
    r: &[f64],
    decoder: Option<&[Vec<f64>]>,
) -> Result<BoundReport> {
    if r.len() != joint.z_count() {
        return Err(Error::invalid("r must have one entry per z"));
    }
    check_simplex(r, "r")?;
    let px = joint.p_x();
    let mut ixz_upper = 0.0;
    for (x, q) in joint.encoder.iter().enumerate() {
        for (z, qz) in q.iter().enumerate() {
            if px[x] * qz > 0.0 {
                ixz_upper += px[x] * qz * (qz / r[z]).ln();
            }
        }
    }
    let zy = joint.p_zy();
    let pz: Vec<f64> = zy.iter().map(|row| row.iter().sum()).collect();
    let posterior: Vec<Vec<f64>> = zy
        .iter()
        .zip(&pz)
        .map(|(row, z)| {
            if *z > 0.0 {
                row.iter().map(|v| v / z).collect()
            } else {
                vec![1.0 / joint.y_count() as f64; joint.y_count()]
            }
        })
        .collect();
    let dec: &[Vec<f64>] = match decoder {
        Some(d) => {
            if d.len() != joint.z_count() {
                return Err(Error::invalid("decoder must have one row per z"));
            }
            check_rows(d, joint.y_count(), "decoder")?;
            d
        }
        None => &posterior,
    };
    let mut expected_log_dec = 0.0;
    for (z, row) in zy.iter().enumerate() {
        for (y, pzy) in row.iter().enumerate() {
            if *pzy > 0.0 {
                expected_log_dec += pzy * dec[z][y].ln();
            }
        }
    }
    let h_y = joint.h_y();
    Ok(BoundReport {
        ixz: joint.mi_xz(),
        ixz_upper,
        izy: joint.mi_zy(),
        izy_lower: h_y + expected_log_dec,
        h_y,
    })
}

/// Exact expectation of the VIB objective over the finite joint:
/// E[-ln dec(y|z)] + beta E_x[KL(q(z|x) || r)].
pub fn vib_loss_discrete(
    joint: &DiscreteJoint,
    decoder: &[Vec<f64>],
    r: &[f64],
    beta: f64,
) -> Result<f64> {
    if !(beta.is_finite() && beta >= 0.0) {
        return Err(Error::invalid("beta must be finite and non-negative"));
    }
    if decoder.len() != joint.z_count() || r.len() != joint.z_count() {
        return Err(Error::invalid("decoder and r must be indexed by z"));
    }
    check_rows(decoder, joint.y_count(), "decoder")?;
    check_simplex(r, "r")?;
    let mut recon = 0.0;
    for (x, row) in joint.p.iter().enumerate() {
        for (y, pxy) in row.iter().enumerate() {
            for (z, qz) in joint.encoder[x].iter().enumerate() {
                let w = pxy * qz;
                if w > 0.0 {
                    recon -= w * decoder[z][y].ln();
                }
            }
        }
    }
    let px = joint.p_x();
    let mut rate = 0.0;
    for (x, q) in joint.encoder.iter().enumerate() {
        for (z, qz) in q.iter().enumerate() {
            if px[x] * qz > 0.0 {
                rate += px[x] * qz * (qz / r[z]).ln();
            }
        }
    }
    Ok(recon + beta * rate)
}

#[cfg(test)]
pub(crate) fn random_simplex(rng: &mut rand_chacha::ChaCha8Rng, n: usize) -> Vec<f64> {
    use rand::Rng;
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.02..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

#[cfg(test)]
pub(crate) fn random_joint(
    rng: &mut rand_chacha::ChaCha8Rng,
    x_n: usize,
    y_n: usize,
    z_n: usize,
) -> DiscreteJoint {
    use rand::Rng;
    let mut p: Vec<Vec<f64>> =
        (0..x_n).map(|_| (0..y_n).map(|_| rng.random_range(0.02..1.0)).collect()).collect();
    let total: f64 = p.iter().flatten().sum();
    for row in &mut p {
        for v in row {
            *v /= total;
        }
    }
    let encoder = (0..x_n).map(|_| random_simplex(rng, z_n)).collect();
    DiscreteJoint::new(p, encoder).unwrap()
}
