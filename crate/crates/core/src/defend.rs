//! Passive-client defenses: distance-correlation (Nopeek) regularization,
//! Gaussian embedding obfuscation, and Laplace-noise gradient DP.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DefenseConfig {
    /// Weight of the distance-correlation term in the passive update; 0 disables.
    pub nopeek_alpha: f64,
    /// Std of Gaussian noise added to uploaded embeddings; 0 disables.
    pub noise_sigma: f64,
    /// Laplace-DP budget on received gradients; infinity disables the noise.
    /// Serialized as the string "inf" where the format has no float infinity.
    #[serde(with = "eps_serde")]
    pub dp_epsilon: f64,
    /// Per-sample L1 clipping norm for the DP mechanism.
    pub dp_clip: f64,
}

mod eps_serde {
    use serde::de::{self, Visitor};
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    struct EpsVisitor;

    impl Visitor<'_> for EpsVisitor {
        type Value = f64;

        fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
            f.write_str("a positive number or \"inf\"")
        }

        fn visit_f64<E: de::Error>(self, v: f64) -> Result<f64, E> {
            Ok(v)
        }

        fn visit_i64<E: de::Error>(self, v: i64) -> Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_u64<E: de::Error>(self, v: u64) -> Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_str<E: de::Error>(self, v: &str) -> Result<f64, E> {
            match v {
                "inf" | "+inf" | "infinity" => Ok(f64::INFINITY),
                other => other
                    .parse()
                    .map_err(|_| E::custom(format!("bad epsilon `{}`", other))),
            }
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        d.deserialize_any(EpsVisitor)
    }
}

impl Default for DefenseConfig {
    fn default() -> Self {
        DefenseConfig {
            nopeek_alpha: 0.0,
            noise_sigma: 0.0,
            dp_epsilon: f64::INFINITY,
            dp_clip: 1.0,
        }
    }
}

impl DefenseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.nopeek_alpha) {
            return Err(Error::config("nopeek_alpha must be in [0,1]"));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::config("noise_sigma must be >= 0"));
        }
        if self.dp_epsilon <= 0.0 {
            return Err(Error::config("dp_epsilon must be > 0 (or infinite)"));
        }
        if self.dp_clip <= 0.0 {
            return Err(Error::config("dp_clip must be > 0"));
        }
        Ok(())
    }

    pub fn dp_enabled(&self) -> bool {
        self.dp_epsilon.is_finite()
    }
}

fn distance_matrix(t: &Tensor) -> Vec<f64> {
    let (n, d) = (t.rows(), t.cols());
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let mut s = 0.0;
            for c in 0..d {
                let diff = t.row(i)[c] - t.row(j)[c];
                s += diff * diff;
            }
            let dist = s.sqrt();
            out[i * n + j] = dist;
            out[j * n + i] = dist;
        }
    }
    out
}

fn dcov2(a: &[f64], b: &[f64], n: usize) -> f64 {
    let ac = crate::tape::double_center_values(a, n);
    let bc = crate::tape::double_center_values(b, n);
    ac.iter().zip(&bc).map(|(x, y)| x * y).sum::<f64>() / (n * n) as f64
}

/// Szekely distance correlation between two row-aligned batches.
pub fn dcor(x: &Tensor, h: &Tensor) -> Result<f64> {
    let n = x.rows();
    if h.rows() != n {
        return Err(Error::shape(format!("row counts {} vs {}", n, h.rows())));
    }
    if n < 3 {
        return Err(Error::contract("dcor needs at least 3 rows"));
    }
    let dx = distance_matrix(x);
    let dh = distance_matrix(h);
    let vxx = dcov2(&dx, &dx, n);
    let vhh = dcov2(&dh, &dh, n);
    if vxx <= 0.0 || vhh <= 0.0 {
        return Ok(0.0);
    }
    let vxh = dcov2(&dx, &dh, n).max(0.0);
    Ok(vxh.sqrt() / (vxx.sqrt() * vhh.sqrt()).sqrt())
}

/// Distance correlation as a differentiable tape node: gradients flow into
/// `h`; `x` is treated as data. Degenerate variance regions have zero slope
/// via the sqrt guard.
pub fn tape_dcor(tape: &mut Tape, x: &Tensor, h: Var) -> Result<Var> {
    let n = x.rows();
    if tape.shape(h)[0] != n {
        return Err(Error::shape("dcor row counts differ"));
    }
    if n < 3 {
        return Err(Error::contract("dcor needs at least 3 rows"));
    }
    let dx_vals = crate::tape::double_center_values(&distance_matrix(x), n);
    let a = tape.constant(&Tensor::matrix(n, n, dx_vals)?);
    let dh = tape.pairwise_dist(h)?;
    let b = tape.double_center(dh)?;

    let ab = tape.mul(a, b)?;
    let vxh = tape.mean_all(ab);
    let bb = tape.mul(b, b)?;
    let vhh = tape.mean_all(bb);
    let aa = tape.mul(a, a)?;
    let vxx = tape.mean_all(aa);

    let num = tape.sqrt_guard(vxh);
    let prod = tape.mul(vxx, vhh)?;
    let prod_sqrt = tape.sqrt_guard(prod);
    let denom = tape.sqrt_guard(prod_sqrt);
    // guard against a fully degenerate batch
    let eps = tape.constant(&Tensor::new(vec![1], vec![1e-12])?);
    let denom = tape.add(denom, eps)?;
    tape.div(num, denom)
}

/// alpha * dcor-term + (1 - alpha) * task-term, both already on the tape.
pub fn nopeek_loss(tape: &mut Tape, task: Var, dcor_term: Var, alpha: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config("alpha must be in [0,1]"));
    }
    let a = tape.scale(dcor_term, alpha);
    let t = tape.scale(task, 1.0 - alpha);
    tape.add(a, t)
}

/// Elementwise additive Gaussian noise on uploaded embeddings.
pub fn obfuscate_embeddings(h: &Tensor, sigma: f64, rng: &mut impl Rng) -> Tensor {
    if sigma == 0.0 {
        return h.clone();
    }
    let vals: Vec<f64> = h
        .values()
        .iter()
        .map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(h.shape().to_vec(), vals).expect("noise keeps shape")
}

fn laplace(scale: f64, rng: &mut impl Rng) -> f64 {
    let u: f64 = rng.gen_range(-0.5..0.5);
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// Per-sample L1 clipping to `clip`, then elementwise Laplace(0, clip/eps)
/// noise. An infinite epsilon clips without noising.
pub fn dp_laplace_gradients(
    g: &Tensor,
    epsilon: f64,
    clip: f64,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    if epsilon <= 0.0 {
        return Err(Error::config("epsilon must be positive"));
    }
    let (n, d) = (g.rows(), g.cols());
    let mut out = Vec::with_capacity(n * d);
    for i in 0..n {
        let row = g.row(i);
        let l1: f64 = row.iter().map(|v| v.abs()).sum();
        let scale = if l1 > clip { clip / l1 } else { 1.0 };
        out.extend(row.iter().map(|v| v * scale));
    }
    if epsilon.is_finite() {
        let b = clip / epsilon;
        for v in &mut out {
            *v += laplace(b, rng);
        }
    }
    Tensor::new(g.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::component_rng;
    use crate::testutil::{assert_close_rel, finite_diff};
    use rand::Rng;

    /// Naive O(n^2) double-centering computation straight from the formula;
    /// kept independent of the implementation it checks.
    pub(crate) fn naive_dcor(x: &Tensor, h: &Tensor) -> f64 {
        let n = x.rows();
        let dist = |t: &Tensor, i: usize, j: usize| -> f64 {
            t.row(i)
                .iter()
                .zip(t.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        };
        let center = |t: &Tensor| -> Vec<f64> {
            let mut m = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    m[i * n + j] = dist(t, i, j);
                }
            }
            let mut out = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    let row_mean = (0..n).map(|k| m[i * n + k]).sum::<f64>() / n as f64;
                    let col_mean = (0..n).map(|k| m[k * n + j]).sum::<f64>() / n as f64;
                    let grand = m.iter().sum::<f64>() / (n * n) as f64;
                    out[i * n + j] = m[i * n + j] - row_mean - col_mean + grand;
                }
            }
            out
        };
        let a = center(x);
        let b = center(h);
        let vxh = a.iter().zip(&b).map(|(p, q)| p * q).sum::<f64>() / (n * n) as f64;
        let vxx = a.iter().map(|p| p * p).sum::<f64>() / (n * n) as f64;
        let vhh = b.iter().map(|p| p * p).sum::<f64>() / (n * n) as f64;
        if vxx <= 0.0 || vhh <= 0.0 {
            return 0.0;
        }
        vxh.max(0.0).sqrt() / (vxx.sqrt() * vhh.sqrt()).sqrt()
    }

    fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
        Tensor::matrix(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn dcor_self_is_one() {
        let mut rng = component_rng(1, "dcor-test", 0);
        let x = random_matrix(8, 3, &mut rng);
        assert!((dcor(&x, &x).unwrap() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn dcor_constant_embeddings_zero() {
        let mut rng = component_rng(2, "dcor-test", 0);
        let x = random_matrix(6, 3, &mut rng);
        let h = Tensor::matrix(6, 2, vec![0.7; 12]).unwrap();
        assert_eq!(dcor(&x, &h).unwrap(), 0.0);
    }

    #[test]
    fn dcor_matches_naive_oracle() {
        let mut rng = component_rng(3, "dcor-test", 0);
        for _ in 0..20 {
            let x = random_matrix(8, 3, &mut rng);
            let h = random_matrix(8, 2, &mut rng);
            let fast = dcor(&x, &h).unwrap();
            let slow = naive_dcor(&x, &h);
            assert!((fast - slow).abs() < 1e-10, "{} vs {}", fast, slow);
        }
    }

    #[test]
    fn dcor_symmetric_and_invariant() {
        let mut rng = component_rng(4, "dcor-test", 0);
        let x = random_matrix(7, 3, &mut rng);
        let h = random_matrix(7, 3, &mut rng);
        let d1 = dcor(&x, &h).unwrap();
        let d2 = dcor(&h, &x).unwrap();
        assert!((d1 - d2).abs() < 1e-12);
        // common positive scaling
        let h_scaled = Tensor::matrix(7, 3, h.values().iter().map(|v| v * 3.7).collect()).unwrap();
        let d3 = dcor(&x, &h_scaled).unwrap();
        assert!((d1 - d3).abs() < 1e-8);
        // orthogonal rotation of h's rows (2D rotation in first two coords)
        let (c, s) = (0.6f64, 0.8f64);
        let rot: Vec<f64> = (0..7)
            .flat_map(|i| {
                let r = h.row(i);
                vec![c * r[0] - s * r[1], s * r[0] + c * r[1], r[2]]
            })
            .collect();
        let h_rot = Tensor::matrix(7, 3, rot).unwrap();
        let d4 = dcor(&x, &h_rot).unwrap();
        assert!((d1 - d4).abs() < 1e-8);
        assert!((0.0..=1.0 + 1e-12).contains(&d1));
    }

    #[test]
    fn dcor_needs_three_rows() {
        let x = Tensor::matrix(2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert!(dcor(&x, &x).is_err());
    }

    #[test]
    fn tape_dcor_value_matches_plain() {
        let mut rng = component_rng(5, "dcor-test", 0);
        let x = random_matrix(6, 3, &mut rng);
        let h = random_matrix(6, 2, &mut rng);
        let mut tape = Tape::new();
        let hv = tape.leaf(&h, true);
        let d = tape_dcor(&mut tape, &x, hv).unwrap();
        assert!((tape.scalar(d) - dcor(&x, &h).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn tape_dcor_gradient_matches_finite_differences() {
        let mut rng = component_rng(6, "dcor-test", 0);
        let x = random_matrix(6, 3, &mut rng);
        let h = random_matrix(6, 2, &mut rng);
        let mut tape = Tape::new();
        let hv = tape.leaf(&h, true);
        let d = tape_dcor(&mut tape, &x, hv).unwrap();
        let grads = tape.backward(d).unwrap();
        let numeric = finite_diff(h.values(), |vals| {
            let ht = Tensor::matrix(6, 2, vals.to_vec()).unwrap();
            dcor(&x, &ht).unwrap()
        });
        assert_close_rel(&grads.of(hv, 12), &numeric, 1e-4);
    }

    #[test]
    fn nopeek_combination_arithmetic() {
        let mut tape = Tape::new();
        let task = tape.constant(&Tensor::new(vec![1], vec![0.4]).unwrap());
        let dc = tape.constant(&Tensor::new(vec![1], vec![0.2]).unwrap());
        let l0 = nopeek_loss(&mut tape, task, dc, 0.0).unwrap();
        assert_eq!(tape.scalar(l0), 0.4);
        let l1 = nopeek_loss(&mut tape, task, dc, 1.0).unwrap();
        assert!((tape.scalar(l1) - 0.2).abs() < 1e-15);
        let lh = nopeek_loss(&mut tape, task, dc, 0.5).unwrap();
        assert!((tape.scalar(lh) - 0.3).abs() < 1e-15);
        assert!(nopeek_loss(&mut tape, task, dc, 1.5).is_err());
    }

    #[test]
    fn nopeek_linear_in_alpha() {
        let sample = |alpha: f64| {
            let mut tape = Tape::new();
            let task = tape.constant(&Tensor::new(vec![1], vec![0.9]).unwrap());
            let dc = tape.constant(&Tensor::new(vec![1], vec![0.1]).unwrap());
            let l = nopeek_loss(&mut tape, task, dc, alpha).unwrap();
            tape.scalar(l)
        };
        let (a, b, c) = (sample(0.2), sample(0.5), sample(0.8));
        assert!(((b - a) - (c - b)).abs() < 1e-12);
    }

    #[test]
    fn obfuscation_zero_sigma_identity_and_seeded() {
        let mut rng = component_rng(7, "noise", 0);
        let h = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let same = obfuscate_embeddings(&h, 0.0, &mut rng);
        assert_eq!(same.values(), h.values());
        let mut r1 = component_rng(7, "noise", 1);
        let mut r2 = component_rng(7, "noise", 1);
        let a = obfuscate_embeddings(&h, 0.5, &mut r1);
        let b = obfuscate_embeddings(&h, 0.5, &mut r2);
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn obfuscation_std_matches_sigma() {
        let mut rng = component_rng(8, "noise", 0);
        let n = 100_000;
        let h = Tensor::matrix(n, 1, vec![0.0; n]).unwrap();
        let sigma = 0.4;
        let noised = obfuscate_embeddings(&h, sigma, &mut rng);
        let var = noised.values().iter().map(|v| v * v).sum::<f64>() / n as f64;
        assert!((var.sqrt() - sigma).abs() / sigma < 0.02);
    }

    #[test]
    fn dp_clipping_before_noise() {
        let mut rng = component_rng(9, "dp", 0);
        let g = Tensor::matrix(1, 4, vec![1.0, -1.0, 1.0, 1.0]).unwrap(); // L1 = 4
        let out = dp_laplace_gradients(&g, f64::INFINITY, 1.0, &mut rng).unwrap();
        assert_close_rel(out.values(), &[0.25, -0.25, 0.25, 0.25], 1e-12);
        // under the clip: unchanged
        let g2 = Tensor::matrix(1, 2, vec![0.3, -0.2]).unwrap();
        let out2 = dp_laplace_gradients(&g2, f64::INFINITY, 1.0, &mut rng).unwrap();
        assert_eq!(out2.values(), g2.values());
    }

    #[test]
    fn dp_noise_variance_matches_laplace() {
        let mut rng = component_rng(10, "dp", 0);
        let n = 100_000;
        let g = Tensor::matrix(n, 1, vec![0.0; n]).unwrap();
        let (eps, clip) = (2.0, 1.0);
        let out = dp_laplace_gradients(&g, eps, clip, &mut rng).unwrap();
        let var = out.values().iter().map(|v| v * v).sum::<f64>() / n as f64;
        let expected = 2.0 * (clip / eps) * (clip / eps);
        assert!(
            (var - expected).abs() / expected < 0.03,
            "{} vs {}",
            var,
            expected
        );
    }
}
