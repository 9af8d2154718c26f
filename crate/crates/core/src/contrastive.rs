//! Instance-discrimination contrastive loss over `N` images with `K` views
//! each.
//!
//! In [`Formulation::PaperEq7`] the numerator of `l_ij` sums the anchor's
//! positives (the other views of image `i`) and the denominator sums every
//! view of every *other* image; same-instance terms never appear in the
//! denominator, so the value can be negative. [`Formulation::StandardNtXent`]
//! keeps all non-anchor views in the denominator (the usual NT-Xent form for
//! `K = 2`).

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Formulation {
    #[serde(rename = "paper-eq7")]
    PaperEq7,
    #[serde(rename = "standard-ntxent")]
    StandardNtXent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub temperature: f64,
    pub formulation: Formulation,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.5,
            formulation: Formulation::PaperEq7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.temperature > 0.0 && self.temperature.is_finite(),
            Config,
            "loss.temperature must be a positive finite number"
        );
        Ok(())
    }
}

/// Projections `f[i][j]` laid out row-major (`i * k + j`).
#[derive(Debug, Clone, PartialEq)]
pub struct Projections {
    pub n: usize,
    pub k: usize,
    pub vectors: Vec<Vec<f64>>,
}

impl Projections {
    pub fn new(n: usize, k: usize, vectors: Vec<Vec<f64>>) -> Result<Self> {
        ensure!(vectors.len() == n * k, Usage, "expected {} projections, got {}", n * k, vectors.len());
        let dim = vectors.first().map_or(0, Vec::len);
        ensure!(vectors.iter().all(|v| v.len() == dim), Usage, "ragged projections");
        Ok(Self { n, k, vectors })
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> &[f64] {
        &self.vectors[i * self.k + j]
    }

    fn check(&self) -> Result<()> {
        ensure!(self.n >= 2, Config, "contrastive loss needs N >= 2 images (got {})", self.n);
        ensure!(self.k >= 2, Config, "contrastive loss needs K >= 2 views (got {})", self.k);
        Ok(())
    }
}

/// Cosine similarity.
pub fn similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    (dot / (na * nb).max(1e-12)).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    /// Mean of all instance losses.
    pub loss: f64,
    /// `l_ij` at index `i * k + j`.
    pub instance_losses: Vec<f64>,
    /// `∂L/∂f_ij` at index `i * k + j`.
    pub grad: Vec<Vec<f64>>,
}

#[inline]
fn is_positive(a: usize, b: usize, k: usize) -> bool {
    a != b && a / k == b / k
}

#[inline]
fn in_denominator(a: usize, b: usize, k: usize, form: Formulation) -> bool {
    match form {
        Formulation::PaperEq7 => a / k != b / k,
        Formulation::StandardNtXent => a != b,
    }
}

/// `log Σ exp(x)` over the selected entries, with max subtraction.
fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

struct AnchorTerms {
    loss: f64,
    /// Coefficient of `s_ab` in `∂l_a/∂s_ab`, for every `b`.
    dl_ds: Vec<f64>,
}

fn anchor_terms(a: usize, sims: &[f64], k: usize, cfg: &LossConfig) -> AnchorTerms {
    let tau = cfg.temperature;
    let positives: Vec<usize> = (0..sims.len()).filter(|&b| is_positive(a, b, k)).collect();
    let denominator: Vec<usize> = (0..sims.len())
        .filter(|&b| in_denominator(a, b, k, cfg.formulation))
        .collect();
    let lse_pos = log_sum_exp(positives.iter().map(|&b| sims[b] / tau));
    let lse_den = log_sum_exp(denominator.iter().map(|&b| sims[b] / tau));
    let mut dl_ds = vec![0.0; sims.len()];
    for &b in &positives {
        dl_ds[b] -= (sims[b] / tau - lse_pos).exp() / tau;
    }
    for &b in &denominator {
        dl_ds[b] += (sims[b] / tau - lse_den).exp() / tau;
    }
    AnchorTerms {
        loss: lse_den - lse_pos,
        dl_ds,
    }
}

fn similarity_row(f: &Projections, a: usize) -> Vec<f64> {
    let fa = &f.vectors[a];
    f.vectors.iter().map(|fb| similarity(fa, fb)).collect()
}

/// Chain `∂l/∂s_ab` into `∂l/∂f` for unit-norm inputs (`s_ab = f_a·f_b`).
fn accumulate_grad(f: &Projections, a: usize, dl_ds: &[f64], scale: f64, grad: &mut [Vec<f64>]) {
    for (b, &c) in dl_ds.iter().enumerate() {
        if c == 0.0 {
            continue;
        }
        let c = c * scale;
        for d in 0..f.vectors[a].len() {
            grad[a][d] += c * f.vectors[b][d];
            grad[b][d] += c * f.vectors[a][d];
        }
    }
}

/// `l_ij` for anchor view `j` of image `i`.
pub fn instance_loss(i: usize, j: usize, f: &Projections, cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    f.check()?;
    let a = i * f.k + j;
    Ok(anchor_terms(a, &similarity_row(f, a), f.k, cfg).loss)
}

/// `l_ij` and its gradient with respect to every projection.
pub fn instance_loss_grad(
    i: usize,
    j: usize,
    f: &Projections,
    cfg: &LossConfig,
) -> Result<(f64, Vec<Vec<f64>>)> {
    cfg.validate()?;
    f.check()?;
    let a = i * f.k + j;
    let terms = anchor_terms(a, &similarity_row(f, a), f.k, cfg);
    let dim = f.vectors[0].len();
    let mut grad = vec![vec![0.0; dim]; f.vectors.len()];
    accumulate_grad(f, a, &terms.dl_ds, 1.0, &mut grad);
    Ok((terms.loss, grad))
}

/// `L = (1 / NK) Σ_ij l_ij` with per-instance losses and `∂L/∂f`.
pub fn batch_loss(f: &Projections, cfg: &LossConfig) -> Result<LossOutput> {
    cfg.validate()?;
    f.check()?;
    let total = f.vectors.len();
    let dim = f.vectors[0].len();
    let sims: Vec<Vec<f64>> = (0..total).map(|a| similarity_row(f, a)).collect();
    let scale = 1.0 / total as f64;
    let mut grad = vec![vec![0.0; dim]; total];
    let mut instance_losses = Vec::with_capacity(total);
    for (a, row) in sims.iter().enumerate() {
        let terms = anchor_terms(a, row, f.k, cfg);
        instance_losses.push(terms.loss);
        accumulate_grad(f, a, &terms.dl_ds, scale, &mut grad);
    }
    let loss = instance_losses.iter().sum::<f64>() * scale;
    ensure!(loss.is_finite(), Numeric, "non-finite contrastive loss");
    Ok(LossOutput {
        loss,
        instance_losses,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    pub(crate) fn random_batch(n: usize, k: usize, dim: usize, seed: u64) -> Projections {
        let mut r = rng::stream(seed, &[77]);
        let vectors = (0..n * k)
            .map(|_| unit((0..dim).map(|_| r.gen_range(-1.0..1.0)).collect()))
            .collect();
        Projections::new(n, k, vectors).unwrap()
    }

    /// Direct transcription with explicit exponentials and no stabilization.
    fn naive_instance(i: usize, j: usize, f: &Projections, cfg: &LossConfig) -> f64 {
        let tau = cfg.temperature;
        let mut num = 0.0;
        for n in 0..f.k {
            if n != j {
                num += (similarity(f.get(i, j), f.get(i, n)) / tau).exp();
            }
        }
        let mut den = 0.0;
        for m in 0..f.n {
            for n in 0..f.k {
                let include = match cfg.formulation {
                    Formulation::PaperEq7 => m != i,
                    Formulation::StandardNtXent => !(m == i && n == j),
                };
                if include {
                    den += (similarity(f.get(i, j), f.get(m, n)) / tau).exp();
                }
            }
        }
        -(num / den).ln()
    }

    #[test]
    fn similarity_examples() {
        let u = unit(vec![1.0, 2.0, -0.5]);
        let neg: Vec<f64> = u.iter().map(|v| -v).collect();
        assert!((similarity(&u, &u) - 1.0).abs() < 1e-15);
        assert!((similarity(&u, &neg) + 1.0).abs() < 1e-15);
        assert_eq!(similarity(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert_eq!(similarity(&u, &neg), similarity(&neg, &u));
    }

    #[test]
    fn orthogonal_pair_closed_form() {
        let u = vec![1.0, 0.0];
        let v = vec![0.0, 1.0];
        let f = Projections::new(2, 2, vec![u.clone(), u, v.clone(), v]).unwrap();
        let cfg = LossConfig {
            temperature: 1.0,
            formulation: Formulation::PaperEq7,
        };
        // -log(e^1 / (2 e^0)) = ln 2 - 1
        let expected = 2f64.ln() - 1.0;
        let got = instance_loss(0, 0, &f, &cfg).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - (-0.306_852_819_440_054_7)).abs() < 1e-12);
    }

    #[test]
    fn identical_projections_closed_form() {
        for (n, k) in [(2, 2), (3, 2), (4, 3), (5, 4)] {
            let f = Projections::new(n, k, vec![vec![0.6, 0.8]; n * k]).unwrap();
            let expected = -(((k - 1) as f64) / (((n - 1) * k) as f64)).ln();
            for tau in [0.1, 0.5, 1.0, 1e9] {
                let cfg = LossConfig {
                    temperature: tau,
                    formulation: Formulation::PaperEq7,
                };
                let out = batch_loss(&f, &cfg).unwrap();
                assert!(out.instance_losses.iter().all(|l| (l - expected).abs() < 1e-9));
                assert!((out.loss - expected).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn large_temperature_approaches_uniform_case() {
        let f = random_batch(3, 2, 8, 1);
        let cfg = LossConfig {
            temperature: 1e12,
            formulation: Formulation::PaperEq7,
        };
        let expected = -(1.0f64 / 4.0).ln();
        assert!((batch_loss(&f, &cfg).unwrap().loss - expected).abs() < 1e-9);
    }

    #[test]
    fn matches_naive_reference() {
        for form in [Formulation::PaperEq7, Formulation::StandardNtXent] {
            for seed in 0..30 {
                let n = 2 + (seed as usize % 7);
                let f = random_batch(n, 2, 6, seed);
                let cfg = LossConfig {
                    temperature: 0.2 + 0.1 * (seed % 5) as f64,
                    formulation: form,
                };
                let out = batch_loss(&f, &cfg).unwrap();
                let mut total = 0.0;
                for i in 0..n {
                    for j in 0..2 {
                        let naive = naive_instance(i, j, &f, &cfg);
                        total += naive;
                        assert!((out.instance_losses[i * 2 + j] - naive).abs() < 1e-9);
                    }
                }
                assert!((out.loss - total / (2 * n) as f64).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn permutation_invariance() {
        let f = random_batch(5, 2, 6, 3);
        let cfg = LossConfig::default();
        let base = batch_loss(&f, &cfg).unwrap().loss;
        let order = [3usize, 0, 4, 1, 2];
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for &i in &order {
            rows.push(f.get(i, 1).to_vec());
            rows.push(f.get(i, 0).to_vec());
        }
        let permuted = Projections::new(5, 2, rows).unwrap();
        assert!((batch_loss(&permuted, &cfg).unwrap().loss - base).abs() < 1e-12);
    }

    #[test]
    fn batch_grad_is_mean_of_instance_grads() {
        let f = random_batch(4, 2, 5, 9);
        let cfg = LossConfig::default();
        let out = batch_loss(&f, &cfg).unwrap();
        let mut acc = vec![vec![0.0; 5]; 8];
        for i in 0..4 {
            for j in 0..2 {
                let (_, g) = instance_loss_grad(i, j, &f, &cfg).unwrap();
                for (a, b) in acc.iter_mut().flatten().zip(g.iter().flatten()) {
                    *a += b / 8.0;
                }
            }
        }
        for (a, b) in acc.iter().flatten().zip(out.grad.iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_matches_finite_differences_on_dot_products() {
        // with sim replaced by the raw dot product on unit vectors, the
        // gradient of L is exactly what batch_loss reports
        let f = random_batch(3, 2, 4, 2);
        for form in [Formulation::PaperEq7, Formulation::StandardNtXent] {
            let cfg = LossConfig {
                temperature: 0.5,
                formulation: form,
            };
            let out = batch_loss(&f, &cfg).unwrap();
            let dot_loss = |f: &Projections| -> f64 {
                let total = f.vectors.len();
                let mut s = 0.0;
                for a in 0..total {
                    let sims: Vec<f64> = f
                        .vectors
                        .iter()
                        .map(|b| f.vectors[a].iter().zip(b).map(|(x, y)| x * y).sum())
                        .collect();
                    s += anchor_terms(a, &sims, f.k, &cfg).loss;
                }
                s / total as f64
            };
            let eps = 1e-6;
            for a in 0..6 {
                for d in 0..4 {
                    let mut p = f.clone();
                    p.vectors[a][d] += eps;
                    let up = dot_loss(&p);
                    p.vectors[a][d] -= 2.0 * eps;
                    let numeric = (up - dot_loss(&p)) / (2.0 * eps);
                    assert!((numeric - out.grad[a][d]).abs() < 1e-7);
                }
            }
        }
    }

    #[test]
    fn closer_positive_lowers_loss() {
        let cfg = LossConfig::default();
        let anchor = vec![1.0, 0.0, 0.0];
        let neg = [vec![0.0, 0.0, 1.0], vec![0.0, -0.6, 0.8]];
        let mut last = f64::INFINITY;
        for step in 0..10 {
            let theta = 1.5 - step as f64 * 0.15;
            let pos = vec![theta.cos(), theta.sin(), 0.0];
            let f = Projections::new(2, 2, vec![anchor.clone(), pos, neg[0].clone(), neg[1].clone()])
                .unwrap();
            let l = instance_loss(0, 0, &f, &cfg).unwrap();
            assert!(l < last);
            last = l;
        }
    }

    #[test]
    fn rejects_degenerate_batches() {
        let cfg = LossConfig::default();
        let f = random_batch(1, 2, 3, 0);
        assert!(batch_loss(&f, &cfg).is_err());
        let f = Projections::new(2, 1, vec![vec![1.0], vec![1.0]]).unwrap();
        assert!(batch_loss(&f, &cfg).is_err());
        let bad = LossConfig {
            temperature: 0.0,
            ..cfg
        };
        assert!(batch_loss(&random_batch(2, 2, 3, 0), &bad).is_err());
    }

    proptest::proptest! {
        #[test]
        fn view_permutation_invariance(seed in 0u64..500) {
            let f = random_batch(4, 3, 5, seed);
            let cfg = LossConfig::default();
            let base = batch_loss(&f, &cfg).unwrap().loss;
            let rows = (0..4).flat_map(|i| [2usize, 0, 1].map(|j| f.get(i, j).to_vec())).collect();
            let p = Projections::new(4, 3, rows).unwrap();
            proptest::prop_assert!((batch_loss(&p, &cfg).unwrap().loss - base).abs() < 1e-12);
        }
    }
}
